#include "eval.hpp"

#include <algorithm>
#include <fstream>

#include "error.hpp"

namespace ssch::eval {

namespace {

std::vector<double> per_class_f1(std::span<const std::uint32_t> predictions,
                                 std::span<const std::uint32_t> golds, std::size_t n_classes) {
  std::vector<std::uint64_t> tp(n_classes, 0), fp(n_classes, 0), fn(n_classes, 0);
  for (std::size_t i = 0; i < golds.size(); ++i) {
    const auto p = predictions[i], g = golds[i];
    if (p >= n_classes || g >= n_classes) throw invalid_argument("label out of range");
    if (p == g) {
      ++tp[g];
    } else {
      ++fp[p];
      ++fn[g];
    }
  }
  std::vector<double> f1(n_classes, 0.0);
  for (std::size_t k = 0; k < n_classes; ++k) {
    const auto denom = 2 * tp[k] + fp[k] + fn[k];
    f1[k] = denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp[k]) / static_cast<double>(denom);
  }
  return f1;
}

}  // namespace

F1Scores macro_f1(std::span<const std::uint32_t> predictions,
                  std::span<const std::uint32_t> golds, std::size_t n_classes) {
  if (predictions.size() != golds.size())
    throw invalid_argument("length mismatch: " + std::to_string(predictions.size()) +
                           " predictions vs " + std::to_string(golds.size()) + " golds");
  if (n_classes == 0) throw invalid_argument("n_classes must be >= 1");
  F1Scores s;
  s.per_class = per_class_f1(predictions, golds, n_classes);
  double sum = 0.0;
  for (double v : s.per_class) sum += v;
  s.macro = sum / static_cast<double>(n_classes);
  return s;
}

GroupMap parse_group_map(const nlohmann::json& j) {
  if (!j.is_object()) throw format_error("group map must be a JSON object");
  GroupMap map;
  for (const auto& [k, v] : j.items()) {
    if (!v.is_string()) throw format_error("group map values must be strings");
    map.emplace(k, v.get<std::string>());
  }
  return map;
}

GroupMap load_group_map(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open '" + path.string() + "'");
  try {
    return parse_group_map(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw format_error("'" + path.string() + "': " + e.what());
  }
}

void validate_group_map(const GroupMap& map, const std::vector<std::string>& vocab) {
  for (const auto& [cls, group] : map)
    if (std::find(vocab.begin(), vocab.end(), cls) == vocab.end())
      throw invalid_argument("group map: unknown class '" + cls + "'");
}

std::vector<std::pair<std::string, double>> grouped_f1(
    std::span<const std::uint32_t> predictions, std::span<const std::uint32_t> golds,
    const std::vector<std::string>& vocab, const GroupMap& map) {
  if (predictions.size() != golds.size()) throw invalid_argument("length mismatch");
  validate_group_map(map, vocab);

  std::vector<std::string> groups;
  std::vector<std::uint32_t> group_of(vocab.size());
  for (std::size_t k = 0; k < vocab.size(); ++k) {
    const auto it = map.find(vocab[k]);
    const std::string& g = it == map.end() ? vocab[k] : it->second;
    auto pos = std::find(groups.begin(), groups.end(), g);
    if (pos == groups.end()) pos = groups.insert(groups.end(), g);
    group_of[k] = static_cast<std::uint32_t>(pos - groups.begin());
  }

  std::vector<std::uint32_t> gp(predictions.size()), gg(golds.size());
  for (std::size_t i = 0; i < golds.size(); ++i) {
    if (predictions[i] >= vocab.size() || golds[i] >= vocab.size())
      throw invalid_argument("label out of range");
    gp[i] = group_of[predictions[i]];
    gg[i] = group_of[golds[i]];
  }
  const auto f1 = per_class_f1(gp, gg, groups.size());
  std::vector<std::pair<std::string, double>> out;
  for (std::size_t g = 0; g < groups.size(); ++g) out.emplace_back(groups[g], f1[g]);
  return out;
}

Codelength codelength(const probe::TrainedProbe& probe, const store::DatasetView& view,
                      std::uint64_t mc_samples, Rng& rng) {
  const auto est = probe::expected_data_bits(probe.state, view, mc_samples, rng);
  Codelength c;
  c.data_bits = est.mean;
  c.data_bits_std = est.stddev;
  c.model_bits = probe::kl_total(probe.state);
  c.codelength = c.data_bits + c.model_bits;
  c.mc_samples = mc_samples;
  return c;
}

double codelength_ratio(double l, double l_control) {
  if (!(l_control > 0.0)) throw invalid_argument("control codelength must be positive");
  return 100.0 * l / l_control;
}

nlohmann::ordered_json EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["macro_f1"] = macro_f1;
  nlohmann::ordered_json cf = nlohmann::ordered_json::object();
  for (const auto& [k, v] : class_f1) cf[k] = v;
  j["class_f1"] = cf;
  if (grouped_f1) {
    nlohmann::ordered_json gf = nlohmann::ordered_json::object();
    for (const auto& [k, v] : *grouped_f1) gf[k] = v;
    j["grouped_f1"] = gf;
  } else {
    j["grouped_f1"] = nullptr;
  }
  j["data_bits"] = data_bits;
  j["data_bits_std"] = data_bits_std;
  j["model_bits"] = model_bits;
  j["codelength"] = codelength;
  j["n_tokens"] = n_tokens;
  j["n_code_tokens"] = n_code_tokens;
  return j;
}

EvalReport EvalReport::from_json(const nlohmann::ordered_json& j) {
  EvalReport r;
  try {
    r.macro_f1 = j.at("macro_f1").get<double>();
    for (const auto& [k, v] : j.at("class_f1").items()) r.class_f1.emplace_back(k, v.get<double>());
    if (j.contains("grouped_f1") && !j.at("grouped_f1").is_null()) {
      r.grouped_f1.emplace();
      for (const auto& [k, v] : j.at("grouped_f1").items())
        r.grouped_f1->emplace_back(k, v.get<double>());
    }
    r.data_bits = j.at("data_bits").get<double>();
    r.data_bits_std = j.value("data_bits_std", 0.0);
    r.model_bits = j.at("model_bits").get<double>();
    r.codelength = j.at("codelength").get<double>();
    r.n_tokens = j.at("n_tokens").get<std::uint64_t>();
    r.n_code_tokens = j.value("n_code_tokens", std::uint64_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw format_error(std::string("eval report: ") + e.what());
  }
  return r;
}

EvalReport evaluate(const probe::TrainedProbe& probe, const store::DatasetView& f1_view,
                    const store::DatasetView& code_view, std::uint64_t mc_samples,
                    std::uint64_t seed, const GroupMap* groups) {
  const auto preds = probe::predict(probe.state, f1_view);
  const auto golds = f1_view.labels();
  const auto& vocab = f1_view.dataset().manifest().label_vocab;

  EvalReport r;
  const F1Scores f1 = macro_f1(preds, golds, f1_view.n_classes());
  r.macro_f1 = f1.macro;
  for (std::size_t k = 0; k < f1.per_class.size(); ++k)
    r.class_f1.emplace_back(vocab[k], f1.per_class[k]);
  if (groups) r.grouped_f1 = grouped_f1(preds, golds, vocab, *groups);

  Rng rng(seed);
  const Codelength c = codelength(probe, code_view, mc_samples, rng);
  r.data_bits = c.data_bits;
  r.data_bits_std = c.data_bits_std;
  r.model_bits = c.model_bits;
  r.codelength = c.codelength;
  r.n_tokens = f1_view.size();
  r.n_code_tokens = code_view.size();
  return r;
}

}  // namespace ssch::eval
