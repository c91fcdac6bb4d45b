#include "probe_io.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <iterator>

#include "error.hpp"

namespace ssch::probe {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kProbeMagic[4] = {'S', 'S', 'C', 'P'};

template <typename Fn>
void visit_params(ProbeParams& p, Fn&& fn) {
  for (Eigen::Index i = 0; i < p.mix_logits.size(); ++i) fn(p.mix_logits(i));
  for (Eigen::Index i = 0; i < p.weight_mean.rows(); ++i)
    for (Eigen::Index j = 0; j < p.weight_mean.cols(); ++j) fn(p.weight_mean(i, j));
  for (Eigen::Index i = 0; i < p.weight_logvar.rows(); ++i)
    for (Eigen::Index j = 0; j < p.weight_logvar.cols(); ++j) fn(p.weight_logvar(i, j));
  for (Eigen::Index i = 0; i < p.scale_mean.size(); ++i) fn(p.scale_mean(i));
  for (Eigen::Index i = 0; i < p.scale_logvar.size(); ++i) fn(p.scale_logvar(i));
}

std::size_t param_count(Eigen::Index L, Eigen::Index d, Eigen::Index c) {
  return static_cast<std::size_t>(L + 2 * d * c + 2 * d);
}

}  // namespace

void round_to_storage(ProbeParams& params) {
  visit_params(params, [](double& v) { v = static_cast<double>(static_cast<float>(v)); });
}

void save_probe(const TrainedProbe& probe, const fs::path& path) {
  ProbeParams p = probe.state;
  std::vector<float> block;
  block.reserve(param_count(p.n_layers(), p.dim(), p.n_classes()));
  visit_params(p, [&](double& v) { block.push_back(static_cast<float>(v)); });
  const auto crc = static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(block.data()),
              static_cast<uInt>(block.size() * sizeof(float))));

  json log = json::array();
  for (const auto& r : probe.log)
    log.push_back({{"epoch", r.epoch},
                   {"train_loss_bits", r.train_loss_bits},
                   {"dev_loss_bits", r.dev_loss_bits}});
  json header = {{"schema_version", kProbeSchemaVersion},
                 {"n_layers", p.n_layers()},
                 {"dim", p.dim()},
                 {"n_classes", p.n_classes()},
                 {"rng_seed", probe.state.rng_seed},
                 {"task_name", probe.task_name},
                 {"label_vocab", probe.label_vocab},
                 {"config", probe.config.to_json()},
                 {"log", log},
                 {"stopped_epoch", probe.stopped_epoch},
                 {"best_epoch", probe.best_epoch},
                 {"n_train_tokens", probe.n_train_tokens},
                 {"data_bits", probe.data_bits},
                 {"model_bits", probe.model_bits},
                 {"param_crc32", crc}};
  const std::string text = header.dump();
  const std::uint64_t len = text.size();

  const fs::path tmp = fs::path(path) += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("cannot write '" + path.string() + "'");
    out.write(kProbeMagic, 4);
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    out.write(reinterpret_cast<const char*>(block.data()),
              static_cast<std::streamsize>(block.size() * sizeof(float)));
    if (!out) throw io_error("short write to '" + path.string() + "'");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw io_error("cannot finalize '" + path.string() + "': " + ec.message());
}

TrainedProbe load_probe(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open '" + path.string() + "'");
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kProbeMagic, 4) != 0)
    throw format_error("'" + path.string() + "': unrecognized format");
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + 4, sizeof(len));
  if (len > bytes.size() - 12) throw format_error("'" + path.string() + "': truncated payload");

  TrainedProbe probe;
  try {
    const json h = json::parse(bytes.substr(12, len));
    if (h.at("schema_version").get<int>() != kProbeSchemaVersion)
      throw format_error("'" + path.string() + "': unsupported probe schema_version");
    const auto L = h.at("n_layers").get<Eigen::Index>();
    const auto d = h.at("dim").get<Eigen::Index>();
    const auto c = h.at("n_classes").get<Eigen::Index>();
    if (L < 1 || d < 1 || c < 2) throw format_error("'" + path.string() + "': invalid dims");

    const std::size_t count = param_count(L, d, c);
    if (bytes.size() != 12 + len + count * sizeof(float))
      throw format_error("'" + path.string() + "': truncated payload");
    const char* block = bytes.data() + 12 + len;
    const auto crc = static_cast<std::uint32_t>(
        ::crc32(0L, reinterpret_cast<const Bytef*>(block),
                static_cast<uInt>(count * sizeof(float))));
    if (crc != h.at("param_crc32").get<std::uint32_t>())
      throw format_error("'" + path.string() + "': checksum mismatch");

    static_cast<ProbeParams&>(probe.state) = ProbeParams::zeros(L, d, c);
    std::size_t k = 0;
    visit_params(probe.state, [&](double& v) {
      float f;
      std::memcpy(&f, block + sizeof(float) * k++, sizeof(float));
      v = f;
    });
    probe.state.rng_seed = h.at("rng_seed").get<std::uint64_t>();
    probe.task_name = h.at("task_name").get<std::string>();
    probe.label_vocab = h.at("label_vocab").get<std::vector<std::string>>();
    probe.config = TrainConfig::from_json(h.at("config"));
    for (const auto& r : h.at("log"))
      probe.log.push_back({r.at("epoch").get<std::uint64_t>(),
                           r.at("train_loss_bits").get<double>(),
                           r.at("dev_loss_bits").get<double>()});
    probe.stopped_epoch = h.at("stopped_epoch").get<std::uint64_t>();
    probe.best_epoch = h.at("best_epoch").get<std::uint64_t>();
    probe.n_train_tokens = h.at("n_train_tokens").get<std::uint64_t>();
    probe.data_bits = h.at("data_bits").get<double>();
    probe.model_bits = h.at("model_bits").get<double>();
  } catch (const json::exception& e) {
    throw format_error("'" + path.string() + "': " + e.what());
  }
  if (!probe.state.all_finite())
    throw format_error("'" + path.string() + "': non-finite parameters");
  return probe;
}

}  // namespace ssch::probe
