#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "probe.hpp"
#include "store.hpp"

namespace ssch::eval {

struct F1Scores {
  double macro = 0.0;
  std::vector<double> per_class;
};

// Classes absent from both predictions and golds score 0 and still count
// towards the macro average.
F1Scores macro_f1(std::span<const std::uint32_t> predictions,
                  std::span<const std::uint32_t> golds, std::size_t n_classes);

// Fine class name -> group name. Unmapped classes form singleton groups.
using GroupMap = std::map<std::string, std::string>;

GroupMap parse_group_map(const nlohmann::json& j);
GroupMap load_group_map(const std::filesystem::path& path);
void validate_group_map(const GroupMap& map, const std::vector<std::string>& vocab);

// Relabels predictions and golds through the map, then scores each group as
// one class. Groups are ordered by first appearance in the vocabulary.
std::vector<std::pair<std::string, double>> grouped_f1(
    std::span<const std::uint32_t> predictions, std::span<const std::uint32_t> golds,
    const std::vector<std::string>& vocab, const GroupMap& map);

struct Codelength {
  double data_bits = 0.0;
  double data_bits_std = 0.0;  // across Monte-Carlo draws
  double model_bits = 0.0;
  double codelength = 0.0;
  std::uint64_t mc_samples = 0;
};

Codelength codelength(const probe::TrainedProbe& probe, const store::DatasetView& view,
                      std::uint64_t mc_samples, Rng& rng);

// 100 * l / l_control.
double codelength_ratio(double l, double l_control);

struct EvalReport {
  double macro_f1 = 0.0;
  std::vector<std::pair<std::string, double>> class_f1;
  std::optional<std::vector<std::pair<std::string, double>>> grouped_f1;
  double data_bits = 0.0;
  double data_bits_std = 0.0;
  double model_bits = 0.0;
  double codelength = 0.0;
  std::uint64_t n_tokens = 0;       // tokens scored for F1
  std::uint64_t n_code_tokens = 0;  // tokens transmitted for the codelength

  nlohmann::ordered_json to_json() const;
  static EvalReport from_json(const nlohmann::ordered_json& j);
};

// F1 on `f1_view`, codelength on `code_view` (normally the training split).
EvalReport evaluate(const probe::TrainedProbe& probe, const store::DatasetView& f1_view,
                    const store::DatasetView& code_view, std::uint64_t mc_samples,
                    std::uint64_t seed, const GroupMap* groups = nullptr);

}  // namespace ssch::eval
