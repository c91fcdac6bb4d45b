#pragma once

// Probing grids over task x checkpoint x seed.
//
// A run trains one probe per cell, persists it under <output>/probes/, and
// appends one JSON line per finished cell to <output>/journal.jsonl. Each
// journal line carries a hash of the cell's inputs; a rerun reuses every cell
// whose hash still matches and recomputes the rest. Derived tables are always
// computed from the persisted probes, so resumed and uninterrupted runs emit
// identical reports.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "eval.hpp"
#include "geometry.hpp"
#include "json.hpp"
#include "probe.hpp"

namespace ssch::chronicle {

inline constexpr int kManifestSchemaVersion = 1;
inline constexpr int kResultSchemaVersion = 1;
inline constexpr int kReportSchemaVersion = 1;

struct Checkpoint {
  std::int64_t step = 0;
  std::string label;
};

struct TaskEntry {
  std::string name;
  // One store per checkpoint, aligned with ChronicleManifest::checkpoints.
  std::vector<std::filesystem::path> stores;
  std::optional<std::filesystem::path> group_map;
};

struct ChronicleManifest {
  std::vector<TaskEntry> tasks;
  std::vector<Checkpoint> checkpoints;  // strictly increasing steps
  std::vector<std::uint64_t> seeds;
  probe::TrainConfig train_config;
  std::int64_t control_step = 0;
  std::filesystem::path output_dir;
  std::string train_split = "train";
  std::string dev_split = "dev";
  std::string eval_split = "dev";

  void validate() const;

  // Relative paths in the file are resolved against its directory.
  static ChronicleManifest load(const std::filesystem::path& path);
  static ChronicleManifest from_json(const nlohmann::json& j,
                                     const std::filesystem::path& base_dir);
};

struct CellResult {
  std::string task;
  std::int64_t step = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  std::string input_hash;

  eval::EvalReport report;
  double cog = 0.0;
  std::vector<double> alpha;
  std::uint64_t stopped_epoch = 0;
  std::uint64_t best_epoch = 0;
  std::string probe_file;  // relative to the output directory

  // Loaded from probe_file; absent for failed cells.
  std::optional<geometry::SubspaceMatrix> subspace;
};

struct ChronicleResult {
  std::vector<std::string> tasks;
  std::vector<Checkpoint> checkpoints;
  std::vector<std::uint64_t> seeds;
  std::int64_t control_step = 0;
  std::filesystem::path output_dir;

  // task-major, then checkpoint, then seed.
  std::vector<CellResult> cells;

  // Not persisted: cells computed (not reused from the journal) by this run.
  std::size_t recomputed = 0;

  const CellResult* find(const std::string& task, std::int64_t step, std::uint64_t seed) const;
  std::size_t failures() const;

  // Codelength ratio of a cell against the same task and seed at the control step.
  std::optional<double> codelength_ratio(const CellResult& cell) const;

  nlohmann::ordered_json to_json() const;
  // Reads <dir>/result.json (or a path to it) and reloads the probes.
  static ChronicleResult load(const std::filesystem::path& path);
};

struct RunOptions {
  // 0: SSCH_WORKERS if set, otherwise the hardware concurrency.
  unsigned workers = 0;
  // Also write report.csv and cross-task matrices under <output>/report.
  bool emit_reports = true;
};

ChronicleResult run_chronicle(const ChronicleManifest& manifest, const RunOptions& options = {});

struct StepAngles {
  std::int64_t from_step = 0;
  std::int64_t to_step = 0;
  geometry::SubspaceAngles angles;
};

// SSA between consecutive successful checkpoints in manifest order.
std::vector<StepAngles> stepwise_ssa(const ChronicleResult& result, const std::string& task,
                                     std::uint64_t seed);

struct CrossTaskMatrix {
  std::vector<std::string> tasks;
  std::vector<std::vector<std::optional<double>>> mean_angles;  // absent when a cell failed
};

CrossTaskMatrix cross_task_ssa(const ChronicleResult& result, std::int64_t step,
                               std::uint64_t seed);

struct CrossSeedSummary {
  double mean = 0.0;
  double stddev = 0.0;  // population, over seed pairs
  std::size_t pairs = 0;
};

CrossSeedSummary cross_seed_ssa(const ChronicleResult& result, const std::string& task,
                                std::int64_t step);

enum class ReportFormat { Csv, Json };

ReportFormat parse_report_format(const std::string& name);

// Writes report.csv plus cross_task_step<N>.csv files, or report.json.
std::vector<std::filesystem::path> emit_report(const ChronicleResult& result, ReportFormat format,
                                               const std::filesystem::path& destination);

}  // namespace ssch::chronicle
