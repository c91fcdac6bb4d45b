#include "chronicle.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "error.hpp"
#include "probe_io.hpp"
#include "store.hpp"

namespace ssch::chronicle {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string sanitize(const std::string& s) {
  std::string out;
  for (char ch : s)
    out += (std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '.') ? ch : '_';
  return out;
}

std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  std::string s = buf;
  if (s == "-0.000000") s = "0.000000";
  return s;
}

double round6(double v) {
  const double r = std::round(v * 1e6) / 1e6;
  return r == 0.0 ? 0.0 : r;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

void write_text(const fs::path& path, const std::string& text) {
  const fs::path tmp = fs::path(path) += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("cannot write '" + path.string() + "'");
    out << text;
    if (!out) throw io_error("short write to '" + path.string() + "'");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw io_error("cannot finalize '" + path.string() + "': " + ec.message());
}

std::string file_contents(const fs::path& path, std::size_t limit = std::string::npos) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return {};
  if (limit == std::string::npos) {
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }
  std::string buf(limit, '\0');
  in.read(buf.data(), static_cast<std::streamsize>(limit));
  buf.resize(static_cast<std::size_t>(in.gcount()));
  return buf;
}

unsigned resolve_workers(unsigned requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("SSCH_WORKERS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v > 0) return static_cast<unsigned>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

struct CellJob {
  std::size_t index = 0;
  std::size_t task = 0;
  std::size_t checkpoint = 0;
  std::uint64_t seed = 0;
};

std::string probe_file_name(const std::string& task, std::int64_t step, std::uint64_t seed) {
  return "probes/" + sanitize(task) + "__step" + std::to_string(step) + "__seed" +
         std::to_string(seed) + ".probe";
}

std::string input_hash(const ChronicleManifest& m, const TaskEntry& task, std::size_t checkpoint,
                       std::uint64_t seed) {
  ojson key;
  key["task"] = task.name;
  key["step"] = m.checkpoints[checkpoint].step;
  key["seed"] = seed;
  key["store_format"] = store::kFormatVersion;
  key["splits"] = {m.train_split, m.dev_split, m.eval_split};
  key["config"] = m.train_config.to_json();
  const fs::path& store_path = task.stores[checkpoint];
  key["store"] = store_path.filename().string();
  key["store_manifest"] = file_contents(store::manifest_path_for(store_path));
  // The binary header carries the payload CRC; hashing it covers the payload.
  const std::string header = file_contents(store_path, store::kHeaderSize);
  key["store_header"] = hex64(fnv1a(header));
  key["group_map"] = task.group_map ? file_contents(*task.group_map) : std::string{};
  return hex64(fnv1a(key.dump()));
}

ojson cell_to_json(const CellResult& c) {
  ojson j;
  j["task"] = c.task;
  j["step"] = c.step;
  j["seed"] = c.seed;
  j["input_hash"] = c.input_hash;
  j["ok"] = c.ok;
  if (!c.ok) {
    j["error"] = c.error;
    return j;
  }
  j["report"] = c.report.to_json();
  j["cog"] = c.cog;
  j["alpha"] = c.alpha;
  j["stopped_epoch"] = c.stopped_epoch;
  j["best_epoch"] = c.best_epoch;
  j["probe_file"] = c.probe_file;
  return j;
}

CellResult cell_from_json(const ojson& j) {
  CellResult c;
  c.task = j.at("task").get<std::string>();
  c.step = j.at("step").get<std::int64_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.input_hash = j.at("input_hash").get<std::string>();
  c.ok = j.at("ok").get<bool>();
  if (!c.ok) {
    c.error = j.value("error", std::string{});
    return c;
  }
  c.report = eval::EvalReport::from_json(j.at("report"));
  c.cog = j.at("cog").get<double>();
  c.alpha = j.at("alpha").get<std::vector<double>>();
  c.stopped_epoch = j.at("stopped_epoch").get<std::uint64_t>();
  c.best_epoch = j.at("best_epoch").get<std::uint64_t>();
  c.probe_file = j.at("probe_file").get<std::string>();
  return c;
}

void attach_subspace(CellResult& c, const fs::path& output_dir) {
  const auto probe = probe::load_probe(output_dir / c.probe_file);
  c.subspace = geometry::effective_matrix(
      probe, c.task + "@" + std::to_string(c.step) + "#" + std::to_string(c.seed));
}

CellResult compute_cell(const ChronicleManifest& m, const CellJob& job, const std::string& hash) {
  const TaskEntry& task = m.tasks[job.task];
  const Checkpoint& ckpt = m.checkpoints[job.checkpoint];
  CellResult c;
  c.task = task.name;
  c.step = ckpt.step;
  c.seed = job.seed;
  c.input_hash = hash;
  try {
    const auto ds = store::EmbeddingDataset::open(task.stores[job.checkpoint]);
    const auto train = store::split_view(ds, m.train_split);
    const auto dev = store::split_view(ds, m.dev_split);
    const auto evalv = store::split_view(ds, m.eval_split);

    std::optional<eval::GroupMap> groups;
    if (task.group_map) {
      groups = eval::load_group_map(*task.group_map);
      eval::validate_group_map(*groups, ds.manifest().label_vocab);
    }

    probe::TrainConfig config = m.train_config;
    config.seed = job.seed;
    const auto trained = probe::train_probe(train, dev, config);

    c.probe_file = probe_file_name(task.name, ckpt.step, job.seed);
    probe::save_probe(trained, m.output_dir / c.probe_file);
    // Measure the persisted (f32) probe so reused cells agree with fresh ones.
    const auto stored = probe::load_probe(m.output_dir / c.probe_file);

    c.report = eval::evaluate(stored, evalv, train, config.mc_samples_eval,
                              derive_seed(job.seed, 3), groups ? &*groups : nullptr);
    const Eigen::VectorXd alpha = stored.state.alpha();
    c.alpha.assign(alpha.data(), alpha.data() + alpha.size());
    c.cog = geometry::center_of_gravity(alpha);
    c.stopped_epoch = stored.stopped_epoch;
    c.best_epoch = stored.best_epoch;
    c.ok = true;
  } catch (const std::exception& e) {
    c.ok = false;
    c.error = e.what();
    c.probe_file.clear();
  }
  return c;
}

std::map<std::string, ojson> read_journal(const fs::path& path) {
  std::map<std::string, ojson> entries;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      ojson j = ojson::parse(line);
      const std::string key = j.at("task").get<std::string>() + "\x1f" +
                              std::to_string(j.at("step").get<std::int64_t>()) + "\x1f" +
                              std::to_string(j.at("seed").get<std::uint64_t>());
      entries[key] = std::move(j);
    } catch (const std::exception&) {
      // A torn final line from an interrupted run; the cell is recomputed.
    }
  }
  return entries;
}

std::string cell_key(const std::string& task, std::int64_t step, std::uint64_t seed) {
  return task + "\x1f" + std::to_string(step) + "\x1f" + std::to_string(seed);
}

}  // namespace

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

void ChronicleManifest::validate() const {
  if (tasks.empty()) throw invalid_argument("chronicle manifest: no tasks");
  if (checkpoints.empty()) throw invalid_argument("chronicle manifest: no checkpoints");
  if (seeds.empty()) throw invalid_argument("chronicle manifest: no seeds");
  for (std::size_t i = 1; i < checkpoints.size(); ++i)
    if (checkpoints[i].step <= checkpoints[i - 1].step)
      throw invalid_argument("chronicle manifest: checkpoint steps must be strictly increasing");
  if (std::none_of(checkpoints.begin(), checkpoints.end(),
                   [&](const Checkpoint& c) { return c.step == control_step; }))
    throw invalid_argument("chronicle manifest: control step " + std::to_string(control_step) +
                           " is not a checkpoint");
  std::set<std::string> names;
  for (const auto& t : tasks) {
    if (t.name.empty()) throw invalid_argument("chronicle manifest: empty task name");
    if (!names.insert(t.name).second)
      throw invalid_argument("chronicle manifest: duplicate task '" + t.name + "'");
    if (t.stores.size() != checkpoints.size())
      throw invalid_argument("chronicle manifest: task '" + t.name +
                             "' needs a store for every checkpoint");
  }
  std::set<std::uint64_t> seen(seeds.begin(), seeds.end());
  if (seen.size() != seeds.size()) throw invalid_argument("chronicle manifest: duplicate seeds");
  if (output_dir.empty()) throw invalid_argument("chronicle manifest: missing output_dir");
  train_config.validate();
}

ChronicleManifest ChronicleManifest::from_json(const nlohmann::json& j, const fs::path& base_dir) {
  auto resolve = [&](const std::string& p) {
    const fs::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  };
  ChronicleManifest m;
  try {
    if (j.value("schema_version", kManifestSchemaVersion) != kManifestSchemaVersion)
      throw format_error("chronicle manifest: unsupported schema_version");
    for (const auto& c : j.at("checkpoints"))
      m.checkpoints.push_back({c.at("step").get<std::int64_t>(), c.value("label", std::string{})});
    m.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (j.contains("train_config")) m.train_config = probe::TrainConfig::from_json(j.at("train_config"));
    m.control_step = j.value("control_step", std::int64_t{0});
    m.output_dir = resolve(j.at("output_dir").get<std::string>());
    if (j.contains("splits")) {
      const auto& s = j.at("splits");
      m.train_split = s.value("train", m.train_split);
      m.dev_split = s.value("dev", m.dev_split);
      m.eval_split = s.value("eval", m.eval_split);
    }
    for (const auto& t : j.at("tasks")) {
      TaskEntry e;
      e.name = t.at("name").get<std::string>();
      const auto& stores = t.at("stores");
      for (const auto& c : m.checkpoints) {
        const std::string key = std::to_string(c.step);
        if (!stores.contains(key))
          throw invalid_argument("chronicle manifest: task '" + e.name + "' has no store for step " + key);
        e.stores.push_back(resolve(stores.at(key).get<std::string>()));
      }
      if (t.contains("group_map") && !t.at("group_map").is_null())
        e.group_map = resolve(t.at("group_map").get<std::string>());
      m.tasks.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw format_error(std::string("chronicle manifest: ") + e.what());
  }
  m.validate();
  return m;
}

ChronicleManifest ChronicleManifest::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw format_error("'" + path.string() + "': " + e.what());
  }
  return from_json(j, path.parent_path());
}

// ---------------------------------------------------------------------------
// Result
// ---------------------------------------------------------------------------

const CellResult* ChronicleResult::find(const std::string& task, std::int64_t step,
                                        std::uint64_t seed) const {
  for (const auto& c : cells)
    if (c.task == task && c.step == step && c.seed == seed) return &c;
  return nullptr;
}

std::size_t ChronicleResult::failures() const {
  return static_cast<std::size_t>(
      std::count_if(cells.begin(), cells.end(), [](const CellResult& c) { return !c.ok; }));
}

std::optional<double> ChronicleResult::codelength_ratio(const CellResult& cell) const {
  if (!cell.ok) return std::nullopt;
  const CellResult* control = find(cell.task, control_step, cell.seed);
  if (!control || !control->ok || !(control->report.codelength > 0.0)) return std::nullopt;
  return eval::codelength_ratio(cell.report.codelength, control->report.codelength);
}

ojson ChronicleResult::to_json() const {
  ojson j;
  j["schema_version"] = kResultSchemaVersion;
  j["tasks"] = tasks;
  ojson ck = ojson::array();
  for (const auto& c : checkpoints) ck.push_back({{"step", c.step}, {"label", c.label}});
  j["checkpoints"] = ck;
  j["seeds"] = seeds;
  j["control_step"] = control_step;
  ojson cs = ojson::array();
  for (const auto& c : cells) cs.push_back(cell_to_json(c));
  j["cells"] = cs;
  return j;
}

ChronicleResult ChronicleResult::load(const fs::path& path) {
  const fs::path file = fs::is_directory(path) ? path / "result.json" : path;
  std::ifstream in(file);
  if (!in) throw io_error("cannot open '" + file.string() + "'");
  ChronicleResult r;
  try {
    const ojson j = ojson::parse(in);
    if (j.at("schema_version").get<int>() != kResultSchemaVersion)
      throw format_error("'" + file.string() + "': unsupported schema_version");
    r.tasks = j.at("tasks").get<std::vector<std::string>>();
    for (const auto& c : j.at("checkpoints"))
      r.checkpoints.push_back({c.at("step").get<std::int64_t>(), c.at("label").get<std::string>()});
    r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    r.control_step = j.at("control_step").get<std::int64_t>();
    for (const auto& c : j.at("cells")) r.cells.push_back(cell_from_json(c));
  } catch (const nlohmann::json::exception& e) {
    throw format_error("'" + file.string() + "': " + e.what());
  }
  r.output_dir = file.parent_path();
  for (auto& c : r.cells)
    if (c.ok) attach_subspace(c, r.output_dir);
  return r;
}

// ---------------------------------------------------------------------------
// Run
// ---------------------------------------------------------------------------

ChronicleResult run_chronicle(const ChronicleManifest& manifest, const RunOptions& options) {
  manifest.validate();
  std::error_code ec;
  fs::create_directories(manifest.output_dir / "probes", ec);
  if (ec) throw io_error("cannot create '" + manifest.output_dir.string() + "': " + ec.message());

  ChronicleResult result;
  for (const auto& t : manifest.tasks) result.tasks.push_back(t.name);
  result.checkpoints = manifest.checkpoints;
  result.seeds = manifest.seeds;
  result.control_step = manifest.control_step;
  result.output_dir = manifest.output_dir;

  const fs::path journal_path = manifest.output_dir / "journal.jsonl";
  const auto journal = read_journal(journal_path);

  std::vector<CellJob> pending;
  std::vector<std::string> hashes;
  for (std::size_t t = 0; t < manifest.tasks.size(); ++t)
    for (std::size_t k = 0; k < manifest.checkpoints.size(); ++k)
      for (std::uint64_t seed : manifest.seeds) {
        const std::size_t index = result.cells.size();
        const auto& task = manifest.tasks[t];
        const std::int64_t step = manifest.checkpoints[k].step;
        const std::string hash = input_hash(manifest, task, k, seed);
        hashes.push_back(hash);

        const auto it = journal.find(cell_key(task.name, step, seed));
        std::optional<CellResult> reused;
        if (it != journal.end() && it->second.value("input_hash", std::string{}) == hash) {
          try {
            CellResult c = cell_from_json(it->second);
            if (c.ok) attach_subspace(c, manifest.output_dir);
            reused = std::move(c);
          } catch (const std::exception&) {
            // Missing or corrupt probe file: recompute.
          }
        }
        if (reused) {
          result.cells.push_back(std::move(*reused));
        } else {
          CellResult placeholder;
          placeholder.task = task.name;
          placeholder.step = step;
          placeholder.seed = seed;
          result.cells.push_back(std::move(placeholder));
          pending.push_back({index, t, k, seed});
        }
      }

  std::mutex journal_mutex;
  std::ofstream journal_out(journal_path, std::ios::app);
  if (!journal_out) throw io_error("cannot open journal '" + journal_path.string() + "'");

  std::atomic<std::size_t> next{0};
  std::exception_ptr fatal;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= pending.size()) return;
      const CellJob& job = pending[i];
      CellResult c = compute_cell(manifest, job, hashes[job.index]);
      try {
        if (c.ok) attach_subspace(c, manifest.output_dir);
      } catch (const std::exception& e) {
        c.ok = false;
        c.error = e.what();
      }
      std::lock_guard lock(journal_mutex);
      journal_out << cell_to_json(c).dump() << '\n';
      journal_out.flush();
      if (!journal_out && !fatal)
        fatal = std::make_exception_ptr(io_error("cannot append to journal"));
      result.cells[job.index] = std::move(c);
    }
  };

  const unsigned workers =
      static_cast<unsigned>(std::min<std::size_t>(resolve_workers(options.workers),
                                                  std::max<std::size_t>(1, pending.size())));
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (fatal) std::rethrow_exception(fatal);
  result.recomputed = pending.size();

  write_text(manifest.output_dir / "result.json", result.to_json().dump(2) + "\n");
  if (options.emit_reports) {
    emit_report(result, ReportFormat::Csv, manifest.output_dir / "report");
    emit_report(result, ReportFormat::Json, manifest.output_dir / "report");
  }
  return result;
}

// ---------------------------------------------------------------------------
// Derived tables
// ---------------------------------------------------------------------------

std::vector<StepAngles> stepwise_ssa(const ChronicleResult& result, const std::string& task,
                                     std::uint64_t seed) {
  std::vector<const CellResult*> series;
  for (const auto& ck : result.checkpoints) {
    const CellResult* c = result.find(task, ck.step, seed);
    if (c && c->ok && c->subspace) series.push_back(c);
  }
  if (series.size() < 2)
    throw invalid_argument("stepwise SSA for '" + task + "' seed " + std::to_string(seed) +
                           " needs at least 2 successful checkpoints");
  std::vector<StepAngles> out;
  for (std::size_t i = 1; i < series.size(); ++i)
    out.push_back({series[i - 1]->step, series[i]->step,
                   geometry::ssa(*series[i - 1]->subspace, *series[i]->subspace)});
  return out;
}

CrossTaskMatrix cross_task_ssa(const ChronicleResult& result, std::int64_t step,
                               std::uint64_t seed) {
  if (result.tasks.size() < 2) throw invalid_argument("cross-task SSA needs at least 2 tasks");
  CrossTaskMatrix m;
  m.tasks = result.tasks;
  const std::size_t n = m.tasks.size();
  m.mean_angles.assign(n, std::vector<std::optional<double>>(n));
  std::vector<const CellResult*> cells(n);
  for (std::size_t i = 0; i < n; ++i) {
    const CellResult* c = result.find(m.tasks[i], step, seed);
    cells[i] = (c && c->ok && c->subspace && c->subspace->rank > 0) ? c : nullptr;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!cells[i]) continue;
    m.mean_angles[i][i] = 0.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      if (!cells[j]) continue;
      if (cells[i]->subspace->matrix.rows() != cells[j]->subspace->matrix.rows()) continue;
      const double v = geometry::ssa(*cells[i]->subspace, *cells[j]->subspace).mean_angle;
      m.mean_angles[i][j] = v;
      m.mean_angles[j][i] = v;
    }
  }
  return m;
}

CrossSeedSummary cross_seed_ssa(const ChronicleResult& result, const std::string& task,
                                std::int64_t step) {
  std::vector<const CellResult*> ok;
  for (std::uint64_t seed : result.seeds) {
    const CellResult* c = result.find(task, step, seed);
    if (c && c->ok && c->subspace) ok.push_back(c);
  }
  if (ok.size() < 2)
    throw invalid_argument("cross-seed SSA for '" + task + "' at step " + std::to_string(step) +
                           " needs at least 2 successful seeds");
  std::vector<double> values;
  for (std::size_t i = 0; i < ok.size(); ++i)
    for (std::size_t j = i + 1; j < ok.size(); ++j)
      values.push_back(geometry::ssa(*ok[i]->subspace, *ok[j]->subspace).mean_angle);
  CrossSeedSummary s;
  s.pairs = values.size();
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  for (double v : values) s.stddev += (v - s.mean) * (v - s.mean);
  s.stddev = std::sqrt(s.stddev / static_cast<double>(values.size()));
  return s;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

namespace {

struct Row {
  std::string task;
  std::string step;
  std::string seed;  // "all" for cross-seed aggregates
  std::string metric;
  double value = 0.0;
};

std::vector<Row> build_rows(const ChronicleResult& r) {
  std::vector<Row> rows;
  for (const auto& c : r.cells) {
    const std::string step = std::to_string(c.step), seed = std::to_string(c.seed);
    auto add = [&](const std::string& metric, double v) {
      rows.push_back({c.task, step, seed, metric, v});
    };
    if (!c.ok) {
      add("failed", 1.0);
      continue;
    }
    add("macro_f1", c.report.macro_f1);
    for (const auto& [cls, v] : c.report.class_f1) add("f1:" + cls, v);
    if (c.report.grouped_f1)
      for (const auto& [g, v] : *c.report.grouped_f1) add("group_f1:" + g, v);
    add("data_bits", c.report.data_bits);
    add("data_bits_std", c.report.data_bits_std);
    add("model_bits", c.report.model_bits);
    add("codelength", c.report.codelength);
    if (auto ratio = r.codelength_ratio(c)) add("codelength_ratio", *ratio);
    add("cog", c.cog);
    for (std::size_t i = 0; i < c.alpha.size(); ++i) add("alpha:" + std::to_string(i), c.alpha[i]);
    add("stopped_epoch", static_cast<double>(c.stopped_epoch));
    add("best_epoch", static_cast<double>(c.best_epoch));
  }

  for (const auto& task : r.tasks)
    for (std::uint64_t seed : r.seeds) {
      std::vector<StepAngles> series;
      try {
        series = stepwise_ssa(r, task, seed);
      } catch (const Error&) {
        continue;
      }
      for (const auto& s : series) {
        const std::string step = std::to_string(s.to_step), sd = std::to_string(seed);
        rows.push_back({task, step, sd, "stepwise_ssa_from_step", static_cast<double>(s.from_step)});
        rows.push_back({task, step, sd, "stepwise_ssa_mean", s.angles.mean_angle});
        for (std::size_t k = 0; k < s.angles.angles.size(); ++k)
          rows.push_back({task, step, sd, "stepwise_ssa_angle:" + std::to_string(k),
                          s.angles.angles[k]});
      }
    }

  if (r.tasks.size() >= 2)
    for (const auto& ck : r.checkpoints)
      for (std::uint64_t seed : r.seeds) {
        const auto m = cross_task_ssa(r, ck.step, seed);
        for (std::size_t i = 0; i < m.tasks.size(); ++i)
          for (std::size_t j = 0; j < m.tasks.size(); ++j)
            if (i != j && m.mean_angles[i][j])
              rows.push_back({m.tasks[i], std::to_string(ck.step), std::to_string(seed),
                              "cross_task_ssa:" + m.tasks[j], *m.mean_angles[i][j]});
      }

  if (r.seeds.size() >= 2)
    for (const auto& task : r.tasks)
      for (const auto& ck : r.checkpoints) {
        CrossSeedSummary s;
        try {
          s = cross_seed_ssa(r, task, ck.step);
        } catch (const Error&) {
          continue;
        }
        const std::string step = std::to_string(ck.step);
        rows.push_back({task, step, "all", "cross_seed_ssa_mean", s.mean});
        rows.push_back({task, step, "all", "cross_seed_ssa_std", s.stddev});
      }
  return rows;
}

// Seed-averaged cross-task matrix for one checkpoint.
std::vector<std::vector<std::optional<double>>> averaged_cross_task(const ChronicleResult& r,
                                                                    std::int64_t step) {
  const std::size_t n = r.tasks.size();
  std::vector<std::vector<double>> sum(n, std::vector<double>(n, 0.0));
  std::vector<std::vector<std::size_t>> count(n, std::vector<std::size_t>(n, 0));
  for (std::uint64_t seed : r.seeds) {
    const auto m = cross_task_ssa(r, step, seed);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (m.mean_angles[i][j]) {
          sum[i][j] += *m.mean_angles[i][j];
          ++count[i][j];
        }
  }
  std::vector<std::vector<std::optional<double>>> out(n, std::vector<std::optional<double>>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (count[i][j]) out[i][j] = sum[i][j] / static_cast<double>(count[i][j]);
  return out;
}

}  // namespace

ReportFormat parse_report_format(const std::string& name) {
  if (name == "csv") return ReportFormat::Csv;
  if (name == "json") return ReportFormat::Json;
  throw invalid_argument("unknown report format '" + name + "' (expected csv or json)");
}

std::vector<fs::path> emit_report(const ChronicleResult& result, ReportFormat format,
                                  const fs::path& destination) {
  if (result.cells.empty()) throw invalid_argument("empty chronicle result");
  std::error_code ec;
  fs::create_directories(destination, ec);
  if (ec) throw io_error("cannot create '" + destination.string() + "': " + ec.message());

  const auto rows = build_rows(result);
  std::vector<fs::path> written;

  if (format == ReportFormat::Csv) {
    std::string text = "task,step,seed,metric,value\n";
    for (const auto& row : rows)
      text += csv_field(row.task) + "," + row.step + "," + row.seed + "," + csv_field(row.metric) +
              "," + fixed6(row.value) + "\n";
    written.push_back(destination / "report.csv");
    write_text(written.back(), text);

    if (result.tasks.size() >= 2)
      for (const auto& ck : result.checkpoints) {
        const auto m = averaged_cross_task(result, ck.step);
        std::string t = "task";
        for (const auto& name : result.tasks) t += "," + csv_field(name);
        t += "\n";
        for (std::size_t i = 0; i < result.tasks.size(); ++i) {
          t += csv_field(result.tasks[i]);
          for (std::size_t j = 0; j < result.tasks.size(); ++j)
            t += "," + (m[i][j] ? fixed6(*m[i][j]) : std::string("NA"));
          t += "\n";
        }
        written.push_back(destination / ("cross_task_step" + std::to_string(ck.step) + ".csv"));
        write_text(written.back(), t);
      }
    return written;
  }

  ojson j;
  j["schema_version"] = kReportSchemaVersion;
  j["columns"] = {"task", "step", "seed", "metric", "value"};
  ojson rs = ojson::array();
  for (const auto& row : rows) {
    ojson o;
    o["task"] = row.task;
    o["step"] = std::stoll(row.step);
    if (row.seed == "all")
      o["seed"] = "all";
    else
      o["seed"] = std::stoull(row.seed);
    o["metric"] = row.metric;
    o["value"] = round6(row.value);
    rs.push_back(std::move(o));
  }
  j["rows"] = rs;

  ojson stepwise = ojson::array();
  for (const auto& task : result.tasks)
    for (std::uint64_t seed : result.seeds) {
      std::vector<StepAngles> series;
      try {
        series = stepwise_ssa(result, task, seed);
      } catch (const Error&) {
        continue;
      }
      for (const auto& s : series) {
        ojson angles = ojson::array();
        for (double a : s.angles.angles) angles.push_back(round6(a));
        stepwise.push_back({{"task", task},
                            {"seed", seed},
                            {"from_step", s.from_step},
                            {"to_step", s.to_step},
                            {"angles", angles},
                            {"mean_angle", round6(s.angles.mean_angle)}});
      }
    }
  j["stepwise_ssa"] = stepwise;

  ojson cross = ojson::array();
  if (result.tasks.size() >= 2)
    for (const auto& ck : result.checkpoints) {
      const auto m = averaged_cross_task(result, ck.step);
      ojson mat = ojson::array();
      for (const auto& row : m) {
        ojson r = ojson::array();
        for (const auto& v : row) r.push_back(v ? ojson(round6(*v)) : ojson(nullptr));
        mat.push_back(r);
      }
      cross.push_back({{"step", ck.step}, {"tasks", result.tasks}, {"mean_angles", mat}});
    }
  j["cross_task_ssa"] = cross;

  written.push_back(destination / "report.json");
  write_text(written.back(), j.dump(2) + "\n");
  return written;
}

}  // namespace ssch::chronicle
