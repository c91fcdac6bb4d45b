#include "ssch/ssch.h"

#include <algorithm>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <string>

#include "chronicle.hpp"
#include "error.hpp"
#include "eval.hpp"
#include "geometry.hpp"
#include "probe.hpp"
#include "probe_io.hpp"
#include "store.hpp"

struct ssch_dataset {
  ssch::store::EmbeddingDataset dataset;
};

struct ssch_probe {
  ssch::probe::TrainedProbe probe;
};

struct ssch_chronicle {
  ssch::chronicle::ChronicleResult result;
};

namespace {

thread_local std::string g_last_error;

ssch_status to_status(ssch::ErrorCode code) {
  switch (code) {
    case ssch::ErrorCode::InvalidArgument: return SSCH_ERR_INVALID_ARGUMENT;
    case ssch::ErrorCode::Io: return SSCH_ERR_IO;
    case ssch::ErrorCode::Format: return SSCH_ERR_FORMAT;
    case ssch::ErrorCode::Numeric: return SSCH_ERR_NUMERIC;
  }
  return SSCH_ERR_INTERNAL;
}

template <typename Fn>
ssch_status guarded(Fn&& fn) {
  g_last_error.clear();
  try {
    return fn();
  } catch (const ssch::Error& e) {
    g_last_error = e.what();
    return to_status(e.code());
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return SSCH_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return SSCH_ERR_INTERNAL;
  }
}

void require(bool cond, const char* what) {
  if (!cond) throw ssch::invalid_argument(what);
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

ssch::probe::TrainConfig from_c(const ssch_train_config& c) {
  ssch::probe::TrainConfig t;
  t.learning_rate = c.learning_rate;
  t.adam_beta1 = c.adam_beta1;
  t.adam_beta2 = c.adam_beta2;
  t.weight_decay = c.weight_decay;
  t.batch_size = c.batch_size;
  t.max_epochs = c.max_epochs;
  t.patience = c.patience;
  t.mc_samples_train = c.mc_samples_train;
  t.mc_samples_eval = c.mc_samples_eval;
  t.seed = c.seed;
  t.kl_weight = c.kl_weight;
  return t;
}

}  // namespace

extern "C" {

const char* ssch_last_error(void) { return g_last_error.c_str(); }

const char* ssch_version(void) { return "0.1.0"; }

void ssch_string_free(char* s) { std::free(s); }

// ---------------------------------------------------------------------------

ssch_status ssch_dataset_write(const char* manifest_json, const float* embeddings,
                               size_t n_embeddings, const uint32_t* labels, size_t n_labels,
                               const char* path) {
  return guarded([&] {
    require(manifest_json && path, "null argument");
    require(embeddings || n_embeddings == 0, "null embeddings");
    require(labels || n_labels == 0, "null labels");
    nlohmann::ordered_json j;
    try {
      j = nlohmann::ordered_json::parse(manifest_json);
    } catch (const nlohmann::json::exception& e) {
      throw ssch::format_error(std::string("manifest: ") + e.what());
    }
    ssch::store::write_dataset(ssch::store::StoreManifest::from_json(j),
                               {embeddings, n_embeddings}, {labels, n_labels}, path);
    return SSCH_OK;
  });
}

ssch_status ssch_dataset_open(const char* path, ssch_dataset** out) {
  return guarded([&] {
    require(path && out, "null argument");
    *out = nullptr;
    *out = new ssch_dataset{ssch::store::EmbeddingDataset::open(path)};
    return SSCH_OK;
  });
}

void ssch_dataset_close(ssch_dataset* ds) { delete ds; }

ssch_status ssch_dataset_info_get(const ssch_dataset* ds, ssch_dataset_info* out) {
  return guarded([&] {
    require(ds && out, "null argument");
    out->n_tokens = ds->dataset.n_tokens();
    out->n_layers = ds->dataset.n_layers();
    out->dim = ds->dataset.dim();
    out->n_classes = ds->dataset.n_classes();
    out->checksum = ds->dataset.checksum();
    return SSCH_OK;
  });
}

ssch_status ssch_dataset_summary(const ssch_dataset* ds, char** out_json) {
  return guarded([&] {
    require(ds && out_json, "null argument");
    const auto& m = ds->dataset.manifest();
    nlohmann::ordered_json j;
    j["path"] = ds->dataset.path().string();
    j["checksum"] = ds->dataset.checksum();
    j["manifest"] = m.to_json();
    std::vector<std::uint64_t> hist(m.n_classes, 0);
    for (auto y : ds->dataset.labels()) ++hist[y];
    nlohmann::ordered_json h = nlohmann::ordered_json::object();
    for (std::size_t k = 0; k < hist.size(); ++k) h[m.label_vocab[k]] = hist[k];
    j["label_histogram"] = h;
    nlohmann::ordered_json s = nlohmann::ordered_json::object();
    std::uint64_t covered = 0;
    for (const auto& split : m.splits) {
      std::uint64_t n = 0;
      for (const auto& r : split.ranges) n += r.size();
      s[split.name] = n;
      covered += n;
    }
    j["split_sizes"] = s;
    j["split_coverage"] = static_cast<double>(covered) / static_cast<double>(m.n_tokens);
    *out_json = dup_string(j.dump(2));
    return SSCH_OK;
  });
}

ssch_status ssch_dataset_vector(const ssch_dataset* ds, uint64_t token, uint64_t layer,
                                float* out, size_t capacity) {
  return guarded([&] {
    require(ds && out, "null argument");
    const auto v = ds->dataset.vector(token, layer);
    require(capacity >= v.size(), "output buffer too small");
    std::memcpy(out, v.data(), v.size_bytes());
    return SSCH_OK;
  });
}

// ---------------------------------------------------------------------------

void ssch_train_config_default(ssch_train_config* out) {
  if (!out) return;
  const ssch::probe::TrainConfig d;
  *out = {d.learning_rate, d.adam_beta1,      d.adam_beta2,      d.weight_decay,
          d.batch_size,    d.max_epochs,      d.patience,        d.mc_samples_train,
          d.mc_samples_eval, d.seed,          d.kl_weight};
}

ssch_status ssch_probe_train(const ssch_dataset* train, const char* train_split,
                             const ssch_dataset* dev, const char* dev_split,
                             const ssch_train_config* config, ssch_probe** out) {
  return guarded([&] {
    require(train && dev && train_split && dev_split && config && out, "null argument");
    *out = nullptr;
    const auto tv = ssch::store::split_view(train->dataset, train_split);
    const auto dv = ssch::store::split_view(dev->dataset, dev_split);
    *out = new ssch_probe{ssch::probe::train_probe(tv, dv, from_c(*config))};
    return SSCH_OK;
  });
}

ssch_status ssch_probe_save(const ssch_probe* probe, const char* path) {
  return guarded([&] {
    require(probe && path, "null argument");
    ssch::probe::save_probe(probe->probe, path);
    return SSCH_OK;
  });
}

ssch_status ssch_probe_load(const char* path, ssch_probe** out) {
  return guarded([&] {
    require(path && out, "null argument");
    *out = nullptr;
    *out = new ssch_probe{ssch::probe::load_probe(path)};
    return SSCH_OK;
  });
}

void ssch_probe_free(ssch_probe* probe) { delete probe; }

ssch_status ssch_probe_summary(const ssch_probe* probe, char** out_json) {
  return guarded([&] {
    require(probe && out_json, "null argument");
    const auto& p = probe->probe;
    nlohmann::ordered_json j;
    j["task_name"] = p.task_name;
    j["n_layers"] = p.state.n_layers();
    j["dim"] = p.state.dim();
    j["n_classes"] = p.state.n_classes();
    j["config"] = p.config.to_json();
    nlohmann::ordered_json log = nlohmann::ordered_json::array();
    for (const auto& r : p.log)
      log.push_back({{"epoch", r.epoch},
                     {"train_loss_bits", r.train_loss_bits},
                     {"dev_loss_bits", r.dev_loss_bits}});
    j["log"] = log;
    j["stopped_epoch"] = p.stopped_epoch;
    j["best_epoch"] = p.best_epoch;
    j["data_bits"] = p.data_bits;
    j["model_bits"] = p.model_bits;
    j["codelength"] = p.data_bits + p.model_bits;
    const Eigen::VectorXd alpha = p.state.alpha();
    j["alpha"] = std::vector<double>(alpha.data(), alpha.data() + alpha.size());
    j["cog"] = ssch::geometry::center_of_gravity(alpha);
    *out_json = dup_string(j.dump(2));
    return SSCH_OK;
  });
}

ssch_status ssch_probe_cog(const ssch_probe* probe, double* out) {
  return guarded([&] {
    require(probe && out, "null argument");
    *out = ssch::geometry::center_of_gravity(probe->probe.state);
    return SSCH_OK;
  });
}

ssch_status ssch_probe_codelength(const ssch_probe* probe, const ssch_dataset* ds,
                                  const char* split, uint64_t mc_samples, uint64_t seed,
                                  ssch_codelength* out) {
  return guarded([&] {
    require(probe && ds && split && out, "null argument");
    const auto view = ssch::store::split_view(ds->dataset, split);
    ssch::Rng rng(seed);
    const auto c = ssch::eval::codelength(probe->probe, view, mc_samples, rng);
    *out = {c.data_bits, c.data_bits_std, c.model_bits, c.codelength};
    return SSCH_OK;
  });
}

ssch_status ssch_probe_evaluate(const ssch_probe* probe, const ssch_dataset* ds,
                                const char* f1_split, const char* code_split,
                                uint64_t mc_samples, uint64_t seed, const char* group_map_path,
                                char** out_json) {
  return guarded([&] {
    require(probe && ds && f1_split && code_split && out_json, "null argument");
    const auto f1v = ssch::store::split_view(ds->dataset, f1_split);
    const auto codev = ssch::store::split_view(ds->dataset, code_split);
    std::optional<ssch::eval::GroupMap> groups;
    if (group_map_path) {
      groups = ssch::eval::load_group_map(group_map_path);
      ssch::eval::validate_group_map(*groups, ds->dataset.manifest().label_vocab);
    }
    const auto report = ssch::eval::evaluate(probe->probe, f1v, codev, mc_samples, seed,
                                             groups ? &*groups : nullptr);
    *out_json = dup_string(report.to_json().dump(2));
    return SSCH_OK;
  });
}

ssch_status ssch_ssa(const ssch_probe* a, const ssch_probe* b, double* angles, size_t capacity,
                     size_t* count, double* mean_angle) {
  return guarded([&] {
    require(a && b && count, "null argument");
    const auto r = ssch::geometry::ssa(ssch::geometry::effective_matrix(a->probe),
                                       ssch::geometry::effective_matrix(b->probe));
    *count = r.angles.size();
    if (mean_angle) *mean_angle = r.mean_angle;
    if (angles) {
      require(capacity >= r.angles.size(), "output buffer too small");
      std::copy(r.angles.begin(), r.angles.end(), angles);
    }
    return SSCH_OK;
  });
}

double ssch_codelength_ratio(double codelength, double control_codelength) {
  if (!(control_codelength > 0.0)) return std::numeric_limits<double>::quiet_NaN();
  return ssch::eval::codelength_ratio(codelength, control_codelength);
}

// ---------------------------------------------------------------------------

ssch_status ssch_chronicle_run(const char* manifest_path, unsigned workers, ssch_chronicle** out) {
  return guarded([&] {
    require(manifest_path && out, "null argument");
    *out = nullptr;
    const auto manifest = ssch::chronicle::ChronicleManifest::load(manifest_path);
    ssch::chronicle::RunOptions opts;
    opts.workers = workers;
    auto* c = new ssch_chronicle{ssch::chronicle::run_chronicle(manifest, opts)};
    *out = c;
    if (c->result.failures() > 0) {
      g_last_error = std::to_string(c->result.failures()) + " of " +
                     std::to_string(c->result.cells.size()) + " cells failed";
      return SSCH_ERR_PARTIAL;
    }
    return SSCH_OK;
  });
}

ssch_status ssch_chronicle_load(const char* path, ssch_chronicle** out) {
  return guarded([&] {
    require(path && out, "null argument");
    *out = nullptr;
    *out = new ssch_chronicle{ssch::chronicle::ChronicleResult::load(path)};
    return SSCH_OK;
  });
}

void ssch_chronicle_free(ssch_chronicle* c) { delete c; }

ssch_status ssch_chronicle_counts(const ssch_chronicle* c, size_t* cells, size_t* failures,
                                  size_t* recomputed) {
  return guarded([&] {
    require(c, "null argument");
    if (cells) *cells = c->result.cells.size();
    if (failures) *failures = c->result.failures();
    if (recomputed) *recomputed = c->result.recomputed;
    return SSCH_OK;
  });
}

ssch_status ssch_chronicle_emit(const ssch_chronicle* c, const char* format,
                                const char* destination) {
  return guarded([&] {
    require(c && format && destination, "null argument");
    ssch::chronicle::emit_report(c->result, ssch::chronicle::parse_report_format(format),
                                 destination);
    return SSCH_OK;
  });
}

}  // extern "C"
