#include <cmath>
#include <cstring>
#include <memory>

#include "doctest.h"
#include "ssch/ssch.h"
#include "synthetic.hpp"

using ssch::testing::TempDir;

namespace {

struct Str {
  char* p = nullptr;
  ~Str() { ssch_string_free(p); }
  nlohmann::json json() const { return nlohmann::json::parse(p); }
};

std::string write_with_capi(const ssch::testing::StoreData& d, const std::filesystem::path& path) {
  const auto manifest = d.manifest.to_json().dump();
  REQUIRE(ssch_dataset_write(manifest.c_str(), d.embeddings.data(), d.embeddings.size(), d.labels.data(),
                             d.labels.size(), path.c_str()) == SSCH_OK);
  return path.string();
}

ssch::testing::StoreData clusters(std::uint64_t mean_seed, double strength) {
  ssch::testing::ClusterSpec spec;
  spec.n_train = 400;
  spec.n_dev = 100;
  spec.strength = {0.3 * strength, strength};
  spec.mean_seed = mean_seed;
  return ssch::testing::make_clusters(spec);
}

}  // namespace

TEST_CASE("capi: datasets") {
  TempDir dir;
  const auto data = clusters(1, 1.0);
  const auto path = write_with_capi(data, dir / "s.ssch");

  ssch_dataset* ds = nullptr;
  REQUIRE(ssch_dataset_open(path.c_str(), &ds) == SSCH_OK);
  ssch_dataset_info info{};
  REQUIRE(ssch_dataset_info_get(ds, &info) == SSCH_OK);
  CHECK(info.n_tokens == 500);
  CHECK(info.n_layers == 2);
  CHECK(info.dim == 16);
  CHECK(info.n_classes == 3);

  float v[16];
  REQUIRE(ssch_dataset_vector(ds, 7, 1, v, 16) == SSCH_OK);
  CHECK(std::memcmp(v, data.embeddings.data() + (7 * 2 + 1) * 16, sizeof v) == 0);
  CHECK(ssch_dataset_vector(ds, 7, 1, v, 8) == SSCH_ERR_INVALID_ARGUMENT);
  CHECK(ssch_dataset_vector(ds, 500, 0, v, 16) == SSCH_ERR_INVALID_ARGUMENT);
  CHECK(std::strlen(ssch_last_error()) > 0);

  Str summary;
  REQUIRE(ssch_dataset_summary(ds, &summary.p) == SSCH_OK);
  CHECK(summary.json()["manifest"]["task_name"] == data.manifest.task_name);
  ssch_dataset_close(ds);

  ssch_dataset* missing = nullptr;
  CHECK(ssch_dataset_open((dir / "nope.ssch").c_str(), &missing) == SSCH_ERR_IO);
  CHECK(missing == nullptr);
  ssch::testing::write_file(dir / "bad.ssch", "XXXX not a store at all, padded out to forty bytes");
  ssch::testing::copy_store(path, dir / "ok.ssch");
  std::filesystem::copy_file(dir / "s.json", dir / "bad.json");
  CHECK(ssch_dataset_open((dir / "bad.ssch").c_str(), &missing) == SSCH_ERR_FORMAT);
  CHECK(std::string(ssch_last_error()).find("unrecognized format") != std::string::npos);

  CHECK(ssch_dataset_write("{", data.embeddings.data(), data.embeddings.size(), data.labels.data(),
                           data.labels.size(), (dir / "x.ssch").c_str()) == SSCH_ERR_FORMAT);
  CHECK(ssch_dataset_open(nullptr, &missing) == SSCH_ERR_INVALID_ARGUMENT);
  CHECK(ssch_dataset_info_get(nullptr, &info) == SSCH_ERR_INVALID_ARGUMENT);
}

TEST_CASE("capi: probes") {
  TempDir dir;
  const auto path = write_with_capi(clusters(2, 2.0), dir / "s.ssch");
  const auto other = write_with_capi(clusters(3, 2.0), dir / "o.ssch");
  ssch_dataset* ds = nullptr;
  ssch_dataset* ods = nullptr;
  REQUIRE(ssch_dataset_open(path.c_str(), &ds) == SSCH_OK);
  REQUIRE(ssch_dataset_open(other.c_str(), &ods) == SSCH_OK);

  ssch_train_config cfg;
  ssch_train_config_default(&cfg);
  CHECK(cfg.learning_rate == 1e-3);
  CHECK(cfg.mc_samples_eval == 8);
  cfg.max_epochs = 10;

  ssch_probe* p = nullptr;
  REQUIRE(ssch_probe_train(ds, "train", ds, "dev", &cfg, &p) == SSCH_OK);
  REQUIRE(ssch_probe_save(p, (dir / "p.bin").c_str()) == SSCH_OK);
  ssch_probe* q = nullptr;
  REQUIRE(ssch_probe_load((dir / "p.bin").c_str(), &q) == SSCH_OK);

  double cog = -1.0;
  REQUIRE(ssch_probe_cog(q, &cog) == SSCH_OK);
  CHECK(cog >= 0.0);
  CHECK(cog <= 1.0);

  Str summary;
  REQUIRE(ssch_probe_summary(q, &summary.p) == SSCH_OK);
  CHECK(summary.json()["alpha"].size() == 2);

  ssch_codelength c{};
  REQUIRE(ssch_probe_codelength(q, ds, "train", 8, 0, &c) == SSCH_OK);
  CHECK(c.codelength == c.data_bits + c.model_bits);
  CHECK(c.data_bits < 400 * std::log2(3.0));
  ssch_codelength again{};
  REQUIRE(ssch_probe_codelength(q, ds, "train", 8, 0, &again) == SSCH_OK);
  CHECK(again.data_bits == c.data_bits);

  Str report;
  REQUIRE(ssch_probe_evaluate(q, ds, "dev", "train", 8, 0, nullptr, &report.p) == SSCH_OK);
  CHECK(report.json()["macro_f1"].get<double>() > 0.5);
  CHECK(ssch_probe_evaluate(q, ds, "dev", "nosuch", 8, 0, nullptr, &report.p) == SSCH_ERR_INVALID_ARGUMENT);

  size_t count = 0;
  double mean = -1.0;
  REQUIRE(ssch_ssa(p, q, nullptr, 0, &count, nullptr) == SSCH_OK);
  CHECK(count == 3);
  double angles[3];
  REQUIRE(ssch_ssa(p, q, angles, 3, &count, &mean) == SSCH_OK);
  CHECK(mean < 1e-2);
  CHECK(ssch_ssa(p, q, angles, 2, &count, &mean) == SSCH_ERR_INVALID_ARGUMENT);

  ssch_probe* r = nullptr;
  REQUIRE(ssch_probe_train(ods, "train", ods, "dev", &cfg, &r) == SSCH_OK);
  REQUIRE(ssch_ssa(p, r, angles, 3, &count, &mean) == SSCH_OK);
  CHECK(mean > 1.0);

  CHECK(ssch_codelength_ratio(50.0, 100.0) == 50.0);
  CHECK(std::isnan(ssch_codelength_ratio(1.0, 0.0)));

  cfg.batch_size = 0;
  ssch_probe* bad = nullptr;
  CHECK(ssch_probe_train(ds, "train", ds, "dev", &cfg, &bad) == SSCH_ERR_INVALID_ARGUMENT);
  CHECK(bad == nullptr);
  ssch_train_config_default(&cfg);
  cfg.learning_rate = 1e300;
  CHECK(ssch_probe_train(ds, "train", ds, "dev", &cfg, &bad) == SSCH_ERR_NUMERIC);
  CHECK(ssch_probe_load((dir / "missing.bin").c_str(), &bad) == SSCH_ERR_IO);

  ssch_probe_free(p);
  ssch_probe_free(q);
  ssch_probe_free(r);
  ssch_dataset_close(ds);
  ssch_dataset_close(ods);
}

TEST_CASE("capi: chronicle") {
  TempDir dir;
  const auto a = write_with_capi(clusters(4, 0.0), dir / "a0.ssch");
  const auto b = write_with_capi(clusters(4, 1.5), dir / "a1.ssch");
  auto j = ssch::testing::chronicle_manifest_json({{"a", {a, b}}}, {0, 5}, {0}, dir / "out",
                                                  {{"max_epochs", 5}});
  ssch::testing::write_file(dir / "m.json", j.dump());

  ssch_chronicle* c = nullptr;
  REQUIRE(ssch_chronicle_run((dir / "m.json").c_str(), 2, &c) == SSCH_OK);
  size_t cells = 0, failures = 0, recomputed = 0;
  REQUIRE(ssch_chronicle_counts(c, &cells, &failures, &recomputed) == SSCH_OK);
  CHECK(cells == 2);
  CHECK(failures == 0);
  CHECK(recomputed == 2);
  REQUIRE(ssch_chronicle_emit(c, "json", (dir / "r").c_str()) == SSCH_OK);
  CHECK(std::filesystem::exists(dir / "r" / "report.json"));
  CHECK(ssch_chronicle_emit(c, "yaml", (dir / "r").c_str()) == SSCH_ERR_INVALID_ARGUMENT);
  ssch_chronicle_free(c);

  ssch_chronicle* loaded = nullptr;
  REQUIRE(ssch_chronicle_load((dir / "out").c_str(), &loaded) == SSCH_OK);
  REQUIRE(ssch_chronicle_counts(loaded, &cells, &failures, &recomputed) == SSCH_OK);
  CHECK(cells == 2);
  REQUIRE(ssch_chronicle_emit(loaded, "csv", (dir / "r").c_str()) == SSCH_OK);
  CHECK(ssch::testing::read_file(dir / "r" / "report.csv") ==
        ssch::testing::read_file(dir / "out" / "report" / "report.csv"));
  ssch_chronicle_free(loaded);

  j["tasks"][0]["stores"]["5"] = (dir / "gone.ssch").string();
  j["output_dir"] = (dir / "out2").string();
  ssch::testing::write_file(dir / "m2.json", j.dump());
  ssch_chronicle* partial = nullptr;
  CHECK(ssch_chronicle_run((dir / "m2.json").c_str(), 1, &partial) == SSCH_ERR_PARTIAL);
  REQUIRE(partial != nullptr);
  REQUIRE(ssch_chronicle_counts(partial, &cells, &failures, &recomputed) == SSCH_OK);
  CHECK(failures == 1);
  ssch_chronicle_free(partial);

  ssch_chronicle* none = nullptr;
  CHECK(ssch_chronicle_run((dir / "absent.json").c_str(), 1, &none) == SSCH_ERR_IO);
  CHECK(ssch_chronicle_load((dir / "absent").c_str(), &none) == SSCH_ERR_IO);
  CHECK(none == nullptr);
}
