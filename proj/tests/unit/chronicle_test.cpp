#include <cmath>
#include <fstream>
#include <sstream>

#include "chronicle.hpp"
#include "doctest.h"
#include "error.hpp"
#include "probe_io.hpp"
#include "synthetic.hpp"

using namespace ssch;
using namespace ssch::chronicle;
using testing::TempDir;

namespace {

testing::StoreData clusters(std::uint64_t mean_seed, double strength = 1.0,
                            std::uint64_t n_train = 600, std::uint64_t n_dev = 200) {
  testing::ClusterSpec spec;
  spec.strength = {0.5 * strength, strength};
  spec.n_train = n_train;
  spec.n_dev = n_dev;
  spec.mean_seed = mean_seed;
  spec.noise_seed = mean_seed + 1000;
  return testing::make_clusters(spec);
}

// Class signal confined to dims [begin, begin + 8) of a 16-dim space.
testing::StoreData block_store(Eigen::Index begin, std::uint64_t seed) {
  testing::ClusterSpec spec;
  spec.n_train = 4000;
  spec.n_dev = 1000;
  spec.strength = {0.0};
  auto d = testing::make_clusters(spec);
  Rng mr(seed), nr(seed + 7);
  Eigen::MatrixXd m(16, 3);
  for (Eigen::Index k = 0; k < 3; ++k)
    for (Eigen::Index i = 0; i < 16; ++i) m(i, k) = mr.normal();
  for (std::size_t t = 0; t < d.labels.size(); ++t)
    for (Eigen::Index i = 0; i < 16; ++i) {
      const double mu = i >= begin && i < begin + 8 ? 1.5 * m(i, d.labels[t]) : 0.0;
      d.embeddings[t * 16 + static_cast<std::size_t>(i)] = static_cast<float>(mu + nr.normal());
    }
  return d;
}

ChronicleManifest manifest_for(const TempDir& dir,
                               const std::vector<std::pair<std::string, std::vector<std::filesystem::path>>>& tasks,
                               const std::vector<std::int64_t>& steps,
                               const std::vector<std::uint64_t>& seeds,
                               const std::string& out = "out") {
  return ChronicleManifest::from_json(
      testing::chronicle_manifest_json(tasks, steps, seeds, dir / out, {{"max_epochs", 10}}),
      dir.path());
}

std::vector<std::string> read_lines(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  return lines;
}

std::map<std::string, std::string> output_files(const std::filesystem::path& out) {
  std::map<std::string, std::string> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(out))
    if (e.is_regular_file() && e.path().filename() != "journal.jsonl")
      files[std::filesystem::relative(e.path(), out).string()] = testing::read_file(e.path());
  return files;
}

}  // namespace

TEST_CASE("chronicle: manifest") {
  TempDir dir;
  const auto s0 = testing::write_store(clusters(1), dir / "a0.ssch");
  const auto s1 = testing::write_store(clusters(2), dir / "a1.ssch");
  auto j = testing::chronicle_manifest_json({{"a", {"a0.ssch", "a1.ssch"}}}, {0, 10}, {0, 1},
                                            "out", {{"batch_size", 32}});
  testing::write_file(dir / "m.json", j.dump());
  const auto m = ChronicleManifest::load(dir / "m.json");
  CHECK(m.tasks.size() == 1);
  CHECK(m.tasks[0].stores[1] == dir / "a1.ssch");
  CHECK(m.output_dir == dir / "out");
  CHECK(m.train_config.batch_size == 32);
  CHECK(m.checkpoints[1].label == "step10");
  CHECK(m.control_step == 0);
  CHECK_NOTHROW(m.validate());
  (void)s0;
  (void)s1;

  auto bad = m;
  bad.checkpoints[1].step = 0;
  CHECK_THROWS_WITH(bad.validate(), doctest::Contains("strictly increasing"));
  bad = m;
  bad.control_step = 5;
  CHECK_THROWS_WITH(bad.validate(), doctest::Contains("control step"));
  bad = m;
  bad.seeds = {1, 1};
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = m;
  bad.tasks.push_back(bad.tasks[0]);
  CHECK_THROWS_WITH(bad.validate(), doctest::Contains("duplicate task"));

  auto j2 = j;
  j2["tasks"][0]["stores"].erase("10");
  CHECK_THROWS_WITH(ChronicleManifest::from_json(j2, dir.path()), doctest::Contains("no store for step 10"));
  CHECK_THROWS_AS(ChronicleManifest::load(dir / "nope.json"), Error);
  testing::write_file(dir / "broken.json", "{");
  CHECK_THROWS_AS(ChronicleManifest::load(dir / "broken.json"), Error);
}

TEST_CASE("chronicle: minimal grid") {
  TempDir dir;
  const auto s0 = testing::write_store(clusters(1, 0.0), dir / "a0.ssch");
  const auto s1 = testing::write_store(clusters(1, 1.5), dir / "a1.ssch");
  const auto m = manifest_for(dir, {{"a", {s0, s1}}}, {0, 10}, {3});
  const auto r = run_chronicle(m, {1, true});

  REQUIRE(r.cells.size() == 2);
  CHECK(r.failures() == 0);
  CHECK(r.recomputed == 2);
  const CellResult* c0 = r.find("a", 0, 3);
  const CellResult* c1 = r.find("a", 10, 3);
  REQUIRE(c0);
  REQUIRE(c1);
  CHECK(c1->ok);
  CHECK(c1->report.macro_f1 > c0->report.macro_f1);
  CHECK(*r.codelength_ratio(*c0) == doctest::Approx(100.0));
  CHECK(*r.codelength_ratio(*c1) < 100.0);
  CHECK(std::filesystem::exists(dir / "out" / c1->probe_file));
  CHECK(c1->subspace);
  CHECK(c1->alpha.size() == 2);

  const auto series = stepwise_ssa(r, "a", 3);
  REQUIRE(series.size() == 1);
  CHECK(series[0].from_step == 0);
  CHECK(series[0].to_step == 10);

  CHECK(read_lines(dir / "out" / "journal.jsonl").size() == 2);
  const auto csv = read_lines(dir / "out" / "report" / "report.csv");
  REQUIRE_FALSE(csv.empty());
  CHECK(csv[0] == "task,step,seed,metric,value");
  CHECK(std::find(csv.begin(), csv.end(), "a,10,3,stepwise_ssa_from_step,0.000000") != csv.end());
  const auto js = nlohmann::json::parse(testing::read_file(dir / "out" / "report" / "report.json"));
  CHECK(js["schema_version"] == 1);
  CHECK(js["rows"].size() == csv.size() - 1);
  CHECK(js["stepwise_ssa"].size() == 1);

  const auto loaded = ChronicleResult::load(dir / "out");
  CHECK(loaded.to_json().dump() == r.to_json().dump());
  CHECK(loaded.find("a", 10, 3)->subspace->matrix == c1->subspace->matrix);
  CHECK_THROWS_AS(stepwise_ssa(r, "missing", 3), Error);
}

TEST_CASE("chronicle: stepwise series") {
  TempDir dir;
  std::vector<std::filesystem::path> stores;
  for (int k = 0; k < 3; ++k)
    stores.push_back(testing::write_store(clusters(300 + k), dir / ("r" + std::to_string(k) + ".ssch")));
  testing::copy_store(stores[2], dir / "r3.ssch");
  stores.push_back(dir / "r3.ssch");
  const auto r = run_chronicle(manifest_for(dir, {{"r", stores}}, {0, 1, 2, 3}, {0}), {});
  const auto series = stepwise_ssa(r, "r", 0);
  REQUIRE(series.size() == 3);
  // Random subspaces of R^16 with 3 columns: the 0.1% quantile of the mean
  // angle over 1e5 offline Monte-Carlo pairs is 49.6 degrees.
  CHECK(series[0].angles.mean_angle > 49.6);
  CHECK(series[1].angles.mean_angle > 49.6);
  CHECK(series[2].angles.mean_angle < 1e-4);
}

TEST_CASE("chronicle: cross-task matrices") {
  TempDir dir;
  const auto x = testing::write_store(block_store(0, 5), dir / "x.ssch");
  const auto y = testing::write_store(block_store(8, 6), dir / "y.ssch");
  testing::copy_store(x, dir / "x2.ssch");
  const auto m = ChronicleManifest::from_json(
      testing::chronicle_manifest_json({{"x", {x}}, {"y", {y}}, {"x2", {dir / "x2.ssch"}}}, {0}, {0},
                                       dir / "out"),
      dir.path());
  const auto r = run_chronicle(m, {});
  const auto mat = cross_task_ssa(r, 0, 0);
  REQUIRE(mat.tasks.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(std::abs(*mat.mean_angles[i][i]) < 1e-4);
    for (std::size_t j = 0; j < 3; ++j) CHECK(std::abs(*mat.mean_angles[i][j] - *mat.mean_angles[j][i]) < 1e-8);
  }
  CHECK(*mat.mean_angles[0][2] < 1e-4);
  CHECK(*mat.mean_angles[0][1] > 80.0);
  CHECK(*mat.mean_angles[1][2] > 80.0);

  const auto lines = read_lines(dir / "out" / "report" / "cross_task_step0.csv");
  REQUIRE(lines.size() == 4);
  CHECK(lines[0] == "task,x,y,x2");
  CHECK(lines[1].rfind("x,0.000000,", 0) == 0);
}

TEST_CASE("chronicle: cross-seed summaries") {
  TempDir dir;
  const auto s = testing::write_store(clusters(9, 1.5), dir / "s.ssch");
  const auto r = run_chronicle(manifest_for(dir, {{"t", {s}}}, {0}, {0, 1, 2}), {});
  const auto summary = cross_seed_ssa(r, "t", 0);
  CHECK(summary.pairs == 3);
  CHECK(summary.stddev >= 0.0);

  ChronicleResult two = r;
  two.seeds = {0, 1};
  two.cells.pop_back();
  const auto pair = cross_seed_ssa(two, "t", 0);
  CHECK(pair.pairs == 1);
  CHECK(pair.stddev == 0.0);

  ChronicleResult dup = two;
  dup.cells[1].subspace = dup.cells[0].subspace;
  CHECK(cross_seed_ssa(dup, "t", 0).mean < 1e-4);

  ChronicleResult one = two;
  one.cells[1].ok = false;
  CHECK_THROWS_AS(cross_seed_ssa(one, "t", 0), Error);
}

TEST_CASE("chronicle: failures isolate to cells") {
  TempDir dir;
  const auto s0 = testing::write_store(clusters(1), dir / "a0.ssch");
  auto m = manifest_for(dir, {{"a", {s0, dir / "missing.ssch"}}}, {0, 10}, {0, 1});
  const auto r = run_chronicle(m, {2, true});
  CHECK(r.cells.size() == 4);
  CHECK(r.failures() == 2);
  const CellResult* bad = r.find("a", 10, 1);
  REQUIRE(bad);
  CHECK_FALSE(bad->ok);
  CHECK(bad->error.find("missing.ssch") != std::string::npos);
  CHECK_THROWS_AS(stepwise_ssa(r, "a", 0), Error);
  const auto csv = testing::read_file(dir / "out" / "report" / "report.csv");
  CHECK(csv.find("a,10,1,failed,1.000000") != std::string::npos);

  // Supplying the store later recomputes exactly the failed cells.
  testing::write_store(clusters(2), dir / "missing.ssch");
  const auto again = run_chronicle(m, {2, true});
  CHECK(again.failures() == 0);
  CHECK(again.recomputed == 2);
}

TEST_CASE("chronicle: resume and determinism") {
  TempDir dir;
  std::vector<std::filesystem::path> stores;
  for (int k = 0; k < 3; ++k)
    stores.push_back(testing::write_store(clusters(40 + k, 0.5 * k), dir / ("s" + std::to_string(k) + ".ssch")));
  std::vector<std::filesystem::path> other;
  for (int k = 0; k < 3; ++k)
    other.push_back(testing::write_store(clusters(60 + k, 0.5 * k), dir / ("o" + std::to_string(k) + ".ssch")));
  const std::vector<std::pair<std::string, std::vector<std::filesystem::path>>> tasks = {
      {"s", stores}, {"o", other}};

  const auto serial = run_chronicle(manifest_for(dir, tasks, {0, 5, 9}, {0, 1}, "serial"), {1, true});
  const auto reference = output_files(dir / "serial");
  CHECK(serial.recomputed == 12);

  SUBCASE("parallel equals serial") {
    run_chronicle(manifest_for(dir, tasks, {0, 5, 9}, {0, 1}, "parallel"), {4, true});
    CHECK(output_files(dir / "parallel") == reference);
  }
  SUBCASE("unchanged rerun reuses everything") {
    const auto r = run_chronicle(manifest_for(dir, tasks, {0, 5, 9}, {0, 1}, "serial"), {1, true});
    CHECK(r.recomputed == 0);
    CHECK(output_files(dir / "serial") == reference);
  }
  SUBCASE("deleting the last journal line recomputes one cell") {
    auto lines = read_lines(dir / "serial" / "journal.jsonl");
    REQUIRE(lines.size() == 12);
    lines.pop_back();
    std::ofstream out(dir / "serial" / "journal.jsonl", std::ios::trunc);
    for (const auto& l : lines) out << l << '\n';
    out.close();
    const auto r = run_chronicle(manifest_for(dir, tasks, {0, 5, 9}, {0, 1}, "serial"), {1, true});
    CHECK(r.recomputed == 1);
    CHECK(output_files(dir / "serial") == reference);
  }
  SUBCASE("torn journal line and missing probe") {
    {
      std::ofstream out(dir / "serial" / "journal.jsonl", std::ios::app);
      out << "{\"task\": \"s\", \"st";
    }
    std::filesystem::remove(dir / "serial" / serial.cells[3].probe_file);
    const auto r = run_chronicle(manifest_for(dir, tasks, {0, 5, 9}, {0, 1}, "serial"), {3, true});
    CHECK(r.recomputed == 1);
    CHECK(output_files(dir / "serial") == reference);
  }
  SUBCASE("changed config recomputes") {
    auto j = testing::chronicle_manifest_json(tasks, {0, 5, 9}, {0, 1}, dir / "serial", {{"max_epochs", 11}});
    const auto r = run_chronicle(ChronicleManifest::from_json(j, dir.path()), {});
    CHECK(r.recomputed == 12);
  }
  SUBCASE("re-emission is byte identical") {
    const auto loaded = ChronicleResult::load(dir / "serial" / "result.json");
    emit_report(loaded, ReportFormat::Csv, dir / "again");
    emit_report(loaded, ReportFormat::Json, dir / "again");
    for (const char* name : {"report.csv", "report.json", "cross_task_step5.csv"})
      CHECK(testing::read_file(dir / "again" / name) == reference.at(std::string("report/") + name));
  }
}

TEST_CASE("chronicle: control pairing uses the same seed") {
  TempDir dir;
  const auto s0 = testing::write_store(clusters(1, 0.0), dir / "a0.ssch");
  const auto s1 = testing::write_store(clusters(1, 1.0), dir / "a1.ssch");
  const auto r = run_chronicle(manifest_for(dir, {{"a", {s0, s1}}}, {0, 10}, {0, 1}), {});
  for (std::uint64_t seed : {0u, 1u}) {
    const auto* c = r.find("a", 10, seed);
    const auto* control = r.find("a", 0, seed);
    CHECK(*r.codelength_ratio(*c) == doctest::Approx(100.0 * c->report.codelength / control->report.codelength));
  }
  ChronicleResult broken = r;
  broken.cells[0].ok = false;
  CHECK_FALSE(broken.codelength_ratio(*broken.find("a", 10, 0)));
}

TEST_CASE("chronicle: group maps flow into reports") {
  TempDir dir;
  const auto s = testing::write_store(clusters(3, 1.5), dir / "s.ssch");
  testing::write_file(dir / "g.json", R"({"C0": "G01", "C1": "G01"})");
  auto j = testing::chronicle_manifest_json({{"t", {s}}}, {0}, {0}, dir / "out", {{"max_epochs", 5}});
  j["tasks"][0]["group_map"] = "g.json";
  const auto r = run_chronicle(ChronicleManifest::from_json(j, dir.path()), {});
  REQUIRE(r.cells[0].ok);
  REQUIRE(r.cells[0].report.grouped_f1);
  CHECK(r.cells[0].report.grouped_f1->front().first == "G01");
  CHECK(testing::read_file(dir / "out" / "report" / "report.csv").find("group_f1:G01") != std::string::npos);

  testing::write_file(dir / "g.json", R"({"C9": "G"})");
  const auto bad = run_chronicle(ChronicleManifest::from_json(j, dir.path()), {});
  CHECK(bad.failures() == 1);
  CHECK(bad.cells[0].error.find("unknown class") != std::string::npos);
}

TEST_CASE("chronicle: report formats") {
  CHECK(parse_report_format("csv") == ReportFormat::Csv);
  CHECK(parse_report_format("json") == ReportFormat::Json);
  CHECK_THROWS_AS(parse_report_format("xml"), Error);
  CHECK_THROWS_AS(emit_report(ChronicleResult{}, ReportFormat::Csv, "unused"), Error);
}
