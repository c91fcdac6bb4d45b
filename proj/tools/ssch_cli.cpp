// ssch command-line interface. Talks to the library only through the C API.
//
// Exit codes: 0 success, 1 validation or I/O error, 2 chronicle finished with
// failed cells.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "ssch/ssch.h"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitPartial = 2;

struct DatasetDeleter {
  void operator()(ssch_dataset* p) const { ssch_dataset_close(p); }
};
struct ProbeDeleter {
  void operator()(ssch_probe* p) const { ssch_probe_free(p); }
};
struct ChronicleDeleter {
  void operator()(ssch_chronicle* p) const { ssch_chronicle_free(p); }
};
struct StringDeleter {
  void operator()(char* p) const { ssch_string_free(p); }
};
using DatasetPtr = std::unique_ptr<ssch_dataset, DatasetDeleter>;
using ProbePtr = std::unique_ptr<ssch_probe, ProbeDeleter>;
using ChroniclePtr = std::unique_ptr<ssch_chronicle, ChronicleDeleter>;
using StringPtr = std::unique_ptr<char, StringDeleter>;

class Failure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void check(ssch_status st) {
  if (st != SSCH_OK) throw Failure(ssch_last_error());
}

DatasetPtr open_dataset(const std::string& path) {
  ssch_dataset* ds = nullptr;
  check(ssch_dataset_open(path.c_str(), &ds));
  return DatasetPtr(ds);
}

ProbePtr load_probe(const std::string& path) {
  ssch_probe* p = nullptr;
  check(ssch_probe_load(path.c_str(), &p));
  return ProbePtr(p);
}

std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Variational MDL probing and subspace-angle analysis of layered embeddings"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(ssch_version()));

  // ingest
  std::string ingest_path;
  auto* ingest = app.add_subcommand("ingest", "Validate a store and print its summary");
  ingest->add_option("store", ingest_path, "Store file (.ssch)")->required();

  // train
  ssch_train_config cfg;
  ssch_train_config_default(&cfg);
  std::string train_store, dev_store, train_split = "train", dev_split = "dev", train_out;
  auto* train = app.add_subcommand("train", "Train a single probe");
  train->add_option("--train-store", train_store, "Store holding the training split")->required();
  train->add_option("--dev-store", dev_store, "Store holding the dev split (default: train store)");
  train->add_option("--train-split", train_split, "Training split name")->capture_default_str();
  train->add_option("--dev-split", dev_split, "Dev split name")->capture_default_str();
  train->add_option("--seed", cfg.seed, "Seed")->capture_default_str();
  train->add_option("--out", train_out, "Output probe file")->required();
  train->add_option("--learning-rate", cfg.learning_rate)->capture_default_str();
  train->add_option("--adam-beta1", cfg.adam_beta1)->capture_default_str();
  train->add_option("--adam-beta2", cfg.adam_beta2)->capture_default_str();
  train->add_option("--weight-decay", cfg.weight_decay)->capture_default_str();
  train->add_option("--batch-size", cfg.batch_size)->capture_default_str();
  train->add_option("--max-epochs", cfg.max_epochs)->capture_default_str();
  train->add_option("--patience", cfg.patience)->capture_default_str();
  train->add_option("--mc-samples-train", cfg.mc_samples_train)->capture_default_str();
  train->add_option("--mc-samples-eval", cfg.mc_samples_eval)->capture_default_str();
  train->add_option("--kl-weight", cfg.kl_weight, "Diagnostic KL scale")->capture_default_str();

  // codelength
  std::string cl_probe, cl_store, cl_split = "train", cl_f1_split = "dev", cl_groups;
  std::uint64_t cl_mc = 8, cl_seed = 0;
  double cl_control = 0.0;
  auto* codelength = app.add_subcommand("codelength", "Codelength and F1 of a trained probe");
  codelength->add_option("--probe", cl_probe, "Probe file")->required();
  codelength->add_option("--store", cl_store, "Store file")->required();
  codelength->add_option("--split", cl_split, "Split transmitted for the codelength")
      ->capture_default_str();
  codelength->add_option("--f1-split", cl_f1_split, "Split scored for F1")->capture_default_str();
  codelength->add_option("--mc-samples", cl_mc)->capture_default_str();
  codelength->add_option("--seed", cl_seed)->capture_default_str();
  codelength->add_option("--groups", cl_groups, "Class-to-group map (JSON)");
  codelength->add_option("--control-bits", cl_control,
                         "Control codelength; adds codelength_ratio to the output");

  // ssa
  std::string ssa_a, ssa_b;
  auto* ssa = app.add_subcommand("ssa", "Principal subspace angles between two probes");
  ssa->add_option("a", ssa_a, "First probe file")->required();
  ssa->add_option("b", ssa_b, "Second probe file")->required();

  // cog
  std::string cog_probe;
  auto* cog = app.add_subcommand("cog", "Center of gravity of a probe's layer weights");
  cog->add_option("probe", cog_probe, "Probe file")->required();

  // chronicle
  auto* chronicle = app.add_subcommand("chronicle", "Probing grids over checkpoints");
  chronicle->require_subcommand(1);
  std::string run_manifest;
  unsigned run_workers = 0;
  auto* run = chronicle->add_subcommand("run", "Run (or resume) a chronicle manifest");
  run->add_option("manifest", run_manifest, "Chronicle manifest (JSON)")->required();
  run->add_option("--workers", run_workers, "Worker threads (default: SSCH_WORKERS or all cores)");
  std::string report_result, report_format = "csv", report_out;
  auto* report = chronicle->add_subcommand("report", "Emit report tables from a chronicle result");
  report->add_option("result", report_result, "Output directory or result.json")->required();
  report->add_option("--format", report_format, "csv or json")
      ->check(CLI::IsMember({"csv", "json"}))
      ->capture_default_str();
  report->add_option("--out", report_out, "Destination directory (default: <result>/report)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitError;
  }

  try {
    if (*ingest) {
      auto ds = open_dataset(ingest_path);
      char* js = nullptr;
      check(ssch_dataset_summary(ds.get(), &js));
      StringPtr s(js);
      std::cout << s.get() << "\n";
      return kExitOk;
    }

    if (*train) {
      auto tds = open_dataset(train_store);
      auto dds = dev_store.empty() ? DatasetPtr{} : open_dataset(dev_store);
      ssch_probe* p = nullptr;
      check(ssch_probe_train(tds.get(), train_split.c_str(), dds ? dds.get() : tds.get(),
                             dev_split.c_str(), &cfg, &p));
      ProbePtr probe(p);
      check(ssch_probe_save(probe.get(), train_out.c_str()));
      char* js = nullptr;
      check(ssch_probe_summary(probe.get(), &js));
      StringPtr s(js);
      std::cout << s.get() << "\n";
      return kExitOk;
    }

    if (*codelength) {
      auto probe = load_probe(cl_probe);
      auto ds = open_dataset(cl_store);
      char* js = nullptr;
      check(ssch_probe_evaluate(probe.get(), ds.get(), cl_f1_split.c_str(), cl_split.c_str(),
                                cl_mc, cl_seed, cl_groups.empty() ? nullptr : cl_groups.c_str(),
                                &js));
      StringPtr s(js);
      auto j = nlohmann::ordered_json::parse(s.get());
      if (codelength->count("--control-bits")) {
        if (!(cl_control > 0.0)) throw Failure("--control-bits must be positive");
        j["codelength_ratio"] = ssch_codelength_ratio(j["codelength"].get<double>(), cl_control);
      }
      std::cout << j.dump(2) << "\n";
      return kExitOk;
    }

    if (*ssa) {
      auto a = load_probe(ssa_a);
      auto b = load_probe(ssa_b);
      std::size_t count = 0;
      double mean = 0.0;
      check(ssch_ssa(a.get(), b.get(), nullptr, 0, &count, &mean));
      std::vector<double> angles(count);
      check(ssch_ssa(a.get(), b.get(), angles.data(), angles.size(), &count, &mean));
      std::cout << "{\n  \"angles\": [";
      for (std::size_t i = 0; i < angles.size(); ++i)
        std::cout << (i ? ", " : "") << fixed6(angles[i]);
      std::cout << "],\n  \"mean_angle\": " << fixed6(mean) << "\n}\n";
      return kExitOk;
    }

    if (*cog) {
      auto probe = load_probe(cog_probe);
      double v = 0.0;
      check(ssch_probe_cog(probe.get(), &v));
      std::cout << fixed6(v) << "\n";
      return kExitOk;
    }

    if (*run) {
      ssch_chronicle* c = nullptr;
      const ssch_status st = ssch_chronicle_run(run_manifest.c_str(), run_workers, &c);
      ChroniclePtr result(c);
      if (st != SSCH_OK && st != SSCH_ERR_PARTIAL) throw Failure(ssch_last_error());
      std::size_t cells = 0, failures = 0, recomputed = 0;
      check(ssch_chronicle_counts(result.get(), &cells, &failures, &recomputed));
      std::cout << "cells: " << cells << ", failed: " << failures
                << ", computed this run: " << recomputed << "\n";
      return failures > 0 ? kExitPartial : kExitOk;
    }

    if (*report) {
      ssch_chronicle* c = nullptr;
      check(ssch_chronicle_load(report_result.c_str(), &c));
      ChroniclePtr result(c);
      std::string dest = report_out;
      if (dest.empty()) {
        std::filesystem::path p(report_result);
        if (!std::filesystem::is_directory(p)) p = p.parent_path();
        dest = (p / "report").string();
      }
      check(ssch_chronicle_emit(result.get(), report_format.c_str(), dest.c_str()));
      std::cout << dest << "\n";
      return kExitOk;
    }
  } catch (const Failure& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitError;
  }
  return kExitOk;
}
