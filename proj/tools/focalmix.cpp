// focalmix: dataset generation, training, evaluation and prediction.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "focalmix/focalmix.hpp"

#ifndef FOCALMIX_VERSION
#define FOCALMIX_VERSION "0.1.0"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace focalmix;

namespace {

constexpr const char* kDatasetManifest = "dataset.json";
constexpr const char* kRunManifest = "run_manifest.json";
constexpr const char* kCheckpointFile = "model.ckpt";
constexpr const char* kMetricsFile = "metrics.csv";

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// SOURCE_DATE_EPOCH pins timestamps for reproducible artifacts.
std::string timestamp_utc() {
  std::time_t t = std::time(nullptr);
  if (const char* s = std::getenv("SOURCE_DATE_EPOCH"); s && *s) t = static_cast<std::time_t>(std::strtoll(s, nullptr, 10));
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void make_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec || !fs::is_directory(p)) throw DataError("cannot create directory '" + p.string() + "'");
}

void write_json(const fs::path& p, const json& j) { detail::write_file_atomic(p, j.dump(2) + "\n"); }

std::string fmt_num(double v) {
  if (!std::isfinite(v)) return "";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

// ---- gen-data ---------------------------------------------------------------

struct GenArgs {
  std::string config, out;
  std::optional<int> count_labeled, count_unlabeled, count_test;
  std::optional<std::uint64_t> seed;
};

void write_split(const GenConfig& g, std::uint64_t base, int count, bool keep_labels, const fs::path& dir,
                 json& ids) {
  make_dir(dir);
  std::vector<LabeledScan> scans(static_cast<std::size_t>(count));
  parallel_for(scans.size(), [&](std::size_t i) {
    scans[i] = generate_scan(g, base + i);
    if (!keep_labels) scans[i].boxes.clear();
  });
  ids = json::array();
  for (const auto& s : scans) {
    write_scan(s, dir);
    ids.push_back(s.id);
  }
}

int cmd_gen_data(const GenArgs& a) {
  ExperimentConfig cfg = a.config.empty() ? ExperimentConfig{} : load_experiment_config(a.config);
  if (a.count_labeled) cfg.dataset.labeled = *a.count_labeled;
  if (a.count_unlabeled) cfg.dataset.unlabeled = *a.count_unlabeled;
  if (a.count_test) cfg.dataset.test = *a.count_test;
  if (a.seed) cfg.gen.seed = *a.seed;
  cfg.validate();

  const fs::path out = a.out;
  make_dir(out);
  json ids = json::object();
  write_split(cfg.gen, kLabeledBase, cfg.dataset.labeled, true, out / "labeled", ids["labeled"]);
  write_split(cfg.gen, kUnlabeledBase, cfg.dataset.unlabeled, false, out / "unlabeled", ids["unlabeled"]);
  write_split(cfg.gen, kTestBase, cfg.dataset.test, true, out / "test", ids["test"]);
  if (cfg.dataset.test == 0) std::cerr << "focalmix: warning: count-test is 0, test/ is empty\n";

  write_json(out / kDatasetManifest,
             {{"version", FOCALMIX_VERSION}, {"config", to_json_value(cfg)}, {"scans", ids}});
  return 0;
}

// ---- train ------------------------------------------------------------------

struct TrainArgs {
  std::string config, data, mode = "focalmix", out;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs, steps_per_epoch;
};

std::vector<LabeledScan> load_split(const fs::path& dir) {
  if (!fs::is_directory(dir)) return {};
  return read_scan_dir(dir);
}

void write_metrics(const fs::path& path, const std::vector<EpochMetrics>& log) {
  std::ostringstream os;
  os << "epoch,lr,loss_labeled,loss_unlabeled,CPM_val\n";
  for (const auto& m : log)
    os << m.epoch << ',' << fmt_num(m.lr) << ',' << fmt_num(m.loss_labeled) << ',' << fmt_num(m.loss_unlabeled)
       << ',' << (m.cpm_val ? fmt_num(*m.cpm_val) : std::string()) << '\n';
  detail::write_file_atomic(path, os.str());
}

int cmd_train(const TrainArgs& a) {
  if (a.mode != "supervised" && a.mode != "focalmix") throw UsageError("--mode must be supervised or focalmix");
  const fs::path data = a.data;
  const fs::path manifest_path = data / kDatasetManifest;
  if (!fs::exists(manifest_path)) throw DataError("dataset manifest not found: '" + manifest_path.string() + "'");
  json dataset;
  try {
    dataset = json::parse(detail::read_file(manifest_path));
  } catch (const json::exception& e) {
    throw DataError("bad dataset manifest: " + std::string(e.what()));
  }

  ExperimentConfig cfg;
  if (!a.config.empty()) {
    cfg = load_experiment_config(a.config);
  } else {
    if (!dataset.contains("config")) throw DataError("dataset manifest has no config");
    cfg = experiment_config_from_json(dataset.at("config"));
  }
  if (a.seed) cfg.ssl.seed = *a.seed;
  if (a.epochs) cfg.train.epochs = *a.epochs;
  if (a.steps_per_epoch) cfg.train.steps_per_epoch = *a.steps_per_epoch;
  cfg.validate();

  const auto labeled = load_split(data / "labeled");
  if (labeled.empty()) throw DataError("no labeled scans in '" + (data / "labeled").string() + "'");
  std::vector<LabeledScan> unlabeled;
  if (a.mode == "focalmix") {
    if (!fs::is_directory(data / "unlabeled")) throw DataError("focalmix mode needs '" + (data / "unlabeled").string() + "'");
    unlabeled = read_scan_dir(data / "unlabeled");
    if (unlabeled.empty()) throw DataError("no unlabeled scans in '" + (data / "unlabeled").string() + "'");
    for (auto& s : unlabeled) s.boxes.clear();
  }
  const auto validation = load_split(data / "test");

  const fs::path out = a.out;
  make_dir(out);
  json manifest = {{"version", FOCALMIX_VERSION},
                   {"command", "train"},
                   {"mode", a.mode},
                   {"config", to_json_value(cfg)},
                   {"seeds",
                    {{"data", cfg.gen.seed},
                     {"training", cfg.ssl.seed},
                     {"weight_init", cfg.detector.weight_init_seed}}},
                   {"data", a.data},
                   {"outputs",
                    {{"checkpoint", (fs::path(a.out) / kCheckpointFile).string()},
                     {"metrics", (fs::path(a.out) / kMetricsFile).string()}}},
                   {"started_at", timestamp_utc()},
                   {"finished_at", nullptr}};
  write_json(out / kRunManifest, manifest);

  auto result = train<float>(labeled, unlabeled, cfg.ssl, cfg.detector, cfg.train, validation);
  save_checkpoint(result.state, out / kCheckpointFile);
  write_metrics(out / kMetricsFile, result.log);

  manifest["finished_at"] = timestamp_utc();
  write_json(out / kRunManifest, manifest);
  return 0;
}

// ---- eval / predict ---------------------------------------------------------

struct EvalArgs {
  std::string checkpoint, data, out;
};

int cmd_eval(const EvalArgs& a) {
  const auto state = load_checkpoint<float>(a.checkpoint);
  const auto scans = read_scan_dir(a.data);
  if (scans.empty()) throw DataError("no scans in '" + a.data + "'");
  const auto r = evaluate_model(state, scans, DecodeParams{});

  const fs::path out = a.out;
  make_dir(out);
  std::ostringstream csv;
  write_froc_csv(csv, r.curve);
  detail::write_file_atomic(out / "froc.csv", csv.str());
  write_json(out / "cpm.json", cpm_summary(r.curve));
  std::ostringstream dets;
  for (std::size_t i = 0; i < scans.size(); ++i) write_detections_jsonl(dets, scans[i].id, r.detections[i]);
  detail::write_file_atomic(out / "detections.jsonl", dets.str());
  std::cout << fmt_num(r.cpm) << '\n';
  return 0;
}

struct PredictArgs {
  std::string checkpoint, scan, out;
  double threshold = 0.5;
};

int cmd_predict(const PredictArgs& a) {
  const auto state = load_checkpoint<float>(a.checkpoint);
  const auto scan = read_scan(a.scan);
  auto dets = detect(state, scan.volume, DecodeParams{});
  std::erase_if(dets, [&](const Detection& d) { return d.score < a.threshold; });
  std::ostringstream os;
  write_detections_jsonl(os, scan.id, dets);
  if (a.out.empty()) {
    std::cout << os.str();
  } else {
    detail::write_file_atomic(a.out, os.str());
  }
  return 0;
}

int report(const char* kind, int code, const std::string& msg) {
  std::cerr << json{{"error", kind}, {"exit_code", code}, {"message", msg}}.dump() << '\n';
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semi-supervised 3D lesion detection on synthetic volumes"};
  app.set_version_flag("--version", std::string(FOCALMIX_VERSION));
  app.require_subcommand(1);

  GenArgs ga;
  auto* gen = app.add_subcommand("gen-data", "Generate labeled/, unlabeled/ and test/ synthetic scans");
  gen->add_option("--config", ga.config, "Experiment config JSON")->check(CLI::ExistingFile);
  gen->add_option("--out", ga.out, "Output dataset directory")->required();
  gen->add_option("--count-labeled", ga.count_labeled)->check(CLI::NonNegativeNumber);
  gen->add_option("--count-unlabeled", ga.count_unlabeled)->check(CLI::NonNegativeNumber);
  gen->add_option("--count-test", ga.count_test)->check(CLI::NonNegativeNumber);
  gen->add_option("--seed", ga.seed, "Generator seed");

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Train a detector");
  tr->add_option("--config", ta.config, "Experiment config JSON (default: the dataset's)")->check(CLI::ExistingFile);
  tr->add_option("--data", ta.data, "Dataset directory")->required();
  tr->add_option("--mode", ta.mode)->check(CLI::IsMember({"supervised", "focalmix"}))->capture_default_str();
  tr->add_option("--out", ta.out, "Run output directory")->required();
  tr->add_option("--seed", ta.seed, "Training seed");
  tr->add_option("--epochs", ta.epochs)->check(CLI::PositiveNumber);
  tr->add_option("--steps-per-epoch", ta.steps_per_epoch)->check(CLI::PositiveNumber);

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "FROC and CPM of a checkpoint on annotated scans");
  ev->add_option("--checkpoint", ea.checkpoint)->required()->check(CLI::ExistingFile);
  ev->add_option("--data", ea.data, "Directory of annotated scans")->required();
  ev->add_option("--out", ea.out)->required();

  PredictArgs pa;
  auto* pr = app.add_subcommand("predict", "Detections for one scan as JSON lines");
  pr->add_option("--checkpoint", pa.checkpoint)->required()->check(CLI::ExistingFile);
  pr->add_option("--scan", pa.scan)->required();
  pr->add_option("--out", pa.out, "Output file (default: stdout)");
  pr->add_option("--threshold", pa.threshold, "Display threshold")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report("usage", 1, e.what());
  }

  try {
    if (*gen) return cmd_gen_data(ga);
    if (*tr) return cmd_train(ta);
    if (*ev) return cmd_eval(ea);
    if (*pr) return cmd_predict(pa);
  } catch (const UsageError& e) {
    return report("usage", 1, e.what());
  } catch (const ConfigError& e) {
    return report("config", 1, e.what());
  } catch (const DataError& e) {
    return report("data", 2, e.what());
  } catch (const DivergenceError& e) {
    return report("divergence", 3, e.what());
  } catch (const ContractError& e) {
    return report("contract", 1, e.what());
  } catch (const std::exception& e) {
    return report("internal", 2, e.what());
  }
  return 1;
}
