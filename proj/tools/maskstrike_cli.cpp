// Command-line front end: dataset generation, detector training, attack runs
// and reporting.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/spdlog.h>

#include "maskstrike/runner.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace maskstrike;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;  // key.path=json-value
  bool verbose = false;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "JSON configuration file");
  app->add_option("--seed", c.seed, "Global seed");
  app->add_option("--set", c.overrides,
                  "Override a config entry, e.g. --set eval.targets_per_image=3")
      ->take_all();
  app->add_flag("-v,--verbose", c.verbose, "Log progress");
}

json load_config(const Common& c) {
  json j = c.config.empty() ? json::object() : read_json_file(c.config);
  for (const std::string& o : c.overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw Error("--set expects key=value, got '" + o + "'");
    std::string key = o.substr(0, eq);
    const std::string raw = o.substr(eq + 1);
    json value;
    try {
      value = json::parse(raw);
    } catch (const json::exception&) {
      value = raw;
    }
    std::string pointer = "/" + key;
    for (char& ch : pointer)
      if (ch == '.') ch = '/';
    j[json::json_pointer(pointer)] = value;
  }
  return j;
}

ExperimentConfig experiment_from(const json& j, const Common& c) {
  ExperimentConfig cfg;
  from_json(j, cfg);
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

int cmd_generate(const Common& c, const std::string& out) {
  const json j = load_config(c);
  DatasetConfig d;
  if (j.contains("dataset")) from_json(j.at("dataset"), d);
  if (c.seed) d.seed = *c.seed;
  const Dataset data = generate_dataset(d);
  write_dataset(data, out);
  spdlog::info("wrote {} scenes to {}", data.images.size(), out);
  return 0;
}

int cmd_train(const Common& c, std::string out) {
  const json j = load_config(c);
  DatasetConfig d;
  TrainConfig t;
  DetectorConfig det;
  if (j.contains("dataset")) from_json(j.at("dataset"), d);
  if (j.contains("training")) from_json(j.at("training"), t);
  if (j.contains("detector")) from_json(j.at("detector"), det);
  if (c.verbose) t.verbose = true;
  const std::uint64_t seed = c.seed.value_or(j.value("seed", std::uint64_t{0}));
  if (out.empty()) out = j.value("weights", std::string("mini_detector.bin"));
  try {
    const MiniDetectorWeights w = train_mini_detector(d, t, seed, det);
    w.save(out);
    spdlog::info("held-out mAP {:.4f}; weights written to {}", w.metadata.heldout_map, out);
    return 0;
  } catch (const TrainingError& e) {
    const std::string partial = out + ".below-target";
    e.weights().save(partial);
    spdlog::error("{} (weights kept at {})", e.what(), partial);
    return 2;
  }
}

int cmd_attack(const Common& c, const std::string& weights, const std::string& out) {
  json j = load_config(c);
  if (!weights.empty()) j["weights"] = weights;
  if (!out.empty()) j["output_dir"] = out;
  const ExperimentConfig cfg = experiment_from(j, c);
  const RunManifest m = run_experiment(cfg);
  std::cout << metrics_markdown(aggregate_records(read_records(m.records), cfg.controls.resize_scales));
  spdlog::info("{} records in {}", m.record_count, m.records.string());
  return 0;
}

fs::path run_dir(const Common& c, const std::string& out) {
  if (!out.empty()) return out;
  const ExperimentConfig cfg = experiment_from(load_config(c), c);
  return resolve_output_dir(cfg.output_dir);
}

int cmd_evaluate(const Common& c, const std::string& out, const std::string& weights) {
  if (!weights.empty()) {
    const json j = load_config(c);
    DatasetConfig d;
    if (j.contains("dataset")) from_json(j.at("dataset"), d);
    if (c.seed) d.seed = *c.seed;
    const MiniDetector det = MiniDetector::load(weights);
    std::printf("detection mAP@0.5 on %d scenes: %.4f\n", d.n_scenes, detection_map(det, d));
    return 0;
  }
  const RunManifest m = RunManifest::load(run_dir(c, out));
  const std::vector<AttackRecord> records = read_records(m.records);
  if (records.empty()) throw Error("no records in " + m.records.string());
  const MetricsReport report = aggregate_records(
      records, m.config.at("eval").at("resize_scales").get<std::vector<double>>());
  std::ofstream(m.metrics_csv, std::ios::binary) << metrics_csv(report);
  std::ofstream(m.metrics_markdown, std::ios::binary) << metrics_markdown(report);
  std::ofstream(m.metrics_json, std::ios::binary) << metrics_json(report).dump(2) << '\n';
  std::cout << metrics_markdown(report);
  return 0;
}

int cmd_caption(const Common& c, const std::string& out) {
  const RunManifest m = RunManifest::load(run_dir(c, out));
  const std::string csv = caption_csv(caption_scores(read_records(m.records)));
  std::ofstream(m.captions_csv, std::ios::binary) << csv;
  std::cout << csv;
  return 0;
}

int cmd_report(const Common& c, const std::string& out, int triptychs) {
  const RunManifest m = RunManifest::load(run_dir(c, out));
  ReportOptions opts;
  opts.triptychs_per_variant = triptychs;
  for (const fs::path& p : render_report(m, opts)) std::cout << p.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mask-restricted adversarial attacks on a two-stage detector"};
  app.require_subcommand(1);
  app.set_version_flag("--version", version_string());

  Common common;
  std::string out, weights;
  int triptychs = 3;

  auto* gen = app.add_subcommand("generate-data", "Render a synthetic scene dataset");
  add_common(gen, common);
  gen->add_option("--out", out, "Output directory")->required();

  auto* train = app.add_subcommand("train-detector", "Train the bundled mini-detector");
  add_common(train, common);
  train->add_option("--out", out, "Weights file");

  auto* attack = app.add_subcommand("attack", "Run attacks and aggregate metrics");
  add_common(attack, common);
  attack->add_option("--weights", weights, "Detector weights");
  attack->add_option("--out", out, "Run directory");

  auto* eval = app.add_subcommand("evaluate", "Recompute metric tables from run records");
  add_common(eval, common);
  eval->add_option("--out", out, "Run directory");
  eval->add_option("--weights", weights, "Score these weights on the configured dataset instead");

  auto* cap = app.add_subcommand("caption-eval", "Caption-overlap metrics from run records");
  add_common(cap, common);
  cap->add_option("--out", out, "Run directory");

  auto* rep = app.add_subcommand("report", "Render histograms, triptychs and tables");
  add_common(rep, common);
  rep->add_option("--out", out, "Run directory");
  rep->add_option("--triptychs", triptychs, "Triptychs per variant");

  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(common.verbose ? spdlog::level::info : spdlog::level::warn);
  try {
    if (gen->parsed()) return cmd_generate(common, out);
    if (train->parsed()) return cmd_train(common, out);
    if (attack->parsed()) return cmd_attack(common, weights, out);
    if (eval->parsed()) return cmd_evaluate(common, out, weights);
    if (cap->parsed()) return cmd_caption(common, out);
    if (rep->parsed()) return cmd_report(common, out, triptychs);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
