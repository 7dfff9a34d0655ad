#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "maskstrike/attack.hpp"
#include "maskstrike/downstream.hpp"
#include "maskstrike/metrics.hpp"
#include "maskstrike/mini_detector.hpp"
#include "maskstrike/scenedata.hpp"

namespace maskstrike {

std::string version_string();

struct EvalControls {
  bool run_permutation = true;
  bool run_resize = true;
  std::vector<double> resize_scales = default_resize_scales();
  int targets_per_image = 10;
};

struct AttackOverrides {
  std::optional<double> learning_rate;
  std::optional<int> max_iter;
};

struct ExperimentConfig {
  std::optional<std::filesystem::path> dataset_path;  // otherwise generated from `dataset`
  DatasetConfig dataset;
  std::filesystem::path weights_path;
  std::vector<Variant> variants = all_variants();
  std::map<Variant, AttackOverrides> attack;
  EvalControls controls;
  std::filesystem::path output_dir = "runs/default";
  std::uint64_t seed = 0;
  bool save_images = true;
  int workers = 0;  // 0: OpenMP default

  /// Checks invariants, including that referenced paths exist.
  void validate() const;
  AttackConfig attack_config(Variant v) const;
};

// JSON mapping. Missing keys keep their defaults; unknown keys are errors.
nlohmann::json to_json(const DatasetConfig& c);
nlohmann::json to_json(const DetectorConfig& c);
nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const ExperimentConfig& c);
void from_json(const nlohmann::json& j, DatasetConfig& c);
void from_json(const nlohmann::json& j, DetectorConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

nlohmann::json read_json_file(const std::filesystem::path& path);

/// Applies MASKSTRIKE_OUT when set.
std::filesystem::path resolve_output_dir(const std::filesystem::path& configured);

/// One JSONL line: the persisted view of an attack plus its measurements.
struct AttackRecord {
  std::string image_id;
  int image_index = 0;
  Variant variant = Variant::non_tar_frequent;
  int target_slot = 0;  // index into the sampled targets; 0 otherwise
  std::optional<int> target;
  int o_pick = -1;
  AttackMeasurements measurements;
  std::vector<TraceStep> trace;
  int initial_boxes = 0;
  double initial_mean_probability = 0.0;
  CaptionPair captions;
  std::string adversarial_png;
  std::string perturbation_png;
  std::string original_png;

  std::string key() const;
  nlohmann::json to_json() const;
  static AttackRecord from_json(const nlohmann::json& j);
};

struct RunManifest {
  nlohmann::json config;
  std::string code_version;
  std::filesystem::path output_dir;
  std::filesystem::path records;
  std::filesystem::path metrics_csv;
  std::filesystem::path metrics_json;
  std::filesystem::path metrics_markdown;
  std::filesystem::path captions_csv;
  int record_count = 0;

  nlohmann::json to_json() const;
  static RunManifest load(const std::filesystem::path& path);
};

/// Parses a JSONL file. A truncated last line is dropped.
std::vector<AttackRecord> read_records(const std::filesystem::path& path);

/// Runs every (image, variant, target) unit not already present in the
/// output directory, then aggregates the full record set.
RunManifest run_experiment(const ExperimentConfig& cfg, const Detector& detector);
RunManifest run_experiment(const ExperimentConfig& cfg);

/// Rebuilds the aggregate tables from the records alone.
MetricsReport aggregate_records(const std::vector<AttackRecord>& records,
                                const std::vector<double>& resize_scales);
std::vector<CaptionScores> caption_scores(const std::vector<AttackRecord>& records);

/// Perturbation rendered as 128 + 20·p, clamped.
Image render_perturbation(const Perturbation& p);

struct ReportOptions {
  int triptychs_per_variant = 3;
  int histogram_bins = 10;
};

/// Writes histograms, triptychs and tables under `<output_dir>/report`.
/// Returns the written files.
std::vector<std::filesystem::path> render_report(const RunManifest& manifest,
                                                 const ReportOptions& options = {});

}  // namespace maskstrike
