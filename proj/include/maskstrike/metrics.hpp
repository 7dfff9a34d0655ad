#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "maskstrike/attack.hpp"
#include "maskstrike/detector.hpp"

namespace maskstrike {

// ------------------------------------------------------------------ AP

struct GroundTruthBox {
  Box box;
  int label = 0;
};

struct ScoredDetection {
  Box box;
  int label = 0;
  double score = 0.0;
};

/// PASCAL VOC 11-point interpolated AP, pooled over images, averaged over
/// the classes that have ground truth. Matching is greedy in descending
/// score; a detection whose best-overlap ground truth is already taken is
/// a false positive. Returns a fraction in [0,1]; throws without ground truth.
double mean_average_precision(std::span<const std::vector<GroundTruthBox>> ground_truth,
                              std::span<const std::vector<ScoredDetection>> detections,
                              double iou_threshold = 0.5);

// ---------------------------------------------------------- per attack

/// Percent of successes. Throws on an empty batch.
double success_rate(std::span<const bool> successes);
double success_rate(std::span<const AttackResult> results);

/// Mean g[·][o_pick] over adversarial boxes touching the mask, ×100; 0 when none do.
double actc(const DetectionSet& adversarial, const BinaryMask& mask, int o_pick);

/// Mean g[·][k] over adversarial boxes labeled k, ×100; nullopt when none are.
std::optional<double> acac(const DetectionSet& adversarial, int k);

/// ‖I_adv − I_org‖₂ over all channels divided by the spatial mask pixel count.
double delta(const Image& adversarial, const Image& original, const BinaryMask& mask);

/// ‖I_adv − I_org‖₂ divided by H·W.
double l2_per_image_size(const Image& adversarial, const Image& original);

/// Mean SSIM with an 11×11 Gaussian window (σ = 1.5) over the valid region
/// of each channel, C1 = (0.01·255)², C2 = (0.03·255)².
double ssim(const Image& a, const Image& b);

/// Detection mAP (×100) of the adversarial detections against the
/// original ones, both restricted to boxes that do not touch the mask.
/// nullopt when no original detection lies outside the mask.
std::optional<double> map_outside_mask(const DetectionSet& original, const DetectionSet& adversarial,
                                       const BinaryMask& mask);

// ------------------------------------------------------------ controls

/// Largest |p| over pixels where the mask is unset.
double max_abs_outside_mask(const Perturbation& p, const BinaryMask& mask);

/// Re-runs the variant's success test on I_org + permuted perturbation.
bool permutation_trial(const AttackResult& result, const Detector& detector, std::uint64_t seed);

/// Percent of successful results whose permuted perturbation still succeeds.
double permutation_control(std::span<const AttackResult> results, const Detector& detector,
                           std::uint64_t seed);

/// Resizes I_adv by `scale`, detects, maps boxes back and re-runs the success test.
bool resize_trial(const AttackResult& result, const Detector& detector, double scale);

std::map<double, double> resize_robustness(std::span<const AttackResult> results,
                                           const Detector& detector,
                                           std::span<const double> scales);

inline const std::vector<double>& default_resize_scales() {
  static const std::vector<double> s{0.6, 0.8, 1.2, 1.4};
  return s;
}

// ----------------------------------------------------------- reporting

/// Everything the report needs from one attack, computed once so that
/// aggregation never has to revisit images.
struct AttackMeasurements {
  Variant variant = Variant::non_tar_frequent;
  bool attempted = true;  // false when the image offered nothing to attack
  bool success = false;
  std::string failure_cause;
  int iterations = 0;
  double l2 = 0.0;
  double ssim = 1.0;
  std::optional<double> delta;
  std::optional<double> map_outside;
  std::optional<double> actc;
  std::optional<double> acac;
  std::optional<double> leak;  // max |perturbation| outside the mask, pick-object only
  std::optional<bool> permuted_success;
  std::map<double, bool> resized_success;
};

struct MeasureOptions {
  bool permutation = true;
  bool resize = true;
  std::vector<double> resize_scales = default_resize_scales();
  std::uint64_t permutation_seed = 0;
};

AttackMeasurements measure_attack(const AttackResult& result, const Detector& detector,
                                  const MeasureOptions& options);

struct VariantSummary {
  Variant variant = Variant::non_tar_frequent;
  int attacks = 0;
  int successes = 0;
  double success_rate = 0.0;
  std::optional<double> acac;
  std::optional<double> actc;
  std::optional<double> map_outside;
  std::optional<double> l2_mean;
  std::optional<double> l2_std;
  std::optional<double> ssim_mean;  // percent
  std::optional<double> delta_mean;
  std::optional<double> delta_std;
  std::optional<double> success_rate_given_overlap;
  std::optional<double> permutation_success_rate;
  std::map<double, double> resize_success_rate;
};

struct MetricsReport {
  std::vector<VariantSummary> rows;
  std::vector<double> resize_scales;
};

/// Per-variant aggregates. Rates count attempted attacks; perceptibility
/// and preservation statistics and the controls use successful ones only.
MetricsReport summarize(std::span<const AttackMeasurements> measurements,
                        std::span<const double> resize_scales = default_resize_scales());

std::string metrics_csv(const MetricsReport& report);
std::string metrics_markdown(const MetricsReport& report);
nlohmann::json metrics_json(const MetricsReport& report);

}  // namespace maskstrike
