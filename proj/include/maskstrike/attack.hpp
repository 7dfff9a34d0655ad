#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "maskstrike/detector.hpp"

namespace maskstrike {

enum class Variant { non_tar_frequent, non_tar_confident, tar_frequent, tar_confident, non_tar_all };
enum class SelectionStrategy { frequent, confident };

std::string to_string(Variant v);
Variant parse_variant(const std::string& name);
const std::vector<Variant>& all_variants();
bool is_targeted(Variant v);
bool is_pick_object(Variant v);  // every variant except non_tar_all
SelectionStrategy strategy_of(Variant v);

/// Step size for the bundled mini-detector. Median per-step max pixel
/// change is about 2 levels for non-targeted attacks and 3.5 overall.
inline constexpr double kMiniDetectorLearningRate = 5000.0;
/// Step size documented for a Faster R-CNN served through the adapter.
inline constexpr double kExternalDetectorLearningRate = 10000.0;

struct AttackConfig {
  Variant variant = Variant::non_tar_frequent;
  double learning_rate = kMiniDetectorLearningRate;
  int max_iter = 60;
  std::optional<int> target_class;
  std::uint64_t seed = 0;

  /// 60 iterations, or 120 for non_tar_all.
  static AttackConfig defaults(Variant v);
  void validate() const;
};

struct TraceStep {
  double loss = 0.0;
  int boxes = 0;  // |a| for the step
  double max_change = 0.0;  // largest pixel change made by the update
};

struct AttackResult {
  Variant variant = Variant::non_tar_frequent;
  Image original;
  Image adversarial;
  Perturbation perturbation;  // adversarial − original
  bool success = false;
  std::string failure_cause;  // empty on success
  int iterations_used = 0;    // number of update steps taken
  std::vector<TraceStep> trace;
  DetectionSet original_detections;
  DetectionSet final_detections;
  BinaryMask mask;             // all-false for non_tar_all
  int o_pick = -1;             // -1 for non_tar_all
  std::optional<int> target;   // k, or z for non_tar_all
  std::vector<int> original_classes;  // c_org, non_tar_all only
};

/// Throws Error("nothing to attack") on an empty set.
int select_object(const DetectionSet& dets, SelectionStrategy strategy);

BinaryMask compute_mask(const DetectionSet& dets, int o_pick, ImageShape shape);

std::vector<int> compute_box_set_a(const DetectionSet& dets, int o_pick);

/// Box overlapping the mask (≥ 1 shared pixel) with the largest g[·][k];
/// nullopt means no detection touches the mask.
std::optional<int> fallback_box(const DetectionSet& dets, const BinaryMask& mask, int k);

LossSpec loss_nontargeted(const DetectionSet& dets, std::span<const int> a, int o_pick);
LossSpec loss_targeted(const DetectionSet& dets, std::span<const int> a, int k);

// Success predicates, shared by the attack loops and the evaluation controls.
bool nontargeted_goal_met(const DetectionSet& dets, int o_pick);
bool targeted_goal_met(const DetectionSet& dets, const BinaryMask& mask, int o_pick, int k);
bool all_objects_goal_met(const DetectionSet& dets, std::span<const int> original_classes);
/// Dispatches on result.variant using the result's own mask/o_pick/target.
bool goal_met(const AttackResult& result, const DetectionSet& dets);

/// Masked gradient ascent on −Σ log g[a][o_pick].
AttackResult run_non_targeted(const Image& img, const Detector& detector, const AttackConfig& cfg,
                              int o_pick);
/// Masked gradient descent on −Σ log g[a][k], with the mask-overlap fallback.
AttackResult run_targeted(const Image& img, const Detector& detector, const AttackConfig& cfg,
                          int o_pick, int k);
/// Unmasked descent of every box toward one class z outside c_org.
AttackResult run_all_objects(const Image& img, const Detector& detector, const AttackConfig& cfg);

/// Selects o_pick per the variant and runs the matching loop. Targeted
/// variants need cfg.target_class.
AttackResult run_attack(const Image& img, const Detector& detector, const AttackConfig& cfg);

/// `count` target classes drawn uniformly without replacement from the
/// foreground classes other than o_pick.
std::vector<int> sample_target_classes(int num_classes, int o_pick, int count, std::uint64_t seed);

}  // namespace maskstrike
