#pragma once

#include <any>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "maskstrike/geometry.hpp"

namespace maskstrike {

/// One detected box. `class_probs` is the full K-way distribution,
/// background included at index 0.
struct Detection {
  Box box;
  std::vector<double> class_probs;
  double objectness = 0.0;

  int predicted_class() const;
  double top_probability() const;
  /// objectness × max class probability; the ranking key.
  double confidence() const { return objectness * top_probability(); }
};

struct DetectionSet {
  std::vector<Detection> detections;
  std::vector<std::string> class_vocab;

  std::size_t size() const { return detections.size(); }
  bool empty() const { return detections.empty(); }
  const Detection& operator[](std::size_t i) const { return detections[i]; }
  std::vector<Box> boxes() const;
  std::vector<int> predicted_classes() const;
};

/// L = Σ weight · (−log g[box][class]).
struct LossTerm {
  int box_index = 0;
  int class_index = 0;
  double weight = 1.0;
};

struct LossSpec {
  std::vector<LossTerm> terms;

  /// Throws on an index outside the detection set or a non-finite weight.
  void validate(const DetectionSet& dets) const;
};

/// Probabilities are floored here before taking the log.
inline constexpr double kProbabilityFloor = 1e-12;

double evaluate_loss(const DetectionSet& dets, const LossSpec& spec);

struct DetectorConfig {
  int short_side = 128;
  int n_max = 64;
  double nms_iou = 0.5;
  double objectness_threshold = 0.5;
  int num_classes = 13;

  void validate() const;
  friend bool operator==(const DetectorConfig&, const DetectorConfig&) = default;
};

/// Result of one forward evaluation; `state` is private to the detector
/// that produced it and lets backward() reuse the forward work.
struct ForwardPass {
  DetectionSet detections;
  ImageShape original_shape;
  std::any state;
};

struct LossAndGradient {
  double loss = 0.0;
  GradientPlan plan;  // learning_rate left at 1; the caller applies r
};

/// Differentiable two-stage detector. Implementations must be safe to call
/// concurrently once constructed.
class Detector {
 public:
  virtual ~Detector() = default;

  virtual const DetectorConfig& config() const = 0;
  virtual const std::vector<std::string>& class_vocab() const = 0;

  virtual ForwardPass forward(const Image& img) const = 0;
  /// ∂L/∂I' at detector input resolution for the given pass. Proposal
  /// boxes are treated as constants.
  virtual LossAndGradient backward(const ForwardPass& pass, const LossSpec& spec) const = 0;

  DetectionSet detect(const Image& img) const { return forward(img).detections; }
  LossAndGradient loss_and_gradient(const Image& img, const LossSpec& spec) const;
};

struct ScoredBox {
  Box box;
  double score = 0.0;
};

/// Greedy suppression in descending score order (ties: lower index first).
/// Returns kept indices in that order.
std::vector<int> nms(std::span<const ScoredBox> candidates, double iou_thresh);

/// Threshold → rank by confidence → NMS → top-n_max, the shared tail of
/// every detector. Input boxes must already be in original-image space.
std::vector<int> select_detections(std::span<const Detection> candidates,
                                   const DetectorConfig& cfg);

/// Adapter slot for an externally hosted detector (e.g. a Faster R-CNN
/// served from another runtime). The host supplies the two stages at
/// detector-input resolution; the adapter owns rescaling, coordinate
/// mapping and post-processing. Thresholds have no defaults and must be
/// stated explicitly.
class ExternalDetectorAdapter final : public Detector {
 public:
  struct Settings {
    int short_side = 600;
    std::optional<int> n_max;
    std::optional<double> nms_iou;
    std::optional<double> objectness_threshold;
    std::vector<std::string> class_vocab;
  };

  /// Raw candidates in input-resolution coordinates.
  struct RawDetection {
    Box box;
    std::vector<double> class_probs;
    double objectness = 0.0;
  };

  using ForwardFn = std::function<std::vector<RawDetection>(const Image& input)>;
  /// Returns ∂L/∂input for a loss over the listed raw candidates; the
  /// LossSpec box indices address `raw`.
  using BackwardFn = std::function<PixelField(const Image& input, std::span<const RawDetection> raw,
                                              const LossSpec& spec)>;

  ExternalDetectorAdapter(Settings settings, ForwardFn forward_fn, BackwardFn backward_fn);

  const DetectorConfig& config() const override { return config_; }
  const std::vector<std::string>& class_vocab() const override { return vocab_; }
  ForwardPass forward(const Image& img) const override;
  LossAndGradient backward(const ForwardPass& pass, const LossSpec& spec) const override;

 private:
  DetectorConfig config_;
  std::vector<std::string> vocab_;
  ForwardFn forward_fn_;
  BackwardFn backward_fn_;
};

}  // namespace maskstrike
