#pragma once

// Bundled two-stage detector small enough to train on a laptop CPU.
//
//   stage 1  4-layer conv backbone (stride 8) + 3×3 head: per cell one
//            anchor with objectness and (dx, dy, log w, log h) regression.
//   stage 2  each surviving proposal is bilinearly cropped from the input
//            image to 16×16 and classified by a small CNN into K classes
//            (background + 12 color-shape classes).
//
// Attack gradients flow through stage 2 only; proposals are constants,
// as in the ROI pooling of a Faster R-CNN.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "maskstrike/detector.hpp"
#include "maskstrike/kernels.hpp"
#include "maskstrike/scenedata.hpp"

namespace maskstrike {

struct ConvLayer {
  kernels::ConvShape shape;
  std::vector<double> weight;
  std::vector<double> bias;
};

struct DenseLayer {
  int in_features = 0;
  int out_features = 0;
  std::vector<double> weight;
  std::vector<double> bias;
};

struct BackboneParams {
  std::vector<ConvLayer> convs;  // 4 layers, ReLU after each
  ConvLayer head;                // 5 outputs per cell: objectness logit + 4 box deltas
};

struct RoiClassifierParams {
  ConvLayer conv1;
  ConvLayer conv2;
  DenseLayer fc1;
  DenseLayer fc2;
};

struct TrainingMetadata {
  int rpn_epochs = 0;
  int classifier_epochs = 0;
  std::uint64_t seed = 0;
  int train_scenes = 0;
  int heldout_scenes = 0;
  double heldout_map = 0.0;
};

struct MiniDetectorWeights {
  static constexpr std::uint32_t kFormatVersion = 1;

  DetectorConfig config;
  std::vector<std::string> class_vocab;
  TrainingMetadata metadata;
  BackboneParams backbone;
  RoiClassifierParams classifier;
  bool trained = false;

  /// Freshly initialized (untrained) weights.
  static MiniDetectorWeights initialize(const DetectorConfig& cfg, std::uint64_t seed);

  void save(const std::filesystem::path& path) const;
  /// Refuses files whose format version differs from kFormatVersion.
  static MiniDetectorWeights load(const std::filesystem::path& path);
};

class MiniDetector final : public Detector {
 public:
  static constexpr int kStride = 8;
  static constexpr double kAnchorSize = 24.0;
  static constexpr int kCropSize = 16;

  explicit MiniDetector(MiniDetectorWeights weights);
  static MiniDetector load(const std::filesystem::path& path);

  const DetectorConfig& config() const override { return weights_.config; }
  const std::vector<std::string>& class_vocab() const override { return weights_.class_vocab; }
  const MiniDetectorWeights& weights() const { return weights_; }

  ForwardPass forward(const Image& img) const override;
  LossAndGradient backward(const ForwardPass& pass, const LossSpec& spec) const override;

  /// Stage-2 class distributions for fixed proposals on an input-resolution image.
  std::vector<std::vector<double>> classify(const PixelField& input,
                                            std::span<const Box> input_boxes) const;

  /// Stage-2 loss for fixed proposals; LossSpec box indices address
  /// `input_boxes`. Writes ∂L/∂input when `grad` is non-null.
  double roi_loss(const PixelField& input, std::span<const Box> input_boxes,
                  const LossSpec& spec, PixelField* grad) const;

 private:
  MiniDetectorWeights weights_;
};

struct TrainConfig {
  int rpn_epochs = 6;
  int classifier_epochs = 8;
  int rpn_batch = 4;
  int classifier_batch = 32;
  double rpn_learning_rate = 2e-3;
  double classifier_learning_rate = 1e-3;
  // Caps the classifier's confidence so that −log p keeps a usable gradient.
  double label_smoothing = 0.3;
  int crops_per_object = 2;
  int background_crops = 4;
  int heldout_scenes = 200;
  int min_train_scenes = 500;
  double min_heldout_map = 0.80;
  bool verbose = false;
};

class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, MiniDetectorWeights weights)
      : Error(what), weights_(std::move(weights)) {}
  const MiniDetectorWeights& weights() const { return weights_; }

 private:
  MiniDetectorWeights weights_;
};

/// Trains both stages on `data.n_scenes` generated scenes and scores the
/// result on a disjoint held-out split. Throws TrainingError (carrying the
/// weights and the achieved mAP) when the held-out target is missed.
MiniDetectorWeights train_mini_detector(const DatasetConfig& data, const TrainConfig& train,
                                        std::uint64_t seed,
                                        const DetectorConfig& detector_cfg = {});

/// Held-out split used by training: same generator settings, derived seed.
DatasetConfig heldout_dataset_config(const DatasetConfig& data, int n_scenes);

/// PASCAL 11-point mAP at IoU 0.5 of the detector against ground truth.
double detection_map(const Detector& detector, const DatasetConfig& data);

}  // namespace maskstrike
