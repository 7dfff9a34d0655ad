#include "maskstrike/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace maskstrike {

int Detection::predicted_class() const {
  return static_cast<int>(std::max_element(class_probs.begin(), class_probs.end()) -
                          class_probs.begin());
}

double Detection::top_probability() const {
  return class_probs.empty() ? 0.0 : *std::max_element(class_probs.begin(), class_probs.end());
}

std::vector<Box> DetectionSet::boxes() const {
  std::vector<Box> out;
  out.reserve(detections.size());
  for (const Detection& d : detections) out.push_back(d.box);
  return out;
}

std::vector<int> DetectionSet::predicted_classes() const {
  std::vector<int> out;
  out.reserve(detections.size());
  for (const Detection& d : detections) out.push_back(d.predicted_class());
  return out;
}

void LossSpec::validate(const DetectionSet& dets) const {
  for (const LossTerm& t : terms) {
    if (t.box_index < 0 || static_cast<std::size_t>(t.box_index) >= dets.size())
      throw Error("loss spec: box index " + std::to_string(t.box_index) + " out of range");
    if (t.class_index < 0 ||
        static_cast<std::size_t>(t.class_index) >= dets[t.box_index].class_probs.size())
      throw Error("loss spec: class index " + std::to_string(t.class_index) + " out of range");
    if (!std::isfinite(t.weight)) throw Error("loss spec: non-finite weight");
  }
}

double evaluate_loss(const DetectionSet& dets, const LossSpec& spec) {
  spec.validate(dets);
  double loss = 0.0;
  for (const LossTerm& t : spec.terms) {
    const double p = dets[t.box_index].class_probs[t.class_index];
    loss += t.weight * -std::log(std::max(p, kProbabilityFloor));
  }
  return loss;
}

void DetectorConfig::validate() const {
  if (short_side < 32) throw Error("detector config: short_side must be >= 32");
  if (n_max < 1) throw Error("detector config: n_max must be >= 1");
  if (!(nms_iou > 0.0 && nms_iou < 1.0)) throw Error("detector config: nms_iou must be in (0,1)");
  if (!(objectness_threshold > 0.0 && objectness_threshold < 1.0))
    throw Error("detector config: objectness_threshold must be in (0,1)");
  if (num_classes < 2) throw Error("detector config: need at least two classes");
}

LossAndGradient Detector::loss_and_gradient(const Image& img, const LossSpec& spec) const {
  const ForwardPass pass = forward(img);
  spec.validate(pass.detections);
  return backward(pass, spec);
}

std::vector<int> nms(std::span<const ScoredBox> candidates, double iou_thresh) {
  std::vector<int> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return candidates[a].score > candidates[b].score;
  });
  std::vector<int> kept;
  for (int i : order) {
    const Box& b = candidates[i].box;
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](int k) {
      return iou(candidates[k].box, b) > iou_thresh;
    });
    if (!suppressed) kept.push_back(i);
  }
  return kept;
}

std::vector<int> select_detections(std::span<const Detection> candidates,
                                   const DetectorConfig& cfg) {
  std::vector<int> alive;
  std::vector<ScoredBox> scored;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const Detection& d = candidates[i];
    if (d.objectness < cfg.objectness_threshold || !d.box.valid()) continue;
    if (d.predicted_class() == 0) continue;  // background wins: not an object
    alive.push_back(static_cast<int>(i));
    scored.push_back({d.box, d.confidence()});
  }
  std::vector<int> kept = nms(scored, cfg.nms_iou);
  if (kept.size() > static_cast<std::size_t>(cfg.n_max)) kept.resize(cfg.n_max);
  for (int& k : kept) k = alive[k];
  return kept;
}

namespace {

struct AdapterState {
  Image input;
  std::vector<ExternalDetectorAdapter::RawDetection> kept;
};

}  // namespace

ExternalDetectorAdapter::ExternalDetectorAdapter(Settings settings, ForwardFn forward_fn,
                                                 BackwardFn backward_fn)
    : vocab_(std::move(settings.class_vocab)),
      forward_fn_(std::move(forward_fn)),
      backward_fn_(std::move(backward_fn)) {
  if (!settings.n_max || !settings.nms_iou || !settings.objectness_threshold)
    throw Error("external detector: n_max, nms_iou and objectness_threshold must be set");
  if (!forward_fn_ || !backward_fn_) throw Error("external detector: both stages are required");
  config_.short_side = settings.short_side;
  config_.n_max = *settings.n_max;
  config_.nms_iou = *settings.nms_iou;
  config_.objectness_threshold = *settings.objectness_threshold;
  config_.num_classes = static_cast<int>(vocab_.size());
  config_.validate();
}

ForwardPass ExternalDetectorAdapter::forward(const Image& img) const {
  AdapterState state{rescale_image(img, config_.short_side), {}};
  const double sx = static_cast<double>(img.width) / state.input.width;
  const double sy = static_cast<double>(img.height) / state.input.height;
  std::vector<RawDetection> raw = forward_fn_(state.input);
  std::vector<Detection> candidates;
  for (const RawDetection& r : raw) {
    if (r.class_probs.size() != vocab_.size())
      throw Error("external detector: class distribution has the wrong length");
    const Box mapped{r.box.x1 * sx, r.box.y1 * sy, r.box.x2 * sx, r.box.y2 * sy};
    candidates.push_back({clip_box(mapped, img.height, img.width), r.class_probs, r.objectness});
  }
  ForwardPass pass;
  pass.original_shape = {img.height, img.width};
  pass.detections.class_vocab = vocab_;
  for (int i : select_detections(candidates, config_)) {
    pass.detections.detections.push_back(candidates[i]);
    state.kept.push_back(raw[i]);
  }
  pass.state = std::move(state);
  return pass;
}

LossAndGradient ExternalDetectorAdapter::backward(const ForwardPass& pass,
                                                  const LossSpec& spec) const {
  const auto* state = std::any_cast<AdapterState>(&pass.state);
  if (!state) throw Error("external detector: forward pass from a different detector");
  spec.validate(pass.detections);
  LossAndGradient out;
  out.loss = evaluate_loss(pass.detections, spec);
  out.plan.original_shape = pass.original_shape;
  out.plan.rescaled_gradient = backward_fn_(state->input, state->kept, spec);
  if (!out.plan.rescaled_gradient.same_shape(state->input))
    throw Error("external detector: gradient shape differs from the input");
  return out;
}

}  // namespace maskstrike
