#include "maskstrike/mini_detector.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>

#include <spdlog/spdlog.h>

#include "maskstrike/metrics.hpp"
#include "maskstrike/rng.hpp"

namespace maskstrike {

namespace {

using kernels::ConvShape;
using kernels::Tensor;

constexpr double kInv255 = 1.0 / 255.0;
constexpr int kHeadOutputs = 5;

Tensor to_tensor(const PixelField& f) {
  Tensor t(3, f.height, f.width);
  for (int y = 0; y < f.height; ++y)
    for (int x = 0; x < f.width; ++x)
      for (int c = 0; c < 3; ++c) t.at(c, y, x) = f.at(y, x, c) * kInv255 - 0.5;
  return t;
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

std::vector<double> softmax(std::span<const double> logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) sum += p[i] = std::exp(logits[i] - m);
  for (double& v : p) v /= sum;
  return p;
}

// ---------------------------------------------------------------- params

template <class F>
void visit(BackboneParams& p, F&& f) {
  for (ConvLayer& c : p.convs) {
    f(c.weight);
    f(c.bias);
  }
  f(p.head.weight);
  f(p.head.bias);
}

template <class F>
void visit(RoiClassifierParams& p, F&& f) {
  for (ConvLayer* c : {&p.conv1, &p.conv2}) {
    f(c->weight);
    f(c->bias);
  }
  for (DenseLayer* d : {&p.fc1, &p.fc2}) {
    f(d->weight);
    f(d->bias);
  }
}

template <class P>
std::vector<std::vector<double>*> tensors_of(P& p) {
  std::vector<std::vector<double>*> out;
  visit(p, [&](std::vector<double>& v) { out.push_back(&v); });
  return out;
}

template <class P>
P zeros_like(P p) {
  visit(p, [](std::vector<double>& v) { std::fill(v.begin(), v.end(), 0.0); });
  return p;
}

double normal(Rng& rng) {
  const double u1 = std::max(rng.uniform01(), 1e-300);
  const double u2 = rng.uniform01();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

ConvLayer make_conv(Rng& rng, int in, int out, int stride, double gain = 1.0) {
  ConvLayer c{ConvShape{in, out, 3, stride, 1}, {}, std::vector<double>(out, 0.0)};
  c.weight.resize(c.shape.weight_count());
  const double std = gain * std::sqrt(2.0 / (in * 9));
  for (double& w : c.weight) w = std * normal(rng);
  return c;
}

DenseLayer make_dense(Rng& rng, int in, int out, double gain = 1.0) {
  DenseLayer d{in, out, std::vector<double>(static_cast<std::size_t>(in) * out),
               std::vector<double>(out, 0.0)};
  const double std = gain * std::sqrt(2.0 / in);
  for (double& w : d.weight) w = std * normal(rng);
  return d;
}

class Adam {
 public:
  explicit Adam(double lr) : lr_(lr) {}

  template <class P>
  void step(P& params, P& grads, double grad_scale) {
    auto p = tensors_of(params);
    auto g = tensors_of(grads);
    if (m_.empty()) {
      for (auto* t : p) {
        m_.emplace_back(t->size(), 0.0);
        v_.emplace_back(t->size(), 0.0);
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(kBeta1, t_);
    const double c2 = 1.0 - std::pow(kBeta2, t_);
    for (std::size_t i = 0; i < p.size(); ++i) {
      auto& pv = *p[i];
      auto& gv = *g[i];
      for (std::size_t j = 0; j < pv.size(); ++j) {
        const double gj = gv[j] * grad_scale;
        m_[i][j] = kBeta1 * m_[i][j] + (1.0 - kBeta1) * gj;
        v_[i][j] = kBeta2 * v_[i][j] + (1.0 - kBeta2) * gj * gj;
        pv[j] -= lr_ * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + 1e-8);
        gv[j] = 0.0;
      }
    }
  }

 private:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  double lr_;
  int t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// -------------------------------------------------------------- stage 1

struct BackboneTrace {
  std::vector<Tensor> activations;  // post-ReLU output of each conv
  Tensor head;
};

BackboneTrace run_backbone(const BackboneParams& p, const Tensor& x) {
  BackboneTrace t;
  const Tensor* cur = &x;
  for (const ConvLayer& c : p.convs) {
    Tensor a = kernels::conv2d_forward(*cur, c.shape, c.weight, c.bias);
    kernels::relu_inplace(a);
    t.activations.push_back(std::move(a));
    cur = &t.activations.back();
  }
  t.head = kernels::conv2d_forward(*cur, p.head.shape, p.head.weight, p.head.bias);
  return t;
}

void backbone_backward(const BackboneParams& p, const Tensor& x, const BackboneTrace& t,
                       const Tensor& grad_head, BackboneParams& grads) {
  const Tensor& last = t.activations.back();
  kernels::conv2d_backward_params(last, grad_head, p.head.shape, grads.head.weight,
                                  grads.head.bias);
  Tensor g = kernels::conv2d_backward_input(grad_head, p.head.shape, p.head.weight, last.height,
                                            last.width);
  for (int i = static_cast<int>(p.convs.size()) - 1; i >= 0; --i) {
    kernels::relu_backward_inplace(g, t.activations[i]);
    const Tensor& in = i == 0 ? x : t.activations[i - 1];
    kernels::conv2d_backward_params(in, g, p.convs[i].shape, grads.convs[i].weight,
                                    grads.convs[i].bias);
    if (i > 0)
      g = kernels::conv2d_backward_input(g, p.convs[i].shape, p.convs[i].weight, in.height,
                                         in.width);
  }
}

double cell_center(int index) { return (index + 0.5) * MiniDetector::kStride; }

Box decode_box(const Tensor& head, int cy, int cx) {
  const double dx = head.at(1, cy, cx);
  const double dy = head.at(2, cy, cx);
  const double dw = std::clamp(head.at(3, cy, cx), -2.0, 2.0);
  const double dh = std::clamp(head.at(4, cy, cx), -2.0, 2.0);
  const double cxp = cell_center(cx) + dx * MiniDetector::kStride;
  const double cyp = cell_center(cy) + dy * MiniDetector::kStride;
  const double w = MiniDetector::kAnchorSize * std::exp(dw);
  const double h = MiniDetector::kAnchorSize * std::exp(dh);
  return {cxp - 0.5 * w, cyp - 0.5 * h, cxp + 0.5 * w, cyp + 0.5 * h};
}

// -------------------------------------------------------------- stage 2

struct Tap {
  int lo;
  int hi;
  double frac;
};

std::vector<Tap> crop_taps(double start, double extent, int limit) {
  std::vector<Tap> taps(MiniDetector::kCropSize);
  for (int u = 0; u < MiniDetector::kCropSize; ++u) {
    double s = start + (u + 0.5) * extent / MiniDetector::kCropSize - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(limit - 1));
    const int lo = static_cast<int>(std::floor(s));
    taps[u] = {lo, std::min(lo + 1, limit - 1), s - lo};
  }
  return taps;
}

Tensor crop_roi(const PixelField& input, const Box& box) {
  const auto ty = crop_taps(box.y1, box.height(), input.height);
  const auto tx = crop_taps(box.x1, box.width(), input.width);
  constexpr int S = MiniDetector::kCropSize;
  Tensor t(3, S, S);
  for (int v = 0; v < S; ++v)
    for (int u = 0; u < S; ++u)
      for (int c = 0; c < 3; ++c) {
        const Tap& a = ty[v];
        const Tap& b = tx[u];
        const double top = input.at(a.lo, b.lo, c) +
                           b.frac * (input.at(a.lo, b.hi, c) - input.at(a.lo, b.lo, c));
        const double bot = input.at(a.hi, b.lo, c) +
                           b.frac * (input.at(a.hi, b.hi, c) - input.at(a.hi, b.lo, c));
        t.at(c, v, u) = (top + a.frac * (bot - top)) * kInv255 - 0.5;
      }
  return t;
}

void scatter_roi_grad(const Tensor& grad_crop, const Box& box, PixelField& grad_input) {
  const auto ty = crop_taps(box.y1, box.height(), grad_input.height);
  const auto tx = crop_taps(box.x1, box.width(), grad_input.width);
  constexpr int S = MiniDetector::kCropSize;
  for (int v = 0; v < S; ++v)
    for (int u = 0; u < S; ++u)
      for (int c = 0; c < 3; ++c) {
        const double g = grad_crop.at(c, v, u) * kInv255;
        const Tap& a = ty[v];
        const Tap& b = tx[u];
        grad_input.at(a.lo, b.lo, c) += g * (1.0 - a.frac) * (1.0 - b.frac);
        grad_input.at(a.lo, b.hi, c) += g * (1.0 - a.frac) * b.frac;
        grad_input.at(a.hi, b.lo, c) += g * a.frac * (1.0 - b.frac);
        grad_input.at(a.hi, b.hi, c) += g * a.frac * b.frac;
      }
}

struct ClassifierTrace {
  Tensor input;
  Tensor a1;
  kernels::PoolResult p1;
  Tensor a2;
  kernels::PoolResult p2;
  std::vector<double> h1;
  std::vector<double> logits;
};

ClassifierTrace run_classifier(const RoiClassifierParams& p, Tensor crop) {
  ClassifierTrace t;
  t.input = std::move(crop);
  t.a1 = kernels::conv2d_forward(t.input, p.conv1.shape, p.conv1.weight, p.conv1.bias);
  kernels::relu_inplace(t.a1);
  t.p1 = kernels::maxpool2x2_forward(t.a1);
  t.a2 = kernels::conv2d_forward(t.p1.output, p.conv2.shape, p.conv2.weight, p.conv2.bias);
  kernels::relu_inplace(t.a2);
  t.p2 = kernels::maxpool2x2_forward(t.a2);
  t.h1 = kernels::linear_forward(t.p2.output.data, p.fc1.weight, p.fc1.bias, p.fc1.out_features);
  for (double& v : t.h1) v = v > 0.0 ? v : 0.0;
  t.logits = kernels::linear_forward(t.h1, p.fc2.weight, p.fc2.bias, p.fc2.out_features);
  return t;
}

// Returns ∂/∂crop. Parameter gradients are accumulated when `grads` is set.
Tensor classifier_backward(const RoiClassifierParams& p, const ClassifierTrace& t,
                           std::span<const double> grad_logits, RoiClassifierParams* grads) {
  if (grads) kernels::linear_backward_params(t.h1, grad_logits, grads->fc2.weight, grads->fc2.bias);
  std::vector<double> gh = kernels::linear_backward_input(grad_logits, p.fc2.weight,
                                                          p.fc2.in_features);
  for (std::size_t i = 0; i < gh.size(); ++i)
    if (!(t.h1[i] > 0.0)) gh[i] = 0.0;
  if (grads)
    kernels::linear_backward_params(t.p2.output.data, gh, grads->fc1.weight, grads->fc1.bias);
  const Tensor& pooled2 = t.p2.output;
  Tensor gp2(pooled2.channels, pooled2.height, pooled2.width);
  gp2.data = kernels::linear_backward_input(gh, p.fc1.weight, p.fc1.in_features);
  Tensor ga2 = kernels::maxpool2x2_backward(gp2, t.p2.argmax, t.a2.channels, t.a2.height,
                                            t.a2.width);
  kernels::relu_backward_inplace(ga2, t.a2);
  if (grads)
    kernels::conv2d_backward_params(t.p1.output, ga2, p.conv2.shape, grads->conv2.weight,
                                    grads->conv2.bias);
  Tensor gp1 = kernels::conv2d_backward_input(ga2, p.conv2.shape, p.conv2.weight,
                                              t.p1.output.height, t.p1.output.width);
  Tensor ga1 = kernels::maxpool2x2_backward(gp1, t.p1.argmax, t.a1.channels, t.a1.height,
                                            t.a1.width);
  kernels::relu_backward_inplace(ga1, t.a1);
  if (grads)
    kernels::conv2d_backward_params(t.input, ga1, p.conv1.shape, grads->conv1.weight,
                                    grads->conv1.bias);
  return kernels::conv2d_backward_input(ga1, p.conv1.shape, p.conv1.weight, t.input.height,
                                        t.input.width);
}

struct MiniPassState {
  PixelField input;
  std::vector<Box> input_boxes;  // aligned with the kept detections
};

// ------------------------------------------------------- serialization

static_assert(std::endian::native == std::endian::little, "weights format is little-endian");

constexpr char kMagic[8] = {'M', 'S', 'K', 'D', 'E', 'T', 'W', '1'};

template <class T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw Error("weights file truncated");
  return v;
}

void put_string(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& is) {
  const auto n = get<std::uint32_t>(is);
  if (n > (1u << 20)) throw Error("weights file: implausible string length");
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw Error("weights file truncated");
  return s;
}

}  // namespace

// ------------------------------------------------------------ weights

MiniDetectorWeights MiniDetectorWeights::initialize(const DetectorConfig& cfg,
                                                    std::uint64_t seed) {
  cfg.validate();
  MiniDetectorWeights w;
  w.config = cfg;
  w.class_vocab = class_vocabulary();
  if (static_cast<int>(w.class_vocab.size()) != cfg.num_classes)
    throw Error("mini detector: num_classes must match the scene vocabulary (" +
                std::to_string(w.class_vocab.size()) + ")");
  Rng rng(derive_seed(seed, "mini-detector-init"));
  w.backbone.convs.push_back(make_conv(rng, 3, 8, 2));
  w.backbone.convs.push_back(make_conv(rng, 8, 16, 2));
  w.backbone.convs.push_back(make_conv(rng, 16, 32, 2));
  w.backbone.convs.push_back(make_conv(rng, 32, 32, 1));
  w.backbone.head = make_conv(rng, 32, kHeadOutputs, 1, 0.1);
  w.backbone.head.bias[0] = -2.0;  // objectness prior
  w.classifier.conv1 = make_conv(rng, 3, 16, 1);
  w.classifier.conv2 = make_conv(rng, 16, 32, 1);
  w.classifier.fc1 = make_dense(rng, 32 * 4 * 4, 64);
  w.classifier.fc2 = make_dense(rng, 64, cfg.num_classes, 0.5);
  return w;
}

void MiniDetectorWeights::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  os.write(kMagic, sizeof kMagic);
  put<std::uint32_t>(os, kFormatVersion);
  put<std::int32_t>(os, config.short_side);
  put<std::int32_t>(os, config.n_max);
  put<double>(os, config.nms_iou);
  put<double>(os, config.objectness_threshold);
  put<std::int32_t>(os, config.num_classes);
  put<std::int32_t>(os, metadata.rpn_epochs);
  put<std::int32_t>(os, metadata.classifier_epochs);
  put<std::uint64_t>(os, metadata.seed);
  put<std::int32_t>(os, metadata.train_scenes);
  put<std::int32_t>(os, metadata.heldout_scenes);
  put<double>(os, metadata.heldout_map);
  put<std::uint8_t>(os, trained ? 1 : 0);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(class_vocab.size()));
  for (const auto& name : class_vocab) put_string(os, name);
  auto self = *this;
  std::vector<std::vector<double>*> all = tensors_of(self.backbone);
  for (auto* t : tensors_of(self.classifier)) all.push_back(t);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(all.size()));
  for (auto* t : all) {
    put<std::uint64_t>(os, t->size());
    os.write(reinterpret_cast<const char*>(t->data()),
             static_cast<std::streamsize>(t->size() * sizeof(double)));
  }
  if (!os) throw Error("failed writing " + path.string());
}

MiniDetectorWeights MiniDetectorWeights::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot read " + path.string());
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kMagic, sizeof magic) != 0)
    throw Error(path.string() + " is not a mini-detector weights file");
  const auto version = get<std::uint32_t>(is);
  if (version != kFormatVersion)
    throw Error("weights format version " + std::to_string(version) + " unsupported (expected " +
                std::to_string(kFormatVersion) + ")");
  DetectorConfig cfg;
  cfg.short_side = get<std::int32_t>(is);
  cfg.n_max = get<std::int32_t>(is);
  cfg.nms_iou = get<double>(is);
  cfg.objectness_threshold = get<double>(is);
  cfg.num_classes = get<std::int32_t>(is);
  MiniDetectorWeights w = initialize(cfg, 0);
  w.metadata.rpn_epochs = get<std::int32_t>(is);
  w.metadata.classifier_epochs = get<std::int32_t>(is);
  w.metadata.seed = get<std::uint64_t>(is);
  w.metadata.train_scenes = get<std::int32_t>(is);
  w.metadata.heldout_scenes = get<std::int32_t>(is);
  w.metadata.heldout_map = get<double>(is);
  w.trained = get<std::uint8_t>(is) != 0;
  const auto n_vocab = get<std::uint32_t>(is);
  w.class_vocab.clear();
  for (std::uint32_t i = 0; i < n_vocab; ++i) w.class_vocab.push_back(get_string(is));
  std::vector<std::vector<double>*> all = tensors_of(w.backbone);
  for (auto* t : tensors_of(w.classifier)) all.push_back(t);
  if (get<std::uint32_t>(is) != all.size()) throw Error("weights file: tensor count mismatch");
  for (auto* t : all) {
    if (get<std::uint64_t>(is) != t->size()) throw Error("weights file: tensor size mismatch");
    is.read(reinterpret_cast<char*>(t->data()),
            static_cast<std::streamsize>(t->size() * sizeof(double)));
    if (!is) throw Error("weights file truncated");
  }
  return w;
}

// ----------------------------------------------------------- detector

MiniDetector::MiniDetector(MiniDetectorWeights weights) : weights_(std::move(weights)) {
  weights_.config.validate();
}

MiniDetector MiniDetector::load(const std::filesystem::path& path) {
  return MiniDetector(MiniDetectorWeights::load(path));
}

std::vector<std::vector<double>> MiniDetector::classify(const PixelField& input,
                                                        std::span<const Box> input_boxes) const {
  std::vector<std::vector<double>> out;
  out.reserve(input_boxes.size());
  for (const Box& b : input_boxes)
    out.push_back(softmax(run_classifier(weights_.classifier, crop_roi(input, b)).logits));
  return out;
}

ForwardPass MiniDetector::forward(const Image& img) const {
  if (!weights_.trained) throw Error("mini detector: weights are untrained");
  const DetectorConfig& cfg = weights_.config;
  MiniPassState state{rescale_image(img, cfg.short_side), {}};
  const PixelField& input = state.input;
  const Tensor head = run_backbone(weights_.backbone, to_tensor(input)).head;

  const double sx = static_cast<double>(img.width) / input.width;
  const double sy = static_cast<double>(img.height) / input.height;
  std::vector<Detection> candidates;
  std::vector<Box> candidate_input_boxes;
  for (int cy = 0; cy < head.height; ++cy)
    for (int cx = 0; cx < head.width; ++cx) {
      const double obj = sigmoid(head.at(0, cy, cx));
      if (obj < cfg.objectness_threshold) continue;
      const Box ib = clip_box(decode_box(head, cy, cx), input.height, input.width);
      if (ib.width() < 2.0 || ib.height() < 2.0) continue;
      const Box ob =
          clip_box({ib.x1 * sx, ib.y1 * sy, ib.x2 * sx, ib.y2 * sy}, img.height, img.width);
      candidates.push_back({ob, {}, obj});
      candidate_input_boxes.push_back(ib);
    }
  const auto probs = classify(input, candidate_input_boxes);
  for (std::size_t i = 0; i < candidates.size(); ++i) candidates[i].class_probs = probs[i];

  ForwardPass pass;
  pass.original_shape = {img.height, img.width};
  pass.detections.class_vocab = weights_.class_vocab;
  for (int i : select_detections(candidates, cfg)) {
    pass.detections.detections.push_back(std::move(candidates[i]));
    state.input_boxes.push_back(candidate_input_boxes[i]);
  }
  pass.state = std::move(state);
  return pass;
}

double MiniDetector::roi_loss(const PixelField& input, std::span<const Box> input_boxes,
                              const LossSpec& spec, PixelField* grad) const {
  if (grad) *grad = PixelField(input.height, input.width, 0.0);
  std::map<int, std::vector<const LossTerm*>> by_box;
  for (const LossTerm& t : spec.terms) {
    if (t.box_index < 0 || static_cast<std::size_t>(t.box_index) >= input_boxes.size())
      throw Error("roi_loss: box index out of range");
    if (t.class_index < 0 || t.class_index >= weights_.config.num_classes)
      throw Error("roi_loss: class index out of range");
    by_box[t.box_index].push_back(&t);
  }
  double loss = 0.0;
  for (const auto& [box, terms] : by_box) {
    const ClassifierTrace trace = run_classifier(weights_.classifier, crop_roi(input, input_boxes[box]));
    const std::vector<double> p = softmax(trace.logits);
    std::vector<double> dlogits(p.size(), 0.0);
    for (const LossTerm* t : terms) {
      const double pc = p[t->class_index];
      if (pc < kProbabilityFloor) {
        spdlog::debug("roi_loss: probability {} floored to {}", pc, kProbabilityFloor);
        loss += t->weight * -std::log(kProbabilityFloor);
        continue;  // flat below the floor
      }
      loss += t->weight * -std::log(pc);
      for (std::size_t j = 0; j < p.size(); ++j)
        dlogits[j] += t->weight * (p[j] - (static_cast<int>(j) == t->class_index ? 1.0 : 0.0));
    }
    if (grad) {
      const Tensor gcrop = classifier_backward(weights_.classifier, trace, dlogits, nullptr);
      scatter_roi_grad(gcrop, input_boxes[box], *grad);
    }
  }
  return loss;
}

LossAndGradient MiniDetector::backward(const ForwardPass& pass, const LossSpec& spec) const {
  const auto* state = std::any_cast<MiniPassState>(&pass.state);
  if (!state) throw Error("mini detector: forward pass from a different detector");
  spec.validate(pass.detections);
  LossAndGradient out;
  out.plan.original_shape = pass.original_shape;
  out.loss = roi_loss(state->input, state->input_boxes, spec, &out.plan.rescaled_gradient);
  return out;
}

// ------------------------------------------------------------ training

DatasetConfig heldout_dataset_config(const DatasetConfig& data, int n_scenes) {
  DatasetConfig h = data;
  h.seed = derive_seed(data.seed, "heldout");
  h.n_scenes = n_scenes;
  return h;
}

double detection_map(const Detector& detector, const DatasetConfig& data) {
  std::vector<std::vector<GroundTruthBox>> gt(data.n_scenes);
  std::vector<std::vector<ScoredDetection>> dt(data.n_scenes);
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < data.n_scenes; ++i) {
    const Scene s = generate_scene(data, i);
    for (const LabeledBox& lb : s.annotation.boxes)
      gt[i].push_back({lb.box, class_index(lb.class_name)});
    for (const Detection& d : detector.detect(s.image).detections)
      dt[i].push_back({d.box, d.predicted_class(), d.confidence()});
  }
  return mean_average_precision(gt, dt, 0.5);
}

namespace {

struct CropSample {
  std::vector<float> pixels;  // normalized CHW crop
  int label;
};

Box scale_box(const Box& b, double sx, double sy) {
  return {b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy};
}

void train_rpn(MiniDetectorWeights& w, const DatasetConfig& data, const TrainConfig& tc,
               std::uint64_t seed) {
  BackboneParams grads = zeros_like(w.backbone);
  Adam adam(tc.rpn_learning_rate);
  Rng rng(derive_seed(seed, "rpn-order"));
  std::vector<int> order(data.n_scenes);
  std::iota(order.begin(), order.end(), 0);
  constexpr double kStride = MiniDetector::kStride;
  constexpr double kBeta = 0.1;  // smooth-L1 transition

  for (int epoch = 0; epoch < tc.rpn_epochs; ++epoch) {
    for (std::size_t i = order.size(); i-- > 1;) std::swap(order[i], order[rng.uniform_index(i + 1)]);
    double epoch_loss = 0.0;
    int in_batch = 0;
    for (int idx : order) {
      const Scene scene = generate_scene(data, idx);
      const PixelField input = rescale_image(scene.image, w.config.short_side);
      const Tensor x = to_tensor(input);
      const BackboneTrace trace = run_backbone(w.backbone, x);
      const Tensor& head = trace.head;
      const double sx = static_cast<double>(input.width) / scene.image.width;
      const double sy = static_cast<double>(input.height) / scene.image.height;

      // 1 positive, 0 negative, -1 ignored
      std::vector<int> label(static_cast<std::size_t>(head.height) * head.width, 0);
      std::vector<Box> target(label.size());
      for (const LabeledBox& lb : scene.annotation.boxes) {
        const Box g = scale_box(lb.box, sx, sy);
        const double gcx = 0.5 * (g.x1 + g.x2);
        const double gcy = 0.5 * (g.y1 + g.y2);
        const int ccx = std::clamp(static_cast<int>(gcx / kStride), 0, head.width - 1);
        const int ccy = std::clamp(static_cast<int>(gcy / kStride), 0, head.height - 1);
        for (int cy = 0; cy < head.height; ++cy)
          for (int cx = 0; cx < head.width; ++cx) {
            const double px = cell_center(cx);
            const double py = cell_center(cy);
            const std::size_t k = static_cast<std::size_t>(cy) * head.width + cx;
            const bool center = cx == ccx && cy == ccy;
            const bool core = std::abs(px - gcx) <= 0.25 * g.width() &&
                              std::abs(py - gcy) <= 0.25 * g.height();
            const bool inside = px > g.x1 && px < g.x2 && py > g.y1 && py < g.y2;
            if (center || core) {
              label[k] = 1;
              target[k] = g;
            } else if (inside && label[k] == 0) {
              label[k] = -1;
            }
          }
      }
      const auto n_pos = std::count(label.begin(), label.end(), 1);
      const auto n_neg = std::count(label.begin(), label.end(), 0);
      Tensor grad_head(kHeadOutputs, head.height, head.width);
      double loss = 0.0;
      for (int cy = 0; cy < head.height; ++cy)
        for (int cx = 0; cx < head.width; ++cx) {
          const std::size_t k = static_cast<std::size_t>(cy) * head.width + cx;
          if (label[k] < 0) continue;
          const double p = sigmoid(head.at(0, cy, cx));
          const double t = label[k] == 1 ? 1.0 : 0.0;
          const double wgt = label[k] == 1 ? 1.0 / std::max<long>(n_pos, 1)
                                           : 1.0 / std::max<long>(n_neg, 1);
          loss -= wgt * (t * std::log(std::max(p, 1e-12)) +
                         (1 - t) * std::log(std::max(1 - p, 1e-12)));
          grad_head.at(0, cy, cx) = wgt * (p - t);
          if (label[k] != 1) continue;
          const Box& g = target[k];
          const double tgt[4] = {(0.5 * (g.x1 + g.x2) - cell_center(cx)) / kStride,
                                 (0.5 * (g.y1 + g.y2) - cell_center(cy)) / kStride,
                                 std::log(g.width() / MiniDetector::kAnchorSize),
                                 std::log(g.height() / MiniDetector::kAnchorSize)};
          for (int j = 0; j < 4; ++j) {
            const double d = head.at(1 + j, cy, cx) - tgt[j];
            const double ad = std::abs(d);
            loss += (ad < kBeta ? 0.5 * d * d / kBeta : ad - 0.5 * kBeta) / n_pos;
            grad_head.at(1 + j, cy, cx) = (ad < kBeta ? d / kBeta : (d > 0 ? 1.0 : -1.0)) / n_pos;
          }
        }
      epoch_loss += loss;
      backbone_backward(w.backbone, x, trace, grad_head, grads);
      if (++in_batch == tc.rpn_batch) {
        adam.step(w.backbone, grads, 1.0 / in_batch);
        in_batch = 0;
      }
    }
    if (in_batch > 0) adam.step(w.backbone, grads, 1.0 / in_batch);
    if (tc.verbose)
      spdlog::info("rpn epoch {}/{}: mean loss {:.4f}", epoch + 1, tc.rpn_epochs,
                   epoch_loss / data.n_scenes);
  }
}

std::vector<CropSample> build_crops(const MiniDetectorWeights& w, const DatasetConfig& data,
                                    const TrainConfig& tc, std::uint64_t seed) {
  std::vector<std::vector<CropSample>> per_scene(data.n_scenes);
#pragma omp parallel for schedule(dynamic)
  for (int idx = 0; idx < data.n_scenes; ++idx) {
    Rng rng(derive_seed(derive_seed(seed, "crops"), static_cast<std::uint64_t>(idx)));
    const Scene scene = generate_scene(data, idx);
    const PixelField input = rescale_image(scene.image, w.config.short_side);
    const double sx = static_cast<double>(input.width) / scene.image.width;
    const double sy = static_cast<double>(input.height) / scene.image.height;
    std::vector<Box> gts;
    auto emit = [&](const Box& b, int label) {
      const Tensor t = crop_roi(input, b);
      per_scene[idx].push_back({std::vector<float>(t.data.begin(), t.data.end()), label});
    };
    for (const LabeledBox& lb : scene.annotation.boxes) {
      const Box g = scale_box(lb.box, sx, sy);
      gts.push_back(g);
      const int label = class_index(lb.class_name);
      emit(g, label);
      for (int j = 0; j < tc.crops_per_object; ++j) {
        const double w2 = g.width() * rng.uniform(0.85, 1.2);
        const double h2 = g.height() * rng.uniform(0.85, 1.2);
        const double cx = 0.5 * (g.x1 + g.x2) + g.width() * rng.uniform(-0.12, 0.12);
        const double cy = 0.5 * (g.y1 + g.y2) + g.height() * rng.uniform(-0.12, 0.12);
        const Box b = clip_box({cx - w2 / 2, cy - h2 / 2, cx + w2 / 2, cy + h2 / 2},
                               input.height, input.width);
        if (b.width() >= 2.0 && b.height() >= 2.0) emit(b, label);
      }
    }
    for (int j = 0; j < tc.background_crops; ++j) {
      for (int attempt = 0; attempt < 25; ++attempt) {
        const double s = rng.uniform(10.0, 34.0);
        const double aspect = rng.uniform(0.75, 1.33);
        const double bw = s * aspect;
        const double bh = s / aspect;
        const double x1 = rng.uniform(0.0, input.width - bw);
        const double y1 = rng.uniform(0.0, input.height - bh);
        const Box b{x1, y1, x1 + bw, y1 + bh};
        const bool clear =
            std::all_of(gts.begin(), gts.end(), [&](const Box& g) { return iou(b, g) < 0.3; });
        if (clear) {
          emit(b, 0);
          break;
        }
      }
    }
  }
  std::vector<CropSample> all;
  for (auto& v : per_scene)
    for (auto& s : v) all.push_back(std::move(s));
  return all;
}

void train_classifier(MiniDetectorWeights& w, const std::vector<CropSample>& crops,
                      const TrainConfig& tc, std::uint64_t seed) {
  RoiClassifierParams grads = zeros_like(w.classifier);
  Adam adam(tc.classifier_learning_rate);
  Rng rng(derive_seed(seed, "classifier-order"));
  std::vector<std::size_t> order(crops.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  constexpr int S = MiniDetector::kCropSize;
  for (int epoch = 0; epoch < tc.classifier_epochs; ++epoch) {
    for (std::size_t i = order.size(); i-- > 1;) std::swap(order[i], order[rng.uniform_index(i + 1)]);
    double epoch_loss = 0.0;
    int correct = 0;
    int in_batch = 0;
    for (std::size_t idx : order) {
      const CropSample& s = crops[idx];
      Tensor crop(3, S, S);
      std::copy(s.pixels.begin(), s.pixels.end(), crop.data.begin());
      const ClassifierTrace trace = run_classifier(w.classifier, std::move(crop));
      std::vector<double> p = softmax(trace.logits);
      epoch_loss -= std::log(std::max(p[s.label], 1e-12));
      if (std::max_element(p.begin(), p.end()) - p.begin() == s.label) ++correct;
      const double off = tc.label_smoothing / static_cast<double>(p.size());
      for (double& v : p) v -= off;
      p[s.label] -= 1.0 - tc.label_smoothing;
      classifier_backward(w.classifier, trace, p, &grads);
      if (++in_batch == tc.classifier_batch) {
        adam.step(w.classifier, grads, 1.0 / in_batch);
        in_batch = 0;
      }
    }
    if (in_batch > 0) adam.step(w.classifier, grads, 1.0 / in_batch);
    if (tc.verbose)
      spdlog::info("classifier epoch {}/{}: loss {:.4f} acc {:.4f}", epoch + 1,
                   tc.classifier_epochs, epoch_loss / crops.size(),
                   static_cast<double>(correct) / crops.size());
  }
}

}  // namespace

MiniDetectorWeights train_mini_detector(const DatasetConfig& data, const TrainConfig& train,
                                        std::uint64_t seed, const DetectorConfig& detector_cfg) {
  data.validate();
  if (!(train.label_smoothing >= 0.0 && train.label_smoothing < 1.0))
    throw Error("train_mini_detector: label_smoothing must lie in [0, 1)");
  if (data.n_scenes < train.min_train_scenes)
    throw Error("train_mini_detector: need at least " + std::to_string(train.min_train_scenes) +
                " training scenes, got " + std::to_string(data.n_scenes));
  MiniDetectorWeights w = MiniDetectorWeights::initialize(detector_cfg, seed);
  train_rpn(w, data, train, seed);
  const auto crops = build_crops(w, data, train, seed);
  if (train.verbose) spdlog::info("classifier: {} training crops", crops.size());
  train_classifier(w, crops, train, seed);
  w.trained = true;
  w.metadata = {train.rpn_epochs, train.classifier_epochs, seed, data.n_scenes,
                train.heldout_scenes, 0.0};
  const DatasetConfig heldout = heldout_dataset_config(data, train.heldout_scenes);
  w.metadata.heldout_map = detection_map(MiniDetector(w), heldout);
  if (train.verbose) spdlog::info("held-out mAP@0.5: {:.4f}", w.metadata.heldout_map);
  if (w.metadata.heldout_map < train.min_heldout_map) {
    throw TrainingError("train_mini_detector: held-out mAP " +
                            std::to_string(w.metadata.heldout_map) + " below target " +
                            std::to_string(train.min_heldout_map) + " after " +
                            std::to_string(train.rpn_epochs) + " RPN / " +
                            std::to_string(train.classifier_epochs) + " classifier epochs",
                        w);
  }
  return w;
}

}  // namespace maskstrike
