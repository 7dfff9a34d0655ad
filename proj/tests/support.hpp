#pragma once

// Shared test helpers: deterministic images, an analytic stub detector and
// brute-force oracles that do not reuse library code paths.

#include <algorithm>
#include <any>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "maskstrike/detector.hpp"
#include "maskstrike/geometry.hpp"
#include "maskstrike/mini_detector.hpp"
#include "maskstrike/rng.hpp"

namespace testsupport {

using namespace maskstrike;

inline std::uint64_t lcg_next(std::uint64_t& state) {
  state = state * 6364136223846793005ULL + 1442695040888963407ULL;
  return state >> 33;
}

inline Image lcg_image(int h, int w, std::uint64_t seed) {
  Image img(h, w);
  std::uint64_t s = seed;
  for (double& v : img.values) v = static_cast<double>(lcg_next(s) % 256);
  return img;
}

inline Image lcg_noisy(const Image& img, std::uint64_t seed, int amplitude) {
  Image out = img;
  std::uint64_t s = seed;
  for (double& v : out.values) {
    const int d = static_cast<int>(lcg_next(s) % (2 * amplitude + 1)) - amplitude;
    v = std::clamp(v + d, 0.0, 255.0);
  }
  return out;
}

inline Image random_image(int h, int w, Rng& rng) {
  Image img(h, w);
  for (double& v : img.values) v = std::floor(rng.uniform(0.0, 256.0));
  return img;
}

// Classifies fixed boxes by their mean colour: logits = W · mean/255 + b.
// Gradients are exact, so attack loops can be exercised in milliseconds.
class StubDetector final : public Detector {
 public:
  struct StubBox {
    Box box;
    double objectness = 0.9;
  };

  StubDetector(std::vector<StubBox> boxes, std::vector<std::array<double, 3>> weights,
               std::vector<double> bias, std::vector<std::string> vocab)
      : boxes_(std::move(boxes)), w_(std::move(weights)), b_(std::move(bias)),
        vocab_(std::move(vocab)) {
    config_.num_classes = static_cast<int>(w_.size());
    config_.short_side = 8;
    config_.objectness_threshold = 0.5;
  }

  const DetectorConfig& config() const override { return config_; }
  const std::vector<std::string>& class_vocab() const override { return vocab_; }

  std::vector<double> probs_for(const Image& img, const Box& box) const {
    const PixelRect r = pixel_footprint(box, img.height, img.width);
    double mean[3] = {0, 0, 0};
    const double n = static_cast<double>(r.x1 - r.x0) * (r.y1 - r.y0);
    for (int y = r.y0; y < r.y1; ++y)
      for (int x = r.x0; x < r.x1; ++x)
        for (int c = 0; c < 3; ++c) mean[c] += img.at(y, x, c) / n;
    std::vector<double> logits(w_.size());
    for (std::size_t k = 0; k < w_.size(); ++k)
      logits[k] = b_[k] + (w_[k][0] * mean[0] + w_[k][1] * mean[1] + w_[k][2] * mean[2]) / 255.0;
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double& l : logits) z += (l = std::exp(l - mx));
    for (double& l : logits) l /= z;
    return logits;
  }

  ForwardPass forward(const Image& img) const override {
    std::vector<Detection> cands;
    for (const StubBox& b : boxes_) cands.push_back({b.box, probs_for(img, b.box), b.objectness});
    ForwardPass pass;
    pass.original_shape = {img.height, img.width};
    pass.detections.class_vocab = vocab_;
    std::vector<Box> kept;
    for (int i : select_detections(cands, config_)) {
      pass.detections.detections.push_back(cands[i]);
      kept.push_back(cands[i].box);
    }
    pass.state = std::make_pair(img, kept);
    return pass;
  }

  LossAndGradient backward(const ForwardPass& pass, const LossSpec& spec) const override {
    const auto& [img, kept] = std::any_cast<const std::pair<Image, std::vector<Box>>&>(pass.state);
    LossAndGradient out;
    out.plan.original_shape = pass.original_shape;
    out.plan.rescaled_gradient = PixelField(img.height, img.width, 0.0);
    for (const LossTerm& t : spec.terms) {
      const std::vector<double> p = probs_for(img, kept[t.box_index]);
      const double pc = p[t.class_index];
      if (pc < kProbabilityFloor) {
        out.loss += t.weight * -std::log(kProbabilityFloor);
        continue;
      }
      out.loss += t.weight * -std::log(pc);
      double dmean[3] = {0, 0, 0};
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double dl = t.weight * (p[k] - (static_cast<int>(k) == t.class_index ? 1.0 : 0.0));
        for (int c = 0; c < 3; ++c) dmean[c] += dl * w_[k][c] / 255.0;
      }
      const PixelRect r = pixel_footprint(kept[t.box_index], img.height, img.width);
      const double n = static_cast<double>(r.x1 - r.x0) * (r.y1 - r.y0);
      for (int y = r.y0; y < r.y1; ++y)
        for (int x = r.x0; x < r.x1; ++x)
          for (int c = 0; c < 3; ++c) out.plan.rescaled_gradient.at(y, x, c) += dmean[c] / n;
    }
    return out;
  }

 private:
  std::vector<StubBox> boxes_;
  std::vector<std::array<double, 3>> w_;
  std::vector<double> b_;
  std::vector<std::string> vocab_;
  DetectorConfig config_;
};

// Four classes: background, "red", "green", "blue"; a channel-dominance classifier.
inline StubDetector color_stub(std::vector<StubDetector::StubBox> boxes) {
  return StubDetector(std::move(boxes),
                      {{{-1, -1, -1}}, {{4, -2, -2}}, {{-2, 4, -2}}, {{-2, -2, 4}}},
                      {0.0, 0.0, 0.0, 0.0}, {"background", "red", "green", "blue"});
}

inline void paint(Image& img, const Box& b, double r, double g, double bl) {
  const PixelRect rect = pixel_footprint(b, img.height, img.width);
  for (int y = rect.y0; y < rect.y1; ++y)
    for (int x = rect.x0; x < rect.x1; ++x) {
      img.at(y, x, 0) = r;
      img.at(y, x, 1) = g;
      img.at(y, x, 2) = bl;
    }
}

// ------------------------------------------------------------- oracles

// Box with integer corners on a half-pixel grid; IoU by counting cells.
inline double iou_by_counting(const Box& a, const Box& b) {
  auto cells = [](const Box& box) {
    std::set<std::pair<int, int>> s;
    for (int y = static_cast<int>(box.y1 * 2); y < static_cast<int>(box.y2 * 2); ++y)
      for (int x = static_cast<int>(box.x1 * 2); x < static_cast<int>(box.x2 * 2); ++x)
        s.insert({y, x});
    return s;
  };
  const auto sa = cells(a), sb = cells(b);
  std::size_t inter = 0;
  for (const auto& c : sa) inter += sb.count(c);
  return static_cast<double>(inter) / static_cast<double>(sa.size() + sb.size() - inter);
}

inline std::vector<int> nms_by_definition(const std::vector<ScoredBox>& c, double thr) {
  std::vector<int> alive(c.size());
  std::iota(alive.begin(), alive.end(), 0);
  std::vector<int> kept;
  while (!alive.empty()) {
    int best = alive.front();
    for (int i : alive)
      if (c[i].score > c[best].score || (c[i].score == c[best].score && i < best)) best = i;
    kept.push_back(best);
    std::vector<int> next;
    for (int i : alive)
      if (i != best && iou_by_counting(c[i].box, c[best].box) <= thr) next.push_back(i);
    alive = next;
  }
  return kept;
}

inline long double l2_direct(const Image& a, const Image& b) {
  long double s = 0.0L;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    const long double d = static_cast<long double>(a.values[i]) - b.values[i];
    s += d * d;
  }
  return std::sqrt(s);
}

// Non-separable 11×11 window evaluated pixel by pixel.
inline double ssim_direct(const Image& a, const Image& b) {
  long double g[11];
  long double gs = 0.0L;
  for (int i = 0; i < 11; ++i) gs += g[i] = std::exp(-(i - 5) * (i - 5) / (2.0L * 1.5L * 1.5L));
  for (long double& v : g) v /= gs;
  const long double c1 = 6.5025L, c2 = 58.5225L;
  long double total = 0.0L;
  long count = 0;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y + 11 <= a.height; ++y)
      for (int x = 0; x + 11 <= a.width; ++x) {
        long double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
        for (int dy = 0; dy < 11; ++dy)
          for (int dx = 0; dx < 11; ++dx) {
            const long double w = g[dy] * g[dx];
            const long double u = a.at(y + dy, x + dx, c), v = b.at(y + dy, x + dx, c);
            mx += w * u;
            my += w * v;
            sxx += w * u * u;
            syy += w * v * v;
            sxy += w * u * v;
          }
        const long double vx = sxx - mx * mx, vy = syy - my * my, cov = sxy - mx * my;
        total += ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        ++count;
      }
  return static_cast<double>(total / count);
}

using Words = std::vector<std::string>;

inline double bleu_direct(const std::vector<Words>& cands, const std::vector<Words>& refs, int n) {
  long double log_p = 0.0L;
  for (int k = 1; k <= n; ++k) {
    long num = 0, den = 0;
    for (std::size_t i = 0; i < cands.size(); ++i) {
      std::vector<Words> cg, rg;
      for (std::size_t s = 0; s + k <= cands[i].size(); ++s)
        cg.emplace_back(cands[i].begin() + s, cands[i].begin() + s + k);
      for (std::size_t s = 0; s + k <= refs[i].size(); ++s)
        rg.emplace_back(refs[i].begin() + s, refs[i].begin() + s + k);
      den += static_cast<long>(cg.size());
      std::vector<bool> used(rg.size(), false);
      for (const Words& g : cg)
        for (std::size_t j = 0; j < rg.size(); ++j)
          if (!used[j] && rg[j] == g) {
            used[j] = true;
            ++num;
            break;
          }
    }
    if (num == 0) return 0.0;
    log_p += std::log(static_cast<long double>(num) / den) / n;
  }
  long c = 0, r = 0;
  for (std::size_t i = 0; i < cands.size(); ++i) {
    c += static_cast<long>(cands[i].size());
    r += static_cast<long>(refs[i].size());
  }
  const long double bp = c >= r ? 1.0L : std::exp(1.0L - static_cast<long double>(r) / c);
  return static_cast<double>(bp * std::exp(log_p));
}

// Enumerates every subsequence of the shorter caption (≤ 16 tokens).
inline double rouge_l_brute(const Words& cand, const Words& ref) {
  if (cand.empty() && ref.empty()) return 1.0;
  if (cand.empty() || ref.empty()) return 0.0;
  const Words& s = cand.size() <= ref.size() ? cand : ref;
  const Words& t = cand.size() <= ref.size() ? ref : cand;
  std::size_t best = 0;
  for (std::uint32_t m = 1; m < (1u << s.size()); ++m) {
    std::size_t len = static_cast<std::size_t>(__builtin_popcount(m));
    if (len <= best) continue;
    std::size_t j = 0;
    bool ok = true;
    for (std::size_t i = 0; i < s.size() && ok; ++i) {
      if (!(m >> i & 1u)) continue;
      while (j < t.size() && t[j] != s[i]) ++j;
      if (j == t.size()) ok = false;
      else ++j;
    }
    if (ok) best = len;
  }
  if (best == 0) return 0.0;
  const double p = static_cast<double>(best) / cand.size(), r = static_cast<double>(best) / ref.size();
  return 2 * p * r / (p + r);
}

inline Words random_words(Rng& rng, int max_len, int vocab) {
  Words w(rng.uniform_index(static_cast<std::uint64_t>(max_len) + 1));
  for (auto& s : w) s = "w" + std::to_string(rng.uniform_index(static_cast<std::uint64_t>(vocab)));
  return w;
}

// Frozen skimage.metrics.structural_similarity values; see
// tests/fixtures/make_reference_values.py.
struct SsimFixture {
  int h, w;
  std::uint64_t seed, noise_seed;
  int amplitude;
  double value;
};
inline constexpr SsimFixture kSsimFixtures[] = {
    {16, 16, 1, 2, 10, 0.996784252568}, {24, 20, 3, 4, 40, 0.955031639500},
    {32, 32, 5, 6, 3, 0.999611968989},  {13, 29, 7, 8, 128, 0.680840461357},
    {40, 24, 9, 10, 20, 0.988154010833},
};
inline constexpr double kSsimConstant100vs110 = 0.995476444092;

// Central finite differences of MiniDetector::roi_loss on random 16×16
// inputs. An entry fails when |analytic − numeric| exceeds 1e-3 of the
// larger magnitude; entries where both are ≤ 1e-8 are skipped.
struct GradCheck {
  long checked = 0;
  long failed = 0;
  long refined = 0;  // stencil crossed a ReLU or max-pool switch; rechecked at step / 100
  double worst = 0.0;
};

inline GradCheck fd_check_roi_loss(const MiniDetector& det, std::uint64_t seed, int n_specs = 20,
                                   double step = 1e-3) {
  Rng rng(seed);
  GradCheck out;
  const int k = det.config().num_classes;
  for (int s = 0; s < n_specs; ++s) {
    PixelField input(16, 16);
    for (double& v : input.values) v = rng.uniform(0.0, 255.0);
    std::vector<Box> boxes(static_cast<std::size_t>(rng.uniform_int(1, 3)));
    for (Box& b : boxes) {
      b.x1 = rng.uniform(0.0, 8.0);
      b.y1 = rng.uniform(0.0, 8.0);
      b.x2 = b.x1 + rng.uniform(3.0, 16.0 - b.x1);
      b.y2 = b.y1 + rng.uniform(3.0, 16.0 - b.y1);
    }
    LossSpec spec;
    const int terms = rng.uniform_int(1, 4);
    for (int t = 0; t < terms; ++t)
      spec.terms.push_back({rng.uniform_int(0, static_cast<int>(boxes.size()) - 1),
                            rng.uniform_int(0, k - 1), rng.uniform(-1.5, 1.5)});
    PixelField grad;
    const double base = det.roi_loss(input, boxes, spec, &grad);
    auto loss_at = [&](std::size_t i, double d) {
      PixelField p = input;
      p.values[i] += d;
      return det.roi_loss(p, boxes, spec, nullptr);
    };
    for (std::size_t i = 0; i < input.values.size(); ++i) {
      const double analytic = grad.values[i];
      const double up = loss_at(i, step), down = loss_at(i, -step);
      double numeric = (up - down) / (2 * step);
      double scale = std::max(std::abs(numeric), std::abs(analytic));
      if (scale <= 1e-8) continue;
      ++out.checked;
      double rel = std::abs(numeric - analytic) / scale;
      // One-sided slopes that disagree mean the loss is not smooth inside the stencil.
      const double one_sided_gap = std::abs((up - base) - (base - down)) / step;
      if (rel > 1e-3 && one_sided_gap > 1e-3 * scale) {
        const double fine = step / 100;
        numeric = (loss_at(i, fine) - loss_at(i, -fine)) / (2 * fine);
        scale = std::max(std::abs(numeric), std::abs(analytic));
        rel = scale <= 1e-8 ? 0.0 : std::abs(numeric - analytic) / scale;
        ++out.refined;
      }
      out.worst = std::max(out.worst, rel);
      if (rel > 1e-3) ++out.failed;
    }
  }
  return out;
}

}  // namespace testsupport
