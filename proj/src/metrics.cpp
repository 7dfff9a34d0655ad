#include "maskstrike/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>
#include <sstream>

namespace maskstrike {

double mean_average_precision(std::span<const std::vector<GroundTruthBox>> ground_truth,
                              std::span<const std::vector<ScoredDetection>> detections,
                              double iou_threshold) {
  if (ground_truth.size() != detections.size())
    throw Error("mAP: ground truth and detections cover different image counts");
  std::set<int> labels;
  for (const auto& image : ground_truth)
    for (const GroundTruthBox& g : image) labels.insert(g.label);
  if (labels.empty()) throw Error("mAP: no ground-truth boxes");

  double ap_sum = 0.0;
  for (int label : labels) {
    struct Candidate {
      std::size_t image;
      const ScoredDetection* det;
    };
    std::vector<Candidate> cands;
    std::vector<std::vector<bool>> taken(ground_truth.size());
    int n_pos = 0;
    for (std::size_t i = 0; i < ground_truth.size(); ++i) {
      taken[i].assign(ground_truth[i].size(), false);
      for (const GroundTruthBox& g : ground_truth[i]) n_pos += g.label == label;
      for (const ScoredDetection& d : detections[i])
        if (d.label == label) cands.push_back({i, &d});
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
      return a.det->score > b.det->score;
    });
    std::vector<double> precision, recall;
    int tp = 0, fp = 0;
    for (const Candidate& c : cands) {
      double best = -1.0;
      int best_j = -1;
      const auto& gts = ground_truth[c.image];
      for (std::size_t j = 0; j < gts.size(); ++j) {
        if (gts[j].label != label) continue;
        const double o = iou(c.det->box, gts[j].box);
        if (o > best) {
          best = o;
          best_j = static_cast<int>(j);
        }
      }
      if (best_j >= 0 && best >= iou_threshold && !taken[c.image][best_j]) {
        taken[c.image][best_j] = true;
        ++tp;
      } else {
        ++fp;
      }
      precision.push_back(static_cast<double>(tp) / (tp + fp));
      recall.push_back(static_cast<double>(tp) / n_pos);
    }
    double ap = 0.0;
    for (int t = 0; t <= 10; ++t) {
      const double threshold = t / 10.0;
      double p = 0.0;
      for (std::size_t i = 0; i < recall.size(); ++i)
        if (recall[i] >= threshold) p = std::max(p, precision[i]);
      ap += p / 11.0;
    }
    ap_sum += ap;
  }
  return ap_sum / static_cast<double>(labels.size());
}

double success_rate(std::span<const bool> successes) {
  if (successes.empty()) throw Error("success_rate: empty batch");
  const auto n = std::count(successes.begin(), successes.end(), true);
  return 100.0 * static_cast<double>(n) / static_cast<double>(successes.size());
}

double success_rate(std::span<const AttackResult> results) {
  if (results.empty()) throw Error("success_rate: empty batch");
  const auto n = std::count_if(results.begin(), results.end(),
                               [](const AttackResult& r) { return r.success; });
  return 100.0 * static_cast<double>(n) / static_cast<double>(results.size());
}

double actc(const DetectionSet& adversarial, const BinaryMask& mask, int o_pick) {
  double sum = 0.0;
  int n = 0;
  for (const Detection& d : adversarial.detections)
    if (box_intersects_mask(d.box, mask)) {
      sum += d.class_probs[o_pick];
      ++n;
    }
  return n == 0 ? 0.0 : 100.0 * sum / n;
}

std::optional<double> acac(const DetectionSet& adversarial, int k) {
  double sum = 0.0;
  int n = 0;
  for (const Detection& d : adversarial.detections)
    if (d.predicted_class() == k) {
      sum += d.class_probs[k];
      ++n;
    }
  if (n == 0) return std::nullopt;
  return 100.0 * sum / n;
}

double delta(const Image& adversarial, const Image& original, const BinaryMask& mask) {
  if (!adversarial.same_shape(original)) throw Error("delta: shape mismatch");
  if (mask.pixel_count() == 0) throw Error("delta: empty mask");
  return l2_norm(difference(adversarial, original)) / mask.pixel_count();
}

double l2_per_image_size(const Image& adversarial, const Image& original) {
  if (!adversarial.same_shape(original)) throw Error("l2: shape mismatch");
  return l2_norm(difference(adversarial, original)) /
         (static_cast<double>(original.height) * original.width);
}

namespace {

constexpr int kSsimWindow = 11;
constexpr double kSsimSigma = 1.5;

std::vector<double> gaussian_window() {
  std::vector<double> w(kSsimWindow);
  const int r = kSsimWindow / 2;
  double sum = 0.0;
  for (int i = 0; i < kSsimWindow; ++i) {
    const double d = i - r;
    sum += w[i] = std::exp(-d * d / (2.0 * kSsimSigma * kSsimSigma));
  }
  for (double& v : w) v /= sum;
  return w;
}

// Valid-region separable Gaussian filter of one channel plane.
std::vector<double> filter_valid(const std::vector<double>& plane, int h, int w,
                                 const std::vector<double>& g) {
  const int oh = h - kSsimWindow + 1;
  const int ow = w - kSsimWindow + 1;
  std::vector<double> tmp(static_cast<std::size_t>(h) * ow);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int k = 0; k < kSsimWindow; ++k) acc += g[k] * plane[y * w + x + k];
      tmp[y * ow + x] = acc;
    }
  std::vector<double> out(static_cast<std::size_t>(oh) * ow);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int k = 0; k < kSsimWindow; ++k) acc += g[k] * tmp[(y + k) * ow + x];
      out[y * ow + x] = acc;
    }
  return out;
}

}  // namespace

double ssim(const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw Error("ssim: shape mismatch");
  if (a.height < kSsimWindow || a.width < kSsimWindow)
    throw Error("ssim: image smaller than the 11x11 window");
  const double c1 = (0.01 * 255) * (0.01 * 255);
  const double c2 = (0.03 * 255) * (0.03 * 255);
  const auto g = gaussian_window();
  const int h = a.height;
  const int w = a.width;
  const std::size_t n = static_cast<std::size_t>(h) * w;
  double total = 0.0;
  std::size_t count = 0;
  for (int c = 0; c < 3; ++c) {
    std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = a.values[i * 3 + c];
      y[i] = b.values[i * 3 + c];
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mx = filter_valid(x, h, w, g);
    const auto my = filter_valid(y, h, w, g);
    const auto mxx = filter_valid(xx, h, w, g);
    const auto myy = filter_valid(yy, h, w, g);
    const auto mxy = filter_valid(xy, h, w, g);
    for (std::size_t i = 0; i < mx.size(); ++i) {
      const double mu_xy = mx[i] * my[i];
      const double vx = mxx[i] - mx[i] * mx[i];
      const double vy = myy[i] - my[i] * my[i];
      const double cov = mxy[i] - mu_xy;
      total += ((2.0 * mu_xy + c1) * (2.0 * cov + c2)) /
               ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
    }
    count += mx.size();
  }
  return total / static_cast<double>(count);
}

std::optional<double> map_outside_mask(const DetectionSet& original, const DetectionSet& adversarial,
                                       const BinaryMask& mask) {
  std::vector<std::vector<GroundTruthBox>> gt(1);
  std::vector<std::vector<ScoredDetection>> dt(1);
  for (const Detection& d : original.detections)
    if (!box_intersects_mask(d.box, mask)) gt[0].push_back({d.box, d.predicted_class()});
  if (gt[0].empty()) return std::nullopt;
  for (const Detection& d : adversarial.detections)
    if (!box_intersects_mask(d.box, mask))
      dt[0].push_back({d.box, d.predicted_class(), d.confidence()});
  return 100.0 * mean_average_precision(gt, dt, 0.5);
}

double max_abs_outside_mask(const Perturbation& p, const BinaryMask& mask) {
  if (mask.shape().height != p.height || mask.shape().width != p.width)
    throw Error("max_abs_outside_mask: shape mismatch");
  double m = 0.0;
  for (int y = 0; y < p.height; ++y)
    for (int x = 0; x < p.width; ++x) {
      if (mask.at(y, x)) continue;
      for (int c = 0; c < 3; ++c) m = std::max(m, std::abs(p.at(y, x, c)));
    }
  return m;
}

bool permutation_trial(const AttackResult& result, const Detector& detector, std::uint64_t seed) {
  const Perturbation permuted = permute_perturbation(result.perturbation, seed);
  const Image probe = clamp_image(add(result.original, permuted));
  return goal_met(result, detector.detect(probe));
}

double permutation_control(std::span<const AttackResult> results, const Detector& detector,
                           std::uint64_t seed) {
  std::vector<bool> outcomes;
  for (std::size_t i = 0; i < results.size(); ++i)
    if (results[i].success) outcomes.push_back(permutation_trial(results[i], detector, seed + i));
  if (outcomes.empty()) throw Error("permutation_control: no successful attacks");
  return 100.0 * std::count(outcomes.begin(), outcomes.end(), true) / outcomes.size();
}

bool resize_trial(const AttackResult& result, const Detector& detector, double scale) {
  if (!(scale > 0.0)) throw Error("resize: scale must be positive");
  const Image& adv = result.adversarial;
  const int h = std::max(1, static_cast<int>(std::lround(adv.height * scale)));
  const int w = std::max(1, static_cast<int>(std::lround(adv.width * scale)));
  const DetectionSet resized = detector.detect(resize_bilinear(adv, h, w));
  DetectionSet mapped = resized;
  const double sx = static_cast<double>(adv.width) / w;
  const double sy = static_cast<double>(adv.height) / h;
  for (Detection& d : mapped.detections)
    d.box = clip_box({d.box.x1 * sx, d.box.y1 * sy, d.box.x2 * sx, d.box.y2 * sy}, adv.height,
                     adv.width);
  return goal_met(result, mapped);
}

std::map<double, double> resize_robustness(std::span<const AttackResult> results,
                                           const Detector& detector,
                                           std::span<const double> scales) {
  std::map<double, double> out;
  for (double s : scales) {
    if (!(s > 0.0)) throw Error("resize: scale must be positive");
    int n = 0, ok = 0;
    for (const AttackResult& r : results) {
      if (!r.success) continue;
      ++n;
      ok += resize_trial(r, detector, s);
    }
    if (n == 0) throw Error("resize_robustness: no successful attacks");
    out[s] = 100.0 * ok / n;
  }
  return out;
}

AttackMeasurements measure_attack(const AttackResult& result, const Detector& detector,
                                  const MeasureOptions& options) {
  AttackMeasurements m;
  m.variant = result.variant;
  m.success = result.success;
  m.failure_cause = result.failure_cause;
  m.iterations = result.iterations_used;
  m.l2 = l2_per_image_size(result.adversarial, result.original);
  m.ssim = ssim(result.original, result.adversarial);
  if (result.mask.pixel_count() > 0) m.delta = delta(result.adversarial, result.original, result.mask);
  m.map_outside = map_outside_mask(result.original_detections, result.final_detections, result.mask);
  if (is_pick_object(result.variant)) {
    m.leak = max_abs_outside_mask(result.perturbation, result.mask);
    if (is_targeted(result.variant))
      m.acac = acac(result.final_detections, result.target.value());
    else
      m.actc = actc(result.final_detections, result.mask, result.o_pick);
  }
  if (result.success) {
    if (options.permutation)
      m.permuted_success = permutation_trial(result, detector, options.permutation_seed);
    if (options.resize)
      for (double s : options.resize_scales) m.resized_success[s] = resize_trial(result, detector, s);
  }
  return m;
}

namespace {

struct Stats {
  std::vector<double> values;
  void add(const std::optional<double>& v) {
    if (v) values.push_back(*v);
  }
  std::optional<double> mean() const {
    if (values.empty()) return std::nullopt;
    return std::accumulate(values.begin(), values.end(), 0.0) / values.size();
  }
  std::optional<double> stddev() const {
    const auto m = mean();
    if (!m) return std::nullopt;
    double s = 0.0;
    for (double v : values) s += (v - *m) * (v - *m);
    return std::sqrt(s / values.size());
  }
};

std::string fmt_fixed(const std::optional<double>& v, int digits = 2) {
  if (!v) return "";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, *v);
  return buf;
}

std::string fmt_sci(const std::optional<double>& v) {
  if (!v) return "";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4e", *v);
  return buf;
}

std::string scale_label(double s) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2g", s);
  return buf;
}

std::vector<std::string> header(const MetricsReport& report) {
  std::vector<std::string> h{"variant", "attacks",   "successes", "sr",        "acac",
                             "actc",    "map",       "l2_mean",   "l2_std",    "ssim",
                             "delta_mean", "delta_std", "sr_given_overlap", "permutation_sr"};
  for (double s : report.resize_scales) h.push_back("resize_sr_" + scale_label(s));
  return h;
}

std::vector<std::string> cells(const MetricsReport& report, const VariantSummary& r) {
  std::vector<std::string> c{to_string(r.variant),
                             std::to_string(r.attacks),
                             std::to_string(r.successes),
                             fmt_fixed(r.success_rate),
                             fmt_fixed(r.acac),
                             fmt_fixed(r.actc),
                             fmt_fixed(r.map_outside),
                             fmt_sci(r.l2_mean),
                             fmt_sci(r.l2_std),
                             fmt_fixed(r.ssim_mean),
                             fmt_sci(r.delta_mean),
                             fmt_sci(r.delta_std),
                             fmt_fixed(r.success_rate_given_overlap),
                             fmt_fixed(r.permutation_success_rate)};
  for (double s : report.resize_scales) {
    const auto it = r.resize_success_rate.find(s);
    c.push_back(it == r.resize_success_rate.end() ? "" : fmt_fixed(it->second));
  }
  return c;
}

}  // namespace

MetricsReport summarize(std::span<const AttackMeasurements> measurements,
                        std::span<const double> resize_scales) {
  MetricsReport report;
  report.resize_scales.assign(resize_scales.begin(), resize_scales.end());
  for (Variant v : all_variants()) {
    VariantSummary row;
    row.variant = v;
    Stats acac_s, actc_s, map_s, l2_s, ssim_s, delta_s;
    int overlap_attempts = 0, overlap_successes = 0, permuted = 0, permuted_ok = 0;
    std::map<double, std::pair<int, int>> resized;
    for (const AttackMeasurements& m : measurements) {
      if (m.variant != v || !m.attempted) continue;
      ++row.attacks;
      if (m.failure_cause != "no-overlap") {
        ++overlap_attempts;
        overlap_successes += m.success;
      }
      if (!m.success) continue;
      ++row.successes;
      acac_s.add(m.acac);
      actc_s.add(m.actc);
      map_s.add(m.map_outside);
      l2_s.add(m.l2);
      ssim_s.add(100.0 * m.ssim);
      delta_s.add(m.delta);
      if (m.permuted_success) {
        ++permuted;
        permuted_ok += *m.permuted_success;
      }
      for (const auto& [scale, ok] : m.resized_success) {
        auto& [n, good] = resized[scale];
        ++n;
        good += ok;
      }
    }
    if (row.attacks == 0) continue;
    row.success_rate = 100.0 * row.successes / row.attacks;
    row.acac = acac_s.mean();
    row.actc = actc_s.mean();
    row.map_outside = map_s.mean();
    row.l2_mean = l2_s.mean();
    row.l2_std = l2_s.stddev();
    row.ssim_mean = ssim_s.mean();
    row.delta_mean = delta_s.mean();
    row.delta_std = delta_s.stddev();
    if (overlap_attempts > 0)
      row.success_rate_given_overlap = 100.0 * overlap_successes / overlap_attempts;
    if (permuted > 0) row.permutation_success_rate = 100.0 * permuted_ok / permuted;
    for (const auto& [scale, counts] : resized)
      row.resize_success_rate[scale] = 100.0 * counts.second / counts.first;
    report.rows.push_back(std::move(row));
  }
  return report;
}

std::string metrics_csv(const MetricsReport& report) {
  std::ostringstream os;
  auto line = [&](const std::vector<std::string>& v) {
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
    os << '\n';
  };
  line(header(report));
  for (const VariantSummary& r : report.rows) line(cells(report, r));
  return os.str();
}

std::string metrics_markdown(const MetricsReport& report) {
  std::ostringstream os;
  os << "AP protocol: PASCAL VOC 11-point interpolation at IoU >= 0.5.\n\n";
  auto line = [&](const std::vector<std::string>& v) {
    os << '|';
    for (const auto& s : v) os << ' ' << (s.empty() ? "-" : s) << " |";
    os << '\n';
  };
  const auto h = header(report);
  line(h);
  os << '|';
  for (std::size_t i = 0; i < h.size(); ++i) os << " --- |";
  os << '\n';
  for (const VariantSummary& r : report.rows) line(cells(report, r));
  return os.str();
}

nlohmann::json metrics_json(const MetricsReport& report) {
  using nlohmann::json;
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  json rows = json::array();
  for (const VariantSummary& r : report.rows) {
    json resize = json::object();
    for (const auto& [s, v] : r.resize_success_rate) resize[scale_label(s)] = v;
    rows.push_back({{"variant", to_string(r.variant)},
                    {"attacks", r.attacks},
                    {"successes", r.successes},
                    {"success_rate", r.success_rate},
                    {"acac", opt(r.acac)},
                    {"actc", opt(r.actc)},
                    {"map_outside", opt(r.map_outside)},
                    {"l2_mean", opt(r.l2_mean)},
                    {"l2_std", opt(r.l2_std)},
                    {"ssim_mean", opt(r.ssim_mean)},
                    {"delta_mean", opt(r.delta_mean)},
                    {"delta_std", opt(r.delta_std)},
                    {"success_rate_given_overlap", opt(r.success_rate_given_overlap)},
                    {"permutation_success_rate", opt(r.permutation_success_rate)},
                    {"resize_success_rate", resize}});
  }
  return {{"ap_protocol", "pascal-voc-11pt@0.5"}, {"rows", rows}};
}

}  // namespace maskstrike
