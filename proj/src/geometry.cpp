#include "maskstrike/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "maskstrike/rng.hpp"

namespace maskstrike {

PixelField::PixelField(int h, int w, double fill)
    : height(h), width(w), values(static_cast<std::size_t>(h) * w * kChannels, fill) {
  if (h < 1 || w < 1) throw Error("pixel field must be at least 1x1");
}

BinaryMask::BinaryMask(int height, int width)
    : height_(height), width_(width), bits_(static_cast<std::size_t>(height) * width, 0) {
  if (height < 1 || width < 1) throw Error("mask must be at least 1x1");
}

void BinaryMask::set(int y, int x) {
  auto& bit = bits_[static_cast<std::size_t>(y) * width_ + x];
  if (!bit) {
    bit = 1;
    ++pixel_count_;
  }
}

double iou(const Box& a, const Box& b) {
  if (!a.valid() || !b.valid()) throw Error("iou: degenerate box");
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

Box clip_box(const Box& box, int height, int width) {
  return {std::clamp(box.x1, 0.0, static_cast<double>(width)),
          std::clamp(box.y1, 0.0, static_cast<double>(height)),
          std::clamp(box.x2, 0.0, static_cast<double>(width)),
          std::clamp(box.y2, 0.0, static_cast<double>(height))};
}

ImageShape rescaled_shape(int height, int width, int short_side) {
  if (short_side < 8) throw Error("rescale: short_side must be >= 8");
  if (height <= width) {
    const double scale = static_cast<double>(short_side) / height;
    return {short_side, std::max(1, static_cast<int>(std::lround(width * scale)))};
  }
  const double scale = static_cast<double>(short_side) / width;
  return {std::max(1, static_cast<int>(std::lround(height * scale))), short_side};
}

namespace {

struct Tap {
  int lo;
  int hi;
  double frac;
};

std::vector<Tap> bilinear_taps(int src, int dst) {
  std::vector<Tap> taps(dst);
  const double scale = static_cast<double>(src) / dst;
  for (int i = 0; i < dst; ++i) {
    double s = (i + 0.5) * scale - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(src - 1));
    const int lo = static_cast<int>(std::floor(s));
    const int hi = std::min(lo + 1, src - 1);
    taps[i] = {lo, hi, s - lo};
  }
  return taps;
}

}  // namespace

PixelField resize_bilinear(const PixelField& field, int height, int width) {
  if (height < 1 || width < 1) throw Error("resize: target shape must be positive");
  if (height == field.height && width == field.width) return field;
  PixelField out(height, width);
  const auto ty = bilinear_taps(field.height, height);
  const auto tx = bilinear_taps(field.width, width);
  for (int y = 0; y < height; ++y) {
    const Tap& vy = ty[y];
    for (int x = 0; x < width; ++x) {
      const Tap& vx = tx[x];
      for (int c = 0; c < PixelField::kChannels; ++c) {
        const double a = field.at(vy.lo, vx.lo, c);
        const double b = field.at(vy.lo, vx.hi, c);
        const double d = field.at(vy.hi, vx.lo, c);
        const double e = field.at(vy.hi, vx.hi, c);
        const double top = a + vx.frac * (b - a);
        const double bottom = d + vx.frac * (e - d);
        out.at(y, x, c) = top + vy.frac * (bottom - top);
      }
    }
  }
  return out;
}

Image rescale_image(const Image& img, int short_side) {
  const ImageShape s = rescaled_shape(img.height, img.width, short_side);
  return resize_bilinear(img, s.height, s.width);
}

PixelRect pixel_footprint(const Box& box, int height, int width) {
  PixelRect r;
  r.x0 = std::clamp(static_cast<int>(std::floor(box.x1)), 0, width);
  r.y0 = std::clamp(static_cast<int>(std::floor(box.y1)), 0, height);
  r.x1 = std::clamp(static_cast<int>(std::ceil(box.x2)), 0, width);
  r.y1 = std::clamp(static_cast<int>(std::ceil(box.y2)), 0, height);
  return r;
}

BinaryMask rasterize_mask(std::span<const Box> boxes, int height, int width) {
  BinaryMask mask(height, width);
  for (const Box& box : boxes) {
    const PixelRect r = pixel_footprint(box, height, width);
    for (int y = r.y0; y < r.y1; ++y)
      for (int x = r.x0; x < r.x1; ++x) mask.set(y, x);
  }
  return mask;
}

bool box_intersects_mask(const Box& box, const BinaryMask& mask) {
  const PixelRect r = pixel_footprint(box, mask.height(), mask.width());
  for (int y = r.y0; y < r.y1; ++y)
    for (int x = r.x0; x < r.x1; ++x)
      if (mask.at(y, x)) return true;
  return false;
}

PixelField unmasked_gradient(const GradientPlan& plan) {
  PixelField scaled = plan.rescaled_gradient;
  for (double& v : scaled.values) {
    if (!std::isfinite(v)) throw Error("gradient contains a non-finite value");
    v *= plan.learning_rate;
  }
  return resize_bilinear(scaled, plan.original_shape.height, plan.original_shape.width);
}

PixelField mask_gradient(const GradientPlan& plan, const BinaryMask& mask) {
  if (mask.shape() != plan.original_shape) throw Error("mask_gradient: mask shape mismatch");
  PixelField out = unmasked_gradient(plan);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      if (!mask.at(y, x))
        for (int c = 0; c < PixelField::kChannels; ++c) out.at(y, x, c) = 0.0;
  return out;
}

Image clamp_image(Image img) {
  for (double& v : img.values) v = std::clamp(v, 0.0, 255.0);
  return img;
}

Perturbation permute_perturbation(const Perturbation& pert, std::uint64_t seed,
                                  bool channels_independently) {
  const int unit = channels_independently ? 1 : PixelField::kChannels;
  const std::size_t n = pert.size() / unit;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = n; i-- > 1;) {
    const std::size_t j = rng.uniform_index(i + 1);
    std::swap(order[i], order[j]);
  }
  Perturbation out = pert;
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < unit; ++c) out.values[i * unit + c] = pert.values[order[i] * unit + c];
  return out;
}

PixelField difference(const PixelField& a, const PixelField& b) {
  if (!a.same_shape(b)) throw Error("difference: shape mismatch");
  PixelField out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.values[i] -= b.values[i];
  return out;
}

PixelField add(const PixelField& a, const PixelField& b) {
  if (!a.same_shape(b)) throw Error("add: shape mismatch");
  PixelField out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.values[i] += b.values[i];
  return out;
}

double l2_norm(const PixelField& field) {
  double sum = 0.0;
  for (double v : field.values) sum += v * v;
  return std::sqrt(sum);
}

double max_abs(const PixelField& field) {
  double m = 0.0;
  for (double v : field.values) m = std::max(m, std::abs(v));
  return m;
}

}  // namespace maskstrike
