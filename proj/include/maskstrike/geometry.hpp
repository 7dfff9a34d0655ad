#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace maskstrike {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// H×W×3 field of reals, row-major with interleaved channels.
/// Images hold intensities in [0,255]; gradients and perturbations reuse
/// the same layout without the range constraint.
struct PixelField {
  static constexpr int kChannels = 3;

  int height = 0;
  int width = 0;
  std::vector<double> values;

  PixelField() = default;
  PixelField(int h, int w, double fill = 0.0);

  double& at(int y, int x, int c) { return values[index(y, x, c)]; }
  double at(int y, int x, int c) const { return values[index(y, x, c)]; }

  std::size_t index(int y, int x, int c) const {
    return (static_cast<std::size_t>(y) * width + x) * kChannels + c;
  }
  std::size_t size() const { return values.size(); }
  bool same_shape(const PixelField& other) const {
    return height == other.height && width == other.width;
  }

  friend bool operator==(const PixelField&, const PixelField&) = default;
};

using Image = PixelField;
using Perturbation = PixelField;

/// Axis-aligned box in continuous pixel coordinates; pixel (x, y) covers
/// [x, x+1) × [y, y+1).
struct Box {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  bool valid() const { return x1 < x2 && y1 < y2; }

  friend bool operator==(const Box&, const Box&) = default;
};

struct ImageShape {
  int height = 0;
  int width = 0;
  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

class BinaryMask {
 public:
  BinaryMask() = default;
  BinaryMask(int height, int width);

  int height() const { return height_; }
  int width() const { return width_; }
  ImageShape shape() const { return {height_, width_}; }

  bool at(int y, int x) const { return bits_[static_cast<std::size_t>(y) * width_ + x] != 0; }
  void set(int y, int x);
  int pixel_count() const { return pixel_count_; }
  std::span<const std::uint8_t> bits() const { return bits_; }

  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;

 private:
  int height_ = 0;
  int width_ = 0;
  int pixel_count_ = 0;
  std::vector<std::uint8_t> bits_;
};

/// Gradient of a detector loss at detector-input resolution, plus what is
/// needed to carry it back onto the original image.
struct GradientPlan {
  PixelField rescaled_gradient;
  ImageShape original_shape;
  double learning_rate = 1.0;
};

/// Continuous-area IoU. Throws on a zero-area box.
double iou(const Box& a, const Box& b);

Box clip_box(const Box& box, int height, int width);

/// Output shape whose shorter side equals `short_side`, aspect preserved.
ImageShape rescaled_shape(int height, int width, int short_side);

/// Bilinear resampling with half-pixel centers (align_corners = false).
PixelField resize_bilinear(const PixelField& field, int height, int width);

Image rescale_image(const Image& img, int short_side);

/// Half-open integer footprint of a box: columns [floor(x1), ceil(x2)),
/// rows [floor(y1), ceil(y2)), clipped to the raster.
struct PixelRect {
  int x0 = 0;
  int y0 = 0;
  int x1 = 0;
  int y1 = 0;
  bool empty() const { return x0 >= x1 || y0 >= y1; }
};
PixelRect pixel_footprint(const Box& box, int height, int width);

BinaryMask rasterize_mask(std::span<const Box> boxes, int height, int width);

/// True iff the box footprint shares at least one pixel with the mask.
bool box_intersects_mask(const Box& box, const BinaryMask& mask);

/// M ⊙ rescale(r · ∇', original shape). Exactly zero wherever the mask is off.
PixelField mask_gradient(const GradientPlan& plan, const BinaryMask& mask);

/// rescale(r · ∇', original shape) with no mask.
PixelField unmasked_gradient(const GradientPlan& plan);

Image clamp_image(Image img);

/// Seeded uniform shuffle of spatial positions. With
/// `channels_independently` false the RGB triplet of a pixel moves as a unit.
Perturbation permute_perturbation(const Perturbation& pert, std::uint64_t seed,
                                  bool channels_independently = false);

PixelField difference(const PixelField& a, const PixelField& b);
PixelField add(const PixelField& a, const PixelField& b);
double l2_norm(const PixelField& field);
double max_abs(const PixelField& field);

}  // namespace maskstrike
