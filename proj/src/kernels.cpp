#include "maskstrike/kernels.hpp"

#include <algorithm>
#include <limits>
#include <stdexcept>
#include <vector>

namespace maskstrike::kernels {

namespace {

// Output columns [lo, hi) whose input column ox*stride - pad + kx lands in [0, width).
void valid_range(int out_extent, int in_extent, int stride, int pad, int k, int& lo, int& hi) {
  lo = 0;
  while (lo < out_extent && lo * stride - pad + k < 0) ++lo;
  hi = out_extent;
  while (hi > lo && (hi - 1) * stride - pad + k >= in_extent) --hi;
}

// Parallelize only when there is enough work to amortize the fork.
constexpr std::size_t kParallelThreshold = 1 << 15;

void check_conv(const Tensor& in, const ConvShape& shape, std::span<const double> weight) {
  if (in.channels != shape.in_channels) throw std::invalid_argument("conv2d: channel mismatch");
  if (weight.size() != shape.weight_count()) throw std::invalid_argument("conv2d: weight size");
}

}  // namespace

Tensor conv2d_forward(const Tensor& in, const ConvShape& shape, std::span<const double> weight,
                      std::span<const double> bias) {
  check_conv(in, shape, weight);
  const int oh = shape.out_extent(in.height);
  const int ow = shape.out_extent(in.width);
  const int k = shape.kernel;
  const int s = shape.stride;
  const std::size_t plane_size = static_cast<std::size_t>(oh) * ow;
  const std::size_t rows = static_cast<std::size_t>(shape.in_channels) * k * k;

  // Patch matrix: row (ci, ky, kx), column output pixel; zero where padded.
  std::vector<double> col(rows * plane_size, 0.0);
  for (int ci = 0; ci < shape.in_channels; ++ci) {
    const double* src = &in.data[static_cast<std::size_t>(ci) * in.height * in.width];
    for (int ky = 0; ky < k; ++ky) {
      int oy_lo, oy_hi;
      valid_range(oh, in.height, s, shape.pad, ky, oy_lo, oy_hi);
      for (int kx = 0; kx < k; ++kx) {
        int ox_lo, ox_hi;
        valid_range(ow, in.width, s, shape.pad, kx, ox_lo, ox_hi);
        double* dst = &col[((static_cast<std::size_t>(ci) * k + ky) * k + kx) * plane_size];
        const int off = kx - shape.pad;
        for (int oy = oy_lo; oy < oy_hi; ++oy) {
          const double* row = src + static_cast<std::size_t>(oy * s - shape.pad + ky) * in.width;
          double* d = dst + static_cast<std::size_t>(oy) * ow;
          for (int ox = ox_lo; ox < ox_hi; ++ox) d[ox] = row[ox * s + off];
        }
      }
    }
  }

  Tensor out(shape.out_channels, oh, ow);
  const std::size_t work = out.size() * rows;

#pragma omp parallel for schedule(static) if (work > kParallelThreshold)
  for (int co = 0; co < shape.out_channels; ++co) {
    double* plane = &out.data[static_cast<std::size_t>(co) * plane_size];
    std::fill(plane, plane + plane_size, bias[co]);
    const double* w = &weight[static_cast<std::size_t>(co) * rows];
    for (std::size_t r = 0; r < rows; ++r) {
      const double wv = w[r];
      const double* c = &col[r * plane_size];
      for (std::size_t p = 0; p < plane_size; ++p) plane[p] += wv * c[p];
    }
  }
  return out;
}

Tensor conv2d_backward_input(const Tensor& grad_out, const ConvShape& shape,
                             std::span<const double> weight, int in_height, int in_width) {
  const int oh = grad_out.height;
  const int ow = grad_out.width;
  const int k = shape.kernel;
  const int s = shape.stride;
  Tensor grad_in(shape.in_channels, in_height, in_width);
  const std::size_t work = grad_out.size() * shape.in_channels * k * k;

#pragma omp parallel for schedule(static) if (work > kParallelThreshold)
  for (int ci = 0; ci < shape.in_channels; ++ci) {
    double* dst_plane = &grad_in.data[static_cast<std::size_t>(ci) * in_height * in_width];
    for (int co = 0; co < shape.out_channels; ++co) {
      const double* g = &grad_out.data[static_cast<std::size_t>(co) * oh * ow];
      const double* w = &weight[(static_cast<std::size_t>(co) * shape.in_channels + ci) * k * k];
      for (int ky = 0; ky < k; ++ky) {
        int oy_lo, oy_hi;
        valid_range(oh, in_height, s, shape.pad, ky, oy_lo, oy_hi);
        for (int kx = 0; kx < k; ++kx) {
          const double wv = w[ky * k + kx];
          int ox_lo, ox_hi;
          valid_range(ow, in_width, s, shape.pad, kx, ox_lo, ox_hi);
          const int off = kx - shape.pad;
          for (int oy = oy_lo; oy < oy_hi; ++oy) {
            double* row = dst_plane + static_cast<std::size_t>(oy * s - shape.pad + ky) * in_width;
            const double* grow = g + static_cast<std::size_t>(oy) * ow;
            for (int ox = ox_lo; ox < ox_hi; ++ox) row[ox * s + off] += wv * grow[ox];
          }
        }
      }
    }
  }
  return grad_in;
}

void conv2d_backward_params(const Tensor& in, const Tensor& grad_out, const ConvShape& shape,
                            std::span<double> grad_weight, std::span<double> grad_bias) {
  check_conv(in, shape, grad_weight);
  const int oh = grad_out.height;
  const int ow = grad_out.width;
  const int k = shape.kernel;
  const int s = shape.stride;
  const std::size_t work = grad_out.size() * shape.in_channels * k * k;

#pragma omp parallel for schedule(static) if (work > kParallelThreshold)
  for (int co = 0; co < shape.out_channels; ++co) {
    const double* g = &grad_out.data[static_cast<std::size_t>(co) * oh * ow];
    double bsum = 0.0;
    for (std::size_t i = 0; i < static_cast<std::size_t>(oh) * ow; ++i) bsum += g[i];
    grad_bias[co] += bsum;
    for (int ci = 0; ci < shape.in_channels; ++ci) {
      const double* src = &in.data[static_cast<std::size_t>(ci) * in.height * in.width];
      double* gw = &grad_weight[(static_cast<std::size_t>(co) * shape.in_channels + ci) * k * k];
      for (int ky = 0; ky < k; ++ky) {
        int oy_lo, oy_hi;
        valid_range(oh, in.height, s, shape.pad, ky, oy_lo, oy_hi);
        for (int kx = 0; kx < k; ++kx) {
          int ox_lo, ox_hi;
          valid_range(ow, in.width, s, shape.pad, kx, ox_lo, ox_hi);
          const int off = kx - shape.pad;
          double acc = 0.0;
          for (int oy = oy_lo; oy < oy_hi; ++oy) {
            const double* row = src + static_cast<std::size_t>(oy * s - shape.pad + ky) * in.width;
            const double* grow = g + static_cast<std::size_t>(oy) * ow;
            for (int ox = ox_lo; ox < ox_hi; ++ox) acc += grow[ox] * row[ox * s + off];
          }
          gw[ky * k + kx] += acc;
        }
      }
    }
  }
}

void relu_inplace(Tensor& t) {
  for (double& v : t.data) v = v > 0.0 ? v : 0.0;
}

void relu_backward_inplace(Tensor& grad, const Tensor& activation) {
  for (std::size_t i = 0; i < grad.size(); ++i)
    if (!(activation.data[i] > 0.0)) grad.data[i] = 0.0;
}

PoolResult maxpool2x2_forward(const Tensor& in) {
  const int oh = in.height / 2;
  const int ow = in.width / 2;
  PoolResult r{Tensor(in.channels, oh, ow), {}};
  r.argmax.resize(r.output.size());
  std::size_t o = 0;
  for (int c = 0; c < in.channels; ++c)
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x, ++o) {
        double best = -std::numeric_limits<double>::infinity();
        std::uint32_t best_i = 0;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const std::size_t i = (static_cast<std::size_t>(c) * in.height + 2 * y + dy) * in.width +
                                  2 * x + dx;
            if (in.data[i] > best) {
              best = in.data[i];
              best_i = static_cast<std::uint32_t>(i);
            }
          }
        r.output.data[o] = best;
        r.argmax[o] = best_i;
      }
  return r;
}

Tensor maxpool2x2_backward(const Tensor& grad_out, std::span<const std::uint32_t> argmax,
                           int in_channels, int in_height, int in_width) {
  Tensor grad_in(in_channels, in_height, in_width);
  for (std::size_t o = 0; o < grad_out.size(); ++o) grad_in.data[argmax[o]] += grad_out.data[o];
  return grad_in;
}

std::vector<double> linear_forward(std::span<const double> in, std::span<const double> weight,
                                   std::span<const double> bias, int out_features) {
  const std::size_t n = in.size();
  std::vector<double> out(out_features);
#pragma omp parallel for schedule(static) if (n * out_features > kParallelThreshold)
  for (int o = 0; o < out_features; ++o) {
    const double* w = &weight[static_cast<std::size_t>(o) * n];
    double acc = bias[o];
    for (std::size_t i = 0; i < n; ++i) acc += w[i] * in[i];
    out[o] = acc;
  }
  return out;
}

std::vector<double> linear_backward_input(std::span<const double> grad_out,
                                          std::span<const double> weight, int in_features) {
  std::vector<double> grad_in(in_features, 0.0);
  for (std::size_t o = 0; o < grad_out.size(); ++o) {
    const double* w = &weight[o * in_features];
    const double g = grad_out[o];
    for (int i = 0; i < in_features; ++i) grad_in[i] += w[i] * g;
  }
  return grad_in;
}

void linear_backward_params(std::span<const double> in, std::span<const double> grad_out,
                            std::span<double> grad_weight, std::span<double> grad_bias) {
  const std::size_t n = in.size();
  for (std::size_t o = 0; o < grad_out.size(); ++o) {
    const double g = grad_out[o];
    grad_bias[o] += g;
    double* w = &grad_weight[o * n];
    for (std::size_t i = 0; i < n; ++i) w[i] += g * in[i];
  }
}

namespace reference {

Tensor conv2d_forward(const Tensor& in, const ConvShape& shape, std::span<const double> weight,
                      std::span<const double> bias) {
  check_conv(in, shape, weight);
  const int oh = shape.out_extent(in.height);
  const int ow = shape.out_extent(in.width);
  const int k = shape.kernel;
  Tensor out(shape.out_channels, oh, ow);
  for (int co = 0; co < shape.out_channels; ++co)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        double acc = bias[co];
        for (int ci = 0; ci < shape.in_channels; ++ci)
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const int iy = oy * shape.stride - shape.pad + ky;
              const int ix = ox * shape.stride - shape.pad + kx;
              if (iy < 0 || iy >= in.height || ix < 0 || ix >= in.width) continue;
              acc += weight[((static_cast<std::size_t>(co) * shape.in_channels + ci) * k + ky) * k +
                            kx] *
                     in.at(ci, iy, ix);
            }
        out.at(co, oy, ox) = acc;
      }
  return out;
}

Tensor conv2d_backward_input(const Tensor& grad_out, const ConvShape& shape,
                             std::span<const double> weight, int in_height, int in_width) {
  const int k = shape.kernel;
  Tensor grad_in(shape.in_channels, in_height, in_width);
  for (int ci = 0; ci < shape.in_channels; ++ci)
    for (int iy = 0; iy < in_height; ++iy)
      for (int ix = 0; ix < in_width; ++ix) {
        double acc = 0.0;
        for (int co = 0; co < shape.out_channels; ++co)
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const int ny = iy + shape.pad - ky;
              const int nx = ix + shape.pad - kx;
              if (ny < 0 || nx < 0 || ny % shape.stride != 0 || nx % shape.stride != 0) continue;
              const int oy = ny / shape.stride;
              const int ox = nx / shape.stride;
              if (oy >= grad_out.height || ox >= grad_out.width) continue;
              acc += weight[((static_cast<std::size_t>(co) * shape.in_channels + ci) * k + ky) * k +
                            kx] *
                     grad_out.at(co, oy, ox);
            }
        grad_in.at(ci, iy, ix) = acc;
      }
  return grad_in;
}

void conv2d_backward_params(const Tensor& in, const Tensor& grad_out, const ConvShape& shape,
                            std::span<double> grad_weight, std::span<double> grad_bias) {
  const int k = shape.kernel;
  for (int co = 0; co < shape.out_channels; ++co) {
    double bsum = 0.0;
    for (int oy = 0; oy < grad_out.height; ++oy)
      for (int ox = 0; ox < grad_out.width; ++ox) bsum += grad_out.at(co, oy, ox);
    grad_bias[co] += bsum;
    for (int ci = 0; ci < shape.in_channels; ++ci)
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          double acc = 0.0;
          for (int oy = 0; oy < grad_out.height; ++oy)
            for (int ox = 0; ox < grad_out.width; ++ox) {
              const int iy = oy * shape.stride - shape.pad + ky;
              const int ix = ox * shape.stride - shape.pad + kx;
              if (iy < 0 || iy >= in.height || ix < 0 || ix >= in.width) continue;
              acc += grad_out.at(co, oy, ox) * in.at(ci, iy, ix);
            }
          grad_weight[((static_cast<std::size_t>(co) * shape.in_channels + ci) * k + ky) * k +
                      kx] += acc;
        }
  }
}

std::vector<double> linear_forward(std::span<const double> in, std::span<const double> weight,
                                   std::span<const double> bias, int out_features) {
  std::vector<double> out(out_features);
  for (int o = 0; o < out_features; ++o) {
    double acc = bias[o];
    for (std::size_t i = 0; i < in.size(); ++i) acc += weight[o * in.size() + i] * in[i];
    out[o] = acc;
  }
  return out;
}

}  // namespace reference

}  // namespace maskstrike::kernels
