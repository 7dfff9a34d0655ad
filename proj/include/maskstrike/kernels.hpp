#pragma once

// Dense CHW tensor kernels used by the mini-detector.
//
// Every kernel exists twice: the OpenMP version in `kernels` and a plain
// serial loop nest in `kernels::reference`. Both accumulate each output
// element in the same order, so they agree to the last bit on platforms
// without FMA contraction. The reference versions are what the unit tests
// and the benchmark compare against.

#include <cstdint>
#include <span>
#include <vector>

namespace maskstrike::kernels {

struct Tensor {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(int c, int h, int w, double fill = 0.0)
      : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill) {}

  double& at(int c, int y, int x) {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  double at(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  std::size_t size() const { return data.size(); }
};

struct ConvShape {
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 3;
  int stride = 1;
  int pad = 1;

  int out_extent(int in) const { return (in + 2 * pad - kernel) / stride + 1; }
  std::size_t weight_count() const {
    return static_cast<std::size_t>(out_channels) * in_channels * kernel * kernel;
  }
};

/// weight layout: [out][in][ky][kx]
Tensor conv2d_forward(const Tensor& in, const ConvShape& shape, std::span<const double> weight,
                      std::span<const double> bias);
Tensor conv2d_backward_input(const Tensor& grad_out, const ConvShape& shape,
                             std::span<const double> weight, int in_height, int in_width);
/// Accumulates (+=) into grad_weight / grad_bias.
void conv2d_backward_params(const Tensor& in, const Tensor& grad_out, const ConvShape& shape,
                            std::span<double> grad_weight, std::span<double> grad_bias);

void relu_inplace(Tensor& t);
/// Zeroes grad where the forward activation was not positive.
void relu_backward_inplace(Tensor& grad, const Tensor& activation);

struct PoolResult {
  Tensor output;
  std::vector<std::uint32_t> argmax;  // flat input index per output element
};
PoolResult maxpool2x2_forward(const Tensor& in);
Tensor maxpool2x2_backward(const Tensor& grad_out, std::span<const std::uint32_t> argmax,
                           int in_channels, int in_height, int in_width);

/// weight layout: [out][in]
std::vector<double> linear_forward(std::span<const double> in, std::span<const double> weight,
                                   std::span<const double> bias, int out_features);
std::vector<double> linear_backward_input(std::span<const double> grad_out,
                                          std::span<const double> weight, int in_features);
void linear_backward_params(std::span<const double> in, std::span<const double> grad_out,
                            std::span<double> grad_weight, std::span<double> grad_bias);

namespace reference {

Tensor conv2d_forward(const Tensor& in, const ConvShape& shape, std::span<const double> weight,
                      std::span<const double> bias);
Tensor conv2d_backward_input(const Tensor& grad_out, const ConvShape& shape,
                             std::span<const double> weight, int in_height, int in_width);
void conv2d_backward_params(const Tensor& in, const Tensor& grad_out, const ConvShape& shape,
                            std::span<double> grad_weight, std::span<double> grad_bias);
std::vector<double> linear_forward(std::span<const double> in, std::span<const double> weight,
                                   std::span<const double> bias, int out_features);

}  // namespace reference

}  // namespace maskstrike::kernels
