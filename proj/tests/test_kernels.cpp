#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "maskstrike/kernels.hpp"
#include "maskstrike/rng.hpp"

using namespace maskstrike;
using namespace maskstrike::kernels;

namespace {

std::vector<double> randv(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(-1.0, 1.0);
  return v;
}

Tensor rand_tensor(Rng& rng, int c, int h, int w) {
  Tensor t(c, h, w);
  t.data = randv(rng, t.size());
  return t;
}

// Direct convolution written from the definition, independent of both kernels.
double conv_at(const Tensor& in, const ConvShape& s, const std::vector<double>& w,
               const std::vector<double>& b, int o, int y, int x) {
  double acc = b[o];
  for (int ci = 0; ci < s.in_channels; ++ci)
    for (int ky = 0; ky < s.kernel; ++ky)
      for (int kx = 0; kx < s.kernel; ++kx) {
        const int iy = y * s.stride - s.pad + ky, ix = x * s.stride - s.pad + kx;
        if (iy < 0 || ix < 0 || iy >= in.height || ix >= in.width) continue;
        acc += w[((static_cast<std::size_t>(o) * s.in_channels + ci) * s.kernel + ky) * s.kernel + kx] *
               in.at(ci, iy, ix);
      }
  return acc;
}

}  // namespace

TEST_CASE("conv forward: parallel equals reference and the definition") {
  Rng rng(1);
  for (int t = 0; t < 25; ++t) {
    ConvShape s;
    s.in_channels = rng.uniform_int(1, 5);
    s.out_channels = rng.uniform_int(1, 6);
    s.kernel = rng.uniform_int(0, 1) ? 3 : 1;
    s.stride = rng.uniform_int(1, 2);
    s.pad = s.kernel == 3 ? rng.uniform_int(0, 1) : 0;
    const int h = rng.uniform_int(s.kernel, 14), w = rng.uniform_int(s.kernel, 14);
    const Tensor in = rand_tensor(rng, s.in_channels, h, w);
    const auto wt = randv(rng, s.weight_count());
    const auto b = randv(rng, s.out_channels);
    const Tensor par = conv2d_forward(in, s, wt, b);
    const Tensor ref = reference::conv2d_forward(in, s, wt, b);
    CHECK(par.data == ref.data);
    REQUIRE(par.height == s.out_extent(h));
    REQUIRE(par.width == s.out_extent(w));
    for (int o = 0; o < s.out_channels; ++o)
      for (int y = 0; y < par.height; ++y)
        for (int x = 0; x < par.width; ++x)
          CHECK(par.at(o, y, x) == doctest::Approx(conv_at(in, s, wt, b, o, y, x)).epsilon(1e-12));
  }
}

TEST_CASE("conv backward: parallel equals reference") {
  Rng rng(2);
  for (int t = 0; t < 25; ++t) {
    ConvShape s;
    s.in_channels = rng.uniform_int(1, 4);
    s.out_channels = rng.uniform_int(1, 5);
    s.stride = rng.uniform_int(1, 2);
    const int h = rng.uniform_int(3, 12), w = rng.uniform_int(3, 12);
    const Tensor in = rand_tensor(rng, s.in_channels, h, w);
    const auto wt = randv(rng, s.weight_count());
    const Tensor g = rand_tensor(rng, s.out_channels, s.out_extent(h), s.out_extent(w));

    CHECK(conv2d_backward_input(g, s, wt, h, w).data ==
          reference::conv2d_backward_input(g, s, wt, h, w).data);

    std::vector<double> gw1(s.weight_count(), 0.5), gb1(s.out_channels, 0.25);
    std::vector<double> gw2 = gw1, gb2 = gb1;
    conv2d_backward_params(in, g, s, gw1, gb1);
    reference::conv2d_backward_params(in, g, s, gw2, gb2);
    CHECK(gw1 == gw2);
    CHECK(gb1 == gb2);
  }
}

TEST_CASE("conv backward is the adjoint of forward") {
  // <conv(x), g> = <x, conv_T(g)> for a bias-free convolution.
  Rng rng(3);
  for (int t = 0; t < 10; ++t) {
    ConvShape s;
    s.in_channels = rng.uniform_int(1, 3);
    s.out_channels = rng.uniform_int(1, 3);
    s.stride = rng.uniform_int(1, 2);
    const int h = rng.uniform_int(4, 10), w = rng.uniform_int(4, 10);
    const Tensor x = rand_tensor(rng, s.in_channels, h, w);
    const auto wt = randv(rng, s.weight_count());
    const std::vector<double> zero(s.out_channels, 0.0);
    const Tensor y = conv2d_forward(x, s, wt, zero);
    const Tensor g = rand_tensor(rng, y.channels, y.height, y.width);
    const Tensor xt = conv2d_backward_input(g, s, wt, h, w);
    double lhs = 0, rhs = 0;
    for (std::size_t i = 0; i < y.size(); ++i) lhs += y.data[i] * g.data[i];
    for (std::size_t i = 0; i < x.size(); ++i) rhs += x.data[i] * xt.data[i];
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-10));
  }
}

TEST_CASE("linear: parallel equals reference, backward matches transpose") {
  Rng rng(4);
  for (int t = 0; t < 20; ++t) {
    const int in_f = rng.uniform_int(1, 40), out_f = rng.uniform_int(1, 20);
    const auto x = randv(rng, in_f), w = randv(rng, static_cast<std::size_t>(in_f) * out_f),
               b = randv(rng, out_f);
    const auto y = linear_forward(x, w, b, out_f);
    CHECK(y == reference::linear_forward(x, w, b, out_f));
    const auto g = randv(rng, out_f);
    const auto gx = linear_backward_input(g, w, in_f);
    for (int i = 0; i < in_f; ++i) {
      double s = 0;
      for (int o = 0; o < out_f; ++o) s += w[static_cast<std::size_t>(o) * in_f + i] * g[o];
      CHECK(gx[i] == doctest::Approx(s).epsilon(1e-12));
    }
    std::vector<double> gw(w.size(), 0.0), gb(out_f, 0.0);
    linear_backward_params(x, g, gw, gb);
    for (int o = 0; o < out_f; ++o) {
      CHECK(gb[o] == g[o]);
      for (int i = 0; i < in_f; ++i) CHECK(gw[static_cast<std::size_t>(o) * in_f + i] == g[o] * x[i]);
    }
  }
}

TEST_CASE("relu and maxpool") {
  Rng rng(5);
  Tensor t = rand_tensor(rng, 2, 5, 7);
  const Tensor before = t;
  relu_inplace(t);
  for (std::size_t i = 0; i < t.size(); ++i) CHECK(t.data[i] == std::max(0.0, before.data[i]));
  Tensor g(2, 5, 7, 1.0);
  relu_backward_inplace(g, t);
  for (std::size_t i = 0; i < t.size(); ++i) CHECK(g.data[i] == (t.data[i] > 0 ? 1.0 : 0.0));

  const Tensor in = rand_tensor(rng, 3, 6, 8);
  const PoolResult p = maxpool2x2_forward(in);
  REQUIRE(p.output.height == 3);
  REQUIRE(p.output.width == 4);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 3; ++y)
      for (int x = 0; x < 4; ++x) {
        const double m = std::max({in.at(c, 2 * y, 2 * x), in.at(c, 2 * y + 1, 2 * x),
                                   in.at(c, 2 * y, 2 * x + 1), in.at(c, 2 * y + 1, 2 * x + 1)});
        CHECK(p.output.at(c, y, x) == m);
      }
  const Tensor go(3, 3, 4, 1.0);
  const Tensor gi = maxpool2x2_backward(go, p.argmax, 3, 6, 8);
  double total = 0;
  for (double v : gi.data) total += v;
  CHECK(total == 36.0);
}
