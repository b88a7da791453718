#include <doctest.h>

#include <cmath>

#include "scl/conv.hpp"
#include "scl/rng.hpp"

using namespace scl;

namespace {

template <typename T>
void fill_normal(Tensor<T>& t, Xoshiro256& rng, double scale = 1.0) {
  for (i64 i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.normal() * scale);
}

ConvConfig random_cfg(Xoshiro256& rng, bool with_bias) {
  ConvConfig cfg;
  cfg.kh = 1 + static_cast<int>(rng.below(3));
  cfg.kw = 1 + static_cast<int>(rng.below(3));
  cfg.stride_h = 1 + static_cast<int>(rng.below(2));
  cfg.stride_w = 1 + static_cast<int>(rng.below(2));
  cfg.pad_h = static_cast<int>(rng.below(2));
  cfg.pad_w = static_cast<int>(rng.below(2));
  cfg.c_in = 1 + static_cast<int>(rng.below(4));
  cfg.c_out = 1 + static_cast<int>(rng.below(4));
  cfg.has_bias = with_bias && rng.below(2) == 1;
  return cfg;
}

// kernels drawn at trained-network scale keep outputs near unit magnitude
template <typename T>
Tensor<T> random_kernel(const ConvConfig& cfg, Xoshiro256& rng) {
  Tensor<T> k({cfg.kh, cfg.kw, cfg.c_in, cfg.c_out});
  fill_normal(k, rng, 1.0 / std::sqrt(static_cast<double>(cfg.kh * cfg.kw * cfg.c_in)));
  return k;
}

// Independent adjoint oracle: nested-loop accumulation of the input
// gradient, scattering each output gradient through the kernel taps.
template <typename T>
Tensor<T> grad_input_oracle(const Tensor<T>& x, const Tensor<T>& k, const ConvConfig& cfg,
                            const Tensor<T>& g) {
  const i64 n = x.extent(0), h = x.extent(2), w = x.extent(3);
  const i64 ho = cfg.out_h(h), wo = cfg.out_w(w);
  Tensor<T> gx(x.shape());
  for (i64 b = 0; b < n; ++b)
    for (i64 co = 0; co < cfg.c_out; ++co)
      for (i64 oh = 0; oh < ho; ++oh)
        for (i64 ow = 0; ow < wo; ++ow)
          for (i64 c = 0; c < cfg.c_in; ++c)
            for (i64 ki = 0; ki < cfg.kh; ++ki)
              for (i64 kj = 0; kj < cfg.kw; ++kj) {
                const i64 ih = oh * cfg.stride_h - cfg.pad_h + ki;
                const i64 iw = ow * cfg.stride_w - cfg.pad_w + kj;
                if (ih < 0 || ih >= h || iw < 0 || iw >= w) continue;
                gx(b, c, ih, iw) += k(ki, kj, c, co) * g(b, co, oh, ow);
              }
  return gx;
}

}  // namespace

TEST_CASE("conv2d hand cases") {
  ConvConfig cfg;
  cfg.kh = cfg.kw = 2;
  const Tensor<double> x({1, 1, 2, 2}, {1, 2, 3, 4});
  const Tensor<double> ones = Tensor<double>::full({2, 2, 1, 1}, 1.0);
  CHECK(conv2d_direct(x, ones, nullptr, cfg)[0] == 10.0);
  CHECK(conv2d(x, ones, nullptr, cfg)[0] == 10.0);

  // 1x1 identity weight passes the input through untouched
  ConvConfig id;
  const Tensor<double> unit({1, 1, 1, 1}, {1.0});
  const Tensor<double> y = conv2d(x, unit, nullptr, id);
  CHECK(max_abs_diff(y, x) == 0.0);

  // zero kernel, and bias-only output
  ConvConfig biased = cfg;
  biased.has_bias = true;
  const Tensor<double> zeros({2, 2, 1, 1});
  const Tensor<double> bias({1}, {2.5});
  CHECK(conv2d(x, zeros, nullptr, cfg)[0] == 0.0);
  CHECK(conv2d(x, zeros, &bias, biased)[0] == 2.5);
}

TEST_CASE("conv2d agrees with the direct path on a strided padded case") {
  Xoshiro256 rng(7);
  ConvConfig cfg;
  cfg.kh = cfg.kw = 3;
  cfg.stride_h = cfg.stride_w = 2;
  cfg.pad_h = cfg.pad_w = 1;
  cfg.c_in = 3;
  cfg.c_out = 4;
  Tensor<float> x({2, 3, 8, 8});
  fill_normal(x, rng);
  Tensor<float> k = random_kernel<float>(cfg, rng);
  CHECK(max_abs_diff(conv2d(x, k, nullptr, cfg), conv2d_direct(x, k, nullptr, cfg)) <= 1e-6);
}

TEST_CASE("path equivalence over 200 random draws") {
  double worst_f32 = 0.0, worst_f64 = 0.0;
  for (int it = 0; it < 200; ++it) {
    Xoshiro256 rng(1000 + static_cast<std::uint64_t>(it));
    const ConvConfig cfg = random_cfg(rng, true);
    const i64 h = cfg.kh + static_cast<i64>(rng.below(7));
    const i64 w = cfg.kw + static_cast<i64>(rng.below(7));
    Tensor<double> x({1 + static_cast<i64>(rng.below(2)), cfg.c_in, h, w});
    fill_normal(x, rng);
    Tensor<double> k = random_kernel<double>(cfg, rng);
    Tensor<double> bias({cfg.c_out});
    fill_normal(bias, rng);
    const Tensor<double>* bp = cfg.has_bias ? &bias : nullptr;
    worst_f64 = std::max(worst_f64,
                         max_abs_diff(conv2d(x, k, bp, cfg), conv2d_direct(x, k, bp, cfg)));

    Tensor<float> xf(x.shape()), kf(k.shape()), biasf(bias.shape());
    for (i64 i = 0; i < x.size(); ++i) xf[i] = static_cast<float>(x[i]);
    for (i64 i = 0; i < k.size(); ++i) kf[i] = static_cast<float>(k[i]);
    for (i64 i = 0; i < bias.size(); ++i) biasf[i] = static_cast<float>(bias[i]);
    const Tensor<float>* bpf = cfg.has_bias ? &biasf : nullptr;
    worst_f32 = std::max(worst_f32, max_abs_diff(conv2d(xf, kf, bpf, cfg),
                                                 conv2d_direct(xf, kf, bpf, cfg)));
  }
  CHECK(worst_f64 <= 1e-12);
  CHECK(worst_f32 <= 1e-6);
}

TEST_CASE("conv2d is linear in the kernel") {
  for (int it = 0; it < 10; ++it) {
    Xoshiro256 rng(300 + static_cast<std::uint64_t>(it));
    ConvConfig cfg = random_cfg(rng, false);
    cfg.has_bias = false;
    const i64 h = cfg.kh + static_cast<i64>(rng.below(5));
    const i64 w = cfg.kw + static_cast<i64>(rng.below(5));
    Tensor<double> x({1, cfg.c_in, h, w});
    fill_normal(x, rng);
    const Tensor<double> k1 = random_kernel<double>(cfg, rng);
    const Tensor<double> k2 = random_kernel<double>(cfg, rng);
    const double a = rng.normal(), b = rng.normal();

    Tensor<double> mixed(k1.shape());
    for (i64 i = 0; i < mixed.size(); ++i) mixed[i] = a * k1[i] + b * k2[i];
    const Tensor<double> lhs = conv2d(x, mixed, nullptr, cfg);
    const Tensor<double> y1 = conv2d(x, k1, nullptr, cfg);
    const Tensor<double> y2 = conv2d(x, k2, nullptr, cfg);

    double scale = 1.0;
    for (i64 i = 0; i < lhs.size(); ++i)
      scale = std::max(scale, std::abs(a * y1[i] + b * y2[i]));
    for (i64 i = 0; i < lhs.size(); ++i)
      CHECK(std::abs(lhs[i] - (a * y1[i] + b * y2[i])) / scale <= 1e-6);
  }
}

TEST_CASE("backward of zero gradient is zero") {
  Xoshiro256 rng(17);
  const ConvConfig cfg = random_cfg(rng, true);
  ConvConfig with_bias = cfg;
  with_bias.has_bias = true;
  Tensor<double> x({1, cfg.c_in, cfg.kh + 2, cfg.kw + 2});
  fill_normal(x, rng);
  const Tensor<double> k = random_kernel<double>(with_bias, rng);
  const i64 ho = with_bias.out_h(x.extent(2)), wo = with_bias.out_w(x.extent(3));
  const Tensor<double> g({1, with_bias.c_out, ho, wo});
  const ConvGrads<double> grads = conv2d_backward(x, k, with_bias, g);
  for (i64 i = 0; i < grads.grad_input.size(); ++i) CHECK(grads.grad_input[i] == 0.0);
  for (i64 i = 0; i < grads.grad_kernel.size(); ++i) CHECK(grads.grad_kernel[i] == 0.0);
  for (i64 i = 0; i < grads.grad_bias.size(); ++i) CHECK(grads.grad_bias[i] == 0.0);
}

TEST_CASE("1x1 kernel gradient by hand") {
  // grad_kernel[c_in, c_out] = sum over pixels of x[c_in] * g[c_out]
  ConvConfig cfg;
  cfg.c_in = 1;
  cfg.c_out = 1;
  const Tensor<double> x({1, 1, 2, 2}, {1, 2, 3, 4});
  const Tensor<double> k({1, 1, 1, 1}, {0.5});
  const Tensor<double> g({1, 1, 2, 2}, {1, 10, 100, 1000});
  const ConvGrads<double> grads = conv2d_backward(x, k, cfg, g);
  CHECK(grads.grad_kernel[0] == doctest::Approx(1 + 20 + 300 + 4000).epsilon(1e-14));
  // input gradient is g scaled by the kernel weight
  for (i64 i = 0; i < 4; ++i) CHECK(grads.grad_input[i] == 0.5 * g[i]);
}

TEST_CASE("backward matches finite differences") {
  Xoshiro256 rng(23);
  ConvConfig cfg;
  cfg.kh = 3;
  cfg.kw = 2;
  cfg.stride_h = 2;
  cfg.pad_w = 1;
  cfg.c_in = 2;
  cfg.c_out = 3;
  cfg.has_bias = true;
  Tensor<double> x({1, 2, 5, 4});
  fill_normal(x, rng);
  Tensor<double> k = random_kernel<double>(cfg, rng);
  Tensor<double> bias({cfg.c_out});
  fill_normal(bias, rng, 0.1);

  const Tensor<double> y0 = conv2d(x, k, &bias, cfg);
  Tensor<double> probe(y0.shape());
  fill_normal(probe, rng);

  auto objective = [&] {
    const Tensor<double> y = conv2d(x, k, &bias, cfg);
    double s = 0.0;
    for (i64 i = 0; i < y.size(); ++i) s += y[i] * probe[i];
    return s;
  };
  const ConvGrads<double> grads = conv2d_backward(x, k, cfg, probe);

  const double eps = 1e-5;
  auto sweep = [&](Tensor<double>& t, const Tensor<double>& analytic) {
    for (i64 i = 0; i < t.size(); ++i) {
      const double keep = t[i];
      t[i] = keep + eps;
      const double up = objective();
      t[i] = keep - eps;
      const double down = objective();
      t[i] = keep;
      const double fd = (up - down) / (2 * eps);
      CHECK(std::abs(fd - analytic[i]) / std::max(1e-10, std::abs(fd) + std::abs(analytic[i])) <=
            1e-6);
    }
  };
  sweep(x, grads.grad_input);
  sweep(k, grads.grad_kernel);
  sweep(bias, grads.grad_bias);
}

TEST_CASE("adjoint identities") {
  for (int it = 0; it < 10; ++it) {
    Xoshiro256 rng(400 + static_cast<std::uint64_t>(it));
    ConvConfig cfg = random_cfg(rng, false);
    cfg.has_bias = false;
    const i64 h = cfg.kh + static_cast<i64>(rng.below(5));
    const i64 w = cfg.kw + static_cast<i64>(rng.below(5));
    Tensor<double> x({1 + static_cast<i64>(rng.below(2)), cfg.c_in, h, w});
    fill_normal(x, rng);
    const Tensor<double> k = random_kernel<double>(cfg, rng);
    const Tensor<double> y = conv2d(x, k, nullptr, cfg);
    Tensor<double> g(y.shape());
    fill_normal(g, rng);
    const ConvGrads<double> grads = conv2d_backward(x, k, cfg, g);

    double yg = 0.0, xdx = 0.0, kdk = 0.0;
    for (i64 i = 0; i < y.size(); ++i) yg += y[i] * g[i];
    for (i64 i = 0; i < x.size(); ++i) xdx += x[i] * grads.grad_input[i];
    for (i64 i = 0; i < k.size(); ++i) kdk += k[i] * grads.grad_kernel[i];
    CHECK(std::abs(yg - xdx) <= 1e-10);
    CHECK(std::abs(yg - kdk) <= 1e-10);
  }
}

TEST_CASE("col2im overlap-add reproduces the direct input gradient") {
  for (int it = 0; it < 8; ++it) {
    Xoshiro256 rng(500 + static_cast<std::uint64_t>(it));
    const ConvConfig cfg = random_cfg(rng, false);
    const i64 h = cfg.kh + static_cast<i64>(rng.below(5));
    const i64 w = cfg.kw + static_cast<i64>(rng.below(5));
    Tensor<double> x({1, cfg.c_in, h, w});
    fill_normal(x, rng);
    const Tensor<double> k = random_kernel<double>(cfg, rng);
    const i64 ho = cfg.out_h(h), wo = cfg.out_w(w);
    Tensor<double> g({1, cfg.c_out, ho, wo});
    fill_normal(g, rng);

    // route 1: production backward
    const ConvGrads<double> grads = conv2d_backward(x, k, cfg, g);
    // route 2: scatter K^T G columns through the public col2im
    Tensor<double> gcols({static_cast<i64>(cfg.c_in) * cfg.kh * cfg.kw, ho * wo});
    for (i64 c = 0; c < cfg.c_in; ++c)
      for (i64 ki = 0; ki < cfg.kh; ++ki)
        for (i64 kj = 0; kj < cfg.kw; ++kj)
          for (i64 col = 0; col < ho * wo; ++col) {
            double s = 0.0;
            for (i64 co = 0; co < cfg.c_out; ++co)
              s += k(ki, kj, c, co) * g(0, co, col / wo, col % wo);
            gcols((c * cfg.kh + ki) * cfg.kw + kj, col) = s;
          }
    const Tensor<double> via_col2im = col2im(gcols, x.shape(), cfg);
    // route 3: independent nested-loop oracle
    const Tensor<double> oracle = grad_input_oracle(x, k, cfg, g);

    CHECK(max_abs_diff(grads.grad_input, oracle) <= 1e-10);
    CHECK(max_abs_diff(via_col2im, oracle) <= 1e-10);
  }
}

TEST_CASE("conv error paths") {
  ConvConfig cfg;
  cfg.kh = cfg.kw = 3;
  cfg.c_in = 2;
  cfg.c_out = 2;
  Tensor<double> x({1, 2, 5, 5});
  Tensor<double> k({3, 3, 2, 2});
  CHECK_THROWS_AS(conv2d(Tensor<double>({1, 3, 5, 5}), k, nullptr, cfg),
                  std::invalid_argument);
  CHECK_THROWS_AS(conv2d(x, Tensor<double>({3, 3, 2, 1}), nullptr, cfg),
                  std::invalid_argument);
  ConvConfig biased = cfg;
  biased.has_bias = true;
  CHECK_THROWS_AS(conv2d(x, k, nullptr, biased), std::invalid_argument);
  const i64 ho = cfg.out_h(5), wo = cfg.out_w(5);
  CHECK_THROWS_AS(conv2d_backward(x, k, cfg, Tensor<double>({1, 2, ho + 1, wo})),
                  std::invalid_argument);
}
