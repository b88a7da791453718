#include "scl/selftest.hpp"

#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "scl/gradcheck.hpp"
#include "scl/metrics.hpp"
#include "scl/rng.hpp"
#include "scl/shapeconv.hpp"
#include "scl/train.hpp"

namespace scl {

namespace {

struct Reporter {
  std::ostream& os;
  bool all_ok = true;

  void check(const std::string& name, bool ok, double measured = -1.0) {
    char buf[160];
    if (measured >= 0.0)
      std::snprintf(buf, sizeof buf, "[%s] %-52s max %.3e\n", ok ? "ok" : "FAIL",
                    name.c_str(), measured);
    else
      std::snprintf(buf, sizeof buf, "[%s] %s\n", ok ? "ok" : "FAIL", name.c_str());
    os << buf;
    all_ok = all_ok && ok;
  }

  void note(const std::string& name, double measured) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "[--] %-52s max %.3e (measured, not asserted)\n",
                  name.c_str(), measured);
    os << buf;
  }
};

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

template <typename T>
Tensor<T> random_input(const ConvConfig& cfg, Xoshiro256& rng, i64 batch = 0) {
  const i64 n = batch > 0 ? batch : 1 + static_cast<i64>(rng.below(2));
  const i64 h = cfg.kh + static_cast<i64>(rng.below(6));
  const i64 w = cfg.kw + static_cast<i64>(rng.below(6));
  Tensor<T> x({n, cfg.c_in, h, w});
  fill_normal(x, rng);
  return x;
}

// Symmetric slice with uniform column sums: a*I + b*J + C where C is a
// symmetric matrix whose row and column sums all vanish.
template <typename T>
void make_symmetric_uniform(Tensor<T>& ws, Xoshiro256& rng) {
  const i64 n = ws.extent(0), c_in = ws.extent(2);
  std::vector<double> s(static_cast<size_t>(n * n));
  for (i64 c = 0; c < c_in; ++c) {
    for (i64 i = 0; i < n; ++i)
      for (i64 j = i; j < n; ++j) {
        const double v = rng.normal() * 0.3;
        s[static_cast<size_t>(i * n + j)] = v;
        s[static_cast<size_t>(j * n + i)] = v;
      }
    std::vector<double> row_sum(static_cast<size_t>(n), 0.0);
    double total = 0.0;
    for (i64 i = 0; i < n; ++i)
      for (i64 j = 0; j < n; ++j) {
        row_sum[static_cast<size_t>(i)] += s[static_cast<size_t>(i * n + j)];
        total += s[static_cast<size_t>(i * n + j)];
      }
    const double a = 1.0 + rng.normal() * 0.2;
    const double b = rng.normal() * 0.1;
    for (i64 i = 0; i < n; ++i)
      for (i64 j = 0; j < n; ++j) {
        const double centered = s[static_cast<size_t>(i * n + j)] -
                                (row_sum[static_cast<size_t>(i)] + row_sum[static_cast<size_t>(j)]) / n +
                                total / (n * n);
        ws(i, j, c) = static_cast<T>(centered + (i == j ? a : 0.0) + b);
      }
  }
}

}  // namespace

bool run_selftest(std::ostream& os) {
  Reporter rep{os};

  {  // reduction and matmul against loop oracles
    Xoshiro256 rng(101);
    Tensor<double> t({3, 3, 4});
    fill_normal(t, rng);
    Tensor<double> m = reduce_mean(t, Axes{0, 1});
    double worst = 0.0;
    for (i64 c = 0; c < 4; ++c) {
      double s = 0.0;
      for (i64 i = 0; i < 3; ++i)
        for (i64 j = 0; j < 3; ++j) s += t(i, j, c);
      worst = std::max(worst, std::abs(m[c] - s / 9.0));
    }
    const Tensor<double> hand({2, 2}, {1, 2, 3, 5});
    worst = std::max(worst, std::abs(reduce_mean(hand, Axes{0, 1})[0] - 2.75));

    Tensor<double> a({5, 4}), b({4, 6});
    fill_normal(a, rng);
    fill_normal(b, rng);
    Tensor<double> c = matmul(a, b);
    for (i64 i = 0; i < 5; ++i)
      for (i64 j = 0; j < 6; ++j) {
        double s = 0.0;
        for (i64 k = 0; k < 4; ++k) s += a(i, k) * b(k, j);
        worst = std::max(worst, std::abs(c(i, j) - s));
      }
    rep.check("reduce_mean / matmul loop oracles", worst <= 1e-12, worst);
  }

  {  // conv path equivalence, both dtypes
    double worst_f64 = 0.0, worst_f32 = 0.0;
    for (int it = 0; it < 20; ++it) {
      Xoshiro256 rng(200 + static_cast<std::uint64_t>(it));
      ConvConfig cfg = random_cfg(rng, true);
      Tensor<double> x = random_input<double>(cfg, rng);
      Tensor<double> k({cfg.kh, cfg.kw, cfg.c_in, cfg.c_out});
      Tensor<double> bias({cfg.c_out});
      // kernels at trained-network scale keep the outputs near unit size
      fill_normal(k, rng, 1.0 / std::sqrt(static_cast<double>(cfg.kh * cfg.kw * cfg.c_in)));
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
    rep.check("conv2d im2col path == direct path (f64)", worst_f64 <= 1e-12, worst_f64);
    rep.check("conv2d im2col path == direct path (f32)", worst_f32 <= 1e-6, worst_f32);
  }

  {  // conv adjoint identities <y, g> = <x, dx> = <k, dk>
    double worst = 0.0;
    for (int it = 0; it < 5; ++it) {
      Xoshiro256 rng(300 + static_cast<std::uint64_t>(it));
      ConvConfig cfg = random_cfg(rng, false);
      Tensor<double> x = random_input<double>(cfg, rng);
      Tensor<double> k({cfg.kh, cfg.kw, cfg.c_in, cfg.c_out});
      fill_normal(k, rng);
      const Tensor<double> y = conv2d(x, k, nullptr, cfg);
      Tensor<double> g(y.shape());
      fill_normal(g, rng);
      const ConvGrads<double> grads = conv2d_backward(x, k, cfg, g);
      double yg = 0.0, xdx = 0.0, kdk = 0.0;
      for (i64 i = 0; i < y.size(); ++i) yg += y[i] * g[i];
      for (i64 i = 0; i < x.size(); ++i) xdx += x[i] * grads.grad_input[i];
      for (i64 i = 0; i < k.size(); ++i) kdk += k[i] * grads.grad_kernel[i];
      worst = std::max({worst, std::abs(yg - xdx), std::abs(yg - kdk)});
    }
    rep.check("conv backward adjoint identity", worst <= 1e-10, worst);
  }

  {  // assembly identities
    Xoshiro256 rng(400);
    bool init_exact = true;
    double worst_oracle = 0.0;
    for (int it = 0; it < 20; ++it) {
      ConvConfig cfg = random_cfg(rng, false);
      ShapeConvParams<double> p = init_params<double>(cfg, rng.next());
      const Tensor<double> kbs = assemble_kbs(p);
      for (i64 i = 0; i < kbs.size(); ++i) init_exact = init_exact && kbs[i] == p.kernel[i];

      // randomize and compare against the literal product composition
      p.base_weight[0] = rng.normal();
      fill_normal(p.shape_weight, rng, 0.5);
      const KernelDecomposition<double> d = decompose_kernel(p.kernel);
      const Tensor<double> base = base_product_kernel(p.base_weight[0], d.base);
      const Tensor<double> mixed = shape_product_kernel(p.shape_weight, d.shape);
      const Tensor<double> assembled = assemble_kbs(p);
      for (i64 o = 0; o < p.n(); ++o)
        for (i64 c = 0; c < cfg.c_in; ++c)
          for (i64 co = 0; co < cfg.c_out; ++co) {
            const double literal = base(0, 0, c, co) + mixed(o / cfg.kw, o % cfg.kw, c, co);
            worst_oracle = std::max(worst_oracle,
                                    std::abs(literal - assembled(o / cfg.kw, o % cfg.kw, c, co)));
          }
    }
    rep.check("assemble_kbs at identity == kernel (bitwise)", init_exact);
    rep.check("assemble_kbs == base-product + shape-product", worst_oracle <= 1e-12,
              worst_oracle);
  }

  {  // init equivalence and fusion equivalence at the layer level
    double worst_init = 0.0, worst_fused = 0.0;
    for (int it = 0; it < 20; ++it) {
      Xoshiro256 rng(500 + static_cast<std::uint64_t>(it));
      ConvConfig cfg = random_cfg(rng, true);
      ShapeConvParams<double> p = init_params<double>(cfg, rng.next());
      Tensor<double> x = random_input<double>(cfg, rng);
      const Tensor<double>* bias = cfg.has_bias ? &p.bias : nullptr;
      worst_init = std::max(worst_init, max_abs_diff(shapeconv_forward(x, p),
                                                     conv2d(x, p.kernel, bias, cfg)));

      p.base_weight[0] = rng.normal();
      fill_normal(p.shape_weight, rng, 0.5);
      if (cfg.has_bias) fill_normal(p.bias, rng);
      const FusedConv<double> fused = fuse(p);
      worst_fused = std::max(worst_fused,
                             max_abs_diff(conv2d(x, fused.kernel,
                                                 cfg.has_bias ? &fused.bias : nullptr, cfg),
                                          shapeconv_forward(x, p)));
    }
    rep.check("shapeconv at init == vanilla conv2d", worst_init == 0.0, worst_init);
    rep.check("fused kernel == shapeconv forward", worst_fused <= 1e-12, worst_fused);
  }

  {  // patch-side vs kernel-side formulation
    double worst_identity = 0.0, worst_symmetric = 0.0, worst_arbitrary = 0.0;
    for (int it = 0; it < 10; ++it) {
      Xoshiro256 rng(600 + static_cast<std::uint64_t>(it));
      ConvConfig cfg = random_cfg(rng, false);
      ShapeConvParams<double> p = init_params<double>(cfg, rng.next());
      Tensor<double> x = random_input<double>(cfg, rng);

      p.base_weight[0] = rng.normal();
      worst_identity = std::max(worst_identity,
                                max_abs_diff(shapeconv_forward_patchside(x, p),
                                             shapeconv_forward(x, p)));

      make_symmetric_uniform(p.shape_weight, rng);
      worst_symmetric = std::max(worst_symmetric,
                                 max_abs_diff(shapeconv_forward_patchside(x, p),
                                              shapeconv_forward(x, p)));

      fill_normal(p.shape_weight, rng, 0.5);
      worst_arbitrary = std::max(worst_arbitrary,
                                 max_abs_diff(shapeconv_forward_patchside(x, p),
                                              shapeconv_forward(x, p)));
    }
    rep.check("patch-side == kernel-side at identity mixing", worst_identity <= 1e-12,
              worst_identity);
    rep.check("patch-side == kernel-side for symmetric uniform", worst_symmetric <= 1e-10,
              worst_symmetric);
    rep.note("patch-side vs kernel-side, arbitrary mixing", worst_arbitrary);
  }

  {  // gradient checks
    double worst = 0.0;
    for (int it = 0; it < 5; ++it)
      worst = std::max(worst,
                       gradcheck_shapeconv_layer(700 + static_cast<std::uint64_t>(it)).worst());
    worst = std::max(worst, gradcheck_network(750, 1e-5, LayerKind::shapeconv));
    rep.check("gradients vs central finite differences", worst <= 1e-4, worst);
  }

  {  // metric oracles
    ConfusionMatrix cm(2);
    cm.at(0, 0) = 3;
    cm.at(0, 1) = 1;
    cm.at(1, 0) = 2;
    cm.at(1, 1) = 4;
    const FcnMetrics m = fcn_metrics(cm);
    const double worst = std::max(
        {std::abs(m.pixel_acc - 0.7), std::abs(m.mean_acc - (0.75 + 2.0 / 3.0) / 2.0),
         std::abs(m.mean_iou - (0.5 + 4.0 / 7.0) / 2.0),
         std::abs(m.fw_iou - (4 * 0.5 + 6 * (4.0 / 7.0)) / 10.0)});
    rep.check("fcn metric hand oracle", worst <= 1e-12, worst);

    Tensor<float> gt({4, 4}), pred({4, 4});
    for (i64 y = 0; y < 4; ++y)
      for (i64 x = 0; x < 4; ++x) {
        gt(y, x) = x < 2 ? 0.0f : 1.0f;
        pred(y, x) = (x == 1 || x == 2) ? (x < 2 ? 1.0f : 0.0f) : gt(y, x);
      }
    const TrimapCurve curve = trimap_curve(std::vector<Tensor<float>>{pred},
                                           std::vector<Tensor<float>>{gt}, {1, 2, 4});
    rep.check("trimap hand oracle", curve.fractions[0] == 1.0 && curve.fractions[1] == 0.5 &&
                                        curve.fractions[2] == 0.5);
  }

  {  // depth-offset invariances
    Xoshiro256 rng(800);
    double worst_patch = 0.0, worst_layer = 0.0;
    for (int it = 0; it < 10; ++it) {
      Tensor<double> patch({3, 3, 2});
      fill_normal(patch, rng);
      Tensor<double> shifted = patch;
      const double offs[2] = {rng.normal(), rng.normal()};
      for (i64 i = 0; i < 3; ++i)
        for (i64 j = 0; j < 3; ++j)
          for (i64 c = 0; c < 2; ++c) shifted(i, j, c) += offs[c];
      worst_patch = std::max(worst_patch, max_abs_diff(decompose_patch(patch).shape,
                                                       decompose_patch(shifted).shape));

      ConvConfig cfg = random_cfg(rng, false);
      cfg.pad_h = cfg.pad_w = 0;  // padded taps would not shift with the input
      ShapeConvParams<double> p = init_params<double>(cfg, rng.next());
      p.base_weight[0] = 0.0;  // base path off, identity mixing
      Tensor<double> x = random_input<double>(cfg, rng);
      Tensor<double> xs = x;
      const double delta = rng.normal();
      for (i64 i = 0; i < xs.size(); ++i) xs[i] += delta;
      worst_layer = std::max(worst_layer,
                             max_abs_diff(shapeconv_forward(x, p), shapeconv_forward(xs, p)));
    }
    rep.check("patch shape invariant under constant offset", worst_patch <= 1e-12, worst_patch);
    rep.check("layer output invariant under constant offset", worst_layer <= 1e-10, worst_layer);
  }

  {  // loss oracle
    Tensor<double> logits({1, 2, 1, 1});
    Tensor<float> labels({1, 1, 1});
    const LossResult<double> r = cross_entropy_loss(logits, labels);
    rep.check("cross entropy ln(2) oracle",
              std::abs(r.loss - std::log(2.0)) <= 1e-12);
  }

  os << (rep.all_ok ? "selftest: all checks passed\n" : "selftest: FAILURES above\n");
  return rep.all_ok;
}

}  // namespace scl
