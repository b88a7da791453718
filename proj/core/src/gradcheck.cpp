#include "scl/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "scl/rng.hpp"
#include "scl/shapeconv.hpp"

namespace scl {

namespace {

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max(1e-10, std::abs(a) + std::abs(b));
}

template <typename T>
void fill_normal(Tensor<T>& t, Xoshiro256& rng, double scale = 1.0) {
  for (i64 i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.normal() * scale);
}

}  // namespace

double LayerGradCheck::worst() const {
  return std::max({kernel, base_weight, shape_weight, bias, input});
}

LayerGradCheck gradcheck_shapeconv_layer(std::uint64_t seed, double eps) {
  Xoshiro256 rng(seed);
  ConvConfig cfg;
  cfg.kh = 1 + static_cast<int>(rng.below(3));
  cfg.kw = 1 + static_cast<int>(rng.below(3));
  cfg.stride_h = 1 + static_cast<int>(rng.below(2));
  cfg.stride_w = 1 + static_cast<int>(rng.below(2));
  cfg.pad_h = static_cast<int>(rng.below(2));
  cfg.pad_w = static_cast<int>(rng.below(2));
  cfg.c_in = 1 + static_cast<int>(rng.below(3));
  cfg.c_out = 1 + static_cast<int>(rng.below(3));
  cfg.has_bias = true;

  ShapeConvParams<double> params = init_params<double>(cfg, rng.next());
  fill_normal(params.shape_weight, rng, 0.25);
  for (i64 i = 0; i < params.n(); ++i)
    for (i64 c = 0; c < cfg.c_in; ++c) params.shape_weight(i, i, c) += 1.0;
  params.base_weight[0] = 1.0 + rng.normal() * 0.3;
  fill_normal(params.bias, rng, 0.2);

  const i64 h = cfg.kh + static_cast<i64>(rng.below(5));
  const i64 w = cfg.kw + static_cast<i64>(rng.below(5));
  Tensor<double> x({1 + static_cast<i64>(rng.below(2)), cfg.c_in, h, w});
  fill_normal(x, rng);

  Tensor<double> probe(shapeconv_forward(x, params).shape());
  fill_normal(probe, rng);

  auto objective = [&] {
    const Tensor<double> y = shapeconv_forward(x, params);
    double s = 0.0;
    for (i64 i = 0; i < y.size(); ++i) s += y[i] * probe[i];
    return s;
  };

  const ShapeConvGrads<double> grads = shapeconv_backward(x, params, probe);

  auto sweep = [&](Tensor<double>& t, const Tensor<double>& analytic) {
    double worst = 0.0;
    for (i64 i = 0; i < t.size(); ++i) {
      const double keep = t[i];
      t[i] = keep + eps;
      const double up = objective();
      t[i] = keep - eps;
      const double down = objective();
      t[i] = keep;
      worst = std::max(worst, rel_err((up - down) / (2 * eps), analytic[i]));
    }
    return worst;
  };

  LayerGradCheck result;
  result.kernel = sweep(params.kernel, grads.grad_kernel);
  result.base_weight = sweep(params.base_weight, grads.grad_base_weight);
  result.shape_weight = sweep(params.shape_weight, grads.grad_shape_weight);
  result.bias = sweep(params.bias, grads.grad_bias);
  result.input = sweep(x, grads.grad_input);
  return result;
}

double gradcheck_network(std::uint64_t seed, double eps, LayerKind kind) {
  // Micro topology covering stride-2, upsampling, a skip and the head, with
  // under a thousand parameters so the full sweep stays fast.
  auto conv3 = [](int c_in, int c_out, int stride) {
    return ConvConfig{3, 3, stride, stride, 1, 1, c_in, c_out, true};
  };
  ModelSpec spec;
  spec.input_channels = 3;
  spec.num_classes = 2;
  spec.width = 2;
  using L = LayerSpec;
  spec.layers = {
      L{kind, conv3(3, 2, 1), Activation::relu, LayerRole::encoder},
      L{kind, conv3(2, 3, 2), Activation::relu, LayerRole::encoder},
      L{kind, conv3(3, 2, 1), Activation::relu, LayerRole::decoder, true, 0},
      L{kind, conv3(2, 2, 1), Activation::none, LayerRole::head},
  };

  Model<double> model = build_model<double>(spec, seed);
  Xoshiro256 rng(derive_seed(seed, 99));
  Tensor<double> x({1, 3, 8, 8});
  fill_normal(x, rng);

  // Nudge parameters off the identity so the shapeconv chain is non-trivial,
  // and bias the conv outputs so few relu units sit at the kink (finite
  // differences are one-sided there).
  for (auto& [name, tensor] : model.named_params()) {
    if (name.ends_with(".wb")) (*tensor)[0] += 0.2;
    else if (name.ends_with(".ws"))
      for (i64 i = 0; i < tensor->size(); ++i) (*tensor)[i] += rng.normal() * 0.1;
    else if (name.ends_with(".bias"))
      for (i64 i = 0; i < tensor->size(); ++i) (*tensor)[i] = 0.3 + rng.normal() * 0.05;
  }

  Tensor<double> probe(model.forward(x).shape());
  fill_normal(probe, rng);

  auto objective = [&] {
    const Tensor<double> y = model.forward(x);
    double s = 0.0;
    for (i64 i = 0; i < y.size(); ++i) s += y[i] * probe[i];
    return s;
  };

  model.forward(x);
  ModelGrads<double> grads = model.backward(x, probe);
  auto params = model.named_params();
  auto grad_list = grads.named();

  double worst = 0.0;
  for (size_t p = 0; p < params.size(); ++p) {
    Tensor<double>& t = *params[p].second;
    const Tensor<double>& analytic = *grad_list[p].second;
    for (i64 i = 0; i < t.size(); ++i) {
      const double keep = t[i];
      t[i] = keep + eps;
      const double up = objective();
      t[i] = keep - eps;
      const double down = objective();
      t[i] = keep;
      worst = std::max(worst, rel_err((up - down) / (2 * eps), analytic[i]));
    }
  }
  return worst;
}

}  // namespace scl
