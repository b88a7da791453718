#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "scl/checkpoint.hpp"
#include "scl/net.hpp"
#include "scl/rng.hpp"

using namespace scl;
namespace fs = std::filesystem;

namespace {

template <typename T>
Tensor<T> random_batch(int channels, i64 n, i64 hw, std::uint64_t seed) {
  Tensor<T> x({n, channels, hw, hw});
  Xoshiro256 rng(seed);
  for (i64 i = 0; i < x.size(); ++i) x[i] = static_cast<T>(rng.normal());
  return x;
}

// Nudges a model's shapeconv weights off the identity so fusion and
// checkpointing are tested with non-trivial values.
template <typename T>
void perturb(Model<T>& model, std::uint64_t seed) {
  Xoshiro256 rng(seed);
  for (auto& [name, tensor] : model.named_params()) {
    if (name.ends_with(".wb")) (*tensor)[0] += static_cast<T>(0.25);
    else if (name.ends_with(".ws"))
      for (i64 i = 0; i < tensor->size(); ++i)
        (*tensor)[i] += static_cast<T>(rng.normal() * 0.1);
  }
}

}  // namespace

TEST_CASE("toy spec shape and parameter count") {
  const ModelSpec vanilla = ModelSpec::toy(4, 6, 16, LayerKind::conv);
  const ModelSpec shape = ModelSpec::toy(4, 6, 16, LayerKind::shapeconv);
  CHECK(vanilla.layers.size() == 7);
  CHECK(vanilla.layers.back().role == LayerRole::head);

  // vanilla: kernels plus biases, computed independently
  i64 expected = 0;
  for (const LayerSpec& ls : vanilla.layers)
    expected += 9 * ls.cfg.c_in * ls.cfg.c_out + ls.cfg.c_out;
  CHECK(count_parameters(vanilla) == expected);

  // shapeconv adds 1 + n^2 * c_in per layer
  i64 extra = 0;
  for (const LayerSpec& ls : shape.layers) extra += 1 + 81 * ls.cfg.c_in;
  CHECK(count_parameters(shape) == expected + extra);

  // the built model's tensors add up to the same count
  Model<float> model = build_model<float>(shape, 3);
  i64 stored = 0;
  for (auto& [name, tensor] : model.named_params()) stored += tensor->size();
  CHECK(stored == expected + extra);
}

TEST_CASE("spec validation") {
  ModelSpec bad = ModelSpec::toy(4, 6, 16, LayerKind::conv);
  bad.layers.back().cfg.c_out = 5;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = ModelSpec::toy(4, 6, 16, LayerKind::conv);
  bad.layers.back().activation = Activation::relu;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = ModelSpec::toy(4, 6, 16, LayerKind::conv);
  bad.layers[3].cfg.c_in = 1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = ModelSpec::toy(4, 6, 16, LayerKind::conv);
  bad.layers[4].skip_from = 5;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("upsampling and its adjoint") {
  const Tensor<double> x({1, 1, 2, 2}, {1, 2, 3, 4});
  const Tensor<double> up = upsample2_nearest(x);
  REQUIRE(up.shape() == Shape{1, 1, 4, 4});
  CHECK(up(0, 0, 0, 0) == 1.0);
  CHECK(up(0, 0, 0, 1) == 1.0);
  CHECK(up(0, 0, 1, 1) == 1.0);
  CHECK(up(0, 0, 3, 3) == 4.0);

  Xoshiro256 rng(4);
  Tensor<double> g(up.shape());
  for (i64 i = 0; i < g.size(); ++i) g[i] = rng.normal();
  const Tensor<double> back = upsample2_nearest_backward(g);
  double lhs = 0.0, rhs = 0.0;
  for (i64 i = 0; i < g.size(); ++i) lhs += up[i] * g[i];
  for (i64 i = 0; i < x.size(); ++i) rhs += x[i] * back[i];
  CHECK(std::abs(lhs - rhs) <= 1e-12);
}

TEST_CASE("vanilla and shapeconv twins are identical at initialization") {
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    Model<float> vanilla = build_model<float>(ModelSpec::toy(4, 6, 8, LayerKind::conv), seed);
    Model<float> shape =
        build_model<float>(ModelSpec::toy(4, 6, 8, LayerKind::shapeconv), seed);
    const Tensor<float> x = random_batch<float>(4, 2, 16, 100 + seed);
    CHECK(max_abs_diff(vanilla.forward(x), shape.forward(x)) == 0.0);
  }
  // double twin as well
  Model<double> vanilla = build_model<double>(ModelSpec::toy(4, 6, 8, LayerKind::conv), 9);
  Model<double> shape = build_model<double>(ModelSpec::toy(4, 6, 8, LayerKind::shapeconv), 9);
  const Tensor<double> x = random_batch<double>(4, 1, 16, 500);
  CHECK(max_abs_diff(vanilla.forward(x), shape.forward(x)) == 0.0);
}

TEST_CASE("build is deterministic in the seed") {
  Model<float> a = build_model<float>(ModelSpec::toy(4, 6, 8, LayerKind::shapeconv), 7);
  Model<float> b = build_model<float>(ModelSpec::toy(4, 6, 8, LayerKind::shapeconv), 7);
  auto pa = a.named_params(), pb = b.named_params();
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].first == pb[i].first);
    CHECK(max_abs_diff(*pa[i].second, *pb[i].second) == 0.0);
  }
}

TEST_CASE("forward determinism and batch independence") {
  Model<float> model = build_model<float>(ModelSpec::toy(4, 6, 8, LayerKind::shapeconv), 5);
  perturb(model, 50);
  const Tensor<float> x = random_batch<float>(4, 2, 16, 51);
  const Tensor<float> y1 = model.forward(x);
  const Tensor<float> y2 = model.forward(x);
  CHECK(max_abs_diff(y1, y2) == 0.0);

  // duplicating the batch duplicates the logits
  Tensor<float> xx({4, 4, 16, 16});
  std::copy_n(x.data(), x.size(), xx.data());
  std::copy_n(x.data(), x.size(), xx.data() + x.size());
  const Tensor<float> yy = model.forward(xx);
  for (i64 i = 0; i < y1.size(); ++i) {
    CHECK(yy[i] == y1[i]);
    CHECK(yy[y1.size() + i] == y1[i]);
  }
}

TEST_CASE("zero input through a freshly built model gives zero logits") {
  // biases start at zero, so the head output is exactly zero
  Model<float> model = build_model<float>(ModelSpec::toy(4, 6, 8, LayerKind::shapeconv), 2);
  const Tensor<float> x({1, 4, 16, 16});
  const Tensor<float> y = model.forward(x);
  for (i64 i = 0; i < y.size(); ++i) CHECK(y[i] == 0.0f);
}

TEST_CASE("input extents must divide by four") {
  Model<float> model = build_model<float>(ModelSpec::toy(4, 6, 8, LayerKind::conv), 2);
  CHECK_THROWS_AS(model.forward(Tensor<float>({1, 4, 18, 16})), std::invalid_argument);
  CHECK_THROWS_AS(model.forward(Tensor<float>({1, 3, 16, 16})), std::invalid_argument);
}

TEST_CASE("whole-network gradients match finite differences") {
  // micro topology with a stride-2 stage, an upsampling skip and the head
  auto conv3 = [](int c_in, int c_out, int stride) {
    return ConvConfig{3, 3, stride, stride, 1, 1, c_in, c_out, true};
  };
  ModelSpec spec;
  spec.input_channels = 3;
  spec.num_classes = 2;
  spec.width = 2;
  spec.layers = {
      LayerSpec{LayerKind::shapeconv, conv3(3, 2, 1), Activation::relu, LayerRole::encoder},
      LayerSpec{LayerKind::shapeconv, conv3(2, 3, 2), Activation::relu, LayerRole::encoder},
      LayerSpec{LayerKind::shapeconv, conv3(3, 2, 1), Activation::relu, LayerRole::decoder,
                true, 0},
      LayerSpec{LayerKind::shapeconv, conv3(2, 2, 1), Activation::none, LayerRole::head},
  };
  Model<double> model = build_model<double>(spec, 12);
  CHECK(count_parameters(spec) <= 1000);

  Xoshiro256 rng(13);
  for (auto& [name, tensor] : model.named_params()) {
    if (name.ends_with(".wb")) (*tensor)[0] += 0.2;
    else if (name.ends_with(".ws"))
      for (i64 i = 0; i < tensor->size(); ++i) (*tensor)[i] += rng.normal() * 0.1;
    else if (name.ends_with(".bias"))
      for (i64 i = 0; i < tensor->size(); ++i) (*tensor)[i] = 0.3 + rng.normal() * 0.05;
  }
  Tensor<double> x = random_batch<double>(3, 1, 8, 14);
  Tensor<double> probe(model.forward(x).shape());
  for (i64 i = 0; i < probe.size(); ++i) probe[i] = rng.normal();

  auto objective = [&] {
    const Tensor<double> y = model.forward(x);
    double s = 0.0;
    for (i64 i = 0; i < y.size(); ++i) s += y[i] * probe[i];
    return s;
  };
  model.forward(x);
  ModelGrads<double> grads = model.backward(x, probe);

  // zero upstream gradient gives zero parameter gradients
  {
    ModelGrads<double> zero = model.backward(x, Tensor<double>(probe.shape()));
    for (auto& [name, g] : zero.named())
      for (i64 i = 0; i < g->size(); ++i) CHECK((*g)[i] == 0.0);
  }

  auto params = model.named_params();
  auto glist = grads.named();
  const double eps = 1e-5;
  double worst = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<double>& t = *params[pi].second;
    const Tensor<double>& analytic = *glist[pi].second;
    for (i64 i = 0; i < t.size(); ++i) {
      const double keep = t[i];
      t[i] = keep + eps;
      const double up = objective();
      t[i] = keep - eps;
      const double down = objective();
      t[i] = keep;
      const double fd = (up - down) / (2 * eps);
      worst = std::max(worst, std::abs(fd - analytic[i]) /
                                  std::max(1e-10, std::abs(fd) + std::abs(analytic[i])));
    }
  }
  CHECK(worst <= 1e-4);
}

TEST_CASE("shapeconv twin gradients at init match the vanilla twin") {
  Model<float> vanilla = build_model<float>(ModelSpec::toy(4, 6, 8, LayerKind::conv), 6);
  Model<float> shape = build_model<float>(ModelSpec::toy(4, 6, 8, LayerKind::shapeconv), 6);
  const Tensor<float> x = random_batch<float>(4, 2, 16, 60);
  const Tensor<float> yv = vanilla.forward(x);
  const Tensor<float> ys = shape.forward(x);
  Tensor<float> g(yv.shape());
  Xoshiro256 rng(61);
  for (i64 i = 0; i < g.size(); ++i) g[i] = static_cast<float>(rng.normal());

  ModelGrads<float> gv = vanilla.backward(x, g);
  ModelGrads<float> gs = shape.backward(x, g);
  REQUIRE(gv.layers.size() == gs.layers.size());
  for (size_t l = 0; l < gv.layers.size(); ++l) {
    CHECK(max_abs_diff(gv.layers[l].kernel, gs.layers[l].kernel) == 0.0);
    CHECK(max_abs_diff(gv.layers[l].bias, gs.layers[l].bias) == 0.0);
  }
}

TEST_CASE("fusing a model leaves its function untouched") {
  Model<double> model = build_model<double>(ModelSpec::toy(4, 6, 8, LayerKind::shapeconv), 8);
  perturb(model, 80);
  const Tensor<double> x = random_batch<double>(4, 2, 16, 81);
  const Tensor<double> before = model.forward(x);
  Model<double> fused = fuse_model(model);
  for (const Layer<double>& layer : fused.layers) CHECK(!layer.sc.has_value());
  CHECK(max_abs_diff(fused.forward(x), before) == 0.0);
  CHECK(count_parameters(fused.spec) < count_parameters(model.spec));
}

TEST_CASE("checkpoint round trip") {
  const fs::path path = fs::temp_directory_path() / "scl-test-ckpt.sckp";
  Model<float> model = build_model<float>(ModelSpec::toy(4, 6, 8, LayerKind::shapeconv), 13);
  perturb(model, 130);
  const Tensor<float> x = random_batch<float>(4, 2, 16, 131);
  const Tensor<float> before = model.forward(x);

  SUBCASE("parameters and logits are bit exact") {
    save_checkpoint(model, path.string());
    CheckpointInfo info;
    Model<float> loaded = load_checkpoint<float>(path.string(), nullptr, &info);
    CHECK(info.seed == 13);
    CHECK(!info.fused);
    CHECK(loaded.spec == model.spec);
    CHECK(max_abs_diff(loaded.forward(x), before) == 0.0);
  }

  SUBCASE("optimizer state rides along") {
    SgdState<float> state;
    for (auto& [name, tensor] : model.named_params()) {
      Tensor<float> m(tensor->shape());
      for (i64 i = 0; i < m.size(); ++i) m[i] = 0.125f * static_cast<float>(i % 7);
      state.momentum.emplace_back(name, std::move(m));
    }
    save_checkpoint(model, path.string(), &state);
    SgdState<float> restored;
    CheckpointInfo info;
    load_checkpoint<float>(path.string(), &restored, &info);
    CHECK(info.has_optimizer);
    REQUIRE(restored.momentum.size() == state.momentum.size());
    for (size_t i = 0; i < state.momentum.size(); ++i) {
      CHECK(restored.momentum[i].first == state.momentum[i].first);
      CHECK(max_abs_diff(restored.momentum[i].second, state.momentum[i].second) == 0.0);
    }
  }

  SUBCASE("identical models serialize to identical bytes") {
    save_checkpoint(model, path.string());
    const fs::path other = fs::temp_directory_path() / "scl-test-ckpt2.sckp";
    save_checkpoint(model, other.string());
    std::ifstream a(path, std::ios::binary), b(other, std::ios::binary);
    const std::string bytes_a((std::istreambuf_iterator<char>(a)), {});
    const std::string bytes_b((std::istreambuf_iterator<char>(b)), {});
    CHECK(bytes_a == bytes_b);
    fs::remove(other);
  }

  SUBCASE("fused checkpoints load as vanilla-only models") {
    save_checkpoint(fuse_model(model), path.string(), nullptr, /*fused=*/true);
    CheckpointInfo info;
    Model<float> loaded = load_checkpoint<float>(path.string(), nullptr, &info);
    CHECK(info.fused);
    for (const Layer<float>& layer : loaded.layers) {
      CHECK(layer.spec.kind == LayerKind::conv);
      CHECK(!layer.sc.has_value());
    }
    CHECK(max_abs_diff(loaded.forward(x), before) == 0.0);
  }

  SUBCASE("truncated files raise a corrupt-checkpoint error") {
    save_checkpoint(model, path.string());
    fs::resize_file(path, fs::file_size(path) * 2 / 3);
    CHECK_THROWS_AS(load_checkpoint<float>(path.string()), std::runtime_error);
  }

  SUBCASE("dtype mismatch is rejected") {
    save_checkpoint(model, path.string());
    CHECK_THROWS_AS(load_checkpoint<double>(path.string()), std::runtime_error);
  }

  fs::remove(path);
}
