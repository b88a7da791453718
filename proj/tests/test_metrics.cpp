#include <doctest.h>

#include <cmath>

#include "scl/metrics.hpp"
#include "scl/rng.hpp"

using namespace scl;

namespace {

Tensor<float> raster(i64 h, i64 w, std::initializer_list<int> vals) {
  Tensor<float> t({h, w});
  i64 i = 0;
  for (int v : vals) t[i++] = static_cast<float>(v);
  return t;
}

}  // namespace

TEST_CASE("confusion accumulation") {
  ConfusionMatrix cm(3);
  const Tensor<float> truth = raster(2, 3, {0, 1, 2, 0, 1, 2});

  SUBCASE("perfect prediction is diagonal") {
    cm.accumulate(truth, truth);
    for (int t = 0; t < 3; ++t)
      for (int p = 0; p < 3; ++p) CHECK(cm.at(t, p) == (t == p ? 2 : 0));
  }

  SUBCASE("ignored truth contributes nothing") {
    const Tensor<float> all_ignore = Tensor<float>::full({2, 3}, 255.0f);
    cm.accumulate(truth, all_ignore);
    CHECK(cm.total() == 0);
  }

  SUBCASE("hand case matches a loop oracle") {
    const Tensor<float> pred = raster(2, 3, {0, 2, 2, 1, 1, 0});
    cm.accumulate(pred, truth);
    i64 oracle[3][3] = {};
    for (i64 i = 0; i < 6; ++i)
      oracle[static_cast<int>(truth[i])][static_cast<int>(pred[i])]++;
    for (int t = 0; t < 3; ++t)
      for (int p = 0; p < 3; ++p) CHECK(cm.at(t, p) == oracle[t][p]);
  }

  SUBCASE("out-of-range labels are an error") {
    const Tensor<float> bad = raster(2, 3, {0, 1, 3, 0, 1, 2});
    CHECK_THROWS_AS(cm.accumulate(truth, bad), std::invalid_argument);
  }

  SUBCASE("matrices merge by addition") {
    ConfusionMatrix other(3);
    cm.accumulate(truth, truth);
    other.accumulate(truth, truth);
    other += cm;
    CHECK(other.at(1, 1) == 4);
  }
}

TEST_CASE("fcn metrics frozen oracle") {
  ConfusionMatrix cm(2);
  cm.at(0, 0) = 3;
  cm.at(0, 1) = 1;
  cm.at(1, 0) = 2;
  cm.at(1, 1) = 4;
  const FcnMetrics m = fcn_metrics(cm);
  CHECK(std::abs(m.pixel_acc - 0.7) <= 1e-12);
  CHECK(std::abs(m.mean_acc - 0.7083333333333333) <= 1e-12);
  CHECK(std::abs(m.mean_iou - 0.5357142857142857) <= 1e-12);
  CHECK(std::abs(m.fw_iou - 0.5428571428571428) <= 1e-12);
  // and against the formulas computed independently
  CHECK(std::abs(m.mean_acc - (3.0 / 4.0 + 4.0 / 6.0) / 2.0) <= 1e-15);
  CHECK(std::abs(m.mean_iou - (3.0 / 6.0 + 4.0 / 7.0) / 2.0) <= 1e-15);
  CHECK(std::abs(m.fw_iou - (4.0 * 0.5 + 6.0 * 4.0 / 7.0) / 10.0) <= 1e-15);
}

TEST_CASE("fcn metrics degenerate cases") {
  ConfusionMatrix diag(3);
  for (int c = 0; c < 3; ++c) diag.at(c, c) = 5;
  const FcnMetrics perfect = fcn_metrics(diag);
  CHECK(perfect.pixel_acc == 1.0);
  CHECK(perfect.mean_acc == 1.0);
  CHECK(perfect.mean_iou == 1.0);
  CHECK(perfect.fw_iou == 1.0);

  ConfusionMatrix single(2);
  single.at(0, 0) = 3;
  single.at(0, 1) = 1;
  const FcnMetrics s = fcn_metrics(single);
  CHECK(s.pixel_acc == 0.75);
  CHECK(s.mean_acc == 0.75);
  // predictions into the empty class still count against class 0's union
  CHECK(s.mean_iou == 0.75);
  CHECK(s.fw_iou == 0.75);

  CHECK_THROWS_AS(fcn_metrics(ConfusionMatrix(2)), std::invalid_argument);
}

TEST_CASE("fcn metrics aggregate under class permutation") {
  Xoshiro256 rng(99);
  ConfusionMatrix cm(4), permuted(4);
  const int perm[4] = {2, 0, 3, 1};
  for (int t = 0; t < 4; ++t)
    for (int p = 0; p < 4; ++p) {
      const i64 v = static_cast<i64>(rng.below(50));
      cm.at(t, p) = v;
      permuted.at(perm[t], perm[p]) = v;
    }
  const FcnMetrics a = fcn_metrics(cm);
  const FcnMetrics b = fcn_metrics(permuted);
  CHECK(std::abs(a.pixel_acc - b.pixel_acc) <= 1e-12);
  CHECK(std::abs(a.mean_acc - b.mean_acc) <= 1e-12);
  CHECK(std::abs(a.mean_iou - b.mean_iou) <= 1e-12);
  CHECK(std::abs(a.fw_iou - b.fw_iou) <= 1e-12);
}

TEST_CASE("zero-support classes are excluded from the means") {
  ConfusionMatrix cm(3);
  cm.at(0, 0) = 8;
  cm.at(0, 2) = 2;  // class 1 never appears in the truth
  cm.at(2, 2) = 10;
  const FcnMetrics m = fcn_metrics(cm);
  CHECK(std::abs(m.mean_acc - (0.8 + 1.0) / 2.0) <= 1e-12);
  CHECK(std::abs(m.mean_iou - (0.8 + 10.0 / 12.0) / 2.0) <= 1e-12);
}

TEST_CASE("trimap hand case") {
  // 4x4, left half class 0, right half class 1; the prediction errs on
  // exactly the two boundary columns.
  Tensor<float> gt({4, 4}), pred({4, 4});
  for (i64 y = 0; y < 4; ++y)
    for (i64 x = 0; x < 4; ++x) {
      gt(y, x) = x < 2 ? 0.0f : 1.0f;
      pred(y, x) = (x == 1 || x == 2) ? 1.0f - gt(y, x) : gt(y, x);
    }
  const std::vector<Tensor<float>> preds{pred}, truths_v{gt};
  const TrimapCurve curve = trimap_curve(preds, truths_v, {1, 2, 3, 4});
  // width 1 is exactly the boundary columns: all 8 pixels wrong
  CHECK(curve.fractions[0] == 1.0);
  // width 2 covers the whole image: 8 of 16 wrong
  CHECK(curve.fractions[1] == 0.5);
  CHECK(curve.fractions[2] == 0.5);
  CHECK(curve.fractions[3] == 0.5);

  // a width at least the diagonal equals the overall error rate
  const TrimapCurve wide = trimap_curve(preds, truths_v, {8});
  CHECK(wide.fractions[0] == 8.0 / 16.0);

  // perfect prediction gives zero everywhere
  const std::vector<Tensor<float>> perfect{gt};
  const TrimapCurve zero = trimap_curve(perfect, truths_v, {1, 2, 4});
  for (double f : zero.fractions) CHECK(f == 0.0);
}

TEST_CASE("trimap ignores the ignore label") {
  Tensor<float> gt({4, 4}), pred({4, 4});
  for (i64 y = 0; y < 4; ++y)
    for (i64 x = 0; x < 4; ++x) {
      gt(y, x) = x < 2 ? 0.0f : 1.0f;
      pred(y, x) = gt(y, x);
    }
  gt(0, 0) = 255.0f;
  pred(0, 0) = 1.0f;  // wrong, but ignored
  const TrimapCurve curve = trimap_curve(std::vector<Tensor<float>>{pred},
                                         std::vector<Tensor<float>>{gt}, {2});
  CHECK(curve.fractions[0] == 0.0);
}

TEST_CASE("trimap width validation") {
  const std::vector<Tensor<float>> r{Tensor<float>({2, 2})};
  CHECK_THROWS_AS(trimap_curve(r, r, {}), std::invalid_argument);
  CHECK_THROWS_AS(trimap_curve(r, r, {0}), std::invalid_argument);
  CHECK_THROWS_AS(trimap_curve(r, r, {2, 2}), std::invalid_argument);
}

TEST_CASE("single-label image has empty bands") {
  const Tensor<float> gt = Tensor<float>::full({4, 4}, 1.0f);
  const Tensor<float> pred = Tensor<float>::full({4, 4}, 0.0f);
  const TrimapCurve curve = trimap_curve(std::vector<Tensor<float>>{pred},
                                         std::vector<Tensor<float>>{gt}, {1, 4});
  CHECK(curve.fractions[0] == 0.0);
  CHECK(curve.fractions[1] == 0.0);
}
