#include "scl/metrics.hpp"

#include <limits>
#include <stdexcept>

namespace scl {

ConfusionMatrix::ConfusionMatrix(int num_classes)
    : num_classes_(num_classes),
      counts_(static_cast<size_t>(num_classes) * num_classes, 0) {
  if (num_classes < 1) throw std::invalid_argument("need at least one class");
}

void ConfusionMatrix::accumulate(const Tensor<float>& predicted, const Tensor<float>& truth) {
  if (!predicted.same_shape(truth))
    throw std::invalid_argument("prediction and truth rasters differ in shape");
  for (i64 i = 0; i < truth.size(); ++i) {
    const int t = static_cast<int>(truth[i]);
    if (t == kIgnoreLabel) continue;
    const int p = static_cast<int>(predicted[i]);
    if (t < 0 || t >= num_classes_ || p < 0 || p >= num_classes_)
      throw std::invalid_argument("label outside [0, num_classes)");
    at(t, p)++;
  }
}

i64 ConfusionMatrix::truth_count(int truth) const {
  i64 s = 0;
  for (int p = 0; p < num_classes_; ++p) s += at(truth, p);
  return s;
}

i64 ConfusionMatrix::total() const {
  i64 s = 0;
  for (i64 v : counts_) s += v;
  return s;
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (other.num_classes_ != num_classes_)
    throw std::invalid_argument("confusion matrices differ in class count");
  for (size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  return *this;
}

FcnMetrics fcn_metrics(const ConfusionMatrix& cm) {
  const int nc = cm.num_classes();
  const i64 total = cm.total();
  if (total == 0) throw std::invalid_argument("confusion matrix has no counted pixels");

  i64 diag = 0;
  for (int c = 0; c < nc; ++c) diag += cm.at(c, c);

  std::vector<i64> truth_counts(static_cast<size_t>(nc));
  std::vector<i64> pred_counts(static_cast<size_t>(nc), 0);
  for (int t = 0; t < nc; ++t) {
    truth_counts[static_cast<size_t>(t)] = cm.truth_count(t);
    for (int p = 0; p < nc; ++p) pred_counts[static_cast<size_t>(p)] += cm.at(t, p);
  }

  FcnMetrics m;
  m.pixel_acc = static_cast<double>(diag) / static_cast<double>(total);

  int supported = 0;
  double acc_sum = 0.0, iou_sum = 0.0, fw_sum = 0.0;
  for (int c = 0; c < nc; ++c) {
    const i64 t_i = truth_counts[static_cast<size_t>(c)];
    if (t_i == 0) continue;  // zero-support classes excluded from the means
    ++supported;
    const i64 hit = cm.at(c, c);
    acc_sum += static_cast<double>(hit) / static_cast<double>(t_i);
    const i64 union_i = t_i + pred_counts[static_cast<size_t>(c)] - hit;
    const double iou = static_cast<double>(hit) / static_cast<double>(union_i);
    iou_sum += iou;
    fw_sum += static_cast<double>(t_i) * iou;
  }
  m.mean_acc = acc_sum / supported;
  m.mean_iou = iou_sum / supported;
  m.fw_iou = fw_sum / static_cast<double>(total);
  return m;
}

namespace {

// Chebyshev distance to the nearest boundary pixel via a two-pass chamfer
// sweep over the 8-neighborhood. Non-boundary pixels start at "far".
void chebyshev_distance(std::vector<int>& dist, i64 h, i64 w) {
  const int far = std::numeric_limits<int>::max() / 2;
  auto d = [&](i64 y, i64 x) -> int& { return dist[static_cast<size_t>(y * w + x)]; };
  for (i64 y = 0; y < h; ++y)
    for (i64 x = 0; x < w; ++x) {
      int best = d(y, x);
      if (y > 0) {
        best = std::min(best, d(y - 1, x) + 1);
        if (x > 0) best = std::min(best, d(y - 1, x - 1) + 1);
        if (x + 1 < w) best = std::min(best, d(y - 1, x + 1) + 1);
      }
      if (x > 0) best = std::min(best, d(y, x - 1) + 1);
      d(y, x) = std::min(best, far);
    }
  for (i64 y = h - 1; y >= 0; --y)
    for (i64 x = w - 1; x >= 0; --x) {
      int best = d(y, x);
      if (y + 1 < h) {
        best = std::min(best, d(y + 1, x) + 1);
        if (x > 0) best = std::min(best, d(y + 1, x - 1) + 1);
        if (x + 1 < w) best = std::min(best, d(y + 1, x + 1) + 1);
      }
      if (x + 1 < w) best = std::min(best, d(y, x + 1) + 1);
      d(y, x) = best;
    }
}

}  // namespace

TrimapCurve trimap_curve(std::span<const Tensor<float>> predictions,
                         std::span<const Tensor<float>> truths,
                         const std::vector<int>& widths) {
  if (predictions.size() != truths.size())
    throw std::invalid_argument("prediction and truth lists differ in length");
  if (widths.empty()) throw std::invalid_argument("need at least one trimap width");
  for (size_t i = 0; i < widths.size(); ++i) {
    if (widths[i] < 1) throw std::invalid_argument("trimap widths must be >= 1");
    if (i > 0 && widths[i] <= widths[i - 1])
      throw std::invalid_argument("trimap widths must be strictly ascending");
  }

  std::vector<i64> in_band(widths.size(), 0), wrong(widths.size(), 0);

  std::vector<int> dist;
  for (size_t s = 0; s < truths.size(); ++s) {
    const Tensor<float>& gt = truths[s];
    const Tensor<float>& pred = predictions[s];
    if (gt.rank() != 2 || !gt.same_shape(pred))
      throw std::invalid_argument("label rasters must be matching H x W tensors");
    const i64 h = gt.extent(0), w = gt.extent(1);

    const int far = std::numeric_limits<int>::max() / 2;
    dist.assign(static_cast<size_t>(h * w), far);
    auto label = [&](i64 y, i64 x) { return static_cast<int>(gt(y, x)); };
    for (i64 y = 0; y < h; ++y) {
      for (i64 x = 0; x < w; ++x) {
        const int l = label(y, x);
        if (l == kIgnoreLabel) continue;
        const bool boundary =
            (y > 0 && label(y - 1, x) != kIgnoreLabel && label(y - 1, x) != l) ||
            (y + 1 < h && label(y + 1, x) != kIgnoreLabel && label(y + 1, x) != l) ||
            (x > 0 && label(y, x - 1) != kIgnoreLabel && label(y, x - 1) != l) ||
            (x + 1 < w && label(y, x + 1) != kIgnoreLabel && label(y, x + 1) != l);
        if (boundary) dist[static_cast<size_t>(y * w + x)] = 0;
      }
    }
    chebyshev_distance(dist, h, w);

    for (i64 y = 0; y < h; ++y) {
      for (i64 x = 0; x < w; ++x) {
        const int t = label(y, x);
        if (t == kIgnoreLabel) continue;
        const int d = dist[static_cast<size_t>(y * w + x)];
        const bool miss = static_cast<int>(pred(y, x)) != t;
        for (size_t wi = 0; wi < widths.size(); ++wi) {
          if (d <= widths[wi] - 1) {
            in_band[wi]++;
            if (miss) wrong[wi]++;
          }
        }
      }
    }
  }

  TrimapCurve curve;
  curve.widths = widths;
  curve.fractions.resize(widths.size());
  for (size_t wi = 0; wi < widths.size(); ++wi) {
    curve.fractions[wi] = in_band[wi] == 0
                              ? 0.0
                              : static_cast<double>(wrong[wi]) / static_cast<double>(in_band[wi]);
  }
  return curve;
}

}  // namespace scl
