#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "scl/tensor.hpp"

namespace scl {

inline constexpr int kIgnoreLabel = 255;

// Per-class pixel counts, row = ground truth, column = prediction. Pixels
// whose ground truth equals the ignore label are never counted. Matrices
// over the same classes merge by addition.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes);

  // Label rasters hold small integral class ids (or the ignore value) in
  // float storage; shapes must match and may include a leading batch axis.
  void accumulate(const Tensor<float>& predicted, const Tensor<float>& truth);

  int num_classes() const { return num_classes_; }
  i64 at(int truth, int predicted) const {
    return counts_[static_cast<size_t>(truth) * num_classes_ + predicted];
  }
  i64& at(int truth, int predicted) {
    return counts_[static_cast<size_t>(truth) * num_classes_ + predicted];
  }
  i64 truth_count(int truth) const;   // t_i = sum_j n_ij
  i64 total() const;

  ConfusionMatrix& operator+=(const ConfusionMatrix& other);

 private:
  int num_classes_;
  std::vector<i64> counts_;
};

// The four FCN-protocol aggregates. Classes with zero ground-truth support
// are excluded from the two means.
struct FcnMetrics {
  double pixel_acc = 0.0;
  double mean_acc = 0.0;
  double mean_iou = 0.0;
  double fw_iou = 0.0;
};

FcnMetrics fcn_metrics(const ConfusionMatrix& cm);

// Misclassified-pixel fraction within bands of increasing width around
// ground-truth object boundaries.
//
// A boundary pixel is one with a 4-neighbor of a different, non-ignored
// ground-truth label. Band width counts pixel layers: the boundary pixels
// themselves are width 1, and band(w) holds every non-ignored pixel whose
// Chebyshev distance to the nearest boundary pixel is at most w - 1. With no
// boundary at all (single-label image) every band is empty and its fraction
// reported as zero.
struct TrimapCurve {
  std::vector<int> widths;
  std::vector<double> fractions;
};

TrimapCurve trimap_curve(std::span<const Tensor<float>> predictions,
                         std::span<const Tensor<float>> truths,
                         const std::vector<int>& widths);

}  // namespace scl
