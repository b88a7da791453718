#pragma once

#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "scl/data.hpp"
#include "scl/metrics.hpp"
#include "scl/net.hpp"

namespace scl {

struct TrainConfig {
  int epochs = 30;
  int batch_size = 8;
  double learning_rate = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
  LayerKind layer_kind = LayerKind::shapeconv;
  // Table-style ablations: frozen weights are excluded from the optimizer
  // entirely, so freezing both makes a shapeconv run reproduce the vanilla
  // twin step for step.
  bool freeze_base_weight = false;
  bool freeze_shape_weight = false;
  int ignore_label = kIgnoreLabel;

  void validate() const {
    if (epochs < 1 || batch_size < 1) throw std::invalid_argument("epochs and batch_size must be positive");
    if (learning_rate <= 0) throw std::invalid_argument("learning_rate must be positive");
    if (momentum < 0 || weight_decay < 0) throw std::invalid_argument("momentum and weight_decay must be >= 0");
  }
};

template <typename T>
struct LossResult {
  double loss = 0.0;
  Tensor<T> grad_logits;
};

// Mean over non-ignored pixels of -log softmax at the true class, stabilized
// by max subtraction. With every pixel ignored the loss and gradients are
// zero.
template <typename T>
LossResult<T> cross_entropy_loss(const Tensor<T>& logits, const Tensor<float>& labels,
                                 int ignore_label = kIgnoreLabel);

// Momentum buffers, name-aligned with Model::named_params(). Created lazily
// on the first step; frozen parameters never get touched.
template <typename T>
struct SgdState {
  std::vector<std::pair<std::string, Tensor<T>>> momentum;
};

// v <- momentum*v + g + weight_decay*theta;  theta <- theta - lr*v
template <typename T>
void sgd_step(Model<T>& model, ModelGrads<T>& grads, SgdState<T>& state,
              const TrainConfig& cfg);

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  FcnMetrics test;
};

// Writes the per-epoch log as CSV (epoch,loss,pixel_acc,mean_acc,mean_iou,
// fw_iou) with full round-trip precision, so identical runs give identical
// bytes.
void write_train_log_csv(const std::string& path, const std::vector<EpochLog>& logs);

// Deterministic SGD loop: epoch-level shuffling from a (seed, epoch) derived
// stream, fixed batch order, test-split metrics after every epoch. Single
// threaded; identical (config, data, seed) reproduce the trajectory bitwise.
template <typename T>
std::vector<EpochLog> train(Model<T>& model, const Dataset& dataset, const TrainConfig& cfg,
                            SgdState<std::type_identity_t<T>>* state_out = nullptr,
                            std::ostream* progress = nullptr);

struct EvalResult {
  ConfusionMatrix cm{1};
  FcnMetrics metrics;
  TrimapCurve trimap;  // present iff widths were requested
};

template <typename T>
EvalResult evaluate(Model<T>& model, std::span<const SegmentationSample> samples,
                    const DatasetMeta& meta, const std::vector<int>& trimap_widths = {},
                    int batch_size = 8);

// Per-pixel argmax over the class axis; ties take the lowest class id.
template <typename T>
Tensor<float> argmax_labels(const Tensor<T>& logits);

}  // namespace scl
