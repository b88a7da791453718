#include "scl/train.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "scl/rng.hpp"

namespace scl {

template <typename T>
LossResult<T> cross_entropy_loss(const Tensor<T>& logits, const Tensor<float>& labels,
                                 int ignore_label) {
  if (logits.rank() != 4) throw std::invalid_argument("logits must be N x C x H x W");
  const i64 n = logits.extent(0), nc = logits.extent(1);
  const i64 h = logits.extent(2), w = logits.extent(3);
  if (labels.rank() != 3 || labels.extent(0) != n || labels.extent(1) != h ||
      labels.extent(2) != w)
    throw std::invalid_argument("labels must be N x H x W matching the logits");

  LossResult<T> result;
  result.grad_logits = Tensor<T>(logits.shape());
  const i64 plane = h * w;

  double loss_sum = 0.0;
  i64 counted = 0;
  const T* ld = logits.data();
  T* gd = result.grad_logits.data();
  for (i64 b = 0; b < n; ++b) {
    for (i64 p = 0; p < plane; ++p) {
      const int t = static_cast<int>(labels[b * plane + p]);
      if (t == ignore_label) continue;
      if (t < 0 || t >= nc) throw std::invalid_argument("label outside [0, num_classes)");
      const T* lp = ld + b * nc * plane + p;

      T max_logit = lp[0];
      for (i64 c = 1; c < nc; ++c) max_logit = std::max(max_logit, lp[c * plane]);
      T denom{};
      for (i64 c = 0; c < nc; ++c) denom += std::exp(lp[c * plane] - max_logit);
      const T log_denom = std::log(denom);
      loss_sum += static_cast<double>(max_logit + log_denom - lp[t * plane]);

      T* gp = gd + b * nc * plane + p;
      for (i64 c = 0; c < nc; ++c) {
        const T soft = std::exp(lp[c * plane] - max_logit) / denom;
        gp[c * plane] = soft - (c == t ? static_cast<T>(1) : T{});
      }
      ++counted;
    }
  }

  if (counted == 0) return result;  // all ignored: zero loss, zero grads
  result.loss = loss_sum / static_cast<double>(counted);
  const T inv = static_cast<T>(1) / static_cast<T>(counted);
  for (i64 i = 0; i < result.grad_logits.size(); ++i) gd[i] *= inv;
  return result;
}

template <typename T>
void sgd_step(Model<T>& model, ModelGrads<T>& grads, SgdState<T>& state,
              const TrainConfig& cfg) {
  cfg.validate();
  auto params = model.named_params();
  auto grad_list = grads.named();
  if (params.size() != grad_list.size())
    throw std::invalid_argument("gradient set does not match the model parameters");

  if (state.momentum.empty()) {
    state.momentum.reserve(params.size());
    for (auto& [name, tensor] : params)
      state.momentum.emplace_back(name, Tensor<T>(tensor->shape()));
  }
  if (state.momentum.size() != params.size())
    throw std::invalid_argument("optimizer state does not match the model parameters");

  const T lr = static_cast<T>(cfg.learning_rate);
  const T mu = static_cast<T>(cfg.momentum);
  const T wd = static_cast<T>(cfg.weight_decay);

  for (size_t p = 0; p < params.size(); ++p) {
    auto& [name, theta] = params[p];
    auto& [gname, grad] = grad_list[p];
    auto& [sname, v] = state.momentum[p];
    if (name != gname || name != sname)
      throw std::invalid_argument("parameter ordering mismatch at " + name);

    const bool is_wb = name.size() > 3 && name.compare(name.size() - 3, 3, ".wb") == 0;
    const bool is_ws = name.size() > 3 && name.compare(name.size() - 3, 3, ".ws") == 0;
    if ((is_wb && cfg.freeze_base_weight) || (is_ws && cfg.freeze_shape_weight)) continue;

    if (!theta->same_shape(*grad) || !theta->same_shape(v))
      throw std::invalid_argument("shape mismatch in sgd update of " + name);
    T* th = theta->data();
    const T* g = grad->data();
    T* vd = v.data();
    for (i64 i = 0; i < theta->size(); ++i) {
      vd[i] = mu * vd[i] + g[i] + wd * th[i];
      th[i] -= lr * vd[i];
    }
  }
}

void write_train_log_csv(const std::string& path, const std::vector<EpochLog>& logs) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write training log: " + path);
  os << "epoch,loss,pixel_acc,mean_acc,mean_iou,fw_iou\n";
  char buf[192];
  for (const EpochLog& e : logs) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,%.17g\n", e.epoch,
                  e.train_loss, e.test.pixel_acc, e.test.mean_acc, e.test.mean_iou,
                  e.test.fw_iou);
    os << buf;
  }
}

template <typename T>
Tensor<float> argmax_labels(const Tensor<T>& logits) {
  if (logits.rank() != 4) throw std::invalid_argument("logits must be N x C x H x W");
  const i64 n = logits.extent(0), nc = logits.extent(1);
  const i64 h = logits.extent(2), w = logits.extent(3);
  const i64 plane = h * w;
  Tensor<float> out({n, h, w});
  const T* ld = logits.data();
  for (i64 b = 0; b < n; ++b) {
    for (i64 p = 0; p < plane; ++p) {
      const T* lp = ld + b * nc * plane + p;
      int best = 0;
      T best_v = lp[0];
      for (i64 c = 1; c < nc; ++c) {
        if (lp[c * plane] > best_v) {
          best_v = lp[c * plane];
          best = static_cast<int>(c);
        }
      }
      out[b * plane + p] = static_cast<float>(best);
    }
  }
  return out;
}

namespace {

// Gathers a batch by index without copying the samples.
std::pair<Tensor<float>, Tensor<float>> gather_batch(
    std::span<const SegmentationSample> samples, std::span<const i64> indices,
    const DatasetMeta& meta, bool rgb_only) {
  std::vector<SegmentationSample> picked;  // shallow gather would be nicer; rasters are small
  picked.reserve(indices.size());
  for (i64 idx : indices) picked.push_back(samples[static_cast<size_t>(idx)]);
  return make_batch(picked, meta, rgb_only);
}

template <typename T>
Tensor<T> to_dtype(Tensor<float> t) {
  if constexpr (std::is_same_v<T, float>) {
    return t;
  } else {
    Tensor<T> out(t.shape());
    for (i64 i = 0; i < t.size(); ++i) out[i] = static_cast<T>(t[i]);
    return out;
  }
}

}  // namespace

template <typename T>
EvalResult evaluate(Model<T>& model, std::span<const SegmentationSample> samples,
                    const DatasetMeta& meta, const std::vector<int>& trimap_widths,
                    int batch_size) {
  if (batch_size < 1) throw std::invalid_argument("batch_size must be positive");
  const bool rgb_only = model.spec.input_channels == 3;

  EvalResult result;
  result.cm = ConfusionMatrix(meta.num_classes);
  std::vector<Tensor<float>> predictions, truths;
  const bool want_trimap = !trimap_widths.empty();

  for (size_t start = 0; start < samples.size(); start += static_cast<size_t>(batch_size)) {
    const size_t end = std::min(samples.size(), start + static_cast<size_t>(batch_size));
    auto [input_f, labels] = make_batch(samples.subspan(start, end - start), meta, rgb_only);
    const Tensor<T> input = to_dtype<T>(std::move(input_f));
    const Tensor<T> logits = model.forward(input);
    const Tensor<float> pred = argmax_labels(logits);
    result.cm.accumulate(pred, labels);
    if (want_trimap) {
      const i64 h = labels.extent(1), w = labels.extent(2);
      for (i64 b = 0; b < labels.extent(0); ++b) {
        Tensor<float> p({h, w}), t({h, w});
        std::copy_n(pred.data() + b * h * w, h * w, p.data());
        std::copy_n(labels.data() + b * h * w, h * w, t.data());
        predictions.push_back(std::move(p));
        truths.push_back(std::move(t));
      }
    }
  }

  result.metrics = fcn_metrics(result.cm);
  if (want_trimap) result.trimap = trimap_curve(predictions, truths, trimap_widths);
  return result;
}

template <typename T>
std::vector<EpochLog> train(Model<T>& model, const Dataset& dataset, const TrainConfig& cfg,
                            SgdState<std::type_identity_t<T>>* state_out,
                            std::ostream* progress) {
  cfg.validate();
  if (dataset.train.empty()) throw std::invalid_argument("training split is empty");
  const bool rgb_only = model.spec.input_channels == 3;

  SgdState<T> local_state;
  SgdState<T>& state = state_out ? *state_out : local_state;

  std::vector<i64> order(dataset.train.size());
  std::vector<EpochLog> logs;
  logs.reserve(static_cast<size_t>(cfg.epochs));

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<i64>(i);
    Xoshiro256 rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
    shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0.0;
    i64 batches = 0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
      auto [input_f, labels] = gather_batch(dataset.train,
                                            std::span<const i64>(order).subspan(start, end - start),
                                            dataset.meta, rgb_only);
      const Tensor<T> input = to_dtype<T>(std::move(input_f));
      const Tensor<T> logits = model.forward(input);
      LossResult<T> loss = cross_entropy_loss(logits, labels, cfg.ignore_label);
      ModelGrads<T> grads = model.backward(input, loss.grad_logits);
      sgd_step(model, grads, state, cfg);
      loss_sum += loss.loss;
      ++batches;
    }

    EpochLog log;
    log.epoch = epoch;
    log.train_loss = loss_sum / static_cast<double>(batches);
    if (!dataset.test.empty())
      log.test = evaluate(model, dataset.test, dataset.meta).metrics;
    logs.push_back(log);
    if (progress) {
      char buf[160];
      std::snprintf(buf, sizeof buf,
                    "epoch %3d  loss %.6f  pixel_acc %.4f  mean_iou %.4f\n", epoch,
                    log.train_loss, log.test.pixel_acc, log.test.mean_iou);
      *progress << buf << std::flush;
    }
  }
  return logs;
}

#define SCL_INSTANTIATE(T)                                                              \
  template LossResult<T> cross_entropy_loss(const Tensor<T>&, const Tensor<float>&,     \
                                            int);                                       \
  template void sgd_step(Model<T>&, ModelGrads<T>&, SgdState<T>&, const TrainConfig&);  \
  template Tensor<float> argmax_labels(const Tensor<T>&);                               \
  template EvalResult evaluate(Model<T>&, std::span<const SegmentationSample>,          \
                               const DatasetMeta&, const std::vector<int>&, int);       \
  template std::vector<EpochLog> train(Model<T>&, const Dataset&, const TrainConfig&,   \
                                       SgdState<T>*, std::ostream*);

SCL_INSTANTIATE(float)
SCL_INSTANTIATE(double)
#undef SCL_INSTANTIATE

}  // namespace scl
