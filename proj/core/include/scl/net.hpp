#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "scl/conv.hpp"
#include "scl/shapeconv.hpp"

namespace scl {

enum class LayerKind { conv, shapeconv };
enum class Activation { none, relu };
enum class LayerRole { encoder, decoder, head };

const char* to_string(LayerKind k);
const char* to_string(Activation a);
const char* to_string(LayerRole r);

// One convolution stage. Execution order: conv, activation, optional 2x
// nearest-neighbor upsampling, optional additive skip from an earlier
// layer's output.
struct LayerSpec {
  LayerKind kind = LayerKind::conv;
  ConvConfig cfg;
  Activation activation = Activation::relu;
  LayerRole role = LayerRole::encoder;
  bool upsample_after = false;
  int skip_from = -1;

  bool operator==(const LayerSpec&) const = default;
};

// Encoder-decoder topology. Channel chaining and the head contract are
// validated; spatial agreement of skips is checked during forward.
struct ModelSpec {
  int input_channels = 4;
  int num_classes = 6;
  int width = 16;
  std::vector<LayerSpec> layers;

  void validate() const;

  // Default toy topology: seven 3x3 convolutions with two stride-2
  // downsamplings and two nearest-neighbor upsamplings with additive skips.
  // All layers take the requested kind (1x1 layers would stay vanilla, as a
  // 1x1 shape component is identically zero).
  static ModelSpec toy(int input_channels, int num_classes, int width, LayerKind kind);

  bool operator==(const ModelSpec&) const = default;
};

template <typename T>
struct Layer {
  LayerSpec spec;
  // Vanilla storage; shapeconv layers keep everything inside sc.
  Tensor<T> kernel;
  Tensor<T> bias;
  std::optional<ShapeConvParams<T>> sc;

  Tensor<T>& kernel_ref() { return sc ? sc->kernel : kernel; }
  const Tensor<T>& kernel_ref() const { return sc ? sc->kernel : kernel; }
  Tensor<T>& bias_ref() { return sc ? sc->bias : bias; }
  const Tensor<T>& bias_ref() const { return sc ? sc->bias : bias; }
};

// Gradients for every trainable tensor, layer-aligned with the model.
template <typename T>
struct ModelGrads {
  struct LayerGrads {
    Tensor<T> kernel;
    Tensor<T> bias;
    Tensor<T> base_weight;
    Tensor<T> shape_weight;
    bool has_bias = false;
    bool is_shapeconv = false;
  };
  std::vector<LayerGrads> layers;

  std::vector<std::pair<std::string, Tensor<T>*>> named();
};

template <typename T>
class Model {
 public:
  ModelSpec spec;
  std::vector<Layer<T>> layers;
  std::uint64_t seed = 0;

  // Runs the network and caches activations for a following backward call.
  // Input spatial extents must be divisible by four (two downsamplings).
  Tensor<T> forward(const Tensor<T>& batch);

  // Adjoints for every trainable tensor, using the caches of the last
  // forward. The batch must be the one that forward saw.
  ModelGrads<T> backward(const Tensor<T>& batch, const Tensor<T>& grad_logits);

  // Deterministic (name, tensor) listing of the trainables, layer order.
  std::vector<std::pair<std::string, Tensor<T>*>> named_params();

 private:
  struct LayerActivations {
    Shape in_shape;
    Tensor<T> post;      // post-activation conv output (relu mask source)
    Tensor<T> out;       // engaged only when upsampling or a skip changes it
    bool separate_out = false;
  };
  std::vector<LayerActivations> acts_;

  const Tensor<T>& layer_output(size_t l) const {
    return acts_[l].separate_out ? acts_[l].out : acts_[l].post;
  }
};

// Builds a model with per-layer seeds derived from the master seed. A
// vanilla twin built with the same seed holds bitwise-identical kernels,
// and a shapeconv model starts at identity reweighting, so the twins are
// functionally identical at step zero.
template <typename T>
Model<T> build_model(const ModelSpec& spec, std::uint64_t seed);

template <typename T>
Tensor<T> forward(Model<T>& model, const Tensor<T>& batch);

template <typename T>
ModelGrads<T> backward(Model<T>& model, const Tensor<T>& batch, const Tensor<T>& grad_logits);

// Folds every shapeconv layer into a plain convolution. The result contains
// no shapeconv layers and computes identical logits.
template <typename T>
Model<T> fuse_model(const Model<T>& model);

// Trainable scalar count. ShapeConv layers add 1 + n^2 * c_in on top of the
// vanilla kernel (+ bias) count.
i64 count_parameters(const ModelSpec& spec);

// 2x nearest-neighbor upsampling and its adjoint (2x2 sum pooling).
template <typename T>
Tensor<T> upsample2_nearest(const Tensor<T>& x);
template <typename T>
Tensor<T> upsample2_nearest_backward(const Tensor<T>& grad);

}  // namespace scl
