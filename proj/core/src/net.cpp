#include "scl/net.hpp"

#include "scl/rng.hpp"

namespace scl {

namespace {

// First contribution assigns, later ones add.
template <typename T>
void accumulate_input_grad(Tensor<T>& dst, const Tensor<T>& src) {
  if (dst.size() == src.size() && dst.same_shape(src)) {
    for (i64 i = 0; i < src.size(); ++i) dst[i] += src[i];
  } else {
    dst = src;
  }
}

}  // namespace

const char* to_string(LayerKind k) {
  return k == LayerKind::conv ? "conv" : "shapeconv";
}
const char* to_string(Activation a) {
  return a == Activation::relu ? "relu" : "none";
}
const char* to_string(LayerRole r) {
  switch (r) {
    case LayerRole::encoder: return "encoder";
    case LayerRole::decoder: return "decoder";
    default: return "head";
  }
}

void ModelSpec::validate() const {
  if (input_channels < 1) throw std::invalid_argument("input_channels must be >= 1");
  if (num_classes < 2) throw std::invalid_argument("need at least two classes");
  if (layers.empty()) throw std::invalid_argument("model has no layers");

  int channels = input_channels;
  for (size_t l = 0; l < layers.size(); ++l) {
    const LayerSpec& ls = layers[l];
    ls.cfg.validate();
    if (ls.cfg.c_in != channels)
      throw std::invalid_argument("layer " + std::to_string(l) +
                                  " input channels break the chain");
    if (ls.skip_from >= 0) {
      if (static_cast<size_t>(ls.skip_from) >= l)
        throw std::invalid_argument("skip_from must point at an earlier layer");
      if (layers[static_cast<size_t>(ls.skip_from)].cfg.c_out != ls.cfg.c_out)
        throw std::invalid_argument("skip source channel count differs");
    }
    channels = ls.cfg.c_out;
  }
  const LayerSpec& head = layers.back();
  if (head.role != LayerRole::head)
    throw std::invalid_argument("last layer must be the head");
  if (head.cfg.c_out != num_classes)
    throw std::invalid_argument("head must emit num_classes channels");
  if (head.activation != Activation::none)
    throw std::invalid_argument("head must not have an activation");
}

ModelSpec ModelSpec::toy(int input_channels, int num_classes, int width, LayerKind kind) {
  auto conv3 = [](int c_in, int c_out, int stride) {
    return ConvConfig{3, 3, stride, stride, 1, 1, c_in, c_out, true};
  };
  const int w = width;

  ModelSpec spec;
  spec.input_channels = input_channels;
  spec.num_classes = num_classes;
  spec.width = width;
  using L = LayerSpec;
  spec.layers = {
      L{kind, conv3(input_channels, w, 1), Activation::relu, LayerRole::encoder},
      L{kind, conv3(w, 2 * w, 2), Activation::relu, LayerRole::encoder},
      L{kind, conv3(2 * w, 4 * w, 2), Activation::relu, LayerRole::encoder},
      L{kind, conv3(4 * w, 4 * w, 1), Activation::relu, LayerRole::encoder},
      L{kind, conv3(4 * w, 2 * w, 1), Activation::relu, LayerRole::decoder, true, 1},
      L{kind, conv3(2 * w, w, 1), Activation::relu, LayerRole::decoder, true, 0},
      L{kind, conv3(w, num_classes, 1), Activation::none, LayerRole::head},
  };
  spec.validate();
  return spec;
}

i64 count_parameters(const ModelSpec& spec) {
  i64 total = 0;
  for (const LayerSpec& ls : spec.layers) {
    const i64 n = static_cast<i64>(ls.cfg.kh) * ls.cfg.kw;
    total += n * ls.cfg.c_in * ls.cfg.c_out;
    if (ls.cfg.has_bias) total += ls.cfg.c_out;
    if (ls.kind == LayerKind::shapeconv && n > 1) total += 1 + n * n * ls.cfg.c_in;
  }
  return total;
}

template <typename T>
Tensor<T> upsample2_nearest(const Tensor<T>& x) {
  if (x.rank() != 4) throw std::invalid_argument("upsampling expects N x C x H x W");
  const i64 n = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
  Tensor<T> out({n, c, 2 * h, 2 * w});
  const T* xd = x.data();
  T* od = out.data();
  for (i64 p = 0; p < n * c; ++p) {
    const T* src = xd + p * h * w;
    T* dst = od + p * 4 * h * w;
    for (i64 y = 0; y < h; ++y) {
      for (i64 x2 = 0; x2 < w; ++x2) {
        const T v = src[y * w + x2];
        dst[(2 * y) * 2 * w + 2 * x2] = v;
        dst[(2 * y) * 2 * w + 2 * x2 + 1] = v;
        dst[(2 * y + 1) * 2 * w + 2 * x2] = v;
        dst[(2 * y + 1) * 2 * w + 2 * x2 + 1] = v;
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> upsample2_nearest_backward(const Tensor<T>& grad) {
  if (grad.rank() != 4) throw std::invalid_argument("upsampling expects N x C x H x W");
  const i64 n = grad.extent(0), c = grad.extent(1), h2 = grad.extent(2), w2 = grad.extent(3);
  if (h2 % 2 != 0 || w2 % 2 != 0)
    throw std::invalid_argument("upsampled extents must be even");
  const i64 h = h2 / 2, w = w2 / 2;
  Tensor<T> out({n, c, h, w});
  const T* gd = grad.data();
  T* od = out.data();
  for (i64 p = 0; p < n * c; ++p) {
    const T* src = gd + p * h2 * w2;
    T* dst = od + p * h * w;
    for (i64 y = 0; y < h; ++y) {
      for (i64 x2 = 0; x2 < w; ++x2) {
        dst[y * w + x2] = src[(2 * y) * w2 + 2 * x2] + src[(2 * y) * w2 + 2 * x2 + 1] +
                          src[(2 * y + 1) * w2 + 2 * x2] +
                          src[(2 * y + 1) * w2 + 2 * x2 + 1];
      }
    }
  }
  return out;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> Model<T>::named_params() {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  for (size_t l = 0; l < layers.size(); ++l) {
    Layer<T>& layer = layers[l];
    const std::string prefix = "layer" + std::to_string(l) + ".";
    out.emplace_back(prefix + "kernel", &layer.kernel_ref());
    if (layer.spec.cfg.has_bias) out.emplace_back(prefix + "bias", &layer.bias_ref());
    if (layer.sc) {
      out.emplace_back(prefix + "wb", &layer.sc->base_weight);
      out.emplace_back(prefix + "ws", &layer.sc->shape_weight);
    }
  }
  return out;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> ModelGrads<T>::named() {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  for (size_t l = 0; l < layers.size(); ++l) {
    LayerGrads& lg = layers[l];
    const std::string prefix = "layer" + std::to_string(l) + ".";
    out.emplace_back(prefix + "kernel", &lg.kernel);
    if (lg.has_bias) out.emplace_back(prefix + "bias", &lg.bias);
    if (lg.is_shapeconv) {
      out.emplace_back(prefix + "wb", &lg.base_weight);
      out.emplace_back(prefix + "ws", &lg.shape_weight);
    }
  }
  return out;
}

template <typename T>
Tensor<T> Model<T>::forward(const Tensor<T>& batch) {
  spec.validate();
  if (batch.rank() != 4) throw std::invalid_argument("batch must be N x C x H x W");
  if (batch.extent(1) != spec.input_channels)
    throw std::invalid_argument("batch channel count does not match the model");
  if (batch.extent(2) % 4 != 0 || batch.extent(3) % 4 != 0)
    throw std::invalid_argument("input extents must be divisible by four");

  acts_.assign(layers.size(), LayerActivations{});
  const Tensor<T>* x = &batch;
  for (size_t l = 0; l < layers.size(); ++l) {
    Layer<T>& layer = layers[l];
    LayerActivations& act = acts_[l];
    const ConvConfig& cfg = layer.spec.cfg;

    act.in_shape = x->shape();
    const Tensor<T>* bias = cfg.has_bias ? &layer.bias_ref() : nullptr;
    if (layer.sc) {
      const Tensor<T> kbs = assemble_kbs(*layer.sc);
      act.post = conv2d(*x, kbs, bias, cfg);
    } else {
      act.post = conv2d(*x, layer.kernel, bias, cfg);
    }
    if (layer.spec.activation == Activation::relu) {
      for (i64 i = 0; i < act.post.size(); ++i)
        if (act.post[i] < T{}) act.post[i] = T{};
    }

    // post doubles as the relu mask in backward, so anything that changes
    // values goes into a separate output tensor.
    act.separate_out = layer.spec.upsample_after || layer.spec.skip_from >= 0;
    if (act.separate_out)
      act.out = layer.spec.upsample_after ? upsample2_nearest(act.post) : act.post;
    if (layer.spec.skip_from >= 0) {
      const Tensor<T>& skip = layer_output(static_cast<size_t>(layer.spec.skip_from));
      if (!skip.same_shape(act.out))
        throw std::invalid_argument("skip connection shape mismatch at layer " +
                                    std::to_string(l));
      for (i64 i = 0; i < act.out.size(); ++i) act.out[i] += skip[i];
    }
    x = &layer_output(l);
  }
  return layer_output(layers.size() - 1);
}

template <typename T>
ModelGrads<T> Model<T>::backward(const Tensor<T>& batch, const Tensor<T>& grad_logits) {
  if (acts_.size() != layers.size())
    throw std::logic_error("backward requires a preceding forward");
  if (batch.shape() != acts_.front().in_shape)
    throw std::invalid_argument("batch does not match the cached forward pass");
  if (!grad_logits.same_shape(layer_output(layers.size() - 1)))
    throw std::invalid_argument("grad_logits shape does not match the logits");

  ModelGrads<T> grads;
  grads.layers.resize(layers.size());

  // d(loss)/d(layer output), accumulated from the next layer and any skips.
  std::vector<Tensor<T>> grad_out(layers.size());
  grad_out.back() = grad_logits;

  for (size_t li = layers.size(); li-- > 0;) {
    Layer<T>& layer = layers[li];
    LayerActivations& act = acts_[li];
    typename ModelGrads<T>::LayerGrads& lg = grads.layers[li];
    const ConvConfig& cfg = layer.spec.cfg;

    Tensor<T>& g = grad_out[li];
    if (g.size() != layer_output(li).size() || !g.same_shape(layer_output(li))) {
      // A layer whose output feeds nothing would have no gradient; the
      // topology validator rules that out, so reaching here is a bug.
      throw std::logic_error("missing output gradient at layer " + std::to_string(li));
    }

    // Additive skip: the same gradient flows to the skip source.
    if (layer.spec.skip_from >= 0) {
      Tensor<T>& dst = grad_out[static_cast<size_t>(layer.spec.skip_from)];
      if (dst.size() == g.size() && dst.same_shape(g)) {
        for (i64 i = 0; i < g.size(); ++i) dst[i] += g[i];
      } else {
        dst = g;
      }
    }

    // g is not needed past this point, so the no-upsampling case masks it in
    // place.
    Tensor<T> gz = layer.spec.upsample_after ? upsample2_nearest_backward(g)
                                             : std::move(g);
    if (layer.spec.activation == Activation::relu) {
      for (i64 i = 0; i < gz.size(); ++i)
        if (!(act.post[i] > T{})) gz[i] = T{};
    }

    const bool want_input = li > 0;
    const Tensor<T>& x_in = li == 0 ? batch : layer_output(li - 1);
    if (layer.sc) {
      const Tensor<T> kbs = assemble_kbs(*layer.sc);
      ConvGrads<T> cg = conv2d_backward(x_in, kbs, cfg, gz, want_input);
      AssemblyGrads<T> chain = backprop_assembly(*layer.sc, cg.grad_kernel);
      lg.kernel = std::move(chain.kernel);
      lg.base_weight = std::move(chain.base_weight);
      lg.shape_weight = std::move(chain.shape_weight);
      lg.is_shapeconv = true;
      lg.has_bias = cfg.has_bias;
      if (cfg.has_bias) lg.bias = std::move(cg.grad_bias);
      if (want_input) accumulate_input_grad(grad_out[li - 1], cg.grad_input);
    } else {
      ConvGrads<T> cg = conv2d_backward(x_in, layer.kernel, cfg, gz, want_input);
      lg.kernel = std::move(cg.grad_kernel);
      lg.has_bias = cfg.has_bias;
      if (cfg.has_bias) lg.bias = std::move(cg.grad_bias);
      if (want_input) accumulate_input_grad(grad_out[li - 1], cg.grad_input);
    }
  }
  return grads;
}

template <typename T>
Model<T> build_model(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  Model<T> model;
  model.spec = spec;
  model.seed = seed;
  model.layers.resize(spec.layers.size());
  for (size_t l = 0; l < spec.layers.size(); ++l) {
    Layer<T>& layer = model.layers[l];
    layer.spec = spec.layers[l];
    const std::uint64_t layer_seed = derive_seed(seed, static_cast<std::uint64_t>(l));
    const i64 n = static_cast<i64>(layer.spec.cfg.kh) * layer.spec.cfg.kw;

    // Both kinds draw the kernel from the same stream, so vanilla and
    // shapeconv twins share kernels bit for bit.
    ShapeConvParams<T> params = init_params<T>(layer.spec.cfg, layer_seed);
    if (layer.spec.kind == LayerKind::shapeconv && n > 1) {
      layer.sc = std::move(params);
    } else {
      layer.spec.kind = LayerKind::conv;
      model.spec.layers[l].kind = LayerKind::conv;
      layer.kernel = std::move(params.kernel);
      layer.bias = std::move(params.bias);
    }
  }
  return model;
}

template <typename T>
Tensor<T> forward(Model<T>& model, const Tensor<T>& batch) {
  return model.forward(batch);
}

template <typename T>
ModelGrads<T> backward(Model<T>& model, const Tensor<T>& batch, const Tensor<T>& grad_logits) {
  return model.backward(batch, grad_logits);
}

template <typename T>
Model<T> fuse_model(const Model<T>& model) {
  Model<T> fused;
  fused.spec = model.spec;
  fused.seed = model.seed;
  fused.layers.resize(model.layers.size());
  for (size_t l = 0; l < model.layers.size(); ++l) {
    const Layer<T>& src = model.layers[l];
    Layer<T>& dst = fused.layers[l];
    dst.spec = src.spec;
    dst.spec.kind = LayerKind::conv;
    fused.spec.layers[l].kind = LayerKind::conv;
    if (src.sc) {
      FusedConv<T> f = fuse(*src.sc);
      dst.kernel = std::move(f.kernel);
      dst.bias = std::move(f.bias);
    } else {
      dst.kernel = src.kernel;
      dst.bias = src.bias;
    }
  }
  return fused;
}

#define SCL_INSTANTIATE(T)                                                             \
  template class Model<T>;                                                             \
  template struct ModelGrads<T>;                                                       \
  template Model<T> build_model<T>(const ModelSpec&, std::uint64_t);                   \
  template Tensor<T> forward(Model<T>&, const Tensor<T>&);                             \
  template ModelGrads<T> backward(Model<T>&, const Tensor<T>&, const Tensor<T>&);      \
  template Model<T> fuse_model(const Model<T>&);                                       \
  template Tensor<T> upsample2_nearest(const Tensor<T>&);                              \
  template Tensor<T> upsample2_nearest_backward(const Tensor<T>&);

SCL_INSTANTIATE(float)
SCL_INSTANTIATE(double)
#undef SCL_INSTANTIATE

}  // namespace scl
