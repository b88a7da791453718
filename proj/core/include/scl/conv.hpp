#pragma once

#include "scl/tensor.hpp"

namespace scl {

// Spatial geometry of a 2-D convolution. Zero padding only; output extents
// use floor division, so inputs that do not tile exactly are legal and the
// trailing pixels are dropped.
struct ConvConfig {
  int kh = 1, kw = 1;
  int stride_h = 1, stride_w = 1;
  int pad_h = 0, pad_w = 0;
  int c_in = 1, c_out = 1;
  bool has_bias = false;

  void validate() const {
    if (kh < 1 || kw < 1) throw std::invalid_argument("kernel extents must be positive");
    if (stride_h < 1 || stride_w < 1) throw std::invalid_argument("strides must be >= 1");
    if (pad_h < 0 || pad_w < 0) throw std::invalid_argument("padding must be >= 0");
    if (c_in < 1 || c_out < 1) throw std::invalid_argument("channel counts must be >= 1");
  }

  i64 out_h(i64 in_h) const {
    const i64 span = in_h + 2 * pad_h - kh;
    if (span < 0) throw std::invalid_argument("kernel taller than padded input");
    return span / stride_h + 1;
  }
  i64 out_w(i64 in_w) const {
    const i64 span = in_w + 2 * pad_w - kw;
    if (span < 0) throw std::invalid_argument("kernel wider than padded input");
    return span / stride_w + 1;
  }

  bool operator==(const ConvConfig&) const = default;
};

// Gradients of a convolution with respect to its inputs. grad_bias is only
// meaningful when the config has a bias; grad_input is skipped when the
// caller asked for none (a network's first layer).
template <typename T>
struct ConvGrads {
  Tensor<T> grad_input;
  Tensor<T> grad_kernel;
  Tensor<T> grad_bias;
  bool has_bias = false;
};

// Lowers x (N x C x H x W) to the patch matrix (C*kh*kw) x (N*Hout*Wout).
// Each column is one flattened receptive field in (c, kh, kw) order; columns
// run sample-major, then output rows, then output columns. Out-of-bounds
// taps read as zero.
template <typename T>
Tensor<T> im2col(const Tensor<T>& x, const ConvConfig& cfg);

// Overlap-add inverse gather of im2col: scatters a patch-matrix-shaped
// tensor back onto an input-shaped tensor, summing where receptive fields
// overlap and dropping the zero-padding taps. This is the adjoint of im2col
// and backs the convolution input gradient.
template <typename T>
Tensor<T> col2im(const Tensor<T>& cols, const Shape& input_shape, const ConvConfig& cfg);

// Reference convolution: naive nested loops, the semantic baseline every
// other path is checked against. Kernel layout is (kh, kw, c_in, c_out).
template <typename T>
Tensor<T> conv2d_direct(const Tensor<T>& x, const Tensor<T>& kernel,
                        const Tensor<std::type_identity_t<T>>* bias,
                        const ConvConfig& cfg);

// Production convolution. Unit-width-stride configs run tap-wise (per-tap
// shifted matrix products, no patch matrix materialized); other strides
// lower through im2col + matmul. Both agree with conv2d_direct within dtype
// tolerance.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel,
                 const Tensor<std::type_identity_t<T>>* bias, const ConvConfig& cfg);

// Exact adjoints of conv2d. grad_bias is the per-channel sum of grad_output.
template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& kernel,
                             const ConvConfig& cfg, const Tensor<T>& grad_output,
                             bool want_grad_input = true);

}  // namespace scl
