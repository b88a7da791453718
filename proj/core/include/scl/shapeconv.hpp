#pragma once

#include <cstdint>

#include "scl/conv.hpp"
#include "scl/tensor.hpp"

namespace scl {

// Learnables of one shape-aware convolution layer.
//
// The kernel splits into a spatial-mean part and a zero-mean residual; the
// layer reweights the mean part by the scalar base_weight and mixes the
// residual's n = kh*kw spatial positions per input channel through the
// shape_weight matrices before convolving. shape_weight is stored
// [source i][target o][channel c]: the mixed value at target position o is
// sum_i shape_weight(i, o, c) * residual(i). The same matrix with the same
// orientation applies on the patch side.
//
// base_weight is a rank-0 tensor so every learnable is a Tensor and the
// optimizer, checkpoint and gradient-check paths treat them uniformly.
template <typename T>
struct ShapeConvParams {
  Tensor<T> kernel;        // kh x kw x c_in x c_out
  Tensor<T> base_weight;   // rank-0 scalar
  Tensor<T> shape_weight;  // n x n x c_in
  Tensor<T> bias;          // c_out, present iff cfg.has_bias
  ConvConfig cfg;

  i64 n() const { return static_cast<i64>(cfg.kh) * cfg.kw; }

  void validate() const {
    cfg.validate();
    if (kernel.rank() != 4 || kernel.extent(0) != cfg.kh || kernel.extent(1) != cfg.kw ||
        kernel.extent(2) != cfg.c_in || kernel.extent(3) != cfg.c_out)
      throw std::invalid_argument("shapeconv kernel shape does not match config");
    if (base_weight.rank() != 0)
      throw std::invalid_argument("base_weight must be a scalar tensor");
    if (shape_weight.rank() != 3 || shape_weight.extent(0) != n() ||
        shape_weight.extent(1) != n() || shape_weight.extent(2) != cfg.c_in)
      throw std::invalid_argument("shape_weight must be n x n x c_in with n = kh*kw");
    if (cfg.has_bias && (bias.rank() != 1 || bias.extent(0) != cfg.c_out))
      throw std::invalid_argument("bias must have c_out entries");
  }
};

// Spatial mean and zero-mean residual of a kernel: base is 1 x 1 x c_in x
// c_out, shape is kh x kw x c_in x c_out, and base + shape reconstructs the
// kernel exactly.
template <typename T>
struct KernelDecomposition {
  Tensor<T> base;
  Tensor<T> shape;
};

// Same split for a single patch (kh x kw x c_in); base is 1 x 1 x c_in.
template <typename T>
struct PatchDecomposition {
  Tensor<T> base;
  Tensor<T> shape;
};

template <typename T>
struct ShapeConvGrads {
  Tensor<T> grad_kernel;
  Tensor<T> grad_base_weight;  // rank-0
  Tensor<T> grad_shape_weight;
  Tensor<T> grad_bias;
  Tensor<T> grad_input;
  bool has_bias = false;
};

// Fusion result: a plain convolution triple that reproduces the layer's
// outputs exactly. Parameter count equals a vanilla layer's.
template <typename T>
struct FusedConv {
  Tensor<T> kernel;
  Tensor<T> bias;
  ConvConfig cfg;
};

template <typename T>
KernelDecomposition<T> decompose_kernel(const Tensor<T>& kernel);

template <typename T>
PatchDecomposition<T> decompose_patch(const Tensor<T>& patch);

// Uniform scalar scaling of the base component.
template <typename T>
Tensor<T> base_product_kernel(T base_weight, const Tensor<T>& kernel_base);

// Per-channel spatial mixing of the kernel residual: for each (c, c_out),
// output at target o is sum_i shape_weight(i, o, c) * residual(i, c, c_out).
template <typename T>
Tensor<T> shape_product_kernel(const Tensor<T>& shape_weight, const Tensor<T>& kernel_shape);

// Patch-side twin of shape_product_kernel (no c_out axis).
template <typename T>
Tensor<T> shape_product_patch(const Tensor<T>& shape_weight, const Tensor<T>& patch_shape);

// The reweighted kernel: base_weight * K_base broadcast across positions
// plus the mixed residual. Computed in the perturbation form
//   K + (base_weight - 1) * K_base + (shape_weight - I) * K_residual,
// which is the same expression rearranged so identity parameters
// (base_weight = 1, shape_weight = I) reproduce the kernel bit for bit.
template <typename T>
Tensor<T> assemble_kbs(const ShapeConvParams<T>& params);

// Production forward: conv2d with the assembled kernel. The kernel is
// assembled once per call, not per patch.
template <typename T>
Tensor<T> shapeconv_forward(const Tensor<T>& x, const ShapeConvParams<T>& params);

// Reference oracle that reweights every receptive-field patch instead of the
// kernel and then convolves with the raw kernel. Quadratic cost; test use
// only. Agrees with shapeconv_forward when each shape_weight slice is
// symmetric with uniform column sums (the identity included); for arbitrary
// slices the two differ and tests measure the gap rather than assert it away.
template <typename T>
Tensor<T> shapeconv_forward_patchside(const Tensor<T>& x, const ShapeConvParams<T>& params);

// Gradients of the three assembly inputs given the gradient with respect to
// the assembled kernel. Shared by shapeconv_backward and the network
// training path (which already holds the convolution adjoints).
template <typename T>
struct AssemblyGrads {
  Tensor<T> kernel;
  Tensor<T> base_weight;  // rank-0
  Tensor<T> shape_weight;
};

// With G the gradient w.r.t. the assembled kernel, n = kh*kw and s_o the
// column sums of a shape_weight slice:
//   d/d base_weight         = sum_{o,c,co} G(o,c,co) * K_base(c,co)
//   d/d shape_weight(i,o,c) = sum_co G(o,c,co) * K_residual(i,c,co)
//   d/d kernel(j,c,co)      = sum_o W(j,o,c) G(o,c,co)
//                             + (base_weight * sum_o G - sum_o s_o G) / n
// The kernel gradient is arranged so identity parameters reproduce the
// plain convolution's kernel gradient exactly.
template <typename T>
AssemblyGrads<T> backprop_assembly(const ShapeConvParams<T>& params, const Tensor<T>& grad_kbs);

// Hand-derived adjoints of shapeconv_forward: conv2d_backward through the
// assembled kernel, then backprop_assembly.
template <typename T>
ShapeConvGrads<T> shapeconv_backward(const Tensor<T>& x, const ShapeConvParams<T>& params,
                                     const Tensor<T>& grad_output);

// Folds the trained weights into a single kernel for inference.
template <typename T>
FusedConv<T> fuse(const ShapeConvParams<T>& params);

// Fresh layer parameters: kernel from a zero-mean normal with variance
// 2/(kh*kw*c_in), base_weight 1, every shape_weight slice the identity, bias
// zero. At these values the layer computes exactly the vanilla convolution.
template <typename T>
ShapeConvParams<T> init_params(const ConvConfig& cfg, std::uint64_t seed);

}  // namespace scl
