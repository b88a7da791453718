#include "scl/conv.hpp"

#include <algorithm>

#include "gemm_kernels.hpp"

namespace scl {

namespace {

template <typename T>
void maybe_check(const Tensor<T>& t, const char* context) {
  if (finite_checks_enabled()) check_finite(t, context);
}

template <typename T>
void validate_conv_args(const Tensor<T>& x, const Tensor<T>& kernel,
                        const Tensor<T>* bias, const ConvConfig& cfg) {
  cfg.validate();
  if (x.rank() != 4) throw std::invalid_argument("conv input must be N x C x H x W");
  if (kernel.rank() != 4) throw std::invalid_argument("kernel must be kh x kw x c_in x c_out");
  if (x.extent(1) != cfg.c_in)
    throw std::invalid_argument("input channel count does not match config");
  if (kernel.extent(0) != cfg.kh || kernel.extent(1) != cfg.kw ||
      kernel.extent(2) != cfg.c_in || kernel.extent(3) != cfg.c_out)
    throw std::invalid_argument("kernel shape does not match config");
  if (cfg.has_bias) {
    if (bias == nullptr) throw std::invalid_argument("config has bias but none was given");
    if (bias->rank() != 1 || bias->extent(0) != cfg.c_out)
      throw std::invalid_argument("bias must have c_out entries");
  }
}

// Packs the (kh, kw, c_in, c_out) kernel into the matmul layout
// [c_out][(c*kh + i)*kw + j], matching the im2col row order.
template <typename T>
Tensor<T> pack_kernel(const Tensor<T>& kernel, const ConvConfig& cfg) {
  const i64 ckk = static_cast<i64>(cfg.c_in) * cfg.kh * cfg.kw;
  Tensor<T> a({cfg.c_out, ckk});
  for (i64 i = 0; i < cfg.kh; ++i)
    for (i64 j = 0; j < cfg.kw; ++j)
      for (i64 c = 0; c < cfg.c_in; ++c)
        for (i64 co = 0; co < cfg.c_out; ++co)
          a(co, (c * cfg.kh + i) * cfg.kw + j) = kernel(i, j, c, co);
  return a;
}

// Per-tap packing [kh*kw][c_out][c_in] for the tap-wise path.
template <typename T>
Tensor<T> pack_kernel_taps(const Tensor<T>& kernel, const ConvConfig& cfg) {
  Tensor<T> a({static_cast<i64>(cfg.kh) * cfg.kw, cfg.c_out, cfg.c_in});
  for (i64 i = 0; i < cfg.kh; ++i)
    for (i64 j = 0; j < cfg.kw; ++j)
      for (i64 c = 0; c < cfg.c_in; ++c)
        for (i64 co = 0; co < cfg.c_out; ++co)
          a(i * cfg.kw + j, co, c) = kernel(i, j, c, co);
  return a;
}

// Transposed per-tap packing [kh*kw][c_in][c_out] for the input gradient.
template <typename T>
Tensor<T> pack_kernel_taps_t(const Tensor<T>& kernel, const ConvConfig& cfg) {
  Tensor<T> a({static_cast<i64>(cfg.kh) * cfg.kw, cfg.c_in, cfg.c_out});
  for (i64 i = 0; i < cfg.kh; ++i)
    for (i64 j = 0; j < cfg.kw; ++j)
      for (i64 c = 0; c < cfg.c_in; ++c)
        for (i64 co = 0; co < cfg.c_out; ++co)
          a(i * cfg.kw + j, c, co) = kernel(i, j, c, co);
  return a;
}

i64 ceil_div(i64 a, i64 b) { return a >= 0 ? (a + b - 1) / b : -((-a) / b); }

template <typename T>
void im2col_into(const Tensor<T>& x, const ConvConfig& cfg, T* od);

// Grow-only scratch for the big internal temporaries (patch matrices and
// gradient columns); spares a multi-megabyte allocate/zero/fault cycle on
// every call. One slot set per thread keeps the functions re-entrant.
template <typename T>
T* scratch(int slot, i64 n, bool zero) {
  thread_local std::vector<T> buffers[3];
  std::vector<T>& buf = buffers[slot];
  if (static_cast<i64>(buf.size()) < n) buf.resize(static_cast<size_t>(n));
  if (zero) std::fill_n(buf.data(), n, T{});
  return buf.data();
}

// Output-position range [lo, hi) for which a tap at offset k_off reads in
// bounds.
struct TapRange {
  i64 lo, hi;
};
TapRange tap_range(i64 k_off, i64 pad, i64 stride, i64 in_extent, i64 out_extent) {
  const i64 lo = std::clamp(ceil_div(pad - k_off, stride), i64{0}, out_extent);
  const i64 hi = std::clamp(ceil_div(in_extent + pad - k_off, stride), i64{0}, out_extent);
  return {lo, hi};
}

template <typename T>
void add_bias(Tensor<T>& out, const Tensor<T>& bias, i64 n, i64 c_out, i64 plane) {
  T* od = out.data();
  for (i64 b = 0; b < n; ++b)
    for (i64 co = 0; co < c_out; ++co) {
      const T bv = bias[co];
      T* dst = od + (b * c_out + co) * plane;
      for (i64 p = 0; p < plane; ++p) dst[p] += bv;
    }
}

// Tap-wise forward for stride_w == 1: for every kernel tap, one shifted
// [c_out x c_in] x [c_in x row-segment] product per output row, accumulated
// straight into the output layout. No patch matrix is materialized.
template <typename T>
Tensor<T> conv2d_tapwise(const Tensor<T>& x, const Tensor<T>& kernel,
                         const Tensor<T>* bias, const ConvConfig& cfg) {
  const i64 n = x.extent(0), h = x.extent(2), w = x.extent(3);
  const i64 ho = cfg.out_h(h), wo = cfg.out_w(w);
  const i64 plane = ho * wo, hw = h * w;
  const Tensor<T> taps = pack_kernel_taps(kernel, cfg);

  Tensor<T> out({n, cfg.c_out, ho, wo});
  for (i64 b = 0; b < n; ++b) {
    const T* xb = x.data() + b * cfg.c_in * hw;
    T* ob = out.data() + b * cfg.c_out * plane;
    for (i64 ki = 0; ki < cfg.kh; ++ki) {
      for (i64 kj = 0; kj < cfg.kw; ++kj) {
        const T* a_tap = taps.data() + (ki * cfg.kw + kj) * cfg.c_out * cfg.c_in;
        const TapRange rh = tap_range(ki, cfg.pad_h, cfg.stride_h, h, ho);
        const TapRange rw = tap_range(kj, cfg.pad_w, 1, w, wo);
        const i64 seg = rw.hi - rw.lo;
        if (seg <= 0) continue;
        const i64 off = kj - cfg.pad_w;
        for (i64 oh = rh.lo; oh < rh.hi; ++oh) {
          const i64 ih = oh * cfg.stride_h - cfg.pad_h + ki;
          detail::gemm_accum_ld(a_tap, cfg.c_in, xb + ih * w + rw.lo + off, hw,
                                ob + oh * wo + rw.lo, plane, cfg.c_out, cfg.c_in, seg);
        }
      }
    }
  }
  if (cfg.has_bias) add_bias(out, *bias, n, cfg.c_out, plane);
  return out;
}

// im2col-lowered forward for the remaining strides. Per-sample column
// blocks of the patch matrix are contiguous, so each product lands directly
// in the N x C_out x Ho x Wo layout.
template <typename T>
Tensor<T> conv2d_lowered(const Tensor<T>& x, const Tensor<T>& kernel,
                         const Tensor<T>* bias, const ConvConfig& cfg) {
  const i64 n = x.extent(0), h = x.extent(2), w = x.extent(3);
  const i64 ho = cfg.out_h(h), wo = cfg.out_w(w);
  const i64 ckk = static_cast<i64>(cfg.c_in) * cfg.kh * cfg.kw;
  const i64 plane = ho * wo;
  const i64 ncols = n * plane;

  T* patches = scratch<T>(0, ckk * ncols, false);
  im2col_into(x, cfg, patches);
  const Tensor<T> a = pack_kernel(kernel, cfg);
  Tensor<T> out({n, cfg.c_out, ho, wo});
  for (i64 b = 0; b < n; ++b) {
    detail::gemm_accum_ld(a.data(), ckk, patches + b * plane, ncols,
                          out.data() + b * cfg.c_out * plane, plane, cfg.c_out, ckk, plane);
  }
  if (cfg.has_bias) add_bias(out, *bias, n, cfg.c_out, plane);
  return out;
}

}  // namespace

namespace {

template <typename T>
void im2col_into(const Tensor<T>& x, const ConvConfig& cfg, T* od) {
  const i64 n = x.extent(0), c_in = x.extent(1), h = x.extent(2), w = x.extent(3);
  const i64 ho = cfg.out_h(h), wo = cfg.out_w(w);
  const i64 cols = n * ho * wo;
  const T* xd = x.data();
  const i64 sw = cfg.stride_w;
  for (i64 c = 0; c < c_in; ++c) {
    for (i64 ki = 0; ki < cfg.kh; ++ki) {
      for (i64 kj = 0; kj < cfg.kw; ++kj) {
        const i64 r = (c * cfg.kh + ki) * cfg.kw + kj;
        T* orow = od + r * cols;
        // Split each output row into its zero-padded fringes and the
        // in-bounds middle, which copies without per-element checks.
        const i64 off = kj - cfg.pad_w;
        const TapRange range = tap_range(kj, cfg.pad_w, sw, w, wo);
        for (i64 b = 0; b < n; ++b) {
          const T* xc = xd + (b * c_in + c) * h * w;
          for (i64 oh = 0; oh < ho; ++oh) {
            const i64 ih = oh * cfg.stride_h - cfg.pad_h + ki;
            T* ocol = orow + (b * ho + oh) * wo;
            if (ih < 0 || ih >= h) {
              std::fill(ocol, ocol + wo, T{});
              continue;
            }
            const T* xrow = xc + ih * w;
            std::fill(ocol, ocol + range.lo, T{});
            if (sw == 1) {
              std::copy(xrow + range.lo + off, xrow + range.hi + off, ocol + range.lo);
            } else {
              for (i64 ow = range.lo; ow < range.hi; ++ow) ocol[ow] = xrow[ow * sw + off];
            }
            std::fill(ocol + range.hi, ocol + wo, T{});
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> im2col(const Tensor<T>& x, const ConvConfig& cfg) {
  cfg.validate();
  if (x.rank() != 4) throw std::invalid_argument("im2col input must be N x C x H x W");
  if (x.extent(1) != cfg.c_in)
    throw std::invalid_argument("im2col channel count does not match config");
  const i64 rows = static_cast<i64>(cfg.c_in) * cfg.kh * cfg.kw;
  const i64 cols = x.extent(0) * cfg.out_h(x.extent(2)) * cfg.out_w(x.extent(3));
  Tensor<T> out({rows, cols});
  im2col_into(x, cfg, out.data());
  maybe_check(out, "im2col");
  return out;
}

template <typename T>
Tensor<T> col2im(const Tensor<T>& cols, const Shape& input_shape, const ConvConfig& cfg) {
  cfg.validate();
  if (input_shape.size() != 4)
    throw std::invalid_argument("col2im target shape must be N x C x H x W");
  const i64 n = input_shape[0], c_in = input_shape[1], h = input_shape[2], w = input_shape[3];
  if (c_in != cfg.c_in) throw std::invalid_argument("col2im channel count does not match config");
  const i64 ho = cfg.out_h(h), wo = cfg.out_w(w);
  const i64 rows = c_in * cfg.kh * cfg.kw;
  const i64 ncols = n * ho * wo;
  if (cols.rank() != 2 || cols.extent(0) != rows || cols.extent(1) != ncols)
    throw std::invalid_argument("col2im patch matrix has the wrong shape");

  Tensor<T> out(input_shape);
  const T* cd = cols.data();
  T* od = out.data();
  const i64 sw = cfg.stride_w;
  for (i64 c = 0; c < c_in; ++c) {
    for (i64 ki = 0; ki < cfg.kh; ++ki) {
      for (i64 kj = 0; kj < cfg.kw; ++kj) {
        const i64 r = (c * cfg.kh + ki) * cfg.kw + kj;
        const T* crow = cd + r * ncols;
        const i64 off = kj - cfg.pad_w;
        const TapRange range = tap_range(kj, cfg.pad_w, sw, w, wo);
        for (i64 b = 0; b < n; ++b) {
          T* xc = od + (b * c_in + c) * h * w;
          for (i64 oh = 0; oh < ho; ++oh) {
            const i64 ih = oh * cfg.stride_h - cfg.pad_h + ki;
            if (ih < 0 || ih >= h) continue;
            const T* ccol = crow + (b * ho + oh) * wo;
            T* xrow = xc + ih * w;
            if (sw == 1) {
              T* dst = xrow + off;
              for (i64 ow = range.lo; ow < range.hi; ++ow) dst[ow] += ccol[ow];
            } else {
              for (i64 ow = range.lo; ow < range.hi; ++ow) xrow[ow * sw + off] += ccol[ow];
            }
          }
        }
      }
    }
  }
  maybe_check(out, "col2im");
  return out;
}

template <typename T>
Tensor<T> conv2d_direct(const Tensor<T>& x, const Tensor<T>& kernel,
                        const Tensor<std::type_identity_t<T>>* bias,
                        const ConvConfig& cfg) {
  validate_conv_args(x, kernel, bias, cfg);
  const i64 n = x.extent(0), h = x.extent(2), w = x.extent(3);
  const i64 ho = cfg.out_h(h), wo = cfg.out_w(w);

  Tensor<T> out({n, cfg.c_out, ho, wo});
  for (i64 b = 0; b < n; ++b) {
    for (i64 co = 0; co < cfg.c_out; ++co) {
      for (i64 oh = 0; oh < ho; ++oh) {
        for (i64 ow = 0; ow < wo; ++ow) {
          T acc{};
          for (i64 c = 0; c < cfg.c_in; ++c) {
            for (i64 ki = 0; ki < cfg.kh; ++ki) {
              const i64 ih = oh * cfg.stride_h - cfg.pad_h + ki;
              if (ih < 0 || ih >= h) continue;
              for (i64 kj = 0; kj < cfg.kw; ++kj) {
                const i64 iw = ow * cfg.stride_w - cfg.pad_w + kj;
                if (iw < 0 || iw >= w) continue;
                acc += kernel(ki, kj, c, co) * x(b, c, ih, iw);
              }
            }
          }
          // bias last, matching the lowered paths' summation order
          out(b, co, oh, ow) = cfg.has_bias ? acc + (*bias)[co] : acc;
        }
      }
    }
  }
  maybe_check(out, "conv2d_direct");
  return out;
}

namespace {

// The tap-wise route wins when the row segments it feeds the kernels are
// long enough to vectorize well; narrow maps go through im2col, whose patch
// matrices are small there anyway.
inline bool use_tapwise(const ConvConfig& cfg, i64 w) {
  return cfg.stride_w == 1 && cfg.out_w(w) >= 32;
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel,
                 const Tensor<std::type_identity_t<T>>* bias, const ConvConfig& cfg) {
  validate_conv_args(x, kernel, bias, cfg);
  Tensor<T> out = use_tapwise(cfg, x.extent(3)) ? conv2d_tapwise(x, kernel, bias, cfg)
                                                : conv2d_lowered(x, kernel, bias, cfg);
  maybe_check(out, "conv2d");
  return out;
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& kernel,
                             const ConvConfig& cfg, const Tensor<T>& grad_output,
                             bool want_grad_input) {
  validate_conv_args(x, kernel, static_cast<const Tensor<T>*>(nullptr),
                     ConvConfig{cfg.kh, cfg.kw, cfg.stride_h, cfg.stride_w,
                                cfg.pad_h, cfg.pad_w, cfg.c_in, cfg.c_out, false});
  const i64 n = x.extent(0), h = x.extent(2), w = x.extent(3);
  const i64 ho = cfg.out_h(h), wo = cfg.out_w(w);
  if (grad_output.rank() != 4 || grad_output.extent(0) != n ||
      grad_output.extent(1) != cfg.c_out || grad_output.extent(2) != ho ||
      grad_output.extent(3) != wo)
    throw std::invalid_argument("grad_output shape does not match conv output");

  const i64 plane = ho * wo, hw = h * w;
  ConvGrads<T> grads;
  grads.has_bias = cfg.has_bias;

  if (use_tapwise(cfg, w)) {
    // Tap-wise adjoints, mirroring the forward path.
    Tensor<T> gk_taps({static_cast<i64>(cfg.kh) * cfg.kw, cfg.c_out, cfg.c_in});
    Tensor<T> taps_t;
    if (want_grad_input) {
      taps_t = pack_kernel_taps_t(kernel, cfg);
      grads.grad_input = Tensor<T>(x.shape());
    }

    for (i64 b = 0; b < n; ++b) {
      const T* xb = x.data() + b * cfg.c_in * hw;
      const T* gb = grad_output.data() + b * cfg.c_out * plane;
      T* gxb = want_grad_input ? grads.grad_input.data() + b * cfg.c_in * hw : nullptr;
      for (i64 ki = 0; ki < cfg.kh; ++ki) {
        for (i64 kj = 0; kj < cfg.kw; ++kj) {
          const i64 tap = ki * cfg.kw + kj;
          const TapRange rh = tap_range(ki, cfg.pad_h, cfg.stride_h, h, ho);
          const TapRange rw = tap_range(kj, cfg.pad_w, 1, w, wo);
          const i64 seg = rw.hi - rw.lo;
          if (seg <= 0) continue;
          const i64 off = kj - cfg.pad_w;
          T* gk_tap = gk_taps.data() + tap * cfg.c_out * cfg.c_in;
          const T* at_tap = want_grad_input
                                ? taps_t.data() + tap * cfg.c_in * cfg.c_out
                                : nullptr;
          for (i64 oh = rh.lo; oh < rh.hi; ++oh) {
            const i64 ih = oh * cfg.stride_h - cfg.pad_h + ki;
            // d/d kernel: G rows dotted with the shifted input rows.
            detail::gemm_abt_accum_ld(gb + oh * wo + rw.lo, plane,
                                      xb + ih * w + rw.lo + off, hw, gk_tap, cfg.c_in,
                                      cfg.c_out, seg, cfg.c_in);
            // d/d input: transposed tap times G, scattered onto the input.
            if (want_grad_input)
              detail::gemm_accum_ld(at_tap, cfg.c_out, gb + oh * wo + rw.lo, plane,
                                    gxb + ih * w + rw.lo + off, hw, cfg.c_in,
                                    cfg.c_out, seg);
          }
        }
      }
    }
    grads.grad_kernel = Tensor<T>({cfg.kh, cfg.kw, cfg.c_in, cfg.c_out});
    for (i64 ki = 0; ki < cfg.kh; ++ki)
      for (i64 kj = 0; kj < cfg.kw; ++kj)
        for (i64 c = 0; c < cfg.c_in; ++c)
          for (i64 co = 0; co < cfg.c_out; ++co)
            grads.grad_kernel(ki, kj, c, co) = gk_taps(ki * cfg.kw + kj, co, c);
  } else {
    const i64 ckk = static_cast<i64>(cfg.c_in) * cfg.kh * cfg.kw;
    const i64 ncols = n * plane;
    T* patches = scratch<T>(0, ckk * ncols, false);
    im2col_into(x, cfg, patches);

    // grad_kernel^T = patches x G^T accumulated sample by sample. The small
    // transposed gradient block stays cache resident, so the big patch
    // matrix streams through exactly once.
    Tensor<T> gkt({ckk, cfg.c_out});
    Tensor<T> gt({plane, cfg.c_out});
    for (i64 b = 0; b < n; ++b) {
      const T* gb = grad_output.data() + b * cfg.c_out * plane;
      T* gtd = gt.data();
      for (i64 p = 0; p < plane; ++p)
        for (i64 co = 0; co < cfg.c_out; ++co) gtd[p * cfg.c_out + co] = gb[co * plane + p];
      detail::gemm_accum_ld(patches + b * plane, ncols, gtd, cfg.c_out,
                            gkt.data(), cfg.c_out, ckk, plane, cfg.c_out);
    }
    grads.grad_kernel = Tensor<T>({cfg.kh, cfg.kw, cfg.c_in, cfg.c_out});
    for (i64 ki = 0; ki < cfg.kh; ++ki)
      for (i64 kj = 0; kj < cfg.kw; ++kj)
        for (i64 c = 0; c < cfg.c_in; ++c)
          for (i64 co = 0; co < cfg.c_out; ++co)
            grads.grad_kernel(ki, kj, c, co) = gkt((c * cfg.kh + ki) * cfg.kw + kj, co);

    // grad_input = col2im(K^T x G).
    if (want_grad_input) {
      Tensor<T> at({ckk, cfg.c_out});
      for (i64 i = 0; i < cfg.kh; ++i)
        for (i64 j = 0; j < cfg.kw; ++j)
          for (i64 c = 0; c < cfg.c_in; ++c)
            for (i64 co = 0; co < cfg.c_out; ++co)
              at((c * cfg.kh + i) * cfg.kw + j, co) = kernel(i, j, c, co);
      Tensor<T> gcols({ckk, ncols});
      for (i64 b = 0; b < n; ++b)
        detail::gemm_accum_ld(at.data(), cfg.c_out,
                              grad_output.data() + b * cfg.c_out * plane, plane,
                              gcols.data() + b * plane, ncols, ckk, cfg.c_out, plane);
      grads.grad_input = col2im(gcols, x.shape(), cfg);
    }
  }

  if (cfg.has_bias) {
    grads.grad_bias = Tensor<T>({cfg.c_out});
    const T* gd = grad_output.data();
    for (i64 b = 0; b < n; ++b)
      for (i64 co = 0; co < cfg.c_out; ++co) {
        T acc{};
        const T* src = gd + (b * cfg.c_out + co) * plane;
        for (i64 p = 0; p < plane; ++p) acc += src[p];
        grads.grad_bias[co] += acc;
      }
  }

  if (want_grad_input) maybe_check(grads.grad_input, "conv2d_backward.grad_input");
  maybe_check(grads.grad_kernel, "conv2d_backward.grad_kernel");
  return grads;
}

template Tensor<float> im2col(const Tensor<float>&, const ConvConfig&);
template Tensor<double> im2col(const Tensor<double>&, const ConvConfig&);
template Tensor<float> col2im(const Tensor<float>&, const Shape&, const ConvConfig&);
template Tensor<double> col2im(const Tensor<double>&, const Shape&, const ConvConfig&);
template Tensor<float> conv2d_direct(const Tensor<float>&, const Tensor<float>&,
                                     const Tensor<float>*, const ConvConfig&);
template Tensor<double> conv2d_direct(const Tensor<double>&, const Tensor<double>&,
                                      const Tensor<double>*, const ConvConfig&);
template Tensor<float> conv2d(const Tensor<float>&, const Tensor<float>&,
                              const Tensor<float>*, const ConvConfig&);
template Tensor<double> conv2d(const Tensor<double>&, const Tensor<double>&,
                               const Tensor<double>*, const ConvConfig&);
template ConvGrads<float> conv2d_backward(const Tensor<float>&, const Tensor<float>&,
                                          const ConvConfig&, const Tensor<float>&, bool);
template ConvGrads<double> conv2d_backward(const Tensor<double>&, const Tensor<double>&,
                                           const ConvConfig&, const Tensor<double>&, bool);

}  // namespace scl
