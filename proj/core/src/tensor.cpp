#include "scl/tensor.hpp"

#include <atomic>

#include "gemm_kernels.hpp"

namespace scl {

namespace {
std::atomic<bool> g_finite_checks{false};
}

void set_finite_checks(bool enabled) { g_finite_checks.store(enabled); }
bool finite_checks_enabled() { return g_finite_checks.load(); }

namespace {

template <typename T>
void maybe_check(const Tensor<T>& t, const char* context) {
  if (finite_checks_enabled()) check_finite(t, context);
}

}  // namespace

template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& t, const Axes& axes, bool keep_reduced_axes) {
  axes.validate(t.rank());
  if (axes.empty()) return t;

  const int rank = t.rank();
  std::vector<bool> reduced(static_cast<size_t>(rank), false);
  for (int a : axes.indices()) reduced[static_cast<size_t>(a)] = true;

  i64 count = 1;
  Shape out_shape;
  for (int a = 0; a < rank; ++a) {
    if (reduced[static_cast<size_t>(a)]) {
      if (t.extent(a) == 0)
        throw std::invalid_argument("reduce_mean over an empty extent");
      count *= t.extent(a);
      if (keep_reduced_axes) out_shape.push_back(1);
    } else {
      out_shape.push_back(t.extent(a));
    }
  }

  Tensor<T> out(out_shape);

  // Row-major walk of the input, maintaining the flat output index of the
  // kept axes alongside.
  std::vector<i64> idx(static_cast<size_t>(rank), 0);
  std::vector<i64> out_stride(static_cast<size_t>(rank), 0);
  {
    i64 s = 1;
    for (int a = rank - 1; a >= 0; --a) {
      if (!reduced[static_cast<size_t>(a)]) {
        out_stride[static_cast<size_t>(a)] = s;
        s *= t.extent(a);
      }
    }
  }
  i64 out_flat = 0;
  for (i64 flat = 0; flat < t.size(); ++flat) {
    out[out_flat] += t[flat];
    for (int a = rank - 1; a >= 0; --a) {
      idx[static_cast<size_t>(a)]++;
      if (!reduced[static_cast<size_t>(a)]) out_flat += out_stride[static_cast<size_t>(a)];
      if (idx[static_cast<size_t>(a)] < t.extent(a)) break;
      if (!reduced[static_cast<size_t>(a)])
        out_flat -= out_stride[static_cast<size_t>(a)] * t.extent(a);
      idx[static_cast<size_t>(a)] = 0;
    }
  }

  // Division rather than reciprocal multiplication: the mean of an exactly
  // summable constant tensor is then that constant, bit for bit.
  const T divisor = static_cast<T>(count);
  for (i64 i = 0; i < out.size(); ++i) out[i] /= divisor;

  maybe_check(out, "reduce_mean");
  return out;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw std::invalid_argument("matmul expects rank-2 operands");
  if (a.extent(1) != b.extent(0))
    throw std::invalid_argument("matmul inner extents disagree: " +
                                std::to_string(a.extent(1)) + " vs " +
                                std::to_string(b.extent(0)));
  const i64 m = a.extent(0), k = a.extent(1), n = b.extent(1);
  Tensor<T> c({m, n});
  detail::gemm_accum(a.data(), b.data(), c.data(), m, k, n);
  maybe_check(c, "matmul");
  return c;
}

template Tensor<float> reduce_mean(const Tensor<float>&, const Axes&, bool);
template Tensor<double> reduce_mean(const Tensor<double>&, const Axes&, bool);
template Tensor<float> matmul(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> matmul(const Tensor<double>&, const Tensor<double>&);

}  // namespace scl
