#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace scl {

using i64 = std::int64_t;
using Shape = std::vector<i64>;

// Runtime toggle for NaN/Inf detection on operation outputs. Off by default:
// the checks cost a full pass over every result tensor.
void set_finite_checks(bool enabled);
bool finite_checks_enabled();

inline i64 shape_size(const Shape& shape) {
  i64 n = 1;
  for (i64 e : shape) {
    if (e < 0) throw std::invalid_argument("tensor extent must be non-negative");
    n *= e;
  }
  return n;
}

// A set of distinct axis indices into a tensor's shape (e.g. the spatial
// axes a mean reduction runs over).
class Axes {
 public:
  Axes() = default;
  Axes(std::initializer_list<int> indices) : indices_(indices) { check_unique(); }
  explicit Axes(std::vector<int> indices) : indices_(std::move(indices)) { check_unique(); }

  static Axes all(int rank) {
    std::vector<int> idx(static_cast<size_t>(rank));
    std::iota(idx.begin(), idx.end(), 0);
    return Axes(std::move(idx));
  }

  const std::vector<int>& indices() const { return indices_; }
  bool empty() const { return indices_.empty(); }

  bool contains(int axis) const {
    return std::find(indices_.begin(), indices_.end(), axis) != indices_.end();
  }

  void validate(int rank) const {
    for (int a : indices_) {
      if (a < 0 || a >= rank) {
        throw std::invalid_argument("axis " + std::to_string(a) +
                                    " out of range for rank " + std::to_string(rank));
      }
    }
  }

 private:
  void check_unique() const {
    auto sorted = indices_;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
      throw std::invalid_argument("duplicate axis index");
  }

  std::vector<int> indices_;
};

// Dense row-major tensor, last axis fastest. A rank-0 tensor is a scalar
// holding exactly one value (data length equals the empty product).
template <typename T>
class Tensor {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "tensors hold binary32 or binary64 values");

 public:
  Tensor() : data_(1, T{}) {}

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        data_(static_cast<size_t>(shape_size(shape_)), T{}) {}

  Tensor(Shape shape, std::vector<T> values)
      : shape_(std::move(shape)), data_(std::move(values)) {
    if (static_cast<i64>(data_.size()) != shape_size(shape_))
      throw std::invalid_argument("tensor data length does not match shape");
  }

  static Tensor full(Shape shape, T value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }

  static Tensor scalar(T value) {
    Tensor t;
    t.data_[0] = value;
    return t;
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  i64 size() const { return static_cast<i64>(data_.size()); }
  i64 extent(int axis) const { return shape_.at(static_cast<size_t>(axis)); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& values() { return data_; }
  const std::vector<T>& values() const { return data_; }

  T& operator[](i64 flat) { return data_[static_cast<size_t>(flat)]; }
  T operator[](i64 flat) const { return data_[static_cast<size_t>(flat)]; }

  template <typename... Is>
  T& operator()(Is... is) {
    return data_[static_cast<size_t>(flat_index({static_cast<i64>(is)...}))];
  }
  template <typename... Is>
  T operator()(Is... is) const {
    return data_[static_cast<size_t>(flat_index({static_cast<i64>(is)...}))];
  }

  i64 flat_index(std::initializer_list<i64> idx) const {
    if (static_cast<int>(idx.size()) != rank())
      throw std::invalid_argument("index rank mismatch");
    i64 flat = 0;
    auto ext = shape_.begin();
    for (i64 i : idx) flat = flat * *ext++ + i;
    return flat;
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

 private:
  Shape shape_;
  std::vector<T> data_;
};

template <typename T>
constexpr std::uint32_t dtype_code() {
  if constexpr (std::is_same_v<T, float>) return 0;
  else return 1;
}

template <typename T>
constexpr const char* dtype_name() {
  if constexpr (std::is_same_v<T, float>) return "f32";
  else return "f64";
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (i64 i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

// Throws if any value is NaN or Inf. Called by the numeric ops when the
// runtime finite-check toggle is on.
template <typename T>
void check_finite(const Tensor<T>& t, const char* context) {
  for (i64 i = 0; i < t.size(); ++i) {
    if (!std::isfinite(t[i])) {
      throw std::runtime_error(std::string(context) +
                               ": non-finite value at flat index " + std::to_string(i));
    }
  }
}

// Arithmetic mean over the given axes. With keep_reduced_axes the reduced
// extents stay in the result as size one so it broadcasts against the input;
// otherwise they are dropped. Empty axes returns an unchanged copy.
template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& t, const Axes& axes,
                      bool keep_reduced_axes = false);

// Standard rank-2 matrix product, accumulated in the operand dtype.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

}  // namespace scl
