#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "anc/errors.hpp"

namespace anc {

inline constexpr std::size_t kMaxRank = 5;

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

inline const char* dtype_name(DType t) { return t == DType::f32 ? "float32" : "float64"; }

/// Up to five positive extents, row-major (last index fastest).
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<std::size_t> dims) {
    if (dims.size() > kMaxRank) throw InvalidArgument("shape rank exceeds 5");
    for (auto d : dims) dims_[rank_++] = d;
  }
  explicit Shape(std::span<const std::size_t> dims) {
    if (dims.size() > kMaxRank) throw InvalidArgument("shape rank exceeds 5");
    for (auto d : dims) dims_[rank_++] = d;
  }

  std::size_t rank() const { return rank_; }
  std::size_t operator[](std::size_t axis) const { return dims_[axis]; }
  std::size_t& operator[](std::size_t axis) { return dims_[axis]; }
  std::span<const std::size_t> extents() const { return {dims_.data(), rank_}; }

  std::size_t volume() const {
    if (rank_ == 0) return 0;
    return std::accumulate(dims_.begin(), dims_.begin() + rank_, std::size_t{1},
                           std::multiplies<>());
  }

  friend bool operator==(const Shape& a, const Shape& b) {
    return a.rank_ == b.rank_ && std::equal(a.dims_.begin(), a.dims_.begin() + a.rank_,
                                            b.dims_.begin());
  }

  std::string str() const {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < rank_; ++i) os << (i ? "," : "") << dims_[i];
    os << ')';
    return os.str();
  }

 private:
  std::array<std::size_t, kMaxRank> dims_{};
  std::size_t rank_ = 0;
};

/// Rank 1..5 row-major array. Values are always held as double; a float32
/// tensor stores values that are exactly representable in float.
class DenseTensor {
 public:
  DenseTensor() = default;

  explicit DenseTensor(Shape shape, DType dtype = DType::f64)
      : shape_(shape), dtype_(dtype), data_(checked_volume(shape), 0.0) {}

  DenseTensor(Shape shape, std::vector<double> data, DType dtype = DType::f64)
      : shape_(shape), dtype_(dtype), data_(std::move(data)) {
    if (data_.size() != checked_volume(shape))
      throw InvalidArgument("data length " + std::to_string(data_.size()) +
                            " does not match shape " + shape.str());
    if (dtype_ == DType::f32)
      for (auto& v : data_) v = static_cast<double>(static_cast<float>(v));
  }

  static DenseTensor filled(Shape shape, double value) {
    DenseTensor t(shape);
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }

  static DenseTensor zeros_like(const DenseTensor& t) { return DenseTensor(t.shape_, t.dtype_); }

  bool empty() const { return data_.empty(); }
  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.rank(); }
  std::size_t dim(std::size_t axis) const { return shape_[axis]; }
  std::size_t size() const { return data_.size(); }
  DType dtype() const { return dtype_; }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double operator[](std::size_t flat) const { return data_[flat]; }
  double& operator[](std::size_t flat) { return data_[flat]; }

  template <typename... Idx>
  std::size_t offset(Idx... idx) const {
    static_assert(sizeof...(Idx) <= kMaxRank);
    const std::array<std::size_t, sizeof...(Idx)> ix{static_cast<std::size_t>(idx)...};
    std::size_t off = 0;
    for (std::size_t a = 0; a < ix.size(); ++a) off = off * shape_[a] + ix[a];
    return off;
  }

  template <typename... Idx>
  double at(Idx... idx) const {
    return data_[offset(idx...)];
  }
  template <typename... Idx>
  double& at(Idx... idx) {
    return data_[offset(idx...)];
  }

  /// Same data, new extents of equal volume.
  DenseTensor reshaped(Shape shape) const {
    if (checked_volume(shape) != data_.size())
      throw InvalidArgument("reshape " + shape_.str() + " -> " + shape.str());
    DenseTensor out;
    out.shape_ = shape;
    out.dtype_ = dtype_;
    out.data_ = data_;
    return out;
  }

  /// Values rounded to the requested dtype.
  DenseTensor as(DType dtype) const { return DenseTensor(shape_, data_, dtype); }

  friend bool operator==(const DenseTensor& a, const DenseTensor& b) {
    return a.shape_ == b.shape_ && a.dtype_ == b.dtype_ && a.data_ == b.data_;
  }

 private:
  static std::size_t checked_volume(const Shape& s) {
    if (s.rank() == 0) throw InvalidArgument("tensor must have rank >= 1");
    for (std::size_t d : s.extents())
      if (d == 0) throw InvalidArgument("tensor extents must be >= 1, got " + s.str());
    return s.volume();
  }

  Shape shape_;
  DType dtype_ = DType::f64;
  std::vector<double> data_;
};

/// Row-major strides for a shape.
inline std::array<std::size_t, kMaxRank> strides_of(const Shape& s) {
  std::array<std::size_t, kMaxRank> st{};
  std::size_t acc = 1;
  for (std::size_t a = s.rank(); a-- > 0;) {
    st[a] = acc;
    acc *= s[a];
  }
  return st;
}

inline bool is_permutation_order(std::span<const std::size_t> order, std::size_t rank) {
  if (order.size() != rank) return false;
  std::array<bool, kMaxRank> seen{};
  for (auto a : order) {
    if (a >= rank || seen[a]) return false;
    seen[a] = true;
  }
  return true;
}

/// Output axis a takes input axis order[a]: out.dim(a) == t.dim(order[a]).
inline DenseTensor permute(const DenseTensor& t, std::span<const std::size_t> order) {
  if (!is_permutation_order(order, t.rank()))
    throw InvalidArgument("permutation order does not match tensor rank " +
                          std::to_string(t.rank()));
  const std::size_t rank = t.rank();
  Shape out_shape = t.shape();
  for (std::size_t a = 0; a < rank; ++a) out_shape[a] = t.dim(order[a]);
  DenseTensor out(out_shape, t.dtype());
  const auto in_st = strides_of(t.shape());
  std::array<std::size_t, kMaxRank> src_st{};
  for (std::size_t a = 0; a < rank; ++a) src_st[a] = in_st[order[a]];

  std::array<std::size_t, kMaxRank> idx{};
  const auto src = t.data();
  auto dst = out.data();
  std::size_t src_off = 0;
  for (std::size_t flat = 0; flat < dst.size(); ++flat) {
    dst[flat] = src[src_off];
    for (std::size_t a = rank; a-- > 0;) {
      if (++idx[a] < out_shape[a]) {
        src_off += src_st[a];
        break;
      }
      src_off -= (out_shape[a] - 1) * src_st[a];
      idx[a] = 0;
    }
  }
  return out;
}

inline DenseTensor permute(const DenseTensor& t, std::initializer_list<std::size_t> order) {
  return permute(t, std::span<const std::size_t>(order.begin(), order.size()));
}

inline std::vector<std::size_t> inverse_order(std::span<const std::size_t> order) {
  std::vector<std::size_t> inv(order.size());
  for (std::size_t a = 0; a < order.size(); ++a) inv[order[a]] = a;
  return inv;
}

inline double max_abs_diff(const DenseTensor& a, const DenseTensor& b) {
  if (!(a.shape() == b.shape())) throw InvalidArgument("shape mismatch in max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace anc
