#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "bcos/error.hpp"

namespace bcos {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Run-wide element precision. f32 for training and the CLI, f64 for oracles.
enum class Precision { F32, F64 };

/// Dense row-major n-dimensional array.
///
/// A default-constructed tensor is "unset" (rank 0, no elements) and is used
/// as the absent value for optional parameters. Every set tensor has strictly
/// positive extents and exactly shape_numel(shape) elements.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill_value = T{0});
  Tensor(Shape shape, std::vector<T> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, T value) { return Tensor(std::move(shape), value); }
  static Tensor from(Shape shape, std::initializer_list<T> values) {
    return Tensor(std::move(shape), std::vector<T>(values));
  }
  static Tensor vector(std::initializer_list<T> values) {
    return Tensor(Shape{values.size()}, std::vector<T>(values));
  }
  static Tensor identity(std::size_t n);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& at(std::initializer_list<std::size_t> index);
  const T& at(std::initializer_list<std::size_t> index) const;

  Tensor reshaped(Shape shape) const&;
  Tensor reshaped(Shape shape) &&;

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  void fill(T value);

  Tensor& operator+=(const Tensor& other);
  Tensor& operator-=(const Tensor& other);
  Tensor& operator*=(T scale);

  bool operator==(const Tensor& other) const = default;

 private:
  std::size_t flat_index(std::initializer_list<std::size_t> index) const;

  Shape shape_;
  std::vector<T> data_;
};

template <typename T>
Tensor<T> operator+(Tensor<T> a, const Tensor<T>& b) {
  a += b;
  return a;
}
template <typename T>
Tensor<T> operator-(Tensor<T> a, const Tensor<T>& b) {
  a -= b;
  return a;
}
template <typename T>
Tensor<T> operator*(Tensor<T> a, T scale) {
  a *= scale;
  return a;
}
template <typename T>
Tensor<T> operator*(T scale, Tensor<T> a) {
  a *= scale;
  return a;
}

template <typename T>
Tensor<T> hadamard(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
T max_abs(const Tensor<T>& a);

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
bool all_finite(std::span<const T> values);

template <typename T>
T dot(std::span<const T> a, std::span<const T> b);

// ---------------------------------------------------------------------------
// Linear algebra

enum class Transpose : bool { No = false, Yes = true };

/// Matrix product of two rank-2 tensors, optionally transposing either side.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, Transpose ta = Transpose::No,
                 Transpose tb = Transpose::No);

/// Geometry of a 2-D sliding window (convolution or pooling).
struct ConvGeometry {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;

  std::size_t out_height() const;
  std::size_t out_width() const;
  std::size_t patch_size() const { return channels * kernel_h * kernel_w; }
  std::size_t positions() const { return out_height() * out_width(); }
};

/// Unfolds a batch [N,C,H,W] into columns [C*kh*kw, N*H'*W'] (zero padding).
/// Column n*P + p holds the receptive field of output position p of item n.
template <typename T>
Tensor<T> im2col(const Tensor<T>& input, const ConvGeometry& geometry);

/// Adjoint of im2col: scatters columns back into a [N,C,H,W] tensor,
/// accumulating overlapping windows.
template <typename T>
Tensor<T> col2im(const Tensor<T>& cols, std::size_t batch, const ConvGeometry& geometry);

/// Single-image cross-correlation: input [C,H,W], kernels [F,C,kh,kw].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernels, std::size_t stride,
                 std::size_t padding);

// ---------------------------------------------------------------------------
// Reductions

enum class ReduceOp { Sum, Mean, Max, L2Norm };

/// Reduces over the given axes (all axes when empty). Reduced axes are
/// dropped; a full reduction yields shape {1}.
template <typename T>
Tensor<T> reduce(const Tensor<T>& x, ReduceOp op, std::vector<std::size_t> axes = {});

// ---------------------------------------------------------------------------

/// Seeded pseudo-random stream. Identical seeds give identical sequences
/// on the same build.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  /// Independent stream derived from (seed, stream); used for per-sample
  /// generation so results do not depend on evaluation order.
  static Rng derive(std::uint64_t seed, std::uint64_t stream);

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t next_u64() { return engine_(); }
  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  double normal() { return std::normal_distribution<double>(0.0, 1.0)(engine_); }
  /// Uniform integer in [lo, hi].
  std::size_t integer(std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(engine_);
  }
  bool bernoulli(double p) { return p > 0.0 && uniform() < p; }

  template <typename It>
  void shuffle(It first, It last) {
    std::shuffle(first, last, engine_);
  }

  template <typename T>
  Tensor<T> uniform_tensor(Shape shape, double lo, double hi) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.values()) v = static_cast<T>(uniform(lo, hi));
    return t;
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace bcos
