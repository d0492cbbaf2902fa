#include "bcos/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace bcos {

std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::EmptyReduction: return "EmptyReduction";
    case ErrorCode::AxisOutOfRange: return "AxisOutOfRange";
    case ErrorCode::NonFiniteInput: return "NonFiniteInput";
    case ErrorCode::NonFiniteActivation: return "NonFiniteActivation";
    case ErrorCode::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorCode::WrongChannelCount: return "WrongChannelCount";
    case ErrorCode::UnsupportedLayer: return "UnsupportedLayer";
    case ErrorCode::TooLarge: return "TooLarge";
    case ErrorCode::DivergedLoss: return "DivergedLoss";
    case ErrorCode::LowConfidenceCell: return "LowConfidenceCell";
    case ErrorCode::InsufficientConfidentSamples: return "InsufficientConfidentSamples";
    case ErrorCode::BBoxOutOfBounds: return "BBoxOutOfBounds";
    case ErrorCode::AllZeroWeights: return "AllZeroWeights";
    case ErrorCode::TooManyClasses: return "TooManyClasses";
    case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::VersionUnsupported: return "VersionUnsupported";
    case ErrorCode::CorruptHeader: return "CorruptHeader";
    case ErrorCode::TruncatedBlob: return "TruncatedBlob";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::Io: return "Io";
  }
  return "Unknown";
}

std::size_t shape_numel(const Shape& shape) {
  if (shape.empty()) return 0;
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

void check_shape(const Shape& shape) {
  for (auto d : shape) {
    if (d == 0) throw Error(ErrorCode::ShapeMismatch, "zero extent in shape " + shape_str(shape));
  }
}

}  // namespace

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill_value) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(shape_numel(shape_), fill_value);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)), data_(std::move(values)) {
  check_shape(shape_);
  if (shape_numel(shape_) != data_.size()) {
    throw Error(ErrorCode::ShapeMismatch, "shape " + shape_str(shape_) + " does not match " +
                                              std::to_string(data_.size()) + " values");
  }
}

template <typename T>
Tensor<T> Tensor<T>::identity(std::size_t n) {
  Tensor out({n, n});
  for (std::size_t i = 0; i < n; ++i) out[i * n + i] = T{1};
  return out;
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw Error(ErrorCode::AxisOutOfRange, "axis " + std::to_string(axis) + " of " + shape_str(shape_));
  }
  return shape_[axis];
}

template <typename T>
std::size_t Tensor<T>::flat_index(std::initializer_list<std::size_t> index) const {
  if (index.size() != shape_.size()) {
    throw Error(ErrorCode::ShapeMismatch, "index rank does not match " + shape_str(shape_));
  }
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= shape_[axis]) throw Error(ErrorCode::IndexOutOfRange, "index outside " + shape_str(shape_));
    flat = flat * shape_[axis] + i;
    ++axis;
  }
  return flat;
}

template <typename T>
T& Tensor<T>::at(std::initializer_list<std::size_t> index) {
  return data_[flat_index(index)];
}

template <typename T>
const T& Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  return data_[flat_index(index)];
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const& {
  return Tensor(std::move(shape), data_);
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) && {
  return Tensor(std::move(shape), std::move(data_));
}

template <typename T>
void Tensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template <typename T>
Tensor<T>& Tensor<T>::operator+=(const Tensor& other) {
  if (other.shape_ != shape_) {
    throw Error(ErrorCode::ShapeMismatch, shape_str(shape_) + " + " + shape_str(other.shape_));
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

template <typename T>
Tensor<T>& Tensor<T>::operator-=(const Tensor& other) {
  if (other.shape_ != shape_) {
    throw Error(ErrorCode::ShapeMismatch, shape_str(shape_) + " - " + shape_str(other.shape_));
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

template <typename T>
Tensor<T>& Tensor<T>::operator*=(T scale) {
  for (auto& v : data_) v *= scale;
  return *this;
}

template <typename T>
Tensor<T> hadamard(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw Error(ErrorCode::ShapeMismatch, shape_str(a.shape()) + " * " + shape_str(b.shape()));
  }
  Tensor<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  return out;
}

template <typename T>
T max_abs(const Tensor<T>& a) {
  T m{0};
  for (auto v : a.values()) m = std::max(m, std::abs(v));
  return m;
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw Error(ErrorCode::ShapeMismatch, shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  T m{0};
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template <typename T>
bool all_finite(std::span<const T> values) {
  return std::all_of(values.begin(), values.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
T dot(std::span<const T> a, std::span<const T> b) {
  T acc{0};
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, Transpose ta, Transpose tb) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw Error(ErrorCode::ShapeMismatch, "matmul needs rank-2 operands, got " + shape_str(a.shape()) +
                                              " and " + shape_str(b.shape()));
  }
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Map = Eigen::Map<const Mat>;
  const Map ma(a.data(), Eigen::Index(a.dim(0)), Eigen::Index(a.dim(1)));
  const Map mb(b.data(), Eigen::Index(b.dim(0)), Eigen::Index(b.dim(1)));
  const std::size_t m = ta == Transpose::Yes ? a.dim(1) : a.dim(0);
  const std::size_t ka = ta == Transpose::Yes ? a.dim(0) : a.dim(1);
  const std::size_t kb = tb == Transpose::Yes ? b.dim(1) : b.dim(0);
  const std::size_t n = tb == Transpose::Yes ? b.dim(0) : b.dim(1);
  if (ka != kb) {
    throw Error(ErrorCode::ShapeMismatch, "matmul inner dimensions " + std::to_string(ka) + " vs " +
                                              std::to_string(kb));
  }
  Tensor<T> out({m, n});
  Eigen::Map<Mat> mc(out.data(), Eigen::Index(m), Eigen::Index(n));
  if (ta == Transpose::No && tb == Transpose::No) {
    mc.noalias() = ma * mb;
  } else if (ta == Transpose::Yes && tb == Transpose::No) {
    mc.noalias() = ma.transpose() * mb;
  } else if (ta == Transpose::No && tb == Transpose::Yes) {
    mc.noalias() = ma * mb.transpose();
  } else {
    mc.noalias() = ma.transpose() * mb.transpose();
  }
  return out;
}

std::size_t ConvGeometry::out_height() const {
  if (kernel_h > height + 2 * padding || stride == 0) {
    throw Error(ErrorCode::ShapeMismatch, "kernel height exceeds padded input");
  }
  return (height + 2 * padding - kernel_h) / stride + 1;
}

std::size_t ConvGeometry::out_width() const {
  if (kernel_w > width + 2 * padding || stride == 0) {
    throw Error(ErrorCode::ShapeMismatch, "kernel width exceeds padded input");
  }
  return (width + 2 * padding - kernel_w) / stride + 1;
}

template <typename T>
Tensor<T> im2col(const Tensor<T>& input, const ConvGeometry& g) {
  if (input.rank() != 4 || input.dim(1) != g.channels || input.dim(2) != g.height || input.dim(3) != g.width) {
    throw Error(ErrorCode::ShapeMismatch, "im2col input " + shape_str(input.shape()));
  }
  const std::size_t batch = input.dim(0);
  const std::size_t oh = g.out_height(), ow = g.out_width();
  const std::size_t positions = oh * ow;
  const std::size_t total = batch * positions;
  Tensor<T> cols({g.patch_size(), total});
  T* out = cols.data();
  const T* in = input.data();
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
        T* row = out + ((c * g.kernel_h + ky) * g.kernel_w + kx) * total;
        for (std::size_t n = 0; n < batch; ++n) {
          const T* plane = in + (n * g.channels + c) * g.height * g.width;
          T* dst = row + n * positions;
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) {
              std::fill(dst + oy * ow, dst + (oy + 1) * ow, T{0});
              continue;
            }
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - pad;
              dst[oy * ow + ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width))
                                      ? T{0}
                                      : plane[static_cast<std::size_t>(iy) * g.width + static_cast<std::size_t>(ix)];
            }
          }
        }
      }
    }
  }
  return cols;
}

template <typename T>
Tensor<T> col2im(const Tensor<T>& cols, std::size_t batch, const ConvGeometry& g) {
  const std::size_t oh = g.out_height(), ow = g.out_width();
  const std::size_t positions = oh * ow;
  const std::size_t total = batch * positions;
  if (cols.rank() != 2 || cols.dim(0) != g.patch_size() || cols.dim(1) != total) {
    throw Error(ErrorCode::ShapeMismatch, "col2im columns " + shape_str(cols.shape()));
  }
  Tensor<T> image({batch, g.channels, g.height, g.width});
  T* out = image.data();
  const T* in = cols.data();
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
        const T* row = in + ((c * g.kernel_h + ky) * g.kernel_w + kx) * total;
        for (std::size_t n = 0; n < batch; ++n) {
          T* plane = out + (n * g.channels + c) * g.height * g.width;
          const T* src = row + n * positions;
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - pad;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
              plane[static_cast<std::size_t>(iy) * g.width + static_cast<std::size_t>(ix)] += src[oy * ow + ox];
            }
          }
        }
      }
    }
  }
  return image;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernels, std::size_t stride, std::size_t padding) {
  if (input.rank() != 3 || kernels.rank() != 4) {
    throw Error(ErrorCode::ShapeMismatch, "conv2d expects [C,H,W] input and [F,C,kh,kw] kernels");
  }
  if (kernels.dim(1) != input.dim(0)) {
    throw Error(ErrorCode::ShapeMismatch, "conv2d channel mismatch: kernels " + shape_str(kernels.shape()) +
                                              ", input " + shape_str(input.shape()));
  }
  if (stride == 0) throw Error(ErrorCode::ShapeMismatch, "conv2d stride must be >= 1");
  const ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), kernels.dim(2), kernels.dim(3), stride, padding};
  const auto cols = im2col(input.reshaped({1, g.channels, g.height, g.width}), g);
  const auto w = kernels.reshaped({kernels.dim(0), g.patch_size()});
  return matmul(w, cols).reshaped({kernels.dim(0), g.out_height(), g.out_width()});
}

template <typename T>
Tensor<T> reduce(const Tensor<T>& x, ReduceOp op, std::vector<std::size_t> axes) {
  const std::size_t rank = x.rank();
  if (rank == 0) throw Error(ErrorCode::EmptyReduction, "reduction over an unset tensor");
  if (axes.empty()) {
    axes.resize(rank);
    std::iota(axes.begin(), axes.end(), std::size_t{0});
  }
  std::vector<bool> reduced(rank, false);
  for (auto a : axes) {
    if (a >= rank) throw Error(ErrorCode::AxisOutOfRange, "reduce axis " + std::to_string(a));
    reduced[a] = true;
  }
  Shape out_shape;
  for (std::size_t a = 0; a < rank; ++a)
    if (!reduced[a]) out_shape.push_back(x.dim(a));
  if (out_shape.empty()) out_shape = {1};

  const std::size_t out_n = shape_numel(out_shape);
  const std::size_t count = x.size() / out_n;
  std::vector<T> acc(out_n, op == ReduceOp::Max ? -std::numeric_limits<T>::infinity() : T{0});

  // Walk x in row-major order, tracking the kept-axis flat index.
  std::vector<std::size_t> index(rank, 0);
  std::vector<std::size_t> kept_stride(rank, 0);
  {
    std::size_t s = 1;
    for (std::size_t a = rank; a-- > 0;) {
      if (!reduced[a]) {
        kept_stride[a] = s;
        s *= x.dim(a);
      }
    }
  }
  for (std::size_t i = 0; i < x.size(); ++i) {
    std::size_t o = 0;
    for (std::size_t a = 0; a < rank; ++a) o += index[a] * kept_stride[a];
    const T v = x[i];
    switch (op) {
      case ReduceOp::Sum:
      case ReduceOp::Mean: acc[o] += v; break;
      case ReduceOp::Max: acc[o] = std::max(acc[o], v); break;
      case ReduceOp::L2Norm: acc[o] += v * v; break;
    }
    for (std::size_t a = rank; a-- > 0;) {
      if (++index[a] < x.dim(a)) break;
      index[a] = 0;
    }
  }
  if (op == ReduceOp::Mean) {
    for (auto& v : acc) v /= static_cast<T>(count);
  } else if (op == ReduceOp::L2Norm) {
    for (auto& v : acc) v = std::sqrt(v);
  }
  return Tensor<T>(std::move(out_shape), std::move(acc));
}

Rng Rng::derive(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  std::mt19937_64 mixer(seq);
  return Rng(mixer());
}

#define BCOS_INSTANTIATE(T)                                                                     \
  template class Tensor<T>;                                                                     \
  template Tensor<T> hadamard(const Tensor<T>&, const Tensor<T>&);                              \
  template T max_abs(const Tensor<T>&);                                                         \
  template T max_abs_diff(const Tensor<T>&, const Tensor<T>&);                                  \
  template bool all_finite(std::span<const T>);                                                 \
  template T dot(std::span<const T>, std::span<const T>);                                       \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&, Transpose, Transpose);          \
  template Tensor<T> im2col(const Tensor<T>&, const ConvGeometry&);                             \
  template Tensor<T> col2im(const Tensor<T>&, std::size_t, const ConvGeometry&);                \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t);      \
  template Tensor<T> reduce(const Tensor<T>&, ReduceOp, std::vector<std::size_t>);

BCOS_INSTANTIATE(float)
BCOS_INSTANTIATE(double)

#undef BCOS_INSTANTIATE

}  // namespace bcos
