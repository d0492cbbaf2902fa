#include "bcos/normalization.hpp"

#include <algorithm>

namespace bcos {

std::array<double, 6> NormalizationSpec::means6() const {
  return {means[0], means[1], means[2], 1.0 - means[0], 1.0 - means[1], 1.0 - means[2]};
}

std::array<double, 6> NormalizationSpec::stds6() const {
  return {stds[0], stds[1], stds[2], stds[0], stds[1], stds[2]};
}

void NormalizationSpec::validate() const {
  for (int c = 0; c < 3; ++c) {
    if (!(stds[c] > 0.0)) throw Error(ErrorCode::InvalidConfig, "normalization std must be positive");
    if (!(means[c] >= 0.0 && means[c] <= 1.0)) {
      throw Error(ErrorCode::InvalidConfig, "normalization mean must lie in [0, 1]");
    }
  }
}

namespace {

struct ImageLayout {
  std::size_t batch;
  std::size_t channels;
  std::size_t plane;
};

template <typename T>
ImageLayout layout_of(const Tensor<T>& x) {
  if (x.rank() == 2) return {x.dim(0), x.dim(1), 1};
  if (x.rank() == 3) return {1, x.dim(0), x.dim(1) * x.dim(2)};
  if (x.rank() == 4) return {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)};
  throw Error(ErrorCode::ShapeMismatch, "expected [N,C], [C,H,W] or [N,C,H,W], got " + shape_str(x.shape()));
}

}  // namespace

template <typename T>
Tensor<T> add_inverse(const Tensor<T>& image, bool* clamped) {
  const auto l = layout_of(image);
  if (l.channels != 3) throw Error(ErrorCode::WrongChannelCount, "add_inverse needs 3 channels");
  Shape shape = image.shape();
  shape[image.rank() == 3 ? 0 : 1] = 6;
  Tensor<T> out(shape);
  bool any_clamped = false;
  for (std::size_t n = 0; n < l.batch; ++n) {
    const T* src = image.data() + n * 3 * l.plane;
    T* dst = out.data() + n * 6 * l.plane;
    for (std::size_t i = 0; i < 3 * l.plane; ++i) {
      T v = src[i];
      if (v < T{0} || v > T{1}) {
        any_clamped = true;
        v = std::clamp(v, T{0}, T{1});
      }
      dst[i] = v;
      dst[i + 3 * l.plane] = T{1} - v;
    }
  }
  if (clamped) *clamped = any_clamped;
  return out;
}

template <typename T>
Tensor<T> normalize(const Tensor<T>& x, const NormalizationSpec& spec) {
  const auto l = layout_of(x);
  if (l.channels != 3 && l.channels != 6) {
    throw Error(ErrorCode::WrongChannelCount, "normalize needs 3 or 6 channels");
  }
  const auto means = spec.means6();
  const auto stds = spec.stds6();
  Tensor<T> out = x;
  for (std::size_t n = 0; n < l.batch; ++n) {
    for (std::size_t c = 0; c < l.channels; ++c) {
      const T mean = static_cast<T>(means[c]);
      const T std = static_cast<T>(stds[c]);
      T* p = out.data() + (n * l.channels + c) * l.plane;
      for (std::size_t i = 0; i < l.plane; ++i) p[i] = (p[i] - mean) / std;
    }
  }
  return out;
}

template <typename T>
Tensor<T> encode_input(const Tensor<T>& image, const NormalizationSpec& spec, std::size_t channels) {
  const auto l = layout_of(image);
  if (l.channels != 3) throw Error(ErrorCode::WrongChannelCount, "encode_input needs a 3-channel image");
  if (channels == 3) return normalize(image, spec);
  if (channels != 6) throw Error(ErrorCode::WrongChannelCount, "model input must have 3 or 6 channels");
  bool clamped = false;
  Tensor<T> out = add_inverse(image, &clamped);
  for (std::size_t n = 0; n < l.batch; ++n) {
    T* p = out.data() + n * 6 * l.plane;
    for (std::size_t c = 0; c < 3; ++c) {
      const T mean = static_cast<T>(spec.means[c]);
      const T std = static_cast<T>(spec.stds[c]);
      for (std::size_t i = 0; i < l.plane; ++i) {
        const T v = (p[c * l.plane + i] - mean) / std;
        p[c * l.plane + i] = v;
        p[(c + 3) * l.plane + i] = -v;
      }
    }
  }
  return out;
}

template Tensor<float> add_inverse(const Tensor<float>&, bool*);
template Tensor<double> add_inverse(const Tensor<double>&, bool*);
template Tensor<float> normalize(const Tensor<float>&, const NormalizationSpec&);
template Tensor<double> normalize(const Tensor<double>&, const NormalizationSpec&);
template Tensor<float> encode_input(const Tensor<float>&, const NormalizationSpec&, std::size_t);
template Tensor<double> encode_input(const Tensor<double>&, const NormalizationSpec&, std::size_t);

}  // namespace bcos
