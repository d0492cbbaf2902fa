#pragma once

#include <array>

#include "bcos/tensor.hpp"

namespace bcos {

/// Per-channel mean/std input normalization for 3-channel images and its
/// 6-channel [r, g, b, 1-r, 1-g, 1-b] counterpart.
struct NormalizationSpec {
  std::array<double, 3> means{0.5, 0.5, 0.5};
  std::array<double, 3> stds{0.25, 0.25, 0.25};

  /// [mu_r, mu_g, mu_b, 1-mu_r, 1-mu_g, 1-mu_b]
  std::array<double, 6> means6() const;
  /// The 3-channel stds, repeated.
  std::array<double, 6> stds6() const;

  /// Throws InvalidConfig unless every std > 0 and every mean is in [0, 1].
  void validate() const;

  bool operator==(const NormalizationSpec&) const = default;
};

/// [3,H,W], [N,3,H,W] or flat [N,3] with values in [0,1] -> channels [r,g,b,1-r,1-g,1-b].
/// Out-of-range values are clamped; `clamped` (if given) reports whether any were.
template <typename T>
Tensor<T> add_inverse(const Tensor<T>& image, bool* clamped = nullptr);

/// (x - mean_c) / std_c on channel axis (0 for [C,H,W], 1 for [N,C] and [N,C,H,W]);
/// C must be 3 or 6 and selects means/means6.
template <typename T>
Tensor<T> normalize(const Tensor<T>& x, const NormalizationSpec& spec);

/// Model input for raw [0,1] images: normalize(x) for 3 channels, or the
/// normalized add-inverse encoding for 6. In the 6-channel case the inverse
/// channels are written as the exact negation of the normalized originals,
/// which is their mathematical value.
template <typename T>
Tensor<T> encode_input(const Tensor<T>& image, const NormalizationSpec& spec, std::size_t channels);

}  // namespace bcos
