#pragma once

#include <limits>
#include <optional>
#include <string_view>

#include "bcos/tensor.hpp"

namespace bcos {

enum class NegativeMode {
  ClampZero,  // max(c, 0)^p
  Absolute,   // |c|^p
  Signed,     // sign(c) |c|^p
};

std::string_view to_string(NegativeMode mode) noexcept;
std::optional<NegativeMode> negative_mode_from_string(std::string_view name) noexcept;

inline constexpr double kInfinitePower = std::numeric_limits<double>::infinity();

struct PoolConfig {
  double p = 1.0;  // kInfinitePower selects the single best-aligned value
  NegativeMode negative_mode = NegativeMode::ClampZero;
  bool normalize_weights = true;
};

template <typename T>
struct PoolResult {
  Tensor<T> pooled;   // [D]
  Tensor<T> weights;  // [N]
  bool all_zero_weights = false;  // normalization was impossible; pooled is zero
};

/// Weighted sum of the rows of `values` ([N,D]) with weights derived from
/// cos(text, v_i)^p. Zero-norm rows get weight 0. For p = infinity the
/// weight is one-hot on the largest cosine (largest |cos| in Absolute mode),
/// ties to the lowest index.
template <typename T>
PoolResult<T> cosine_power_pool(const Tensor<T>& values, const Tensor<T>& text, const PoolConfig& config);

/// Per-token weights of an H x W token grid as an [H,W] map.
template <typename T>
Tensor<T> pooled_similarity_map(const Tensor<T>& values, const Tensor<T>& text, std::size_t height,
                                std::size_t width, const PoolConfig& config);

/// Shannon entropy (nats) of a non-negative map normalized to sum 1.
template <typename T>
double map_entropy(const Tensor<T>& map);

}  // namespace bcos
