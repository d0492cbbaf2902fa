#include "bcos/clip_pool.hpp"

#include <cmath>

namespace bcos {

std::string_view to_string(NegativeMode mode) noexcept {
  switch (mode) {
    case NegativeMode::ClampZero: return "clamp_zero";
    case NegativeMode::Absolute: return "absolute";
    case NegativeMode::Signed: return "signed";
  }
  return "?";
}

std::optional<NegativeMode> negative_mode_from_string(std::string_view name) noexcept {
  if (name == "clamp_zero") return NegativeMode::ClampZero;
  if (name == "absolute") return NegativeMode::Absolute;
  if (name == "signed") return NegativeMode::Signed;
  return std::nullopt;
}

template <typename T>
PoolResult<T> cosine_power_pool(const Tensor<T>& values, const Tensor<T>& text, const PoolConfig& config) {
  if (values.rank() != 2 || text.rank() != 1 || values.dim(1) != text.size()) {
    throw Error(ErrorCode::ShapeMismatch,
                "values " + shape_str(values.shape()) + " and text " + shape_str(text.shape()) + " disagree");
  }
  if (!(config.p >= 0.0)) throw Error(ErrorCode::InvalidConfig, "pooling power must be >= 0");
  const std::size_t n = values.dim(0), d = values.dim(1);
  const double tnorm = std::sqrt(static_cast<double>(dot<T>(text.values(), text.values())));
  if (tnorm == 0.0) throw Error(ErrorCode::InvalidConfig, "text embedding must be non-zero");

  std::vector<double> cosine(n, 0.0);
  std::vector<bool> usable(n, false);
  for (std::size_t i = 0; i < n; ++i) {
    const std::span<const T> v(values.data() + i * d, d);
    const double vnorm = std::sqrt(static_cast<double>(dot<T>(v, v)));
    if (vnorm == 0.0) continue;
    usable[i] = true;
    cosine[i] = static_cast<double>(dot<T>(v, text.values())) / (vnorm * tnorm);
  }

  std::vector<double> raw(n, 0.0);
  if (std::isinf(config.p)) {
    std::size_t best = n;
    double best_key = -INFINITY;
    for (std::size_t i = 0; i < n; ++i) {
      if (!usable[i]) continue;
      const double key = config.negative_mode == NegativeMode::Absolute ? std::abs(cosine[i]) : cosine[i];
      if (key > best_key) {
        best_key = key;
        best = i;
      }
    }
    if (best < n) raw[best] = 1.0;
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      if (!usable[i]) continue;
      const double c = cosine[i];
      switch (config.negative_mode) {
        case NegativeMode::ClampZero: raw[i] = std::pow(std::max(c, 0.0), config.p); break;
        case NegativeMode::Absolute: raw[i] = std::pow(std::abs(c), config.p); break;
        case NegativeMode::Signed: raw[i] = (c < 0 ? -1.0 : 1.0) * std::pow(std::abs(c), config.p); break;
      }
    }
  }

  PoolResult<T> out{Tensor<T>({d}), Tensor<T>({n})};
  double total = 0;
  for (double r : raw) total += r;
  if (config.normalize_weights) {
    if (total == 0.0) {
      out.all_zero_weights = true;
      return out;
    }
    for (double& r : raw) r /= total;
  }
  for (std::size_t i = 0; i < n; ++i) {
    out.weights[i] = static_cast<T>(raw[i]);
    if (raw[i] == 0.0) continue;
    for (std::size_t j = 0; j < d; ++j) out.pooled[j] += static_cast<T>(raw[i]) * values[i * d + j];
  }
  return out;
}

template <typename T>
Tensor<T> pooled_similarity_map(const Tensor<T>& values, const Tensor<T>& text, std::size_t height,
                                std::size_t width, const PoolConfig& config) {
  if (values.rank() != 2 || values.dim(0) != height * width) {
    throw Error(ErrorCode::ShapeMismatch, "expected " + std::to_string(height * width) + " tokens, got " +
                                              shape_str(values.shape()));
  }
  return cosine_power_pool(values, text, config).weights.reshaped({height, width});
}

template <typename T>
double map_entropy(const Tensor<T>& map) {
  double total = 0;
  for (T v : map.values()) total += static_cast<double>(v);
  if (total <= 0) return 0.0;
  double h = 0;
  for (T v : map.values()) {
    const double q = static_cast<double>(v) / total;
    if (q > 0) h -= q * std::log(q);
  }
  return h;
}

#define BCOS_POOL_INSTANTIATE(T)                                                                          \
  template PoolResult<T> cosine_power_pool(const Tensor<T>&, const Tensor<T>&, const PoolConfig&);       \
  template Tensor<T> pooled_similarity_map(const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t, \
                                           const PoolConfig&);                                           \
  template double map_entropy(const Tensor<T>&);

BCOS_POOL_INSTANTIATE(float)
BCOS_POOL_INSTANTIATE(double)

}  // namespace bcos
