#pragma once

#include <string>
#include <vector>

#include "bcos/nn.hpp"

namespace bcos {

/// How per-pixel positive energy is formed from the channel contributions.
enum class EnergyMode {
  SumThenClamp,  // max(sum_c signed_c, 0)
  ClampThenSum,  // sum_c max(signed_c, 0)
};

template <typename T>
struct AttributionMap {
  Tensor<T> signed_map;       // [C,H,W] (or [D] for flat models): W_k(x) * x
  Tensor<T> collapsed;        // [H,W] channel sum (or [D])
  Tensor<T> positive_energy;  // [H,W] (or [D])
  T logit = T{0};
  T residual = T{0};          // logit - sum(signed_map)
};

template <typename T>
struct ColorExplanation {
  Tensor<T> rgba;  // [4,H,W], all channels in [0,1]
};

/// Row k of the dynamic linear map W(x) for one input item ([C,H,W] or
/// [1,C,H,W]; flat models take [D] or [1,D]). Eval-mode statistics are used.
/// The result has the item's shape without a batch axis.
template <typename T>
Tensor<T> dynamic_row(const ModelGraph<T>& model, const Tensor<T>& x, std::size_t class_k);

/// Several rows from a single forward pass.
template <typename T>
std::vector<Tensor<T>> dynamic_rows(const ModelGraph<T>& model, const Tensor<T>& x,
                                    const std::vector<std::size_t>& classes, Tensor<T>* logits = nullptr);

inline constexpr std::size_t kDenseInputLimit = 4096;

/// W(x) as an explicit [classes, inputs] matrix, built by multiplying one
/// explicit matrix per layer. Meant as an oracle for dynamic_row; throws
/// TooLarge above kDenseInputLimit inputs.
template <typename T>
Tensor<T> dense_dynamic_matrix(const ModelGraph<T>& model, const Tensor<T>& x);

template <typename T>
AttributionMap<T> contribution_map(const ModelGraph<T>& model, const Tensor<T>& x, std::size_t class_k,
                                   EnergyMode energy = EnergyMode::SumThenClamp);

/// Maps built from rows and logits that were already computed.
template <typename T>
AttributionMap<T> attribution_from_row(const Tensor<T>& row, const Tensor<T>& x, T logit,
                                       EnergyMode energy = EnergyMode::SumThenClamp);

/// Color rendering of a 6-channel row: per pixel and color s,
/// max(w_s,0) / (max(w_s,0) + max(w_s+3,0)) (0/0 -> 0.5); alpha is the pixel
/// norm over the given percentile of pixel norms, clipped to [0,1].
template <typename T>
ColorExplanation<T> render_color(const Tensor<T>& row6, double percentile = 99.9);

/// Binary PPM (P6, 8-bit) with alpha composited over white.
template <typename T>
std::string encode_ppm(const ColorExplanation<T>& image);

/// Linear-interpolated percentile (0..100) of the values.
double percentile_of(std::vector<double> values, double pct);

}  // namespace bcos
