#pragma once

#include <string>
#include <vector>

#include "bcos/nn.hpp"

namespace bcos {

struct ConversionReport {
  double max_abs_logit_diff = 0.0;
  std::size_t samples_checked = 0;
  double tolerance = 0.0;
  bool equivalent = true;
  bool degenerate = false;  // nothing was compared
  std::vector<std::string> per_layer_notes;
};

struct ConvertOptions {
  // Both break exact equivalence; they exist for the pooling and
  // weight-normalization ablations.
  bool swap_maxpool = false;
  bool unit_norm_weights = false;
};

/// [F,3,kh,kw] -> [F,6,kh,kw] as [w/2, -w/2] along the channel axis. Rank-2
/// weights over a flattened channel-major 3-channel input are expanded the
/// same way (first half, then the negated half).
template <typename T>
Tensor<T> expand_first_layer(const Tensor<T>& w3);

/// Rewrites a conventional 3-channel model into an equivalent 6-channel
/// B-cos model with B = 1 and all biases kept. `notes` receives one line
/// per rewritten layer.
template <typename T>
ModelGraph<T> bcosify(const ModelGraph<T>& model3, const NormalizationSpec& norm, const ConvertOptions& options = {},
                      std::vector<std::string>* notes = nullptr);

/// Runs n_samples uniform [0,1] images through both pipelines (3-channel
/// normalization vs. normalized add-inverse encoding) and reports the
/// largest logit difference. Tolerance is 1e-5 for float, 1e-10 for double.
template <typename T>
ConversionReport verify_equivalence(const ModelGraph<T>& model3, const ModelGraph<T>& model6,
                                    const NormalizationSpec& norm, std::size_t n_samples, std::uint64_t seed);

enum class BiasMode { Zero, Keep, Decay };

std::string_view to_string(BiasMode mode) noexcept;
std::optional<BiasMode> bias_mode_from_string(std::string_view name) noexcept;

/// Sets every B-cos layer to b_target. BiasMode::Zero drops every bias and
/// BN shift and turns centered BatchNorm into the uncentered form, so the
/// result is exactly dynamic-linear. Keep and Decay leave biases in place.
/// LogitBias layers are untouched.
template <typename T>
ModelGraph<T> apply_interpretability_changes(const ModelGraph<T>& model6, T b_target, BiasMode bias_mode);

/// Centered -> uncentered BatchNorm: drops the mean subtraction and uses the
/// running second moment var + mean^2.
template <typename T>
void uncenter_batchnorm(LayerSpec<T>& layer);

}  // namespace bcos
