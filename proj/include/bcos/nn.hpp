#pragma once

#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

#include "bcos/normalization.hpp"
#include "bcos/tensor.hpp"

namespace bcos {

enum class LayerKind {
  Linear,
  Conv2d,
  BcosLinear,
  BcosConv2d,
  ReLU,
  MaxOut,
  BatchNormUncentered,
  BatchNormCentered,
  AvgPool,
  MaxPool,
  GlobalAvgPool,
  Flatten,
  Residual,
  LogitBias,
};

std::string_view to_string(LayerKind kind) noexcept;
std::optional<LayerKind> layer_kind_from_string(std::string_view name) noexcept;

enum class GapOrder { ClassifierThenPool, PoolThenClassifier };

std::string_view to_string(GapOrder order) noexcept;
std::optional<GapOrder> gap_order_from_string(std::string_view name) noexcept;

enum class Mode { Train, Eval };

/// Guard in the cosine denominator; also the |c| floor below which the
/// B-gradient's ln|c| term is taken as zero.
inline constexpr double kCosEps = 1e-6;

/// One layer of a sequential model.
///
/// A flat description keyed by `kind`; only the fields relevant to that kind
/// are populated. `bias` doubles as the BatchNorm shift and is unset when the
/// layer has no bias.
template <typename T>
struct LayerSpec {
  LayerKind kind = LayerKind::Flatten;

  // Linear-like layers: weight is [out, in] or [F, C, kh, kw].
  Tensor<T> weight;
  Tensor<T> bias;
  std::size_t stride = 1;
  std::size_t padding = 0;
  T b_exponent = T{1};
  bool b_learnable = false;
  bool unit_norm_weights = false;

  // BatchNorm. Centered layers use running_mean/running_var, uncentered ones
  // the running second moment running_sq.
  Tensor<T> bn_scale;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  Tensor<T> running_sq;
  T bn_eps = T(1e-5);
  T bn_momentum = T(0.1);

  // AvgPool / MaxPool: square window with stride == window.
  std::size_t pool_size = 2;

  // MaxOut branches, each [out, in] over a flat input. Empty means the
  // elementwise (v, 0) form: max(z, 0) of the incoming pre-activation z.
  std::vector<Tensor<T>> branches;

  // Residual: out = x + body(x).
  std::vector<LayerSpec> body;

  T logit_bias = T{0};

  bool has_bias() const noexcept { return !bias.empty(); }
  bool is_bcos() const noexcept { return kind == LayerKind::BcosLinear || kind == LayerKind::BcosConv2d; }
  bool is_conv() const noexcept { return kind == LayerKind::Conv2d || kind == LayerKind::BcosConv2d; }
  bool is_linear_like() const noexcept {
    return kind == LayerKind::Linear || kind == LayerKind::Conv2d || is_bcos();
  }
  bool is_batchnorm() const noexcept {
    return kind == LayerKind::BatchNormUncentered || kind == LayerKind::BatchNormCentered;
  }

  template <typename U>
  LayerSpec<U> cast() const;
};

/// Sequential network with optional residual blocks.
///
/// input_height/input_width give the nominal image size used for validation
/// (GAP models accept other sizes at run time). Both zero means a flat input
/// of input_channels features.
template <typename T>
struct ModelGraph {
  std::vector<LayerSpec<T>> layers;
  std::size_t input_channels = 3;
  std::size_t input_height = 0;
  std::size_t input_width = 0;
  std::size_t class_count = 0;
  GapOrder gap_order = GapOrder::ClassifierThenPool;
  NormalizationSpec normalization;

  bool flat_input() const noexcept { return input_height == 0 && input_width == 0; }
  Shape input_shape(std::size_t batch) const;

  template <typename U>
  ModelGraph<U> cast() const;
};

/// Checks layer-to-layer shape compatibility at the nominal input size and
/// the structural rules (B >= 1, BN eps > 0, at most one trailing LogitBias).
template <typename T>
void validate(const ModelGraph<T>& model);

/// Output shape for a batch of the given input shape; throws ShapeMismatch.
template <typename T>
Shape infer_output_shape(const ModelGraph<T>& model, const Shape& input_shape);

// ---------------------------------------------------------------------------
// Forward records

/// Per-layer state captured during a forward pass.
///
/// The frozen factors (cosine scalings, gate selections, BN scales) make the
/// layer a plain linear map on its input; replaying them reproduces W(x).
/// Train-mode passes additionally keep what the backward pass needs.
template <typename T>
struct LayerRecord {
  Shape input_shape;
  Shape output_shape;
  Tensor<T> input;            // [N, ...] layer input
  Tensor<T> cols;             // linear-like: columns [K, M]
  Tensor<T> preactivation;    // linear-like: z = W cols, [F, M]
  Tensor<T> cosine;           // bcos: c, [F, M]
  Tensor<T> scale;            // bcos: |c|^(B-1), [F, M]
  Tensor<T> input_norm;       // bcos: column norms, [M]
  Tensor<T> weight_norm;      // bcos: row norms, [F]
  Tensor<T> effective_weight; // unit-norm mode: normalized rows, [F, K]
  std::vector<std::uint32_t> selection;  // ReLU gate, MaxPool argmax, MaxOut branch
  Mode bn_mode = Mode::Eval;
  Tensor<T> bn_inv_std;       // per channel 1/sqrt(stat + eps)
  Tensor<T> bn_normalized;    // train: normalized activations
  Tensor<T> bn_batch_mean;    // train, centered
  Tensor<T> bn_batch_stat;    // train: batch variance or second moment
  std::vector<LayerRecord> body;
};

/// Frozen dynamic-linear factors of every layer for one forward pass.
template <typename T>
struct DynamicLinearRecord {
  Shape input_shape;
  std::vector<LayerRecord<T>> layers;
};

template <typename T>
struct ForwardResult {
  Tensor<T> logits;
  std::optional<DynamicLinearRecord<T>> record;
};

/// Runs the model on a batch. Input is [N, C, H, W], or [N, C] for flat
/// models. Train mode uses batch statistics in BatchNorm; running statistics
/// are updated separately with update_running_stats().
template <typename T>
ForwardResult<T> forward(const ModelGraph<T>& model, const Tensor<T>& input, Mode mode, bool capture);

/// Folds the batch statistics of a train-mode record into the running
/// statistics with each layer's momentum.
template <typename T>
void update_running_stats(ModelGraph<T>& model, const DynamicLinearRecord<T>& record);

// ---------------------------------------------------------------------------
// Gradients

template <typename T>
struct LayerGrad {
  Tensor<T> weight;
  Tensor<T> bias;
  Tensor<T> bn_scale;
  T b_exponent = T{0};
  std::vector<Tensor<T>> branches;
  std::vector<LayerGrad> body;
};

template <typename T>
struct ModelGrad {
  std::vector<LayerGrad<T>> layers;
  Tensor<T> input;
};

/// Full backward pass through a captured forward (any mode); gradients flow
/// through the cosine factor and, in train mode, the batch statistics.
template <typename T>
ModelGrad<T> backward(const ModelGraph<T>& model, const DynamicLinearRecord<T>& record,
                      const Tensor<T>& grad_logits);

/// Linear backward replay with every dynamic factor frozen: returns
/// W(x)^T grad_logits in input space.
template <typename T>
Tensor<T> replay_backward(const ModelGraph<T>& model, const DynamicLinearRecord<T>& record,
                          const Tensor<T>& grad_logits);

enum class ParamRole { Weight, Bias, BnScale, Exponent, Branch };

/// Visits every trainable parameter with its gradient in a fixed
/// depth-first order. B exponents are visited only when b_learnable.
template <typename T, typename Fn>
void visit_parameters(ModelGraph<T>& model, const ModelGrad<T>& grad, Fn&& fn);

/// Visits every layer (residual bodies included) depth-first.
template <typename T, typename Fn>
void visit_layers(std::vector<LayerSpec<T>>& layers, Fn&& fn) {
  for (auto& layer : layers) {
    fn(layer);
    if (layer.kind == LayerKind::Residual) visit_layers(layer.body, fn);
  }
}

template <typename T, typename Fn>
void visit_layers(const std::vector<LayerSpec<T>>& layers, Fn&& fn) {
  for (const auto& layer : layers) {
    fn(layer);
    if (layer.kind == LayerKind::Residual) visit_layers(layer.body, fn);
  }
}

// ---------------------------------------------------------------------------
// Single-layer operations

/// B-cos transform without weight normalization:
/// out_j = |c_j|^(B-1) * w_j.x, c_j = w_j.x / (|w_j| |x| + eps).
/// x is [D]; w is [D] or [F, D]; returns [F] ([1] for a single row).
template <typename T>
Tensor<T> bcos_forward(const Tensor<T>& x, const Tensor<T>& w, T b_exponent, T eps = T(kCosEps));

template <typename T>
struct BcosGradients {
  Tensor<T> grad_x;
  Tensor<T> grad_w;
  T grad_b = T{0};
};

template <typename T>
BcosGradients<T> bcos_backward(const Tensor<T>& x, const Tensor<T>& w, T b_exponent,
                               const Tensor<T>& upstream);

template <typename T>
struct MaxOutResult {
  Tensor<T> output;
  std::vector<std::uint32_t> argmax;  // chosen branch per unit, ties to the lowest index
};

/// x is [D] or [N, D]; every branch is [F, D].
template <typename T>
MaxOutResult<T> maxout_forward(const Tensor<T>& x, const std::vector<Tensor<T>>& branches);

/// alpha * y / sqrt(E[y^2] + eps) + beta over channel axis 1 of y
/// ([N, C] or [N, C, H, W]). Train mode uses the batch second moment, eval
/// mode running_sq. beta may be unset.
template <typename T>
Tensor<T> batchnorm_uncentered_forward(const Tensor<T>& y, const Tensor<T>& alpha, const Tensor<T>& beta,
                                       T eps, Mode mode, const Tensor<T>& running_sq = {});

// ---------------------------------------------------------------------------
// Layer constructors (parameters supplied by the caller)

template <typename T>
LayerSpec<T> linear_layer(Tensor<T> weight, Tensor<T> bias = {});
template <typename T>
LayerSpec<T> conv_layer(Tensor<T> weight, Tensor<T> bias, std::size_t stride, std::size_t padding);
template <typename T>
LayerSpec<T> bcos_linear_layer(Tensor<T> weight, T b_exponent, Tensor<T> bias = {});
template <typename T>
LayerSpec<T> bcos_conv_layer(Tensor<T> weight, T b_exponent, Tensor<T> bias, std::size_t stride,
                             std::size_t padding);
template <typename T>
LayerSpec<T> batchnorm_layer(std::size_t channels, bool centered, bool with_shift = true);
template <typename T>
LayerSpec<T> simple_layer(LayerKind kind);
template <typename T>
LayerSpec<T> pool_layer(LayerKind kind, std::size_t size);
template <typename T>
LayerSpec<T> maxout_layer(std::vector<Tensor<T>> branches);
template <typename T>
LayerSpec<T> residual_layer(std::vector<LayerSpec<T>> body);
template <typename T>
LayerSpec<T> logit_bias_layer(T value);

}  // namespace bcos

#include "bcos/detail/nn_visit.hpp"
