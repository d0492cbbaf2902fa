#include "bcos/converter.hpp"

#include <algorithm>
#include <cmath>

namespace bcos {

template <typename T>
Tensor<T> expand_first_layer(const Tensor<T>& w3) {
  if (w3.rank() == 4 && w3.dim(1) != 3) {
    throw Error(ErrorCode::WrongChannelCount,
                "first layer has " + std::to_string(w3.dim(1)) + " input channels, expected 3");
  }
  if (w3.rank() == 2 && w3.dim(1) % 3 != 0) {
    throw Error(ErrorCode::WrongChannelCount, "first layer input width is not a multiple of 3");
  }
  if (w3.rank() != 2 && w3.rank() != 4) {
    throw Error(ErrorCode::ShapeMismatch, "first layer weight must be rank 2 or 4, got " + shape_str(w3.shape()));
  }
  Shape shape = w3.shape();
  shape[1] *= 2;
  Tensor<T> w6(shape);
  const std::size_t rows = w3.dim(0), len = w3.size() / rows;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = w3.data() + r * len;
    T* dst = w6.data() + r * 2 * len;
    for (std::size_t j = 0; j < len; ++j) {
      dst[j] = src[j] / T{2};
      dst[len + j] = -(src[j] / T{2});
    }
  }
  return w6;
}

template <typename T>
void uncenter_batchnorm(LayerSpec<T>& layer) {
  if (layer.kind != LayerKind::BatchNormCentered) return;
  layer.kind = LayerKind::BatchNormUncentered;
  layer.running_sq = layer.running_var;
  for (std::size_t c = 0; c < layer.running_sq.size(); ++c) {
    layer.running_sq[c] += layer.running_mean[c] * layer.running_mean[c];
  }
  layer.running_mean = Tensor<T>{};
  layer.running_var = Tensor<T>{};
}

namespace {

template <typename T>
void convert_layers(std::vector<LayerSpec<T>>& layers, const ConvertOptions& options, const std::string& prefix,
                    std::vector<std::string>& notes) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto& l = layers[i];
    const std::string where = "layer " + prefix + std::to_string(i) + ": ";
    switch (l.kind) {
      case LayerKind::Linear:
      case LayerKind::Conv2d:
        l.kind = l.kind == LayerKind::Linear ? LayerKind::BcosLinear : LayerKind::BcosConv2d;
        l.b_exponent = T{1};
        l.unit_norm_weights = options.unit_norm_weights;
        notes.push_back(where + std::string(to_string(l.kind)) + " (B=1" + (l.has_bias() ? ", bias kept" : "") +
                        (options.unit_norm_weights ? ", unit-norm weights" : "") + ")");
        break;
      case LayerKind::ReLU:
        l.kind = LayerKind::MaxOut;
        notes.push_back(where + "ReLU -> MaxOut(v, 0)");
        break;
      case LayerKind::MaxPool:
        if (options.swap_maxpool) {
          l.kind = LayerKind::AvgPool;
          notes.push_back(where + "MaxPool -> AvgPool (not equivalence-preserving)");
        }
        break;
      case LayerKind::BatchNormCentered:
      case LayerKind::BatchNormUncentered:
      case LayerKind::AvgPool:
      case LayerKind::GlobalAvgPool:
      case LayerKind::Flatten:
        break;
      case LayerKind::Residual:
        convert_layers(l.body, options, prefix + std::to_string(i) + ".body.", notes);
        break;
      default:
        throw Error(ErrorCode::UnsupportedLayer,
                    where + std::string(to_string(l.kind)) + " is not a supported conventional layer");
    }
  }
}

}  // namespace

template <typename T>
ModelGraph<T> bcosify(const ModelGraph<T>& model3, const NormalizationSpec& norm, const ConvertOptions& options,
                      std::vector<std::string>* notes) {
  if (model3.layers.empty()) throw Error(ErrorCode::UnsupportedLayer, "model has no layers to convert");
  if (model3.input_channels != 3) {
    throw Error(ErrorCode::WrongChannelCount, "conversion expects a 3-channel model, got " +
                                                  std::to_string(model3.input_channels) + " channels");
  }
  norm.validate();
  validate(model3);

  ModelGraph<T> model6 = model3;
  std::vector<std::string> log;
  convert_layers(model6.layers, options, "", log);

  // The first layer that sees the input must be linear; a leading Flatten is
  // fine because it keeps the channel-major order.
  std::size_t first = 0;
  if (model6.layers[0].kind == LayerKind::Flatten) first = 1;
  if (first >= model6.layers.size() || !model6.layers[first].is_bcos()) {
    throw Error(ErrorCode::UnsupportedLayer, "the input must feed a Linear or Conv2d layer");
  }
  auto& l0 = model6.layers[first];
  l0.weight = expand_first_layer(l0.weight);
  log.insert(log.begin(), "layer " + std::to_string(first) + ": expanded to 6 input channels ([w/2, -w/2])");
  model6.input_channels = 6;
  model6.normalization = norm;
  validate(model6);
  if (notes) *notes = std::move(log);
  return model6;
}

template <typename T>
ConversionReport verify_equivalence(const ModelGraph<T>& model3, const ModelGraph<T>& model6,
                                    const NormalizationSpec& norm, std::size_t n_samples, std::uint64_t seed) {
  if (model3.class_count != model6.class_count) {
    throw Error(ErrorCode::ShapeMismatch, "models disagree on class_count");
  }
  if (model3.input_height != model6.input_height || model3.input_width != model6.input_width) {
    throw Error(ErrorCode::ShapeMismatch, "models disagree on input size");
  }
  ConversionReport report;
  report.tolerance = std::is_same_v<T, double> ? 1e-10 : 1e-5;
  report.degenerate = n_samples == 0;
  Rng rng = Rng::derive(seed, 0);
  constexpr std::size_t kChunk = 32;
  for (std::size_t done = 0; done < n_samples; done += kChunk) {
    const std::size_t n = std::min(kChunk, n_samples - done);
    Shape shape = model3.input_shape(n);
    const auto images = rng.uniform_tensor<T>(shape, 0.0, 1.0);
    const auto y3 = forward(model3, encode_input(images, norm, 3), Mode::Eval, false).logits;
    const auto y6 = forward(model6, encode_input(images, norm, 6), Mode::Eval, false).logits;
    report.max_abs_logit_diff = std::max(report.max_abs_logit_diff, static_cast<double>(max_abs_diff(y3, y6)));
  }
  report.samples_checked = n_samples;
  report.equivalent = !report.degenerate && report.max_abs_logit_diff <= report.tolerance;
  return report;
}

std::string_view to_string(BiasMode mode) noexcept {
  switch (mode) {
    case BiasMode::Zero: return "zero";
    case BiasMode::Keep: return "keep";
    case BiasMode::Decay: return "decay";
  }
  return "?";
}

std::optional<BiasMode> bias_mode_from_string(std::string_view name) noexcept {
  if (name == "zero") return BiasMode::Zero;
  if (name == "keep") return BiasMode::Keep;
  if (name == "decay") return BiasMode::Decay;
  return std::nullopt;
}

template <typename T>
ModelGraph<T> apply_interpretability_changes(const ModelGraph<T>& model6, T b_target, BiasMode bias_mode) {
  if (!(b_target >= T{1})) throw Error(ErrorCode::InvalidConfig, "B target must be >= 1");
  ModelGraph<T> out = model6;
  visit_layers(out.layers, [&](LayerSpec<T>& l) {
    if (l.is_bcos()) l.b_exponent = b_target;
    if (bias_mode != BiasMode::Zero) return;
    if (l.is_linear_like() || l.is_batchnorm()) l.bias = Tensor<T>{};
    uncenter_batchnorm(l);
  });
  return out;
}

#define BCOS_CONVERTER_INSTANTIATE(T)                                                                        \
  template Tensor<T> expand_first_layer(const Tensor<T>&);                                                   \
  template void uncenter_batchnorm(LayerSpec<T>&);                                                           \
  template ModelGraph<T> bcosify(const ModelGraph<T>&, const NormalizationSpec&, const ConvertOptions&,      \
                                 std::vector<std::string>*);                                                 \
  template ConversionReport verify_equivalence(const ModelGraph<T>&, const ModelGraph<T>&,                   \
                                               const NormalizationSpec&, std::size_t, std::uint64_t);        \
  template ModelGraph<T> apply_interpretability_changes(const ModelGraph<T>&, T, BiasMode);

BCOS_CONVERTER_INSTANTIATE(float)
BCOS_CONVERTER_INSTANTIATE(double)

}  // namespace bcos
