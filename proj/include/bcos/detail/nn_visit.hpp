#pragma once

// Template definitions for nn.hpp.

#include <span>

namespace bcos {

namespace detail {

template <typename T, typename Fn>
void visit_layer_parameters(std::vector<LayerSpec<T>>& layers, const std::vector<LayerGrad<T>>& grads, Fn& fn) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto& layer = layers[i];
    const auto& g = grads[i];
    if (layer.is_linear_like()) {
      fn(ParamRole::Weight, layer.weight.values(), std::span<const T>(g.weight.values()));
      if (layer.has_bias()) fn(ParamRole::Bias, layer.bias.values(), std::span<const T>(g.bias.values()));
      if (layer.is_bcos() && layer.b_learnable) {
        fn(ParamRole::Exponent, std::span<T>(&layer.b_exponent, 1), std::span<const T>(&g.b_exponent, 1));
      }
    } else if (layer.is_batchnorm()) {
      fn(ParamRole::BnScale, layer.bn_scale.values(), std::span<const T>(g.bn_scale.values()));
      if (layer.has_bias()) fn(ParamRole::Bias, layer.bias.values(), std::span<const T>(g.bias.values()));
    } else if (layer.kind == LayerKind::MaxOut) {
      for (std::size_t b = 0; b < layer.branches.size(); ++b) {
        fn(ParamRole::Branch, layer.branches[b].values(), std::span<const T>(g.branches[b].values()));
      }
    } else if (layer.kind == LayerKind::Residual) {
      visit_layer_parameters(layer.body, g.body, fn);
    }
  }
}

template <typename T, typename U>
Tensor<U> cast_tensor(const Tensor<T>& t) {
  if (t.empty()) return {};
  return t.template cast<U>();
}

}  // namespace detail

template <typename T, typename Fn>
void visit_parameters(ModelGraph<T>& model, const ModelGrad<T>& grad, Fn&& fn) {
  detail::visit_layer_parameters(model.layers, grad.layers, fn);
}

template <typename T>
template <typename U>
LayerSpec<U> LayerSpec<T>::cast() const {
  LayerSpec<U> out;
  out.kind = kind;
  out.weight = detail::cast_tensor<T, U>(weight);
  out.bias = detail::cast_tensor<T, U>(bias);
  out.stride = stride;
  out.padding = padding;
  out.b_exponent = static_cast<U>(b_exponent);
  out.b_learnable = b_learnable;
  out.unit_norm_weights = unit_norm_weights;
  out.bn_scale = detail::cast_tensor<T, U>(bn_scale);
  out.running_mean = detail::cast_tensor<T, U>(running_mean);
  out.running_var = detail::cast_tensor<T, U>(running_var);
  out.running_sq = detail::cast_tensor<T, U>(running_sq);
  out.bn_eps = static_cast<U>(bn_eps);
  out.bn_momentum = static_cast<U>(bn_momentum);
  out.pool_size = pool_size;
  for (const auto& b : branches) out.branches.push_back(detail::cast_tensor<T, U>(b));
  for (const auto& l : body) out.body.push_back(l.template cast<U>());
  out.logit_bias = static_cast<U>(logit_bias);
  return out;
}

template <typename T>
template <typename U>
ModelGraph<U> ModelGraph<T>::cast() const {
  ModelGraph<U> out;
  for (const auto& l : layers) out.layers.push_back(l.template cast<U>());
  out.input_channels = input_channels;
  out.input_height = input_height;
  out.input_width = input_width;
  out.class_count = class_count;
  out.gap_order = gap_order;
  out.normalization = normalization;
  return out;
}

}  // namespace bcos
