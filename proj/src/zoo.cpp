#include "bcos/zoo.hpp"

#include <cmath>

#include "bcos/converter.hpp"

namespace bcos::zoo {

template <typename T>
Tensor<T> init_weight(Shape shape, Rng& rng) {
  const std::size_t fan_in = shape_numel(shape) / shape[0];
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  return rng.uniform_tensor<T>(std::move(shape), -bound, bound);
}

template <typename T>
Tensor<T> init_bias(std::size_t n, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return rng.uniform_tensor<T>({n}, -bound, bound);
}

namespace {

template <typename T>
LayerSpec<T> conv(std::size_t in, std::size_t out, std::size_t k, bool bias, Rng& rng, std::size_t stride = 1) {
  Tensor<T> w = init_weight<T>({out, in, k, k}, rng);
  Tensor<T> b = bias ? init_bias<T>(out, in * k * k, rng) : Tensor<T>{};
  return conv_layer(std::move(w), std::move(b), stride, k / 2);
}

template <typename T>
LayerSpec<T> dense(std::size_t in, std::size_t out, bool bias, Rng& rng) {
  Tensor<T> w = init_weight<T>({out, in}, rng);
  Tensor<T> b = bias ? init_bias<T>(out, in, rng) : Tensor<T>{};
  return linear_layer(std::move(w), std::move(b));
}

template <typename T>
LayerSpec<T> random_bn(std::size_t channels, bool centered, bool shift, Rng& rng) {
  auto bn = batchnorm_layer<T>(channels, centered, shift);
  bn.bn_scale = rng.uniform_tensor<T>({channels}, 0.5, 1.5);
  if (shift) bn.bias = rng.uniform_tensor<T>({channels}, -0.2, 0.2);
  if (centered) {
    bn.running_mean = rng.uniform_tensor<T>({channels}, -0.5, 0.5);
    bn.running_var = rng.uniform_tensor<T>({channels}, 0.5, 2.0);
  } else {
    bn.running_sq = rng.uniform_tensor<T>({channels}, 0.5, 2.0);
  }
  return bn;
}

template <typename T>
ModelGraph<T> image_model(std::size_t channels, std::size_t classes, std::size_t size, GapOrder order) {
  ModelGraph<T> m;
  m.input_channels = channels;
  m.input_height = size;
  m.input_width = size;
  m.class_count = classes;
  m.gap_order = order;
  return m;
}

template <typename T>
LayerSpec<T> relu() {
  return simple_layer<T>(LayerKind::ReLU);
}

// Converts a conventional layer list to B-cos layers in place (6-channel
// first layer drawn fresh), for bcos_zoo.
template <typename T>
void to_bcos(std::vector<LayerSpec<T>>& layers, T b_exponent, bool with_bias) {
  visit_layers(layers, [&](LayerSpec<T>& l) {
    if (l.kind == LayerKind::Conv2d) l.kind = LayerKind::BcosConv2d;
    if (l.kind == LayerKind::Linear) l.kind = LayerKind::BcosLinear;
    if (l.is_bcos()) l.b_exponent = b_exponent;
    if (l.kind == LayerKind::ReLU) l.kind = LayerKind::MaxOut;
    if (!with_bias && (l.is_linear_like() || l.is_batchnorm())) l.bias = Tensor<T>{};
    if (!with_bias) uncenter_batchnorm(l);
  });
}

}  // namespace

template <typename T>
ModelGraph<T> tiny_cnn(std::size_t classes, std::size_t image_size, Rng& rng, const TinyCnnOptions& o) {
  auto m = image_model<T>(3, classes, image_size, GapOrder::ClassifierThenPool);
  const LayerKind pool = o.maxpool ? LayerKind::MaxPool : LayerKind::AvgPool;
  m.layers.push_back(conv<T>(3, o.width1, 3, false, rng));
  m.layers.push_back(batchnorm_layer<T>(o.width1, o.centered_bn));
  m.layers.push_back(relu<T>());
  m.layers.push_back(pool_layer<T>(pool, 2));
  m.layers.push_back(conv<T>(o.width1, o.width2, 3, false, rng));
  m.layers.push_back(batchnorm_layer<T>(o.width2, o.centered_bn));
  m.layers.push_back(relu<T>());
  m.layers.push_back(pool_layer<T>(pool, 2));
  m.layers.push_back(conv<T>(o.width2, o.width2, 3, false, rng));
  m.layers.push_back(batchnorm_layer<T>(o.width2, o.centered_bn));
  m.layers.push_back(relu<T>());
  m.layers.push_back(conv<T>(o.width2, classes, 1, true, rng));
  m.layers.push_back(simple_layer<T>(LayerKind::GlobalAvgPool));
  validate(m);
  return m;
}

template <typename T>
std::vector<NamedModel<T>> conversion_zoo(std::size_t classes, std::size_t s, Rng& rng) {
  std::vector<NamedModel<T>> zoo;
  {
    auto m = image_model<T>(3, classes, s, GapOrder::ClassifierThenPool);
    m.layers.push_back(conv<T>(3, 6, 3, true, rng));
    m.layers.push_back(random_bn<T>(6, true, true, rng));
    m.layers.push_back(relu<T>());
    m.layers.push_back(pool_layer<T>(LayerKind::MaxPool, 2));
    m.layers.push_back(conv<T>(6, 8, 3, true, rng));
    m.layers.push_back(relu<T>());
    m.layers.push_back(conv<T>(8, classes, 1, true, rng));
    m.layers.push_back(simple_layer<T>(LayerKind::GlobalAvgPool));
    zoo.push_back({"maxpool_stem_cnn", std::move(m)});
  }
  {
    auto m = image_model<T>(3, classes, s, GapOrder::PoolThenClassifier);
    m.layers.push_back(conv<T>(3, 6, 3, true, rng));
    m.layers.push_back(random_bn<T>(6, false, true, rng));
    m.layers.push_back(relu<T>());
    std::vector<LayerSpec<T>> body;
    body.push_back(conv<T>(6, 6, 3, true, rng));
    body.push_back(random_bn<T>(6, false, true, rng));
    body.push_back(relu<T>());
    body.push_back(conv<T>(6, 6, 3, true, rng));
    m.layers.push_back(residual_layer(std::move(body)));
    m.layers.push_back(relu<T>());
    m.layers.push_back(pool_layer<T>(LayerKind::AvgPool, 2));
    m.layers.push_back(simple_layer<T>(LayerKind::GlobalAvgPool));
    m.layers.push_back(dense<T>(6, classes, true, rng));
    zoo.push_back({"residual_cnn", std::move(m)});
  }
  {
    auto m = image_model<T>(3, classes, s, GapOrder::PoolThenClassifier);
    m.layers.push_back(conv<T>(3, 5, 3, true, rng, 2));
    m.layers.push_back(random_bn<T>(5, true, true, rng));
    m.layers.push_back(relu<T>());
    m.layers.push_back(pool_layer<T>(LayerKind::AvgPool, 2));
    m.layers.push_back(simple_layer<T>(LayerKind::Flatten));
    const std::size_t flat = 5 * ((s + 1) / 2 / 2) * ((s + 1) / 2 / 2);
    m.layers.push_back(dense<T>(flat, 7, true, rng));
    m.layers.push_back(random_bn<T>(7, false, true, rng));
    m.layers.push_back(relu<T>());
    m.layers.push_back(dense<T>(7, classes, true, rng));
    zoo.push_back({"strided_flatten_cnn", std::move(m)});
  }
  {
    auto m = image_model<T>(3, classes, s, GapOrder::PoolThenClassifier);
    m.layers.push_back(simple_layer<T>(LayerKind::Flatten));
    m.layers.push_back(dense<T>(3 * s * s, 10, true, rng));
    m.layers.push_back(relu<T>());
    m.layers.push_back(dense<T>(10, classes, true, rng));
    zoo.push_back({"mlp", std::move(m)});
  }
  for (auto& entry : zoo) validate(entry.model);
  return zoo;
}

template <typename T>
std::vector<NamedModel<T>> bcos_zoo(std::size_t classes, std::size_t s, T b_exponent, bool with_bias, Rng& rng) {
  auto zoo = conversion_zoo<T>(classes, s, rng);
  for (auto& entry : zoo) {
    auto& m = entry.model;
    m.input_channels = 6;
    auto& first = m.layers[0].kind == LayerKind::Flatten ? m.layers[1] : m.layers[0];
    Shape shape = first.weight.shape();
    shape[1] *= 2;
    if (first.kind == LayerKind::Linear) shape = {first.weight.dim(0), first.weight.dim(1) * 2};
    first.weight = init_weight<T>(shape, rng);
    to_bcos(m.layers, b_exponent, with_bias);
    validate(m);
  }
  return zoo;
}

template ModelGraph<float> tiny_cnn(std::size_t, std::size_t, Rng&, const TinyCnnOptions&);
template ModelGraph<double> tiny_cnn(std::size_t, std::size_t, Rng&, const TinyCnnOptions&);
template std::vector<NamedModel<float>> conversion_zoo(std::size_t, std::size_t, Rng&);
template std::vector<NamedModel<double>> conversion_zoo(std::size_t, std::size_t, Rng&);
template std::vector<NamedModel<float>> bcos_zoo(std::size_t, std::size_t, float, bool, Rng&);
template std::vector<NamedModel<double>> bcos_zoo(std::size_t, std::size_t, double, bool, Rng&);
template Tensor<float> init_weight(Shape, Rng&);
template Tensor<double> init_weight(Shape, Rng&);
template Tensor<float> init_bias(std::size_t, std::size_t, Rng&);
template Tensor<double> init_bias(std::size_t, std::size_t, Rng&);

}  // namespace bcos::zoo
