#pragma once

#include <string>
#include <vector>

#include "bcos/nn.hpp"

namespace bcos::zoo {

/// Conventional (3-channel, biased) CNN used by the training pipeline:
/// three 3x3 conv/BN/ReLU stages with two 2x2 pools, a 1x1 classifier and
/// global average pooling.
struct TinyCnnOptions {
  std::size_t width1 = 16;
  std::size_t width2 = 32;
  bool centered_bn = true;
  bool maxpool = true;
};

template <typename T>
ModelGraph<T> tiny_cnn(std::size_t classes, std::size_t image_size, Rng& rng, const TinyCnnOptions& options = {});

template <typename T>
struct NamedModel {
  std::string name;
  ModelGraph<T> model;
};

/// Small conventional architectures for conversion tests: a MaxPool-stem CNN
/// with centered BN, a residual CNN with uncentered BN, a pool-then-classify
/// CNN and an MLP. BN parameters and running statistics are randomized so the
/// layers are not identities.
template <typename T>
std::vector<NamedModel<T>> conversion_zoo(std::size_t classes, std::size_t image_size, Rng& rng);

/// Random 6-channel B-cos models for explanation tests. `with_bias` adds
/// conv/linear biases and BN shifts.
template <typename T>
std::vector<NamedModel<T>> bcos_zoo(std::size_t classes, std::size_t image_size, T b_exponent, bool with_bias,
                                    Rng& rng);

// Parameter initializers (Kaiming-uniform weights, fan-in scaled biases).
template <typename T>
Tensor<T> init_weight(Shape shape, Rng& rng);
template <typename T>
Tensor<T> init_bias(std::size_t n, std::size_t fan_in, Rng& rng);

}  // namespace bcos::zoo
