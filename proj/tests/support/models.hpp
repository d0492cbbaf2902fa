#pragma once

// Random tiny 6-channel models for explanation tests.

#include <vector>

#include "bcos/zoo.hpp"

namespace bcos::testing {

/// `count` random B-cos models (cycling through the zoo architectures) on
/// size x size inputs, with B drawn from [1, 3].
template <typename T>
std::vector<ModelGraph<T>> tiny_bcos_models(std::size_t count, std::size_t classes, std::size_t size, bool with_bias,
                                            Rng& rng) {
  std::vector<ModelGraph<T>> out;
  while (out.size() < count) {
    const T b = static_cast<T>(rng.uniform(1.0, 3.0));
    for (auto& entry : zoo::bcos_zoo<T>(classes, size, b, with_bias, rng)) {
      if (out.size() < count) out.push_back(std::move(entry.model));
    }
  }
  return out;
}

}  // namespace bcos::testing
