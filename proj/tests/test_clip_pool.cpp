#include "doctest.h"

#include <cmath>

#include "bcos/clip_pool.hpp"

using namespace bcos;
using T64 = Tensor<double>;

namespace {

double norm(const T64& v) { return std::sqrt(dot<double>(v.values(), v.values())); }

// Random orthogonal matrix via Gram-Schmidt.
T64 random_rotation(std::size_t d, Rng& rng) {
  T64 q({d, d});
  for (std::size_t i = 0; i < d; ++i) {
    std::vector<double> v(d);
    for (auto& x : v) x = rng.normal();
    for (std::size_t j = 0; j < i; ++j) {
      double p = 0;
      for (std::size_t k = 0; k < d; ++k) p += v[k] * q[j * d + k];
      for (std::size_t k = 0; k < d; ++k) v[k] -= p * q[j * d + k];
    }
    double n = 0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    for (std::size_t k = 0; k < d; ++k) q[i * d + k] = v[k] / n;
  }
  return q;
}

}  // namespace

TEST_CASE("pooling examples") {
  Rng rng(1);
  const auto v = rng.uniform_tensor<double>({5, 3}, -1, 1);
  const auto t = T64::vector({0.3, -0.2, 0.9});
  const auto mean = reduce(v, ReduceOp::Mean, {0});
  CHECK(max_abs_diff(cosine_power_pool(v, t, {0.0}).pooled, mean) <= 1e-15);

  const auto inf = cosine_power_pool(v, t, {kInfinitePower});
  double best = -2;
  std::size_t arg = 0;
  for (std::size_t i = 0; i < 5; ++i) {
    const T64 row({3}, std::vector<double>(v.data() + 3 * i, v.data() + 3 * i + 3));
    const double c = dot<double>(row.values(), t.values()) / (norm(row) * norm(t));
    if (c > best) best = c, arg = i;
  }
  for (std::size_t j = 0; j < 3; ++j) CHECK(inf.pooled[j] == v.at({arg, j}));

  // cos = 1 and cos = 0.5 -> weights 2/3 and 1/3.
  const auto v2 = T64::from({2, 2}, {2, 0, 1, std::sqrt(3.0)});
  const auto r = cosine_power_pool(v2, T64::vector({1, 0}), {1.0});
  CHECK(r.weights[0] == doctest::Approx(2.0 / 3).epsilon(1e-14));
  CHECK(r.pooled[0] == doctest::Approx(2.0 / 3 * 2 + 1.0 / 3).epsilon(1e-14));
  CHECK(r.pooled[1] == doctest::Approx(std::sqrt(3.0) / 3).epsilon(1e-14));
}

TEST_CASE("negative modes, zero rows and degenerate weights") {
  const auto v = T64::from({3, 2}, {1, 0, -1, 0, 0, 0});
  const auto t = T64::vector({1, 0});
  const auto clamp = cosine_power_pool(v, t, {2.0, NegativeMode::ClampZero, true});
  CHECK(clamp.weights == T64::vector({1, 0, 0}));
  const auto absolute = cosine_power_pool(v, t, {2.0, NegativeMode::Absolute, true});
  CHECK(absolute.weights == T64::vector({0.5, 0.5, 0}));
  const auto sgn = cosine_power_pool(v, t, {3.0, NegativeMode::Signed, false});
  CHECK(sgn.weights == T64::vector({1, -1, 0}));
  CHECK(sgn.pooled == T64::vector({2, 0}));

  const auto neg = cosine_power_pool(T64::from({1, 2}, {-1, 0}), t, {1.0});
  CHECK(neg.all_zero_weights);
  CHECK(max_abs(neg.pooled) == 0.0);

  CHECK_THROWS_AS(cosine_power_pool(v, T64::vector({0, 0}), {1.0}), Error);
  CHECK_THROWS_AS(cosine_power_pool(v, T64::vector({1, 0, 0}), {1.0}), Error);
  CHECK_THROWS_AS(cosine_power_pool(v, t, {-1.0}), Error);

  // Ties at p = infinity go to the lowest index.
  const auto tie = cosine_power_pool(T64::from({2, 2}, {1, 1, 2, 2}), t, {kInfinitePower});
  CHECK(tie.weights == T64::vector({1, 0}));
}

TEST_CASE("similarity map examples") {
  T64 tokens({4, 3});
  tokens.at({2, 0}) = 1;
  tokens.at({0, 1}) = 1;
  tokens.at({1, 2}) = 1;
  tokens.at({3, 1}) = -1;
  const auto m = pooled_similarity_map(tokens, T64::vector({1, 0, 0}), 2, 2, {1.0});
  CHECK(m == T64::from({2, 2}, {0, 0, 1, 0}));

  const auto same = pooled_similarity_map(T64::full({6, 2}, 0.7), T64::vector({1, 2}), 2, 3, {7.0});
  for (double w : same.values()) CHECK(w == doctest::Approx(1.0 / 6));
  CHECK_THROWS_AS(pooled_similarity_map(tokens, T64::vector({1, 0, 0}), 3, 2, {1.0}), Error);
}

TEST_CASE("power sharpening lowers entropy") {
  Rng rng(17);
  int tested = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = rng.integer(2, 16), d = rng.integer(2, 16);
    T64 v({n, d});
    for (auto& x : v.values()) x = rng.normal();
    T64 t({d});
    for (auto& x : t.values()) x = rng.normal();
    double prev = INFINITY;
    for (double p : {0.0, 1.0, 7.0, 19.0, 127.0}) {
      const double h = map_entropy(cosine_power_pool(v, t, {p}).weights);
      CHECK(h <= prev + 1e-12);
      prev = h;
    }
    ++tested;
  }
  CHECK(tested == 200);
}

TEST_CASE("rotation equivariance and scale behaviour") {
  Rng rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 6, d = 5;
    T64 v({n, d});
    for (auto& x : v.values()) x = rng.normal();
    T64 t({d});
    for (auto& x : t.values()) x = rng.normal();
    const auto q = random_rotation(d, rng);
    const auto vr = matmul(v, q, Transpose::No, Transpose::Yes);
    const auto tr = matmul(q, t.reshaped({d, 1})).reshaped({d});
    for (double p : {1.0, 7.0}) {
      const auto base = cosine_power_pool(v, t, {p}).pooled;
      const auto rotated = cosine_power_pool(vr, tr, {p}).pooled;
      CHECK(max_abs_diff(matmul(q, base.reshaped({d, 1})).reshaped({d}), rotated) <= 1e-12);
    }
    auto scaled = v;
    for (std::size_t j = 0; j < d; ++j) scaled[j] *= 3.0;  // row 0
    const auto a = cosine_power_pool(v, t, {2.0, NegativeMode::Absolute, false});
    const auto b = cosine_power_pool(scaled, t, {2.0, NegativeMode::Absolute, false});
    CHECK(max_abs_diff(a.weights, b.weights) <= 1e-14);
    for (std::size_t j = 0; j < d; ++j)
      CHECK(b.pooled[j] - a.pooled[j] == doctest::Approx(2.0 * a.weights[0] * v[j]).epsilon(1e-9));
  }
}
