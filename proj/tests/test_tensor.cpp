#include "doctest.h"

#include <cmath>

#include "bcos/tensor.hpp"

using namespace bcos;
using T32 = Tensor<float>;
using T64 = Tensor<double>;

TEST_CASE("shape invariants") {
  CHECK_THROWS_AS(T64({2, 0}), Error);
  CHECK_THROWS_AS(T64({2, 2}, std::vector<double>{1, 2, 3}), Error);
  T64 t({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  CHECK(t.at({1, 0}) == 4);
  CHECK(t.reshaped({3, 2}).reshaped({2, 3}) == t);
  CHECK_THROWS_AS(t.reshaped({4}), Error);
}

TEST_CASE("matmul examples") {
  const auto a = T64::from({2, 2}, {1, 2, 3, 4});
  CHECK(matmul(T64::identity(2), a) == a);
  CHECK(matmul(T64::from({2, 2}, {1, 0, 0, 0}), T64::from({2, 2}, {5, 6, 7, 8})) ==
        T64::from({2, 2}, {5, 6, 0, 0}));
  CHECK(matmul(T64::from({1, 2}, {1, 2}), T64::from({2, 1}, {3, 4})) == T64::from({1, 1}, {11}));

  try {
    matmul(T64({2, 3}), T64({2, 3}));
    FAIL("expected ShapeMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ShapeMismatch);
  }
}

TEST_CASE("matmul transposes agree with explicit transpose") {
  Rng rng(3);
  const auto a = rng.uniform_tensor<double>({3, 4}, -1, 1);
  const auto b = rng.uniform_tensor<double>({5, 4}, -1, 1);
  T64 bt({4, 5});
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 4; ++j) bt.at({j, i}) = b.at({i, j});
  CHECK(max_abs_diff(matmul(a, b, Transpose::No, Transpose::Yes), matmul(a, bt)) < 1e-14);
}

TEST_CASE("matmul associativity (f32, 8x8)") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const auto a = rng.uniform_tensor<float>({8, 8}, -1, 1);
    const auto b = rng.uniform_tensor<float>({8, 8}, -1, 1);
    const auto c = rng.uniform_tensor<float>({8, 8}, -1, 1);
    CHECK(max_abs_diff(matmul(matmul(a, b), c), matmul(a, matmul(b, c))) <= 1e-4f);
  }
}

TEST_CASE("conv2d examples") {
  Rng rng(1);
  const auto x = rng.uniform_tensor<float>({3, 5, 4}, -1, 1);
  T32 ident({3, 3, 1, 1});
  for (std::size_t c = 0; c < 3; ++c) ident.at({c, c, 0, 0}) = 1.0f;
  CHECK(conv2d(x, ident, 1, 0) == x);  // bit-exact

  CHECK(max_abs(conv2d(x, T32({2, 3, 3, 3}), 1, 1)) == 0.0f);

  const auto ones = T64::full({1, 3, 3}, 1.0);
  CHECK(conv2d(ones, T64::full({1, 1, 2, 2}, 1.0), 1, 0) == T64::full({1, 2, 2}, 4.0));

  CHECK_THROWS_AS(conv2d(ones, T64::full({1, 2, 2, 2}, 1.0), 1, 0), Error);
}

TEST_CASE("conv2d output size and padding") {
  const auto ones = T64::full({1, 5, 5}, 1.0);
  const auto y = conv2d(ones, T64::full({1, 1, 3, 3}, 1.0), 2, 1);
  CHECK(y.shape() == Shape{1, 3, 3});
  CHECK(y.at({0, 0, 0}) == 4.0);  // corner window sees 2x2 real pixels
  CHECK(y.at({0, 1, 1}) == 9.0);
}

TEST_CASE("col2im is the adjoint of im2col") {
  Rng rng(11);
  const ConvGeometry g{2, 5, 6, 3, 2, 2, 1};
  const auto x = rng.uniform_tensor<double>({3, 2, 5, 6}, -1, 1);
  const auto cols = im2col(x, g);
  CHECK(cols.shape() == Shape{g.patch_size(), 3 * g.positions()});
  const auto y = rng.uniform_tensor<double>(cols.shape(), -1, 1);
  const double lhs = dot<double>(cols.values(), y.values());
  const double rhs = dot<double>(x.values(), col2im(y, 3, g).values());
  CHECK(std::abs(lhs - rhs) < 1e-12);
}

TEST_CASE("reduce examples") {
  CHECK(reduce(T64::vector({1, 2, 3}), ReduceOp::Sum)[0] == 6.0);
  CHECK(reduce(T64::vector({3, 4}), ReduceOp::L2Norm)[0] == 5.0);
  try {
    reduce(T64{}, ReduceOp::Mean);
    FAIL("expected EmptyReduction");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::EmptyReduction);
  }
  CHECK_THROWS_AS(reduce(T64::vector({1, 2}), ReduceOp::Sum, {1}), Error);

  const auto m = T64::from({2, 3}, {1, 5, 3, 4, 2, 6});
  CHECK(reduce(m, ReduceOp::Max, {1}) == T64::vector({5, 6}));
  CHECK(reduce(m, ReduceOp::Mean, {0}) == T64::vector({2.5, 3.5, 4.5}));
  CHECK(reduce(m, ReduceOp::Sum, {0, 1}) == T64::vector({21}));
}

TEST_CASE("rng reproducibility") {
  Rng a(123), b(123);
  for (int i = 0; i < 10000; ++i) REQUIRE(a.next_u64() == b.next_u64());
  Rng c = Rng::derive(5, 0), d = Rng::derive(5, 1), e = Rng::derive(5, 0);
  const auto vc = c.uniform(), vd = d.uniform(), ve = e.uniform();
  CHECK(vc == ve);
  CHECK(vc != vd);
}
