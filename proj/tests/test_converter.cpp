#include "doctest.h"

#include "bcos/converter.hpp"
#include "bcos/zoo.hpp"
#include "support/layer_cases.hpp"

using namespace bcos;
using T64 = Tensor<double>;

namespace {

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("no error thrown");
  return ErrorCode::Io;
}

}  // namespace

TEST_CASE("add_inverse examples") {
  const auto zeros = add_inverse(T64({3, 2, 2}));
  for (std::size_t i = 0; i < 12; ++i) CHECK(zeros[i] == 0.0);
  for (std::size_t i = 12; i < 24; ++i) CHECK(zeros[i] == 1.0);

  CHECK(add_inverse(T64::full({3, 2, 1}, 0.5)) == T64::full({6, 2, 1}, 0.5));

  const auto px = add_inverse(T64::from({3, 1, 1}, {0.2, 0.7, 1.0}));
  const std::vector<double> expected{0.2, 0.7, 1.0, 0.8, 0.3, 0.0};
  for (std::size_t i = 0; i < 6; ++i) CHECK(px[i] == doctest::Approx(expected[i]).epsilon(1e-15));

  bool clamped = false;
  const auto c = add_inverse(T64::from({3, 1, 1}, {-0.5, 0.5, 1.5}), &clamped);
  CHECK(clamped);
  CHECK(c[0] == 0.0);
  CHECK(c[2] == 1.0);
}

TEST_CASE("normalization channel antisymmetry") {
  Rng rng(4);
  NormalizationSpec norm;
  norm.means = {0.485, 0.456, 0.406};
  norm.stds = {0.229, 0.224, 0.225};
  for (int trial = 0; trial < 20; ++trial) {
    const auto img = rng.uniform_tensor<float>({2, 3, 4, 5}, 0.0, 1.0);
    const auto enc = encode_input(img, norm, 6);
    const auto base = encode_input(img, norm, 3);
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < 60; ++i) {
        REQUIRE(enc[n * 120 + i] == base[n * 60 + i]);
        REQUIRE(enc[n * 120 + 60 + i] == -base[n * 60 + i]);
      }
    // The generic path computes ((1 - x) - (1 - mu)) / sigma, equal up to rounding.
    CHECK(max_abs_diff(normalize(add_inverse(img), norm), enc) <= 1e-5f);
  }
  NormalizationSpec bad;
  bad.stds[1] = 0;
  CHECK(code_of([&] { bad.validate(); }) == ErrorCode::InvalidConfig);
}

TEST_CASE("expand_first_layer examples") {
  const auto w6 = expand_first_layer(T64::from({1, 3, 1, 1}, {1, 2, -3}));
  CHECK(w6 == T64::from({1, 6, 1, 1}, {0.5, 1.0, -1.5, -0.5, -1.0, 1.5}));
  CHECK(max_abs(expand_first_layer(T64({2, 3, 3, 3}))) == 0.0);

  const auto x = T64::vector({0.2, -0.1, 0.4});
  const auto x6 = T64::vector({0.2, -0.1, 0.4, -0.2, 0.1, -0.4});
  const auto w = T64::vector({1, 2, -3});
  CHECK(dot<double>(w.values(), x.values()) == doctest::Approx(-1.2).epsilon(1e-15));
  CHECK(dot<double>(w6.values(), x6.values()) == doctest::Approx(-1.2).epsilon(1e-15));

  CHECK(code_of([] { expand_first_layer(T64({2, 2, 1, 1})); }) == ErrorCode::WrongChannelCount);
}

TEST_CASE("bcosify single linear layer") {
  ModelGraph<double> m3;
  m3.input_channels = 3;
  m3.class_count = 1;
  m3.layers.push_back(linear_layer(T64::from({1, 3}, {1, 2, -3}), T64::vector({0.5})));
  NormalizationSpec norm;
  const auto m6 = bcosify(m3, norm);
  CHECK(m6.input_channels == 6);
  CHECK(m6.layers[0].kind == LayerKind::BcosLinear);
  CHECK(m6.layers[0].b_exponent == 1.0);
  CHECK(m6.layers[0].bias == T64::vector({0.5}));

  const auto img = T64::from({1, 3}, {0.55, 0.475, 0.6});  // normalizes to [0.2, -0.1, 0.4]
  const auto y3 = forward(m3, encode_input(img, norm, 3), Mode::Eval, false).logits;
  const auto y6 = forward(m6, encode_input(img, norm, 6), Mode::Eval, false).logits;
  CHECK(y3[0] == doctest::Approx(-0.7).epsilon(1e-12));
  CHECK(std::abs(y3[0] - y6[0]) <= 1e-6);

  const auto report = verify_equivalence(m3, m6, norm, 256, 1);
  CHECK(report.equivalent);
  CHECK(report.max_abs_logit_diff <= 1e-10);
}

TEST_CASE("bcosify rejects unsupported models") {
  ModelGraph<double> empty;
  CHECK(code_of([&] { bcosify(empty, {}); }) == ErrorCode::UnsupportedLayer);

  Rng rng(1);
  auto zoo = zoo::conversion_zoo<double>(3, 8, rng);
  const auto m6 = bcosify(zoo[0].model, {});
  CHECK(code_of([&] { bcosify(m6, {}); }) == ErrorCode::WrongChannelCount);

  auto with_lb = zoo[0].model;
  with_lb.layers.push_back(logit_bias_layer(-1.0));
  CHECK(code_of([&] { bcosify(with_lb, {}); }) == ErrorCode::UnsupportedLayer);

  auto pool_first = zoo[0].model;
  pool_first.layers.insert(pool_first.layers.begin(), simple_layer<double>(LayerKind::ReLU));
  CHECK(code_of([&] { bcosify(pool_first, {}); }) == ErrorCode::UnsupportedLayer);
}

TEST_CASE("conversion zoo is functionally equivalent") {
  NormalizationSpec norm;
  norm.means = {0.4, 0.5, 0.6};
  norm.stds = {0.2, 0.25, 0.3};
  Rng rng(77);
  for (const auto& entry : zoo::conversion_zoo<double>(5, 8, rng)) {
    std::vector<std::string> notes;
    const auto m6 = bcosify(entry.model, norm, {}, &notes);
    CHECK_FALSE(notes.empty());
    const auto r64 = verify_equivalence(entry.model, m6, norm, 256, 3);
    INFO(entry.name, " f64 diff ", r64.max_abs_logit_diff);
    CHECK(r64.max_abs_logit_diff <= 1e-10);

    const auto m3f = entry.model.cast<float>();
    const auto r32 = verify_equivalence(m3f, bcosify(m3f, norm), norm, 256, 3);
    INFO(entry.name, " f32 diff ", r32.max_abs_logit_diff);
    CHECK(r32.max_abs_logit_diff <= 1e-5);
    CHECK(r32.equivalent);

    const auto b2 = apply_interpretability_changes(m6, 2.0, BiasMode::Keep);
    const auto r2 = verify_equivalence(entry.model, b2, norm, 32, 3);
    CHECK_FALSE(r2.equivalent);
    CHECK(r2.max_abs_logit_diff > 1e-3);
  }
}

TEST_CASE("verify_equivalence with no samples is degenerate") {
  Rng rng(2);
  const auto m3 = zoo::conversion_zoo<double>(3, 8, rng)[3].model;
  const auto r = verify_equivalence(m3, bcosify(m3, {}), {}, 0, 1);
  CHECK(r.samples_checked == 0);
  CHECK(r.max_abs_logit_diff == 0.0);
  CHECK(r.degenerate);
  CHECK_FALSE(r.equivalent);
}

TEST_CASE("conversion flags") {
  Rng rng(3);
  const auto m3 = zoo::conversion_zoo<double>(3, 8, rng)[0].model;
  std::vector<std::string> notes;
  const auto m6 = bcosify(m3, {}, ConvertOptions{true, true}, &notes);
  bool saw_avg = false;
  visit_layers(m6.layers, [&](const LayerSpec<double>& l) {
    CHECK(l.kind != LayerKind::MaxPool);
    saw_avg |= l.kind == LayerKind::AvgPool;
    if (l.is_bcos()) CHECK(l.unit_norm_weights);
  });
  CHECK(saw_avg);
}

TEST_CASE("apply_interpretability_changes") {
  Rng rng(5);
  const auto m3 = zoo::conversion_zoo<double>(3, 8, rng)[1].model;
  const auto m6 = bcosify(m3, {});
  const auto same = apply_interpretability_changes(m6, 1.0, BiasMode::Keep);
  const auto x = rng.uniform_tensor<double>(m6.input_shape(4), -1, 1);
  CHECK(forward(same, x, Mode::Eval, false).logits == forward(m6, x, Mode::Eval, false).logits);

  const auto changed = apply_interpretability_changes(m6, 2.0, BiasMode::Zero);
  visit_layers(changed.layers, [&](const LayerSpec<double>& l) {
    if (l.is_bcos()) CHECK(l.b_exponent == 2.0);
    CHECK_FALSE(l.has_bias());
    CHECK(l.kind != LayerKind::BatchNormCentered);
  });
  CHECK(code_of([&] { apply_interpretability_changes(m6, 0.5, BiasMode::Keep); }) == ErrorCode::InvalidConfig);
}

TEST_CASE("uncentered BN keeps the eval-mode second moment") {
  Rng rng(9);
  auto bn = testing::random_bn(rng, 3, true);
  const auto mean = bn.running_mean, var = bn.running_var;
  uncenter_batchnorm(bn);
  CHECK(bn.kind == LayerKind::BatchNormUncentered);
  for (std::size_t c = 0; c < 3; ++c) CHECK(bn.running_sq[c] == doctest::Approx(var[c] + mean[c] * mean[c]));
}
