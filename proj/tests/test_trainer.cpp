#include "doctest.h"

#include <cmath>
#include <limits>
#include <numbers>

#include "bcos/converter.hpp"
#include "bcos/trainer.hpp"
#include "bcos/zoo.hpp"

using namespace bcos;

namespace {

Dataset small_dataset() {
  DatasetManifest m;
  m.n_classes = 3;
  m.n_train = 96;
  m.n_eval = 30;
  m.image_size = 16;
  m.seed = 3;
  return generate_dataset(m);
}

ModelGraph<float> small_cnn(std::uint64_t seed) {
  Rng rng(seed);
  zoo::TinyCnnOptions opts;
  opts.width1 = 4;
  opts.width2 = 6;
  return zoo::tiny_cnn<float>(3, 16, rng, opts);
}

ModelGraph<float> small_bcos(std::uint64_t seed) {
  const auto base = small_cnn(seed);
  return bcosify(base, base.normalization, {}, nullptr);
}

std::vector<float> all_params(const ModelGraph<float>& model) {
  std::vector<float> out;
  auto take = [&](const Tensor<float>& t) { out.insert(out.end(), t.values().begin(), t.values().end()); };
  visit_layers(model.layers, [&](const LayerSpec<float>& l) {
    take(l.weight);
    take(l.bias);
    take(l.bn_scale);
    for (const auto& br : l.branches) take(br);
    if (l.is_bcos()) out.push_back(l.b_exponent);
  });
  return out;
}

TrainConfig quick_config(std::size_t epochs) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = 32;
  cfg.lr0 = 3e-3;
  cfg.seed = 11;
  return cfg;
}

}  // namespace

TEST_CASE("cosine_lr follows the half-cosine law") {
  CHECK(cosine_lr(0, 100, 0.1) == doctest::Approx(0.1));
  CHECK(cosine_lr(100, 100, 0.1) == doctest::Approx(0.0));
  CHECK(cosine_lr(50, 100, 0.1) == doctest::Approx(0.05));
  for (std::size_t t = 0; t <= 40; ++t) {
    CHECK(cosine_lr(t, 40, 2.0) == doctest::Approx(std::cos(std::numbers::pi * t / 40.0) + 1.0).epsilon(1e-12));
  }
}

TEST_CASE("adamw_step examples") {
  AdamWConfig cfg;
  SUBCASE("first step moves by lr against the gradient sign") {
    std::vector<double> theta{1.0};
    std::vector<double> g{1.0};
    AdamState st;
    adamw_step<double>(theta, g, st, 0.1, cfg);
    CHECK(theta[0] == doctest::Approx(0.9).epsilon(1e-7));
    // Second step, same gradient: m = 0.19, v = 0.001999, both bias
    // corrections give exactly 1 again.
    adamw_step<double>(theta, g, st, 0.1, cfg);
    CHECK(theta[0] == doctest::Approx(0.8).epsilon(1e-7));
    CHECK(st.step == 2);
  }
  SUBCASE("zero gradient without decay leaves theta unchanged") {
    std::vector<double> theta{0.7, -3.0};
    std::vector<double> g{0.0, 0.0};
    AdamState st;
    for (int i = 0; i < 5; ++i) adamw_step<double>(theta, g, st, 0.1, cfg);
    CHECK(theta[0] == 0.7);
    CHECK(theta[1] == -3.0);
  }
  SUBCASE("decay-only path shrinks by (1 - lr wd) per step") {
    AdamWConfig d = cfg;
    d.weight_decay = 0.5;
    std::vector<double> theta{2.0};
    std::vector<double> g{0.0};
    AdamState st;
    for (int i = 0; i < 3; ++i) adamw_step<double>(theta, g, st, 0.1, d);
    CHECK(theta[0] == doctest::Approx(2.0 * std::pow(0.95, 3)).epsilon(1e-12));
  }
  SUBCASE("non-finite gradient") {
    std::vector<float> theta{1.0f};
    std::vector<float> g{std::nanf("")};
    AdamState st;
    try {
      adamw_step<float>(theta, g, st, 0.1, cfg);
      FAIL("expected NonFiniteGradient");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::NonFiniteGradient);
    }
    CHECK(theta[0] == 1.0f);
  }
}

TEST_CASE("B schedules") {
  BStrategy lin;
  lin.kind = BStrategyKind::Linear;
  lin.linear_epochs = 10;
  lin.target = 2.0;
  CHECK(*scheduled_b(lin, 0) == 1.0);
  CHECK(*scheduled_b(lin, 5) == doctest::Approx(1.5));
  CHECK(*scheduled_b(lin, 10) == 2.0);
  CHECK(*scheduled_b(lin, 15) == 2.0);
  BStrategy imm;
  for (std::size_t e : {0u, 3u, 99u}) CHECK(*scheduled_b(imm, e) == 2.0);
  BStrategy learn;
  learn.kind = BStrategyKind::Learnable;
  CHECK_FALSE(scheduled_b(learn, 0).has_value());
  CHECK(b_strategy_from_string("linear") == BStrategyKind::Linear);
  CHECK_FALSE(b_strategy_from_string("cubic").has_value());
  CHECK(loss_from_string(to_string(LossKind::SigmoidBCE)) == LossKind::SigmoidBCE);
}

TEST_CASE("bias_penalty examples") {
  ModelGraph<double> m;
  m.input_channels = 2;
  m.class_count = 2;
  m.layers.push_back(linear_layer<double>(Tensor<double>::from({2, 2}, {1, 0, 0, 1}), Tensor<double>::vector({1, -2})));
  CHECK(bias_penalty(m, 0.5) == doctest::Approx(2.5));
  CHECK(mean_abs_bias(m) == doctest::Approx(1.5));
  m.layers[0].bias.fill(0.0);
  CHECK(bias_penalty(m, 0.5) == 0.0);
  m.layers[0].bias = {};
  CHECK(bias_penalty(m, 0.9) == 0.0);
  CHECK(mean_abs_bias(m) == 0.0);
}

TEST_CASE("classification losses: values and finite-difference gradients") {
  Rng rng(5);
  for (LossKind kind : {LossKind::SoftmaxCE, LossKind::SigmoidBCE}) {
    CAPTURE(to_string(kind));
    const auto logits = rng.uniform_tensor<double>({5, 4}, -3, 3);
    const std::vector<std::size_t> labels{0, 3, 1, 1, 2};
    Tensor<double> grad;
    classification_loss(kind, logits, labels, grad);
    const double h = 1e-6;
    for (std::size_t i = 0; i < logits.size(); ++i) {
      Tensor<double> p = logits, m = logits, unused;
      p[i] += h;
      m[i] -= h;
      const double fd = (classification_loss(kind, p, labels, unused).loss -
                         classification_loss(kind, m, labels, unused).loss) / (2 * h);
      CHECK(grad[i] == doctest::Approx(fd).epsilon(1e-6));
    }
  }
  Tensor<double> zeros({2, 4}), grad;
  CHECK(classification_loss(LossKind::SoftmaxCE, zeros, {0, 1}, grad).loss == doctest::Approx(std::log(4.0)));
  CHECK(classification_loss(LossKind::SigmoidBCE, zeros, {0, 1}, grad).loss == doctest::Approx(4 * std::log(2.0)));
  // Stable for extreme logits.
  Tensor<double> big = Tensor<double>::from({1, 2}, {800.0, -800.0});
  CHECK(classification_loss(LossKind::SoftmaxCE, big, {0}, grad).loss == doctest::Approx(0.0));
  CHECK(classification_loss(LossKind::SigmoidBCE, big, {0}, grad).loss == doctest::Approx(0.0));
  CHECK(std::isfinite(classification_loss(LossKind::SoftmaxCE, big, {1}, grad).loss));
}

TEST_CASE("train: epochs = 0 leaves the model unchanged with an empty log") {
  const auto data = small_dataset();
  const auto model = small_cnn(1);
  const auto r = train(model, data, quick_config(0));
  CHECK(r.log.empty());
  CHECK(all_params(r.model) == all_params(model));
}

TEST_CASE("train: lr0 = 0 leaves parameters unchanged") {
  const auto data = small_dataset();
  const auto model = small_cnn(1);
  auto cfg = quick_config(2);
  cfg.lr0 = 0.0;
  const auto r = train(model, data, cfg);
  REQUIRE(r.log.size() == 2);
  CHECK(all_params(r.model) == all_params(model));
  for (const auto& e : r.log) CHECK(e.lr == 0.0);
  // Running statistics still move.
  CHECK(r.model.layers[1].running_mean != model.layers[1].running_mean);
}

TEST_CASE("train: loss decreases, log is complete and lr follows the schedule") {
  const auto data = small_dataset();
  auto cfg = quick_config(6);
  const auto r = train(small_cnn(2), data, cfg);
  REQUIRE(r.log.size() == 6);
  CHECK(r.log.back().train_loss < r.log.front().train_loss);
  const std::size_t steps = (96 + 31) / 32;
  for (std::size_t e = 0; e < 6; ++e) {
    CHECK(r.log[e].epoch == e);
    CHECK(r.log[e].lr == doctest::Approx(cosine_lr((e + 1) * steps - 1, 6 * steps, cfg.lr0)));
    CHECK(r.log[e].current_b == 1.0);
  }
}

TEST_CASE("train: identical config and seed reproduce the log exactly") {
  const auto data = small_dataset();
  auto cfg = quick_config(2);
  cfg.b_schedule_enabled = true;
  cfg.bias_mode = BiasMode::Decay;
  const auto a = train(small_bcos(3), data, cfg);
  const auto b = train(small_bcos(3), data, cfg);
  REQUIRE(a.log.size() == b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) CHECK(to_json_line(a.log[i]) == to_json_line(b.log[i]));
  CHECK(all_params(a.model) == all_params(b.model));
  cfg.seed += 1;
  const auto c = train(small_bcos(3), data, cfg);
  CHECK(to_json_line(c.log.back()) != to_json_line(a.log.back()));
}

TEST_CASE("train: B strategies") {
  const auto data = small_dataset();
  SUBCASE("immediate sets every layer to the target from epoch 0") {
    auto cfg = quick_config(1);
    cfg.b_schedule_enabled = true;
    const auto r = train(small_bcos(4), data, cfg);
    CHECK(r.log[0].current_b == 2.0);
    CHECK(r.initial_mean_b == 1.0);
  }
  SUBCASE("linear ramps per epoch") {
    auto cfg = quick_config(4);
    cfg.b_schedule_enabled = true;
    cfg.b_strategy.kind = BStrategyKind::Linear;
    cfg.b_strategy.linear_epochs = 2;
    const auto r = train(small_bcos(4), data, cfg);
    CHECK(r.log[0].current_b == doctest::Approx(1.0));
    CHECK(r.log[1].current_b == doctest::Approx(1.5));
    CHECK(r.log[2].current_b == doctest::Approx(2.0));
    CHECK(r.log[3].current_b == doctest::Approx(2.0));
  }
  SUBCASE("linear longer than the run is rejected") {
    auto cfg = quick_config(2);
    cfg.b_schedule_enabled = true;
    cfg.b_strategy.kind = BStrategyKind::Linear;
    cfg.b_strategy.linear_epochs = 3;
    CHECK_THROWS_AS(train(small_bcos(4), data, cfg), Error);
  }
  SUBCASE("learnable B approaches the target and stays clamped") {
    auto cfg = quick_config(3);
    cfg.b_schedule_enabled = true;
    cfg.b_strategy.kind = BStrategyKind::Learnable;
    cfg.b_strategy.lambda_b = 0.9;
    const auto r = train(small_bcos(4), data, cfg);
    CHECK(std::abs(r.log.back().current_b - 2.0) < std::abs(r.initial_mean_b - 2.0));
    visit_layers(r.model.layers, [](const LayerSpec<float>& l) {
      if (!l.is_bcos()) return;
      CHECK(l.b_learnable);
      CHECK(l.b_exponent >= 1.0f);
      CHECK(l.b_exponent <= 4.0f);
    });
  }
  SUBCASE("global learnable B keeps all layers equal") {
    auto cfg = quick_config(2);
    cfg.b_schedule_enabled = true;
    cfg.b_strategy.kind = BStrategyKind::Learnable;
    cfg.b_strategy.global = true;
    const auto r = train(small_bcos(4), data, cfg);
    std::vector<float> bs;
    visit_layers(r.model.layers, [&](const LayerSpec<float>& l) {
      if (l.is_bcos()) bs.push_back(l.b_exponent);
    });
    REQUIRE(bs.size() > 1);
    for (float b : bs) CHECK(b == bs.front());
    CHECK(bs.front() > 1.0f);
  }
  SUBCASE("plain L2 on B pulls toward the lower clamp") {
    auto cfg = quick_config(2);
    cfg.b_schedule_enabled = true;
    cfg.b_strategy.kind = BStrategyKind::Learnable;
    cfg.b_strategy.plain_l2 = true;
    auto model = apply_interpretability_changes(small_bcos(4), 2.0f, BiasMode::Keep);
    const auto r = train(model, data, cfg);
    CHECK(r.log.back().current_b < 2.0);
  }
}

TEST_CASE("train: bias strategies") {
  const auto data = small_dataset();
  SUBCASE("zero removes every bias and uncenters BN") {
    auto cfg = quick_config(1);
    cfg.bias_mode = BiasMode::Zero;
    const auto r = train(small_bcos(5), data, cfg);
    CHECK(r.initial_mean_abs_bias > 0.0);
    visit_layers(r.model.layers, [](const LayerSpec<float>& l) {
      CHECK_FALSE(l.has_bias());
      CHECK(l.kind != LayerKind::BatchNormCentered);
    });
    CHECK(r.log[0].mean_abs_bias == 0.0);
  }
  SUBCASE("decay shrinks biases faster than keep") {
    auto keep = quick_config(3);
    auto decay = keep;
    decay.bias_mode = BiasMode::Decay;
    decay.lambda_bias = 0.9;
    const auto rk = train(small_bcos(5), data, keep);
    const auto rd = train(small_bcos(5), data, decay);
    CHECK(rd.log.back().mean_abs_bias < rk.log.back().mean_abs_bias);
  }
}

TEST_CASE("train: sigmoid BCE adds a fixed logit bias of -ln(K-1)") {
  const auto data = small_dataset();
  auto cfg = quick_config(1);
  cfg.loss = LossKind::SigmoidBCE;
  const auto r = train(small_bcos(6), data, cfg);
  REQUIRE(r.model.layers.back().kind == LayerKind::LogitBias);
  CHECK(r.model.layers.back().logit_bias == doctest::Approx(-std::log(2.0)));
  // Not added twice.
  const auto again = prepare_for_training(r.model, cfg);
  CHECK(again.layers.size() == r.model.layers.size());
}

TEST_CASE("train: divergence returns the last good model") {
  const auto data = small_dataset();
  auto model = small_cnn(7);
  // BatchNorm would normalize a large conv weight away; the classifier sits
  // after the last BN, so maximal weights there overflow the logits.
  auto& classifier = model.layers[model.layers.size() - 2];
  REQUIRE(classifier.is_linear_like());
  classifier.weight.fill(std::numeric_limits<float>::max());
  const auto r = train(model, data, quick_config(2));
  CHECK(r.diverged);
  CHECK(r.log.empty());
  CHECK_FALSE(r.diverged_message.empty());
  CHECK(all_params(r.model) == all_params(model));
}

TEST_CASE("train: input validation") {
  const auto data = small_dataset();
  auto cfg = quick_config(1);
  cfg.batch_size = 0;
  CHECK_THROWS_AS(train(small_cnn(1), data, cfg), Error);
  Rng rng(1);
  auto wrong = zoo::tiny_cnn<float>(4, 16, rng, {});
  CHECK_THROWS_AS(train(wrong, data, quick_config(1)), Error);
}

TEST_CASE("epoch log serializes as one JSON object per line") {
  EpochLog e;
  e.epoch = 3;
  e.train_loss = 0.5;
  e.current_b = 2.0;
  const auto line = to_json_line(e);
  CHECK(line.find('\n') == std::string::npos);
  CHECK(line.find("\"current_B\":2.0") != std::string::npos);
  CHECK(line.rfind("{\"epoch\":3,", 0) == 0);
}
