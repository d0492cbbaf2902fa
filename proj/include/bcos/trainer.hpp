#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "bcos/converter.hpp"
#include "bcos/datagen.hpp"

namespace bcos {

/// lr0 * 0.5 * (1 + cos(pi * t / T)).
double cosine_lr(std::size_t t, std::size_t total, double lr0);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::size_t step = 0;
};

/// One AdamW update: decoupled decay theta -= lr * wd * theta, then the
/// bias-corrected Adam step. Throws NonFiniteGradient.
template <typename T>
void adamw_step(std::span<T> params, std::span<const T> grads, AdamState& state, double lr, const AdamWConfig& config);

enum class BStrategyKind { Immediate, Linear, Learnable };
enum class LossKind { SoftmaxCE, SigmoidBCE };

std::string_view to_string(BStrategyKind kind) noexcept;
std::optional<BStrategyKind> b_strategy_from_string(std::string_view name) noexcept;
std::string_view to_string(LossKind kind) noexcept;
std::optional<LossKind> loss_from_string(std::string_view name) noexcept;

struct BStrategy {
  BStrategyKind kind = BStrategyKind::Immediate;
  double target = 2.0;
  std::size_t linear_epochs = 0;  // Linear: epochs to reach the target
  double lambda_b = 0.5;          // Learnable: penalty coefficient
  bool plain_l2 = false;          // Learnable: lambda_b * B^2 instead of lambda_b * (B - target)^2
  bool global = false;            // Learnable: one B shared by all layers
  double lr_scale = 10.0;         // Learnable: B learning rate relative to lr0
  double b_min = 1.0;
  double b_max = 4.0;
};

/// B for the given epoch under Immediate/Linear; nullopt for Learnable
/// (B is a parameter then).
std::optional<double> scheduled_b(const BStrategy& strategy, std::size_t epoch);

/// lambda * sum of squares of every bias and BN shift.
template <typename T>
double bias_penalty(const ModelGraph<T>& model, double lambda);

template <typename T>
double mean_abs_bias(const ModelGraph<T>& model);

/// Mean B over B-cos layers (1 when there are none).
template <typename T>
double mean_b(const ModelGraph<T>& model);

struct LossResult {
  double loss = 0.0;
  std::size_t correct = 0;
};

/// Mean loss over the batch; writes dLoss/dlogits into grad.
template <typename T>
LossResult classification_loss(LossKind kind, const Tensor<T>& logits, const std::vector<std::size_t>& labels,
                               Tensor<T>& grad);

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  double lr0 = 1e-3;
  AdamWConfig adamw;
  BStrategy b_strategy;
  bool b_schedule_enabled = false;  // false: B values are left alone (baseline training)
  BiasMode bias_mode = BiasMode::Keep;
  double lambda_bias = 0.9;
  LossKind loss = LossKind::SoftmaxCE;
  double flip_prob = 0.5;
  std::uint64_t seed = 0;
  std::size_t max_train_samples = 0;  // 0: the whole train split
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double eval_acc = 0.0;
  double current_b = 1.0;
  double mean_abs_bias = 0.0;
  double lr = 0.0;  // learning rate of the epoch's last step
};

std::string to_json_line(const EpochLog& e);

template <typename T>
struct TrainResult {
  ModelGraph<T> model;  // final model, or the last good one after divergence
  std::vector<EpochLog> log;
  double initial_mean_abs_bias = 0.0;
  double initial_mean_b = 1.0;
  bool diverged = false;
  std::string diverged_message;
};

/// Prepares a model for the configured strategies: bias removal for
/// BiasMode::Zero, B exponents for Immediate/Linear, learnable flags, and a
/// LogitBias layer of -ln(K - 1) for sigmoid BCE when none is present.
template <typename T>
ModelGraph<T> prepare_for_training(ModelGraph<T> model, const TrainConfig& config);

template <typename T>
double evaluate_accuracy(const ModelGraph<T>& model, const Dataset& data, const std::vector<std::size_t>& indices);

/// Fine-tunes (or trains) the model on the dataset's train split with AdamW
/// and a per-step cosine schedule, evaluating on the eval split after every
/// epoch. Deterministic for a given seed.
template <typename T>
TrainResult<T> train(ModelGraph<T> model, const Dataset& data, const TrainConfig& config,
                     const std::function<void(const EpochLog&)>& on_epoch = {});

}  // namespace bcos
