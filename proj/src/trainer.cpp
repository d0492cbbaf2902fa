#include "bcos/trainer.hpp"

#include <cmath>
#include <numbers>

#include "json.hpp"

namespace bcos {

double cosine_lr(std::size_t t, std::size_t total, double lr0) {
  if (total == 0) return lr0;
  const double frac = std::min(1.0, static_cast<double>(t) / static_cast<double>(total));
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

template <typename T>
void adamw_step(std::span<T> params, std::span<const T> grads, AdamState& state, double lr, const AdamWConfig& config) {
  if (params.size() != grads.size()) throw Error(ErrorCode::ShapeMismatch, "parameter/gradient size mismatch");
  if (!all_finite(grads)) throw Error(ErrorCode::NonFiniteGradient, "non-finite gradient");
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
    state.step = 0;
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    double theta = static_cast<double>(params[i]);
    const double g = static_cast<double>(grads[i]);
    theta -= lr * config.weight_decay * theta;
    state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g;
    state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g * g;
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    theta -= lr * m_hat / (std::sqrt(v_hat) + config.eps);
    params[i] = static_cast<T>(theta);
  }
}

namespace {

constexpr std::pair<BStrategyKind, std::string_view> kStrategyNames[] = {
    {BStrategyKind::Immediate, "immediate"},
    {BStrategyKind::Linear, "linear"},
    {BStrategyKind::Learnable, "learnable"},
};

constexpr std::pair<LossKind, std::string_view> kLossNames[] = {
    {LossKind::SoftmaxCE, "softmax_ce"},
    {LossKind::SigmoidBCE, "sigmoid_bce"},
};

}  // namespace

std::string_view to_string(BStrategyKind kind) noexcept {
  for (const auto& [k, n] : kStrategyNames)
    if (k == kind) return n;
  return "?";
}

std::optional<BStrategyKind> b_strategy_from_string(std::string_view name) noexcept {
  for (const auto& [k, n] : kStrategyNames)
    if (n == name) return k;
  return std::nullopt;
}

std::string_view to_string(LossKind kind) noexcept {
  for (const auto& [k, n] : kLossNames)
    if (k == kind) return n;
  return "?";
}

std::optional<LossKind> loss_from_string(std::string_view name) noexcept {
  for (const auto& [k, n] : kLossNames)
    if (n == name) return k;
  return std::nullopt;
}

std::optional<double> scheduled_b(const BStrategy& strategy, std::size_t epoch) {
  switch (strategy.kind) {
    case BStrategyKind::Immediate:
      return strategy.target;
    case BStrategyKind::Linear: {
      if (strategy.linear_epochs == 0) return strategy.target;
      const double frac =
          std::min(1.0, static_cast<double>(epoch) / static_cast<double>(strategy.linear_epochs));
      return 1.0 + frac * (strategy.target - 1.0);
    }
    case BStrategyKind::Learnable:
      return std::nullopt;
  }
  return std::nullopt;
}

template <typename T>
double bias_penalty(const ModelGraph<T>& model, double lambda) {
  double sum = 0.0;
  visit_layers(model.layers, [&](const LayerSpec<T>& l) {
    if (!l.has_bias()) return;
    for (T b : l.bias.values()) sum += static_cast<double>(b) * static_cast<double>(b);
  });
  return lambda * sum;
}

template <typename T>
double mean_abs_bias(const ModelGraph<T>& model) {
  double sum = 0.0;
  std::size_t count = 0;
  visit_layers(model.layers, [&](const LayerSpec<T>& l) {
    if (!l.has_bias()) return;
    for (T b : l.bias.values()) sum += std::abs(static_cast<double>(b));
    count += l.bias.size();
  });
  return count == 0 ? 0.0 : sum / static_cast<double>(count);
}

template <typename T>
double mean_b(const ModelGraph<T>& model) {
  double sum = 0.0;
  std::size_t count = 0;
  visit_layers(model.layers, [&](const LayerSpec<T>& l) {
    if (!l.is_bcos()) return;
    sum += static_cast<double>(l.b_exponent);
    ++count;
  });
  return count == 0 ? 1.0 : sum / static_cast<double>(count);
}

template <typename T>
LossResult classification_loss(LossKind kind, const Tensor<T>& logits, const std::vector<std::size_t>& labels,
                               Tensor<T>& grad) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw Error(ErrorCode::ShapeMismatch, "logits must be [N, K] with one label per row");
  }
  const std::size_t n = logits.dim(0);
  const std::size_t k = logits.dim(1);
  grad = Tensor<T>(logits.shape());
  LossResult result;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T* z = logits.data() + i * k;
    T* g = grad.data() + i * k;
    const std::size_t y = labels[i];
    if (y >= k) throw Error(ErrorCode::InvalidConfig, "label out of range");
    const std::size_t pred = static_cast<std::size_t>(std::max_element(z, z + k) - z);
    if (pred == y) ++result.correct;
    if (kind == LossKind::SoftmaxCE) {
      double zmax = static_cast<double>(z[pred]);
      double denom = 0.0;
      for (std::size_t j = 0; j < k; ++j) denom += std::exp(static_cast<double>(z[j]) - zmax);
      const double log_denom = std::log(denom) + zmax;
      result.loss += (log_denom - static_cast<double>(z[y])) * inv_n;
      for (std::size_t j = 0; j < k; ++j) {
        const double p = std::exp(static_cast<double>(z[j]) - log_denom);
        g[j] = static_cast<T>((p - (j == y ? 1.0 : 0.0)) * inv_n);
      }
    } else {
      for (std::size_t j = 0; j < k; ++j) {
        const double zj = static_cast<double>(z[j]);
        const double t = j == y ? 1.0 : 0.0;
        // softplus(z) - t z, computed stably
        const double softplus = std::max(zj, 0.0) + std::log1p(std::exp(-std::abs(zj)));
        result.loss += (softplus - t * zj) * inv_n;
        const double s = 1.0 / (1.0 + std::exp(-zj));
        g[j] = static_cast<T>((s - t) * inv_n);
      }
    }
  }
  return result;
}

std::string to_json_line(const EpochLog& e) {
  nlohmann::ordered_json j;
  j["epoch"] = e.epoch;
  j["train_loss"] = e.train_loss;
  j["train_acc"] = e.train_acc;
  j["eval_acc"] = e.eval_acc;
  j["current_B"] = e.current_b;
  j["mean_abs_bias"] = e.mean_abs_bias;
  j["lr"] = e.lr;
  return j.dump();
}

template <typename T>
ModelGraph<T> prepare_for_training(ModelGraph<T> model, const TrainConfig& config) {
  if (config.b_schedule_enabled) {
    const auto& s = config.b_strategy;
    if (!(s.target >= 1.0)) throw Error(ErrorCode::InvalidConfig, "B target must be >= 1");
    if (!(s.b_min >= 1.0 && s.b_max >= s.b_min)) throw Error(ErrorCode::InvalidConfig, "invalid B clamp range");
    if (s.kind == BStrategyKind::Linear && s.linear_epochs > config.epochs) {
      throw Error(ErrorCode::InvalidConfig, "linear B schedule longer than the run");
    }
    const auto b0 = scheduled_b(s, 0);
    visit_layers(model.layers, [&](LayerSpec<T>& l) {
      if (!l.is_bcos()) return;
      if (b0) l.b_exponent = static_cast<T>(*b0);
      l.b_learnable = s.kind == BStrategyKind::Learnable;
    });
  }
  if (config.bias_mode == BiasMode::Zero) {
    visit_layers(model.layers, [&](LayerSpec<T>& l) {
      if (l.is_linear_like() || l.is_batchnorm()) l.bias = Tensor<T>{};
      uncenter_batchnorm(l);
    });
  }
  if (config.loss == LossKind::SigmoidBCE &&
      (model.layers.empty() || model.layers.back().kind != LayerKind::LogitBias)) {
    if (model.class_count < 2) throw Error(ErrorCode::InvalidConfig, "sigmoid BCE needs at least two classes");
    model.layers.push_back(
        logit_bias_layer(static_cast<T>(-std::log(static_cast<double>(model.class_count) - 1.0))));
  }
  validate(model);
  return model;
}

template <typename T>
double evaluate_accuracy(const ModelGraph<T>& model, const Dataset& data, const std::vector<std::size_t>& indices) {
  if (indices.empty()) return 0.0;
  constexpr std::size_t kChunk = 100;
  std::size_t correct = 0;
  Rng unused(0);
  for (std::size_t start = 0; start < indices.size(); start += kChunk) {
    const std::vector<std::size_t> idx(indices.begin() + static_cast<std::ptrdiff_t>(start),
                                       indices.begin() + static_cast<std::ptrdiff_t>(std::min(start + kChunk, indices.size())));
    const auto batch = load_batch<T>(data, idx, model.input_channels == 6, model.normalization, 0.0, unused);
    const auto logits = forward(model, batch.x, Mode::Eval, false).logits;
    const std::size_t k = logits.dim(1);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const T* z = logits.data() + i * k;
      if (static_cast<std::size_t>(std::max_element(z, z + k) - z) == batch.labels[i]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(indices.size());
}

namespace {

// Parameter update for one step. Optimizer states are kept in visit order.
template <typename T>
class Optimizer {
 public:
  explicit Optimizer(const TrainConfig& config) : config_(config) {}

  void step(ModelGraph<T>& model, const ModelGrad<T>& grad, double lr) {
    const auto& bs = config_.b_strategy;
    const bool learnable = config_.b_schedule_enabled && bs.kind == BStrategyKind::Learnable;
    const bool decay = config_.bias_mode == BiasMode::Decay;
    std::size_t slot = 0;
    double global_b_grad = 0.0;
    double global_b_value = 0.0;
    std::size_t global_count = 0;
    std::vector<T> adjusted;
    visit_parameters(model, grad, [&](ParamRole role, std::span<T> p, std::span<const T> g) {
      if (role == ParamRole::Exponent && learnable && bs.global) {
        global_b_grad += static_cast<double>(g[0]);
        global_b_value = static_cast<double>(p[0]);
        ++global_count;
        return;
      }
      AdamState& state = slot_state(slot++);
      AdamWConfig cfg = config_.adamw;
      if (role != ParamRole::Weight && role != ParamRole::Branch) cfg.weight_decay = 0.0;
      if (role == ParamRole::Bias && decay) {
        adjusted.assign(g.begin(), g.end());
        for (std::size_t i = 0; i < p.size(); ++i) {
          adjusted[i] += static_cast<T>(2.0 * config_.lambda_bias * static_cast<double>(p[i]));
        }
        adamw_step(p, std::span<const T>(adjusted), state, lr, cfg);
      } else if (role == ParamRole::Exponent) {
        T gb = g[0] + static_cast<T>(b_penalty_grad(static_cast<double>(p[0])));
        adamw_step(p, std::span<const T>(&gb, 1), state, lr * bs.lr_scale, cfg);
        p[0] = static_cast<T>(std::clamp(static_cast<double>(p[0]), bs.b_min, bs.b_max));
      } else {
        adamw_step(p, g, state, lr, cfg);
      }
    });
    if (global_count > 0) {
      // One shared B: the gradient is the sum over all layers.
      AdamWConfig cfg = config_.adamw;
      cfg.weight_decay = 0.0;
      T value = static_cast<T>(global_b_value);
      T gb = static_cast<T>(global_b_grad + b_penalty_grad(global_b_value));
      adamw_step(std::span<T>(&value, 1), std::span<const T>(&gb, 1), slot_state(slot++), lr * bs.lr_scale, cfg);
      value = static_cast<T>(std::clamp(static_cast<double>(value), bs.b_min, bs.b_max));
      visit_layers(model.layers, [&](LayerSpec<T>& l) {
        if (l.is_bcos()) l.b_exponent = value;
      });
    }
  }

 private:
  double b_penalty_grad(double b) const {
    const auto& bs = config_.b_strategy;
    return bs.plain_l2 ? 2.0 * bs.lambda_b * b : 2.0 * bs.lambda_b * (b - bs.target);
  }

  AdamState& slot_state(std::size_t slot) {
    if (states_.size() <= slot) states_.resize(slot + 1);
    return states_[slot];
  }

  const TrainConfig& config_;
  std::vector<AdamState> states_;
};

}  // namespace

template <typename T>
TrainResult<T> train(ModelGraph<T> model, const Dataset& data, const TrainConfig& config,
                     const std::function<void(const EpochLog&)>& on_epoch) {
  if (config.batch_size == 0) throw Error(ErrorCode::InvalidConfig, "batch_size must be positive");
  if (!(config.lr0 >= 0.0)) throw Error(ErrorCode::InvalidConfig, "lr0 must be non-negative");
  if (!(config.lambda_bias >= 0.0)) throw Error(ErrorCode::InvalidConfig, "lambda_bias must be non-negative");
  if (model.class_count != data.manifest.n_classes) {
    throw Error(ErrorCode::InvalidConfig, "model class count does not match the dataset");
  }
  TrainResult<T> result;
  result.initial_mean_abs_bias = mean_abs_bias(model);
  result.initial_mean_b = mean_b(model);
  model = prepare_for_training(std::move(model), config);

  std::vector<std::size_t> train_idx = data.train_indices();
  if (config.max_train_samples > 0 && train_idx.size() > config.max_train_samples) {
    train_idx.resize(config.max_train_samples);
  }
  const std::vector<std::size_t> eval_idx = data.eval_indices();
  if (config.epochs > 0 && train_idx.empty()) throw Error(ErrorCode::InvalidConfig, "empty training split");

  const std::size_t steps_per_epoch = (train_idx.size() + config.batch_size - 1) / config.batch_size;
  const std::size_t total_steps = steps_per_epoch * config.epochs;
  const bool encode6 = model.input_channels == 6;
  Optimizer<T> optimizer(config);
  ModelGraph<T> last_good = model;
  std::size_t global_step = 0;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    if (config.b_schedule_enabled) {
      if (const auto b = scheduled_b(config.b_strategy, epoch)) {
        visit_layers(model.layers, [&](LayerSpec<T>& l) {
          if (l.is_bcos()) l.b_exponent = static_cast<T>(*b);
        });
      }
    }
    std::vector<std::size_t> order = train_idx;
    Rng::derive(config.seed, 2 * epoch).shuffle(order.begin(), order.end());
    Rng flip_rng = Rng::derive(config.seed, 2 * epoch + 1);

    EpochLog log;
    log.epoch = epoch;
    double loss_sum = 0.0;
    std::size_t correct = 0;
    try {
      for (std::size_t s = 0; s < steps_per_epoch; ++s) {
        const std::size_t begin = s * config.batch_size;
        const std::size_t end = std::min(begin + config.batch_size, order.size());
        const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                           order.begin() + static_cast<std::ptrdiff_t>(end));
        const auto batch = load_batch<T>(data, idx, encode6, model.normalization, config.flip_prob, flip_rng);
        auto fwd = forward(model, batch.x, Mode::Train, true);
        Tensor<T> grad_logits;
        const auto loss = classification_loss(config.loss, fwd.logits, batch.labels, grad_logits);
        if (!std::isfinite(loss.loss)) throw Error(ErrorCode::DivergedLoss, "loss became non-finite");
        loss_sum += loss.loss * static_cast<double>(idx.size());
        correct += loss.correct;
        const auto grads = backward(model, *fwd.record, grad_logits);
        const double lr = cosine_lr(global_step, total_steps, config.lr0);
        optimizer.step(model, grads, lr);
        update_running_stats(model, *fwd.record);
        log.lr = lr;
        ++global_step;
      }
    } catch (const Error& e) {
      if (e.code() != ErrorCode::DivergedLoss && e.code() != ErrorCode::NonFiniteGradient &&
          e.code() != ErrorCode::NonFiniteActivation) {
        throw;
      }
      result.diverged = true;
      result.diverged_message = e.what();
      result.model = std::move(last_good);
      return result;
    }
    log.train_loss = loss_sum / static_cast<double>(train_idx.size());
    log.train_acc = static_cast<double>(correct) / static_cast<double>(train_idx.size());
    log.eval_acc = evaluate_accuracy(model, data, eval_idx);
    log.current_b = mean_b(model);
    log.mean_abs_bias = mean_abs_bias(model);
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);
    last_good = model;
  }
  result.model = std::move(model);
  return result;
}

#define BCOS_TRAINER_INSTANTIATE(T)                                                                          \
  template void adamw_step(std::span<T>, std::span<const T>, AdamState&, double, const AdamWConfig&);      \
  template double bias_penalty(const ModelGraph<T>&, double);                                               \
  template double mean_abs_bias(const ModelGraph<T>&);                                                      \
  template double mean_b(const ModelGraph<T>&);                                                             \
  template LossResult classification_loss(LossKind, const Tensor<T>&, const std::vector<std::size_t>&,      \
                                          Tensor<T>&);                                                      \
  template ModelGraph<T> prepare_for_training(ModelGraph<T>, const TrainConfig&);                           \
  template double evaluate_accuracy(const ModelGraph<T>&, const Dataset&, const std::vector<std::size_t>&); \
  template TrainResult<T> train(ModelGraph<T>, const Dataset&, const TrainConfig&,                          \
                                const std::function<void(const EpochLog&)>&);

BCOS_TRAINER_INSTANTIATE(float)
BCOS_TRAINER_INSTANTIATE(double)

}  // namespace bcos
