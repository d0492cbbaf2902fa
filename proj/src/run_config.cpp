#include "bcos/run_config.hpp"

#include <cmath>
#include <concepts>
#include <limits>
#include <set>

#include "bcos/binary_io.hpp"
#include "json.hpp"

namespace bcos {

using json = nlohmann::ordered_json;

namespace {

[[noreturn]] void invalid(const std::string& what) { throw Error(ErrorCode::InvalidConfig, what); }

// Typed, strict access to one JSON object.
class Section {
 public:
  Section(const json& root, std::string name, std::set<std::string> known) : name_(std::move(name)) {
    if (!root.contains(name_)) return;
    j_ = &root.at(name_);
    if (!j_->is_object()) invalid("section '" + name_ + "' must be an object");
    for (const auto& [key, _] : j_->items()) {
      if (!known.count(key)) invalid("unknown key '" + name_ + "." + key + "'");
    }
  }

  template <std::unsigned_integral U>
  void get(const char* key, U& dst) const {
    if (const json* v = find(key)) {
      if (!v->is_number_unsigned()) invalid(path(key) + " must be a non-negative integer");
      dst = v->get<U>();
    }
  }
  void get(const char* key, double& dst) const {
    if (const json* v = find(key)) {
      if (v->is_string() && v->get<std::string>() == "inf") {
        dst = std::numeric_limits<double>::infinity();
        return;
      }
      if (!v->is_number()) invalid(path(key) + " must be a number");
      dst = v->get<double>();
    }
  }
  void get(const char* key, bool& dst) const {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) invalid(path(key) + " must be a boolean");
      dst = v->get<bool>();
    }
  }
  template <typename E, typename Parse>
  void get_enum(const char* key, E& dst, Parse parse) const {
    if (const json* v = find(key)) {
      if (!v->is_string()) invalid(path(key) + " must be a string");
      const auto parsed = parse(v->get<std::string>());
      if (!parsed) invalid(path(key) + ": unknown value '" + v->get<std::string>() + "'");
      dst = *parsed;
    }
  }
  void get3(const char* key, std::array<double, 3>& dst) const {
    if (const json* v = find(key)) {
      if (!v->is_array() || v->size() != 3) invalid(path(key) + " must be an array of three numbers");
      for (std::size_t i = 0; i < 3; ++i) {
        if (!(*v)[i].is_number()) invalid(path(key) + " must be an array of three numbers");
        dst[i] = (*v)[i].get<double>();
      }
    }
  }
  const json* find(const char* key) const { return j_ && j_->contains(key) ? &j_->at(key) : nullptr; }

 private:
  std::string path(const char* key) const { return name_ + "." + key; }
  std::string name_;
  const json* j_ = nullptr;
};

std::optional<EnergyMode> energy_from_string(std::string_view s) {
  if (s == "sum_then_clamp") return EnergyMode::SumThenClamp;
  if (s == "clamp_then_sum") return EnergyMode::ClampThenSum;
  return std::nullopt;
}

const char* energy_name(EnergyMode m) { return m == EnergyMode::SumThenClamp ? "sum_then_clamp" : "clamp_then_sum"; }

json power_json(double p) { return std::isinf(p) ? json("inf") : json(p); }

}  // namespace

RunConfig parse_run_config(std::string_view text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::exception& e) {
    invalid(std::string("run config is not valid JSON: ") + e.what());
  }
  if (!root.is_object()) invalid("run config must be a JSON object");
  static const std::set<std::string> sections{"data", "model", "convert", "train", "eval"};
  for (const auto& [key, _] : root.items()) {
    if (!sections.count(key)) invalid("unknown section '" + key + "'");
  }
  RunConfig c;

  const Section data(root, "data", {"n_classes", "n_train", "n_eval", "image_size", "seed", "classes"});
  data.get("n_classes", c.data.n_classes);
  data.get("n_train", c.data.n_train);
  data.get("n_eval", c.data.n_eval);
  data.get("image_size", c.data.image_size);
  data.get("seed", c.data.seed);
  if (const json* classes = data.find("classes")) {
    // Reuse the manifest's own strict parser for the class list.
    json m = {{"n_classes", c.data.n_classes}, {"n_train", c.data.n_train}, {"n_eval", c.data.n_eval},
              {"image_size", c.data.image_size}, {"seed", c.data.seed}, {"classes", *classes}};
    c.data = DatasetManifest::from_json(m.dump());
  } else {
    c.data.resolve();
  }

  const Section model(root, "model", {"width1", "width2", "centered_bn", "maxpool", "init_seed", "normalization"});
  model.get("width1", c.model.tiny.width1);
  model.get("width2", c.model.tiny.width2);
  model.get("centered_bn", c.model.tiny.centered_bn);
  model.get("maxpool", c.model.tiny.maxpool);
  model.get("init_seed", c.model.init_seed);
  if (model.find("normalization")) {
    const Section norm(root.at("model"), "normalization", {"means", "stds"});
    norm.get3("means", c.model.normalization.means);
    norm.get3("stds", c.model.normalization.stds);
  }
  c.model.normalization.validate();
  if (c.model.tiny.width1 == 0 || c.model.tiny.width2 == 0) invalid("model widths must be positive");

  const Section convert(root, "convert", {"swap_maxpool", "unit_norm_weights", "verify_samples", "verify_seed"});
  convert.get("swap_maxpool", c.convert.options.swap_maxpool);
  convert.get("unit_norm_weights", c.convert.options.unit_norm_weights);
  convert.get("verify_samples", c.convert.verify_samples);
  convert.get("verify_seed", c.convert.verify_seed);

  const Section train(root, "train",
                      {"epochs", "batch_size", "lr0", "beta1", "beta2", "eps", "weight_decay", "b_strategy",
                       "b_target", "linear_epochs", "lambda_b", "b_plain_l2", "b_global", "b_lr_scale", "b_min",
                       "b_max", "bias_strategy", "lambda_bias", "loss", "flip_prob", "seed", "max_train_samples"});
  auto& t = c.train;
  train.get("epochs", t.epochs);
  train.get("batch_size", t.batch_size);
  train.get("lr0", t.lr0);
  train.get("beta1", t.adamw.beta1);
  train.get("beta2", t.adamw.beta2);
  train.get("eps", t.adamw.eps);
  train.get("weight_decay", t.adamw.weight_decay);
  train.get_enum("b_strategy", t.b_strategy.kind, b_strategy_from_string);
  train.get("b_target", t.b_strategy.target);
  train.get("linear_epochs", t.b_strategy.linear_epochs);
  train.get("lambda_b", t.b_strategy.lambda_b);
  train.get("b_plain_l2", t.b_strategy.plain_l2);
  train.get("b_global", t.b_strategy.global);
  train.get("b_lr_scale", t.b_strategy.lr_scale);
  train.get("b_min", t.b_strategy.b_min);
  train.get("b_max", t.b_strategy.b_max);
  train.get_enum("bias_strategy", t.bias_mode, bias_mode_from_string);
  train.get("lambda_bias", t.lambda_bias);
  train.get_enum("loss", t.loss, loss_from_string);
  train.get("flip_prob", t.flip_prob);
  train.get("seed", t.seed);
  train.get("max_train_samples", t.max_train_samples);
  if (t.batch_size == 0) invalid("train.batch_size must be positive");
  if (!(t.lr0 >= 0.0)) invalid("train.lr0 must be non-negative");
  if (!(t.b_strategy.target >= 1.0)) invalid("train.b_target must be >= 1");
  if (t.b_strategy.kind == BStrategyKind::Linear && t.b_strategy.linear_epochs > t.epochs) {
    invalid("train.linear_epochs must not exceed train.epochs");
  }
  if (!(t.flip_prob >= 0.0 && t.flip_prob <= 1.0)) invalid("train.flip_prob must lie in [0, 1]");

  const Section eval(root, "eval",
                     {"grid", "n_grids", "confidence_threshold", "seed", "all_cells", "energy_mode",
                      "max_attempts_per_grid", "percentile", "pool_p", "negative_mode", "normalize_weights",
                      "epg_samples"});
  auto& e = c.eval;
  eval.get("grid", e.gridpg.n);
  eval.get("n_grids", e.gridpg.n_grids);
  eval.get("confidence_threshold", e.gridpg.confidence_threshold);
  eval.get("seed", e.gridpg.seed);
  eval.get("all_cells", e.gridpg.all_cells);
  eval.get_enum("energy_mode", e.gridpg.energy, energy_from_string);
  eval.get("max_attempts_per_grid", e.gridpg.max_attempts_per_grid);
  eval.get("percentile", e.percentile);
  eval.get("pool_p", e.pool.p);
  eval.get_enum("negative_mode", e.pool.negative_mode, negative_mode_from_string);
  eval.get("normalize_weights", e.pool.normalize_weights);
  eval.get("epg_samples", e.epg_samples);
  if (e.gridpg.n == 0) invalid("eval.grid must be positive");
  if (!(e.percentile > 0.0 && e.percentile <= 100.0)) invalid("eval.percentile must lie in (0, 100]");
  if (!(e.pool.p >= 0.0)) invalid("eval.pool_p must be non-negative");
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) { return parse_run_config(io::read_file(path)); }

std::string to_json(const RunConfig& c) {
  json root;
  root["data"] = json::parse(c.data.to_json());
  root["model"] = {{"width1", c.model.tiny.width1},
                   {"width2", c.model.tiny.width2},
                   {"centered_bn", c.model.tiny.centered_bn},
                   {"maxpool", c.model.tiny.maxpool},
                   {"init_seed", c.model.init_seed},
                   {"normalization", {{"means", c.model.normalization.means}, {"stds", c.model.normalization.stds}}}};
  root["convert"] = {{"swap_maxpool", c.convert.options.swap_maxpool},
                     {"unit_norm_weights", c.convert.options.unit_norm_weights},
                     {"verify_samples", c.convert.verify_samples},
                     {"verify_seed", c.convert.verify_seed}};
  const auto& t = c.train;
  root["train"] = {{"epochs", t.epochs},
                   {"batch_size", t.batch_size},
                   {"lr0", t.lr0},
                   {"beta1", t.adamw.beta1},
                   {"beta2", t.adamw.beta2},
                   {"eps", t.adamw.eps},
                   {"weight_decay", t.adamw.weight_decay},
                   {"b_strategy", to_string(t.b_strategy.kind)},
                   {"b_target", t.b_strategy.target},
                   {"linear_epochs", t.b_strategy.linear_epochs},
                   {"lambda_b", t.b_strategy.lambda_b},
                   {"b_plain_l2", t.b_strategy.plain_l2},
                   {"b_global", t.b_strategy.global},
                   {"b_lr_scale", t.b_strategy.lr_scale},
                   {"b_min", t.b_strategy.b_min},
                   {"b_max", t.b_strategy.b_max},
                   {"bias_strategy", to_string(t.bias_mode)},
                   {"lambda_bias", t.lambda_bias},
                   {"loss", to_string(t.loss)},
                   {"flip_prob", t.flip_prob},
                   {"seed", t.seed},
                   {"max_train_samples", t.max_train_samples}};
  const auto& e = c.eval;
  root["eval"] = {{"grid", e.gridpg.n},
                  {"n_grids", e.gridpg.n_grids},
                  {"confidence_threshold", e.gridpg.confidence_threshold},
                  {"seed", e.gridpg.seed},
                  {"all_cells", e.gridpg.all_cells},
                  {"energy_mode", energy_name(e.gridpg.energy)},
                  {"max_attempts_per_grid", e.gridpg.max_attempts_per_grid},
                  {"percentile", e.percentile},
                  {"pool_p", power_json(e.pool.p)},
                  {"negative_mode", to_string(e.pool.negative_mode)},
                  {"normalize_weights", e.pool.normalize_weights},
                  {"epg_samples", e.epg_samples}};
  return root.dump(2);
}

}  // namespace bcos
