// Command-line driver: dataset generation, baseline training, conversion,
// fine-tuning and evaluation. Reports go to stdout or --report as JSON.

#include <cmath>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "bcos/binary_io.hpp"
#include "bcos/checkpoint.hpp"
#include "bcos/reports.hpp"
#include "bcos/run_config.hpp"
#include "json.hpp"

using namespace bcos;
using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

// Exit codes: 1 for anything wrong with the invocation or its inputs, 2 for
// failures while computing.
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::DivergedLoss:
    case ErrorCode::NonFiniteActivation:
    case ErrorCode::NonFiniteGradient:
    case ErrorCode::InsufficientConfidentSamples:
    case ErrorCode::LowConfidenceCell:
    case ErrorCode::TooLarge:
    case ErrorCode::Io:
      return kExitRuntime;
    default:
      return kExitValidation;
  }
}

struct Common {
  std::string config_path;
  std::string report_path;
  bool no_timestamp = false;
};

struct Overrides {
  // data
  std::optional<std::size_t> n_classes, n_train, n_eval, image_size;
  std::optional<std::uint64_t> data_seed;
  // model
  std::optional<std::size_t> width1, width2;
  std::optional<std::uint64_t> init_seed;
  // convert
  bool swap_maxpool = false, unit_norm_weights = false;
  std::optional<std::size_t> verify_samples;
  std::optional<std::uint64_t> verify_seed;
  // train
  std::optional<std::size_t> epochs, batch_size, linear_epochs, max_train_samples;
  std::optional<double> lr0, weight_decay, b_target, lambda_b, lambda_bias, flip_prob, b_lr_scale;
  std::optional<std::uint64_t> train_seed;
  std::optional<std::string> b_strategy, bias_strategy, loss;
  bool b_plain_l2 = false, b_global = false;
  // eval
  std::optional<std::size_t> grid, n_grids, epg_samples;
  std::optional<double> confidence_threshold, percentile;
  std::optional<std::uint64_t> eval_seed;
  std::optional<std::string> energy_mode, pool_p, negative_mode;
  bool no_normalize_weights = false;
};

template <typename U>
void set_if(const std::optional<U>& v, U& dst) {
  if (v) dst = *v;
}

[[noreturn]] void invalid(const std::string& what) { throw Error(ErrorCode::InvalidConfig, what); }

RunConfig resolve_config(const Common& common, const Overrides& o) {
  RunConfig c = common.config_path.empty() ? parse_run_config("{}") : load_run_config(common.config_path);
  set_if(o.n_classes, c.data.n_classes);
  set_if(o.n_train, c.data.n_train);
  set_if(o.n_eval, c.data.n_eval);
  set_if(o.image_size, c.data.image_size);
  set_if(o.data_seed, c.data.seed);
  if (o.n_classes) c.data.classes.clear();
  c.data.resolve();
  set_if(o.width1, c.model.tiny.width1);
  set_if(o.width2, c.model.tiny.width2);
  set_if(o.init_seed, c.model.init_seed);
  if (o.swap_maxpool) c.convert.options.swap_maxpool = true;
  if (o.unit_norm_weights) c.convert.options.unit_norm_weights = true;
  set_if(o.verify_samples, c.convert.verify_samples);
  set_if(o.verify_seed, c.convert.verify_seed);
  auto& t = c.train;
  set_if(o.epochs, t.epochs);
  set_if(o.batch_size, t.batch_size);
  set_if(o.linear_epochs, t.b_strategy.linear_epochs);
  set_if(o.max_train_samples, t.max_train_samples);
  set_if(o.lr0, t.lr0);
  set_if(o.weight_decay, t.adamw.weight_decay);
  set_if(o.b_target, t.b_strategy.target);
  set_if(o.lambda_b, t.b_strategy.lambda_b);
  set_if(o.lambda_bias, t.lambda_bias);
  set_if(o.flip_prob, t.flip_prob);
  set_if(o.b_lr_scale, t.b_strategy.lr_scale);
  set_if(o.train_seed, t.seed);
  if (o.b_strategy) {
    const auto k = b_strategy_from_string(*o.b_strategy);
    if (!k) invalid("--b-strategy: unknown value '" + *o.b_strategy + "'");
    t.b_strategy.kind = *k;
  }
  if (o.bias_strategy) {
    const auto k = bias_mode_from_string(*o.bias_strategy);
    if (!k) invalid("--bias-strategy: unknown value '" + *o.bias_strategy + "'");
    t.bias_mode = *k;
  }
  if (o.loss) {
    const auto k = loss_from_string(*o.loss);
    if (!k) invalid("--loss: unknown value '" + *o.loss + "'");
    t.loss = *k;
  }
  if (o.b_plain_l2) t.b_strategy.plain_l2 = true;
  if (o.b_global) t.b_strategy.global = true;
  if (t.b_strategy.kind == BStrategyKind::Linear && t.b_strategy.linear_epochs > t.epochs) {
    invalid("--linear-epochs must not exceed --epochs");
  }
  auto& e = c.eval;
  set_if(o.grid, e.gridpg.n);
  set_if(o.n_grids, e.gridpg.n_grids);
  set_if(o.epg_samples, e.epg_samples);
  set_if(o.confidence_threshold, e.gridpg.confidence_threshold);
  set_if(o.percentile, e.percentile);
  set_if(o.eval_seed, e.gridpg.seed);
  if (o.energy_mode) {
    if (*o.energy_mode == "sum_then_clamp") e.gridpg.energy = EnergyMode::SumThenClamp;
    else if (*o.energy_mode == "clamp_then_sum") e.gridpg.energy = EnergyMode::ClampThenSum;
    else invalid("--energy-mode: unknown value '" + *o.energy_mode + "'");
  }
  if (o.pool_p) {
    if (*o.pool_p == "inf") {
      e.pool.p = kInfinitePower;
    } else {
      try {
        std::size_t used = 0;
        e.pool.p = std::stod(*o.pool_p, &used);
        if (used != o.pool_p->size()) throw std::invalid_argument("trailing characters");
      } catch (const std::exception&) {
        invalid("--p: expected a number or 'inf', got '" + *o.pool_p + "'");
      }
    }
    if (!(e.pool.p >= 0.0)) invalid("--p must be non-negative");
  }
  if (o.negative_mode) {
    const auto k = negative_mode_from_string(*o.negative_mode);
    if (!k) invalid("--negative-mode: unknown value '" + *o.negative_mode + "'");
    e.pool.negative_mode = *k;
  }
  if (o.no_normalize_weights) e.pool.normalize_weights = false;
  return c;
}

void emit(const Common& common, const std::string& text) {
  if (common.report_path.empty()) {
    std::cout << text;
    std::cout.flush();
  } else {
    io::write_file_atomic(common.report_path, text);
  }
}

std::string finish(json j, const Common& common) {
  if (!common.no_timestamp) j["timestamp"] = timestamp_utc();
  return j.dump(2) + "\n";
}

std::vector<std::size_t> labels_of(const Dataset& d, const std::vector<std::size_t>& idx) {
  std::vector<std::size_t> out;
  for (std::size_t i : idx) out.push_back(d.labels.at(i));
  return out;
}

void check_model_matches_data(const ModelGraph<float>& model, const Dataset& data) {
  if (model.class_count != data.manifest.n_classes) {
    invalid("model has " + std::to_string(model.class_count) + " classes, dataset " +
            std::to_string(data.manifest.n_classes));
  }
}

// Shared by train-baseline and bcosify-finetune: trains, writes the log and
// the checkpoint (the last good one after divergence).
int run_training(ModelGraph<float> model, const Dataset& data, const TrainConfig& cfg, const std::string& out,
                 const std::string& log_path, const Common& common) {
  const auto result = train(model, data, cfg, [](const EpochLog& e) { std::cerr << to_json_line(e) << "\n"; });
  save_checkpoint(result.model, out);
  if (!log_path.empty()) io::write_file_atomic(log_path, train_log_jsonl(result.log));
  json j;
  j["checkpoint"] = out;
  j["epochs_completed"] = result.log.size();
  j["diverged"] = result.diverged;
  if (!result.log.empty()) {
    j["final"] = json::parse(to_json_line(result.log.back()));
  }
  j["initial_mean_abs_bias"] = result.initial_mean_abs_bias;
  j["initial_mean_B"] = result.initial_mean_b;
  emit(common, finish(std::move(j), common));
  if (result.diverged) {
    std::cerr << "error: DivergedLoss: " << result.diverged_message << " (last good model saved)\n";
    return kExitRuntime;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"B-cos conversion, fine-tuning and evaluation toolkit"};
  app.require_subcommand(1);
  Common common;
  Overrides o;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "RunConfig JSON file (flags override it)")
        ->check(CLI::ExistingFile);
    sub->add_option("--report", common.report_path, "write the JSON report here instead of stdout");
    sub->add_flag("--no-timestamp", common.no_timestamp, "omit the timestamp from reports");
  };
  auto add_train = [&](CLI::App* sub) {
    sub->add_option("--epochs", o.epochs);
    sub->add_option("--batch-size", o.batch_size);
    sub->add_option("--lr0", o.lr0);
    sub->add_option("--weight-decay", o.weight_decay);
    sub->add_option("--flip-prob", o.flip_prob);
    sub->add_option("--seed", o.train_seed);
    sub->add_option("--max-train-samples", o.max_train_samples);
    sub->add_option("--loss", o.loss, "softmax_ce | sigmoid_bce");
  };

  std::string data_dir, out_path, in_path, log_path, a_path, b_path, model_path;

  auto* datagen = app.add_subcommand("datagen", "generate the synthetic shapes dataset");
  add_common(datagen);
  datagen->add_option("--out", data_dir, "output directory")->required();
  datagen->add_option("--n-classes", o.n_classes);
  datagen->add_option("--n-train", o.n_train);
  datagen->add_option("--n-eval", o.n_eval);
  datagen->add_option("--image-size", o.image_size);
  datagen->add_option("--seed", o.data_seed);

  auto* train_base = app.add_subcommand("train-baseline", "train a conventional TinyCNN");
  add_common(train_base);
  add_train(train_base);
  train_base->add_option("--data", data_dir)->required()->check(CLI::ExistingDirectory);
  train_base->add_option("--out", out_path, "checkpoint path")->required();
  train_base->add_option("--log", log_path, "TrainLog JSON-lines path");
  train_base->add_option("--width1", o.width1);
  train_base->add_option("--width2", o.width2);
  train_base->add_option("--init-seed", o.init_seed);

  auto* convert = app.add_subcommand("convert", "rewrite a conventional model as a B-cos model with B = 1");
  add_common(convert);
  convert->add_option("--in", in_path)->required()->check(CLI::ExistingFile);
  convert->add_option("--out", out_path)->required();
  convert->add_flag("--swap-maxpool", o.swap_maxpool, "replace MaxPool by AvgPool (not equivalent)");
  convert->add_flag("--unit-norm-weights", o.unit_norm_weights, "normalize B-cos weight rows (not equivalent)");
  convert->add_option("--n", o.verify_samples, "samples for the equivalence check");

  auto* verify = app.add_subcommand("verify", "compare a conventional model with its converted form");
  add_common(verify);
  verify->add_option("--a", a_path, "conventional checkpoint")->required()->check(CLI::ExistingFile);
  verify->add_option("--b", b_path, "converted checkpoint")->required()->check(CLI::ExistingFile);
  verify->add_option("--n", o.verify_samples);
  verify->add_option("--seed", o.verify_seed);

  auto* finetune = app.add_subcommand("bcosify-finetune", "raise B, handle biases and fine-tune");
  add_common(finetune);
  add_train(finetune);
  finetune->add_option("--in", in_path, "converted (or conventional) checkpoint")->required()->check(CLI::ExistingFile);
  finetune->add_option("--data", data_dir)->required()->check(CLI::ExistingDirectory);
  finetune->add_option("--out", out_path)->required();
  finetune->add_option("--log", log_path);
  finetune->add_option("--b-strategy", o.b_strategy, "immediate | linear | learnable");
  finetune->add_option("--b-target", o.b_target);
  finetune->add_option("--linear-epochs", o.linear_epochs);
  finetune->add_option("--lambda-b", o.lambda_b);
  finetune->add_flag("--b-plain-l2", o.b_plain_l2, "learnable B: lambda_b * B^2 instead of decay toward the target");
  finetune->add_flag("--b-global", o.b_global, "learnable B: one value shared by all layers");
  finetune->add_option("--b-lr-scale", o.b_lr_scale);
  finetune->add_option("--bias-strategy", o.bias_strategy, "zero | keep | decay");
  finetune->add_option("--lambda-bias", o.lambda_bias);

  std::size_t index = 0;
  std::optional<std::size_t> class_k;
  std::string ppm_path, map_path;
  auto* explain = app.add_subcommand("explain", "contribution map and color explanation of one eval image");
  add_common(explain);
  explain->add_option("--model", model_path)->required()->check(CLI::ExistingFile);
  explain->add_option("--data", data_dir)->required()->check(CLI::ExistingDirectory);
  explain->add_option("--index", index, "position in the eval split");
  explain->add_option("--class", class_k, "class to explain (default: the label)");
  explain->add_option("--out-ppm", ppm_path, "color explanation (6-channel models)");
  explain->add_option("--out-map", map_path, "signed [C,H,W] contributions as an f32 blob");
  explain->add_option("--percentile", o.percentile);
  explain->add_option("--energy-mode", o.energy_mode, "sum_then_clamp | clamp_then_sum");

  auto* gridpg = app.add_subcommand("gridpg", "grid pointing game over the eval split");
  add_common(gridpg);
  gridpg->add_option("--model", model_path)->required()->check(CLI::ExistingFile);
  gridpg->add_option("--data", data_dir)->required()->check(CLI::ExistingDirectory);
  gridpg->add_option("--grid", o.grid);
  gridpg->add_option("--n-grids", o.n_grids);
  gridpg->add_option("--seed", o.eval_seed);
  gridpg->add_option("--confidence-threshold", o.confidence_threshold);
  gridpg->add_option("--energy-mode", o.energy_mode, "sum_then_clamp | clamp_then_sum");

  auto* epg = app.add_subcommand("epg", "energy pointing game over the eval split");
  add_common(epg);
  epg->add_option("--model", model_path)->required()->check(CLI::ExistingFile);
  epg->add_option("--data", data_dir)->required()->check(CLI::ExistingDirectory);
  epg->add_option("--samples", o.epg_samples, "first N eval images (0: all)");
  epg->add_option("--energy-mode", o.energy_mode, "sum_then_clamp | clamp_then_sum");

  std::string values_path, text_path;
  std::size_t height = 0, width = 0;
  auto* pool = app.add_subcommand("featureclip-pool", "cosine-power pooling of value tokens");
  add_common(pool);
  pool->add_option("--values", values_path, "[N,D] f32 blob")->required()->check(CLI::ExistingFile);
  pool->add_option("--text", text_path, "[D] f32 blob")->required()->check(CLI::ExistingFile);
  pool->add_option("--p", o.pool_p, "cosine power (number or inf)");
  pool->add_option("--negative-mode", o.negative_mode, "clamp_zero | absolute | signed");
  pool->add_flag("--no-normalize", o.no_normalize_weights);
  pool->add_option("--height", height, "token grid height for --out-map");
  pool->add_option("--width", width, "token grid width for --out-map");
  pool->add_option("--out-map", map_path, "[H,W] weight map as an f32 blob");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  }

  try {
    const RunConfig cfg = resolve_config(common, o);

    if (datagen->parsed()) {
      const Dataset d = generate(cfg.data, data_dir);
      json j = json::parse(d.manifest.to_json());
      j["dir"] = data_dir;
      j["samples"] = d.size();
      emit(common, finish(std::move(j), common));
      return 0;
    }

    if (train_base->parsed()) {
      const Dataset data = load_dataset(data_dir);
      Rng rng(cfg.model.init_seed);
      auto model = zoo::tiny_cnn<float>(data.manifest.n_classes, data.manifest.image_size, rng, cfg.model.tiny);
      model.normalization = cfg.model.normalization;
      TrainConfig t = cfg.train;
      t.b_schedule_enabled = false;
      t.bias_mode = BiasMode::Keep;
      return run_training(std::move(model), data, t, out_path, log_path, common);
    }

    if (convert->parsed()) {
      const auto base = load_checkpoint(in_path);
      ConversionReport report;
      std::vector<std::string> notes;
      const auto converted = bcosify(base, base.normalization, cfg.convert.options, &notes);
      report = verify_equivalence(base, converted, base.normalization, cfg.convert.verify_samples,
                                  cfg.convert.verify_seed);
      report.per_layer_notes = notes;
      save_checkpoint(converted, out_path);
      emit(common, report_json(report, !common.no_timestamp));
      return 0;
    }

    if (verify->parsed()) {
      const auto a = load_checkpoint(a_path);
      const auto b = load_checkpoint(b_path);
      const auto report = verify_equivalence(a, b, a.normalization, cfg.convert.verify_samples, cfg.convert.verify_seed);
      emit(common, report_json(report, !common.no_timestamp));
      return 0;
    }

    if (finetune->parsed()) {
      const Dataset data = load_dataset(data_dir);
      auto model = load_checkpoint(in_path);
      if (model.input_channels == 3) {
        std::cerr << "note: converting the conventional input model first\n";
        model = bcosify(model, model.normalization, cfg.convert.options, nullptr);
      }
      check_model_matches_data(model, data);
      TrainConfig t = cfg.train;
      t.b_schedule_enabled = true;
      return run_training(std::move(model), data, t, out_path, log_path, common);
    }

    if (explain->parsed()) {
      const Dataset data = load_dataset(data_dir);
      const auto model = load_checkpoint(model_path);
      check_model_matches_data(model, data);
      const auto eval_idx = data.eval_indices();
      if (index >= eval_idx.size()) {
        throw Error(ErrorCode::IndexOutOfRange, "--index " + std::to_string(index) + " outside the eval split");
      }
      const std::size_t item = eval_idx[index];
      const std::size_t k = class_k.value_or(data.labels[item]);
      if (k >= model.class_count) throw Error(ErrorCode::IndexOutOfRange, "--class out of range");
      auto raw = raw_images<float>(data, {item});
      raw = raw.reshaped({raw.dim(1), raw.dim(2), raw.dim(3)});
      const auto x = encode_input(raw, model.normalization, model.input_channels);
      const auto attr = contribution_map(model, x, k, cfg.eval.gridpg.energy);
      json j;
      j["eval_index"] = index;
      j["sample"] = item;
      j["label"] = data.labels[item];
      j["class"] = k;
      j["logit"] = attr.logit;
      j["residual"] = attr.residual;
      j["epg"] = epg_score(attr, data.bboxes[item]).score;
      if (!map_path.empty()) {
        write_tensor_blob(map_path, attr.signed_map);
        j["map"] = map_path;
      }
      if (!ppm_path.empty()) {
        if (model.input_channels != 6) invalid("--out-ppm needs a 6-channel model");
        const auto row = dynamic_row(model, x, k);
        io::write_file_atomic(ppm_path, encode_ppm(render_color(row, cfg.eval.percentile)));
        j["ppm"] = ppm_path;
      }
      emit(common, finish(std::move(j), common));
      return 0;
    }

    if (gridpg->parsed()) {
      const Dataset data = load_dataset(data_dir);
      const auto model = load_checkpoint(model_path);
      check_model_matches_data(model, data);
      const auto idx = data.eval_indices();
      const auto report = gridpg_evaluate(model, raw_images<float>(data, idx), labels_of(data, idx), cfg.eval.gridpg);
      emit(common, report_json(report, !common.no_timestamp));
      return 0;
    }

    if (epg->parsed()) {
      const Dataset data = load_dataset(data_dir);
      const auto model = load_checkpoint(model_path);
      check_model_matches_data(model, data);
      auto idx = data.eval_indices();
      if (cfg.eval.epg_samples > 0 && idx.size() > cfg.eval.epg_samples) idx.resize(cfg.eval.epg_samples);
      std::vector<BBox> boxes;
      for (std::size_t i : idx) boxes.push_back(data.bboxes[i]);
      const auto report =
          epg_evaluate(model, raw_images<float>(data, idx), labels_of(data, idx), boxes, cfg.eval.gridpg.energy);
      emit(common, report_json(report, !common.no_timestamp));
      return 0;
    }

    if (pool->parsed()) {
      const auto values = read_tensor_blob(values_path);
      const auto text = read_tensor_blob(text_path);
      const auto result = cosine_power_pool(values, text, cfg.eval.pool);
      json j;
      j["p"] = std::isinf(cfg.eval.pool.p) ? json("inf") : json(cfg.eval.pool.p);
      j["negative_mode"] = to_string(cfg.eval.pool.negative_mode);
      j["pooled"] = std::vector<float>(result.pooled.values().begin(), result.pooled.values().end());
      j["weights"] = std::vector<float>(result.weights.values().begin(), result.weights.values().end());
      j["all_zero_weights"] = result.all_zero_weights;
      if (!result.all_zero_weights) j["weight_entropy"] = map_entropy(result.weights);
      if (!map_path.empty()) {
        if (height * width != values.dim(0)) invalid("--height x --width must equal the number of value tokens");
        write_tensor_blob(map_path, pooled_similarity_map(values, text, height, width, cfg.eval.pool));
        j["map"] = map_path;
      }
      emit(common, finish(std::move(j), common));
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
