#include "doctest.h"

#include <unistd.h>

#include <filesystem>

#include "bcos/binary_io.hpp"
#include "bcos/checkpoint.hpp"
#include "bcos/reports.hpp"
#include "bcos/run_config.hpp"
#include "bcos/zoo.hpp"

using namespace bcos;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("bcos_io_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<zoo::NamedModel<float>> checkpoint_models() {
  Rng rng(21);
  auto models = zoo::conversion_zoo<float>(4, 12, rng);
  for (auto& m : zoo::bcos_zoo<float>(4, 12, 2.5f, true, rng)) models.push_back({"bcos_bias_" + m.name, m.model});
  for (auto& m : zoo::bcos_zoo<float>(4, 12, 2.0f, false, rng)) models.push_back({"bcos_" + m.name, m.model});
  auto tiny = zoo::tiny_cnn<float>(4, 12, rng, {});
  tiny.layers.push_back(logit_bias_layer(-1.25f));
  models.push_back({"tiny_logit_bias", tiny});
  // Learnable flags, unit-norm weights and odd scalars survive too.
  auto learn = models[models.size() - 2].model;
  visit_layers(learn.layers, [](LayerSpec<float>& l) {
    if (l.is_bcos()) {
      l.b_learnable = true;
      l.unit_norm_weights = true;
      l.b_exponent = 1.0f + 1.0f / 3.0f;
    }
    if (l.is_batchnorm()) {
      l.bn_eps = 1e-12f;
      l.bn_momentum = 0.37f;
    }
  });
  models.push_back({"learnable_unit_norm", learn});
  return models;
}

template <typename Fn>
ErrorCode error_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::Io;
}

}  // namespace

TEST_CASE("checkpoint round trip is bit-exact") {
  Rng rng(3);
  for (const auto& [name, model] : checkpoint_models()) {
    CAPTURE(name);
    const std::string bytes = encode_checkpoint(model);
    const auto loaded = decode_checkpoint(bytes);
    CHECK(encode_checkpoint(loaded) == bytes);
    const auto x = rng.uniform_tensor<float>(model.input_shape(16), -2, 2);
    const auto a = forward(model, x, Mode::Eval, false).logits;
    const auto b = forward(loaded, x, Mode::Eval, false).logits;
    CHECK(a == b);
    CHECK(loaded.input_channels == model.input_channels);
    CHECK(loaded.gap_order == model.gap_order);
    CHECK(loaded.normalization.means == model.normalization.means);
    std::size_t layers_a = 0, layers_b = 0;
    visit_layers(model.layers, [&](const LayerSpec<float>&) { ++layers_a; });
    visit_layers(loaded.layers, [&](const LayerSpec<float>& l) {
      ++layers_b;
      if (l.is_bcos()) CHECK(l.b_exponent >= 1.0f);
    });
    CHECK(layers_a == layers_b);
  }
}

TEST_CASE("checkpoint file save-load-save is hash-identical") {
  const auto dir = temp_dir("ckpt");
  const auto model = checkpoint_models().at(1).model;
  save_checkpoint(model, dir / "a.bcos");
  save_checkpoint(load_checkpoint(dir / "a.bcos"), dir / "b.bcos");
  const auto a = io::read_file(dir / "a.bcos"), b = io::read_file(dir / "b.bcos");
  CHECK(std::hash<std::string>{}(a) == std::hash<std::string>{}(b));
  CHECK(a == b);
  CHECK_FALSE(fs::exists(dir / "a.bcos.tmp"));
  fs::remove_all(dir);
}

TEST_CASE("checkpoint layout") {
  const auto model = checkpoint_models().at(0).model;
  const std::string bytes = encode_checkpoint(model);
  CHECK(bytes.substr(0, 4) == "BCOS");
  CHECK(io::get_le<std::uint32_t>(bytes, 4) == 1u);
  const auto header_len = io::get_le<std::uint64_t>(bytes, 8);
  std::size_t params = 0;
  visit_layers(model.layers, [&](const LayerSpec<float>& l) {
    for (const auto* t : {&l.weight, &l.bias, &l.bn_scale, &l.running_mean, &l.running_var, &l.running_sq}) {
      params += t->size();
    }
    for (const auto& b : l.branches) params += b.size();
  });
  CHECK(bytes.size() == 16 + header_len + 4 * params);
}

TEST_CASE("checkpoint errors") {
  const std::string good = encode_checkpoint(checkpoint_models().at(2).model);
  const auto header_len = io::get_le<std::uint64_t>(good, 8);

  SUBCASE("bad magic") {
    std::string bad = good;
    bad[0] = 'X';
    CHECK(error_of([&] { decode_checkpoint(bad); }) == ErrorCode::BadMagic);
    CHECK(error_of([&] { decode_checkpoint(""); }) == ErrorCode::BadMagic);
    CHECK(error_of([&] { decode_checkpoint("BC"); }) == ErrorCode::BadMagic);
  }
  SUBCASE("version 2") {
    std::string v2 = good.substr(0, 4);
    io::put_le<std::uint32_t>(v2, 2);
    v2 += good.substr(8);
    CHECK(error_of([&] { decode_checkpoint(v2); }) == ErrorCode::VersionUnsupported);
    CHECK(error_of([&] { decode_checkpoint(v2.substr(0, 8)); }) == ErrorCode::VersionUnsupported);
  }
  SUBCASE("every truncation is reported as truncated") {
    for (std::size_t len : {std::size_t{5}, std::size_t{15}, std::size_t{16}, std::size_t{16 + header_len / 2},
                            std::size_t{16 + header_len}, good.size() - 1, good.size() - 4}) {
      CAPTURE(len);
      CHECK(error_of([&] { decode_checkpoint(good.substr(0, len)); }) == ErrorCode::TruncatedBlob);
    }
  }
  SUBCASE("trailing bytes") {
    CHECK(error_of([&] { decode_checkpoint(good + "xxxx"); }) == ErrorCode::CorruptHeader);
  }
  SUBCASE("malformed header") {
    std::string bad = good;
    bad[16] = '[';
    CHECK(error_of([&] { decode_checkpoint(bad); }) == ErrorCode::CorruptHeader);
  }
  SUBCASE("unknown layer kind") {
    std::string bad = good;
    const auto pos = bad.find("\"kind\":\"");
    REQUIRE(pos != std::string::npos);
    bad[pos + 8] = 'Q';
    CHECK(error_of([&] { decode_checkpoint(bad); }) == ErrorCode::CorruptHeader);
  }
  SUBCASE("missing file") {
    CHECK(error_of([&] { load_checkpoint("/nonexistent/model.bcos"); }) == ErrorCode::Io);
  }
}

TEST_CASE("run config: defaults, canonical round trip, strictness") {
  const RunConfig defaults = parse_run_config("{}");
  CHECK(defaults.train.lr0 == TrainConfig{}.lr0);
  CHECK(defaults.data.n_classes == 3);
  CHECK(defaults.eval.gridpg.n == 2);
  CHECK(defaults.eval.gridpg.n_grids == 50);
  CHECK(defaults.convert.verify_samples == 256);

  const std::string canonical = to_json(defaults);
  CHECK(to_json(parse_run_config(canonical)) == canonical);

  const RunConfig c = parse_run_config(R"({
    "data": {"n_classes": 4, "seed": 9},
    "model": {"width1": 8, "normalization": {"means": [0.4, 0.5, 0.6], "stds": [0.2, 0.3, 0.25]}},
    "train": {"epochs": 6, "b_strategy": "linear", "linear_epochs": 3, "bias_strategy": "decay",
              "lambda_bias": 0.2, "loss": "sigmoid_bce"},
    "eval": {"pool_p": "inf", "negative_mode": "absolute", "energy_mode": "clamp_then_sum"}
  })");
  CHECK(c.data.n_classes == 4);
  CHECK(c.data.classes.size() == 4);
  CHECK(c.model.tiny.width1 == 8);
  CHECK(c.model.normalization.means[2] == 0.6);
  CHECK(c.train.b_strategy.kind == BStrategyKind::Linear);
  CHECK(c.train.bias_mode == BiasMode::Decay);
  CHECK(c.train.loss == LossKind::SigmoidBCE);
  CHECK(std::isinf(c.eval.pool.p));
  CHECK(c.eval.pool.negative_mode == NegativeMode::Absolute);
  CHECK(c.eval.gridpg.energy == EnergyMode::ClampThenSum);
  CHECK(to_json(parse_run_config(to_json(c))) == to_json(c));

  for (const char* bad : {
           R"({"extra": {}})",
           R"({"train": {"epochz": 3}})",
           R"({"model": {"normalization": {"mean": [0.5, 0.5, 0.5]}}})",
           R"({"train": {"epochs": -1}})",
           R"({"train": {"epochs": 2.5}})",
           R"({"train": {"lr0": "fast"}})",
           R"({"train": {"b_strategy": "cubic"}})",
           R"({"train": {"epochs": 2, "b_strategy": "linear", "linear_epochs": 3}})",
           R"({"train": {"batch_size": 0}})",
           R"({"data": {"n_classes": 10}})",
           R"({"model": {"normalization": {"stds": [0.0, 1.0, 1.0]}}})",
           R"({"eval": {"percentile": 0}})",
           R"({"convert": {"swap_maxpool": 1}})",
           R"([1, 2])",
           R"({"train": )",
       }) {
    CAPTURE(bad);
    const ErrorCode code = error_of([&] { parse_run_config(bad); });
    CHECK((code == ErrorCode::InvalidConfig || code == ErrorCode::TooManyClasses));
  }
}

TEST_CASE("reports are deterministic without a timestamp") {
  LocalisationReport r;
  r.n = 2;
  r.mean_score = 0.75;
  r.mean_defined = true;
  r.per_grid_scores = {0.5, 1.0};
  r.grids_evaluated = 2;
  const std::string a = report_json(r, false);
  CHECK(a == report_json(r, false));
  CHECK(a.find("timestamp") == std::string::npos);
  CHECK(a.find("\"mean_score\": 0.75") != std::string::npos);
  CHECK(report_json(r, true).find("\"timestamp\": \"") != std::string::npos);
  r.mean_defined = false;
  CHECK(report_json(r, false).find("\"mean_score\": null") != std::string::npos);

  ConversionReport c;
  c.max_abs_logit_diff = 1e-7;
  c.samples_checked = 256;
  c.per_layer_notes = {"layer 0: Conv2d -> BcosConv2d"};
  CHECK(report_json(c, false) == report_json(c, false));
  CHECK(report_json(c, false).find("\"samples_checked\": 256") != std::string::npos);

  std::vector<EpochLog> log(3);
  log[1].epoch = 1;
  const std::string jsonl = train_log_jsonl(log);
  CHECK(std::count(jsonl.begin(), jsonl.end(), '\n') == 3);
}

TEST_CASE("tensor blobs with sidecars") {
  const auto dir = temp_dir("blob");
  Rng rng(4);
  const auto t = rng.uniform_tensor<float>({3, 5, 2}, -1, 1);
  write_tensor_blob(dir / "t.bin", t);
  CHECK(fs::file_size(dir / "t.bin") == 4 * 30);
  CHECK(fs::exists(dir / "t.bin.json"));
  CHECK(read_tensor_blob(dir / "t.bin") == t);
  io::write_file_atomic(dir / "t.bin", io::read_file(dir / "t.bin").substr(0, 50));
  CHECK(error_of([&] { read_tensor_blob(dir / "t.bin"); }) == ErrorCode::TruncatedBlob);
  io::write_file_atomic(dir / "t.bin.json", "{\"dtype\":\"f16\",\"byte_order\":\"little\",\"shape\":[1]}");
  CHECK(error_of([&] { read_tensor_blob(dir / "t.bin"); }) == ErrorCode::CorruptHeader);
  fs::remove_all(dir);
}
