#pragma once

#include <string>
#include <string_view>

#include "bcos/clip_pool.hpp"
#include "bcos/converter.hpp"
#include "bcos/datagen.hpp"
#include "bcos/metrics.hpp"
#include "bcos/trainer.hpp"
#include "bcos/zoo.hpp"

namespace bcos {

struct ModelSection {
  zoo::TinyCnnOptions tiny;
  NormalizationSpec normalization;
  std::uint64_t init_seed = 0;
};

struct ConvertSection {
  ConvertOptions options;
  std::size_t verify_samples = 256;
  std::uint64_t verify_seed = 0;
};

struct EvalSection {
  GridPgOptions gridpg;
  double percentile = 99.9;
  PoolConfig pool;
  std::size_t epg_samples = 0;  // 0: the whole eval split
};

/// Everything a pipeline run needs. Every section and key is optional in the
/// JSON form and falls back to the defaults here; unknown keys and wrong
/// types are rejected with InvalidConfig.
struct RunConfig {
  DatasetManifest data;
  ModelSection model;
  ConvertSection convert;
  TrainConfig train;
  EvalSection eval;
};

RunConfig parse_run_config(std::string_view text);
RunConfig load_run_config(const std::filesystem::path& path);

/// Canonical JSON with every key present.
std::string to_json(const RunConfig& config);

}  // namespace bcos
