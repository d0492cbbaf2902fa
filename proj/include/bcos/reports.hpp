#pragma once

#include <filesystem>
#include <string>

#include "bcos/converter.hpp"
#include "bcos/metrics.hpp"
#include "bcos/trainer.hpp"

namespace bcos {

/// Current UTC time as ISO 8601, e.g. 2024-05-01T12:00:00Z.
std::string timestamp_utc();

/// Pretty JSON reports. With `timestamp` false the output depends only on
/// the report contents.
std::string report_json(const LocalisationReport& report, bool timestamp);
std::string report_json(const ConversionReport& report, bool timestamp);

/// One JSON object per epoch, newline-terminated.
std::string train_log_jsonl(const std::vector<EpochLog>& log);

/// Raw little-endian f32 blob at `path` plus a `<path>.json` sidecar with
/// dtype and shape.
void write_tensor_blob(const std::filesystem::path& path, const Tensor<float>& tensor);
Tensor<float> read_tensor_blob(const std::filesystem::path& path);

}  // namespace bcos
