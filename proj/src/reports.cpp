#include "bcos/reports.hpp"

#include <chrono>
#include <ctime>

#include "bcos/binary_io.hpp"
#include "json.hpp"

namespace bcos {

using json = nlohmann::ordered_json;

std::string timestamp_utc() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

namespace {

std::string finish(json j, bool timestamp) {
  if (timestamp) j["timestamp"] = timestamp_utc();
  return j.dump(2) + "\n";
}

}  // namespace

std::string report_json(const LocalisationReport& r, bool timestamp) {
  json j;
  j["metric"] = r.metric;
  j["n"] = r.n;
  j["mean_score"] = r.mean_defined ? json(r.mean_score) : json(nullptr);
  j["per_grid_scores"] = r.per_grid_scores;
  j["grids_evaluated"] = r.grids_evaluated;
  j["grids_rejected"] = r.grids_rejected;
  j["degenerate_maps"] = r.degenerate_maps;
  return finish(std::move(j), timestamp);
}

std::string report_json(const ConversionReport& r, bool timestamp) {
  json j;
  j["max_abs_logit_diff"] = r.max_abs_logit_diff;
  j["samples_checked"] = r.samples_checked;
  j["tolerance"] = r.tolerance;
  j["equivalent"] = r.equivalent;
  j["degenerate"] = r.degenerate;
  j["per_layer_notes"] = r.per_layer_notes;
  return finish(std::move(j), timestamp);
}

std::string train_log_jsonl(const std::vector<EpochLog>& log) {
  std::string out;
  for (const auto& e : log) out += to_json_line(e) + "\n";
  return out;
}

void write_tensor_blob(const std::filesystem::path& path, const Tensor<float>& tensor) {
  json side;
  side["dtype"] = "f32";
  side["byte_order"] = "little";
  side["shape"] = tensor.shape();
  io::write_file_atomic(path, io::encode_f32<float>(tensor.values()));
  io::write_file_atomic(path.string() + ".json", side.dump(2) + "\n");
}

Tensor<float> read_tensor_blob(const std::filesystem::path& path) {
  Shape shape;
  try {
    const json side = json::parse(io::read_file(path.string() + ".json"));
    if (side.at("dtype").get<std::string>() != "f32" || side.at("byte_order").get<std::string>() != "little") {
      throw Error(ErrorCode::CorruptHeader, "only little-endian f32 blobs are supported");
    }
    shape = side.at("shape").get<Shape>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::CorruptHeader, path.string() + ".json: " + e.what());
  }
  if (shape.empty() || shape_numel(shape) == 0) throw Error(ErrorCode::CorruptHeader, "blob sidecar has an empty shape");
  const std::string bytes = io::read_file(path);
  if (bytes.size() < 4 * shape_numel(shape)) throw Error(ErrorCode::TruncatedBlob, path.string() + " is shorter than its shape");
  if (bytes.size() > 4 * shape_numel(shape)) throw Error(ErrorCode::CorruptHeader, path.string() + " is longer than its shape");
  return Tensor<float>(shape, io::decode_f32<float>(bytes, 0, shape_numel(shape)));
}

}  // namespace bcos
