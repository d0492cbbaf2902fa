#include "bcos/checkpoint.hpp"

#include <set>

#include "bcos/binary_io.hpp"
#include "json.hpp"

namespace bcos {

using json = nlohmann::ordered_json;

namespace {

constexpr std::string_view kMagic = "BCOS";
constexpr std::size_t kPreambleBytes = 4 + 4 + 8;

class BlobWriter {
 public:
  json add(const Tensor<float>& t) {
    json d;
    d["shape"] = t.shape();
    d["offset"] = blobs_.size();
    d["bytes"] = 4 * t.size();
    blobs_ += io::encode_f32<float>(t.values());
    return d;
  }
  const std::string& blobs() const { return blobs_; }

 private:
  std::string blobs_;
};

json encode_layers(const std::vector<LayerSpec<float>>& layers, BlobWriter& blobs) {
  json out = json::array();
  for (const auto& l : layers) {
    json j;
    j["kind"] = to_string(l.kind);
    j["has_bias"] = l.has_bias();
    j["stride"] = l.stride;
    j["padding"] = l.padding;
    j["B"] = static_cast<double>(l.b_exponent);
    j["b_learnable"] = l.b_learnable;
    j["unit_norm_weights"] = l.unit_norm_weights;
    j["bn_eps"] = static_cast<double>(l.bn_eps);
    j["bn_momentum"] = static_cast<double>(l.bn_momentum);
    j["pool_size"] = l.pool_size;
    j["logit_bias"] = static_cast<double>(l.logit_bias);
    json tensors = json::object();
    const std::pair<const char*, const Tensor<float>*> named[] = {
        {"weight", &l.weight},           {"bias", &l.bias},
        {"bn_scale", &l.bn_scale},       {"running_mean", &l.running_mean},
        {"running_var", &l.running_var}, {"running_sq", &l.running_sq},
    };
    for (const auto& [name, t] : named) {
      if (!t->empty()) tensors[name] = blobs.add(*t);
    }
    json branches = json::array();
    for (const auto& b : l.branches) branches.push_back(blobs.add(b));
    j["tensors"] = tensors;
    j["branches"] = branches;
    j["body"] = encode_layers(l.body, blobs);
    out.push_back(std::move(j));
  }
  return out;
}

[[noreturn]] void corrupt(const std::string& what) { throw Error(ErrorCode::CorruptHeader, what); }

class BlobReader {
 public:
  explicit BlobReader(std::string_view blobs) : blobs_(blobs) {}

  Tensor<float> read(const json& d) {
    const Shape shape = d.at("shape").get<Shape>();
    const std::size_t offset = d.at("offset").get<std::size_t>();
    const std::size_t bytes = d.at("bytes").get<std::size_t>();
    if (shape.empty() || shape_numel(shape) == 0) corrupt("tensor with an empty shape");
    if (bytes != 4 * shape_numel(shape)) corrupt("tensor byte count does not match its shape");
    if (offset != cursor_) corrupt("tensor blobs are not contiguous in declaration order");
    cursor_ += bytes;
    if (cursor_ > blobs_.size()) throw Error(ErrorCode::TruncatedBlob, "blob section shorter than declared");
    return Tensor<float>(shape, io::decode_f32<float>(blobs_, offset, shape_numel(shape)));
  }

  std::size_t consumed() const { return cursor_; }

 private:
  std::string_view blobs_;
  std::size_t cursor_ = 0;
};

std::vector<LayerSpec<float>> decode_layers(const json& arr, BlobReader& blobs) {
  std::vector<LayerSpec<float>> layers;
  for (const auto& j : arr) {
    LayerSpec<float> l;
    const auto kind = layer_kind_from_string(j.at("kind").get<std::string>());
    if (!kind) corrupt("unknown layer kind '" + j.at("kind").get<std::string>() + "'");
    l.kind = *kind;
    l.stride = j.at("stride").get<std::size_t>();
    l.padding = j.at("padding").get<std::size_t>();
    l.b_exponent = static_cast<float>(j.at("B").get<double>());
    l.b_learnable = j.at("b_learnable").get<bool>();
    l.unit_norm_weights = j.at("unit_norm_weights").get<bool>();
    l.bn_eps = static_cast<float>(j.at("bn_eps").get<double>());
    l.bn_momentum = static_cast<float>(j.at("bn_momentum").get<double>());
    l.pool_size = j.at("pool_size").get<std::size_t>();
    l.logit_bias = static_cast<float>(j.at("logit_bias").get<double>());
    // Tensors are read in the fixed writer order, not the JSON key order.
    const json& tensors = j.at("tensors");
    for (const auto& [key, _] : tensors.items()) {
      static const std::set<std::string> known{"weight", "bias", "bn_scale", "running_mean", "running_var",
                                               "running_sq"};
      if (!known.count(key)) corrupt("unknown tensor '" + key + "'");
    }
    const std::pair<const char*, Tensor<float>*> named[] = {
        {"weight", &l.weight},           {"bias", &l.bias},
        {"bn_scale", &l.bn_scale},       {"running_mean", &l.running_mean},
        {"running_var", &l.running_var}, {"running_sq", &l.running_sq},
    };
    for (const auto& [name, t] : named) {
      if (tensors.contains(name)) *t = blobs.read(tensors.at(name));
    }
    if (j.at("has_bias").get<bool>() != l.has_bias()) corrupt("has_bias disagrees with the tensor list");
    for (const auto& b : j.at("branches")) l.branches.push_back(blobs.read(b));
    l.body = decode_layers(j.at("body"), blobs);
    layers.push_back(std::move(l));
  }
  return layers;
}

}  // namespace

std::string encode_checkpoint(const ModelGraph<float>& model) {
  BlobWriter blobs;
  json h;
  h["input_channels"] = model.input_channels;
  h["input_height"] = model.input_height;
  h["input_width"] = model.input_width;
  h["class_count"] = model.class_count;
  h["gap_order"] = to_string(model.gap_order);
  h["normalization"] = {{"means", model.normalization.means}, {"stds", model.normalization.stds}};
  h["layers"] = encode_layers(model.layers, blobs);
  h["blob_bytes"] = blobs.blobs().size();
  const std::string header = h.dump();

  std::string out(kMagic);
  io::put_le<std::uint32_t>(out, kCheckpointVersion);
  io::put_le<std::uint64_t>(out, header.size());
  out += header;
  out += blobs.blobs();
  return out;
}

ModelGraph<float> decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < kMagic.size() || bytes.substr(0, kMagic.size()) != kMagic) {
    throw Error(ErrorCode::BadMagic, "not a checkpoint (missing BCOS magic)");
  }
  if (bytes.size() >= 8) {
    const auto version = io::get_le<std::uint32_t>(bytes, 4);
    if (version != kCheckpointVersion) {
      throw Error(ErrorCode::VersionUnsupported, "checkpoint version " + std::to_string(version) + " (supported: 1)");
    }
  }
  if (bytes.size() < kPreambleBytes) throw Error(ErrorCode::TruncatedBlob, "checkpoint preamble is truncated");
  const auto header_len = io::get_le<std::uint64_t>(bytes, 8);
  if (header_len > bytes.size() - kPreambleBytes) throw Error(ErrorCode::TruncatedBlob, "header is truncated");
  const std::string_view header = bytes.substr(kPreambleBytes, header_len);
  const std::string_view blob_section = bytes.substr(kPreambleBytes + header_len);

  ModelGraph<float> model;
  try {
    const json h = json::parse(header);
    model.input_channels = h.at("input_channels").get<std::size_t>();
    model.input_height = h.at("input_height").get<std::size_t>();
    model.input_width = h.at("input_width").get<std::size_t>();
    model.class_count = h.at("class_count").get<std::size_t>();
    const auto order = gap_order_from_string(h.at("gap_order").get<std::string>());
    if (!order) corrupt("unknown gap_order");
    model.gap_order = *order;
    model.normalization.means = h.at("normalization").at("means").get<std::array<double, 3>>();
    model.normalization.stds = h.at("normalization").at("stds").get<std::array<double, 3>>();
    const std::size_t declared = h.at("blob_bytes").get<std::size_t>();
    if (declared < blob_section.size()) corrupt("trailing bytes after the declared blobs");
    if (declared > blob_section.size()) throw Error(ErrorCode::TruncatedBlob, "blob section shorter than declared");
    BlobReader reader(blob_section);
    model.layers = decode_layers(h.at("layers"), reader);
    if (reader.consumed() != declared) corrupt("tensor byte counts do not add up to blob_bytes");
  } catch (const json::exception& e) {
    corrupt(std::string("malformed header: ") + e.what());
  }
  try {
    validate(model);
  } catch (const Error& e) {
    corrupt(std::string("inconsistent model: ") + e.what());
  }
  return model;
}

void save_checkpoint(const ModelGraph<float>& model, const std::filesystem::path& path) {
  io::write_file_atomic(path, encode_checkpoint(model));
}

ModelGraph<float> load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(io::read_file(path)); }

}  // namespace bcos
