#include "bcos/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "bcos/binary_io.hpp"
#include "json.hpp"

namespace bcos {

using nlohmann::json;

std::string_view to_string(ShapeKind s) noexcept {
  switch (s) {
    case ShapeKind::Square: return "square";
    case ShapeKind::Circle: return "circle";
    case ShapeKind::Triangle: return "triangle";
  }
  return "?";
}

std::string_view to_string(ColorKind c) noexcept {
  switch (c) {
    case ColorKind::Red: return "red";
    case ColorKind::Green: return "green";
    case ColorKind::Blue: return "blue";
  }
  return "?";
}

std::string ClassDescriptor::name() const { return std::string(to_string(color)) + " " + std::string(to_string(shape)); }

const std::vector<ClassDescriptor>& default_classes() {
  using S = ShapeKind;
  using C = ColorKind;
  static const std::vector<ClassDescriptor> classes{
      {S::Square, C::Red},   {S::Circle, C::Green},  {S::Triangle, C::Blue},
      {S::Circle, C::Red},   {S::Triangle, C::Green}, {S::Square, C::Blue},
      {S::Triangle, C::Red}, {S::Square, C::Green},  {S::Circle, C::Blue},
  };
  return classes;
}

void DatasetManifest::resolve() {
  if (n_classes == 0) throw Error(ErrorCode::InvalidConfig, "dataset needs at least one class");
  if (n_classes > default_classes().size()) {
    throw Error(ErrorCode::TooManyClasses, std::to_string(n_classes) + " classes requested, only " +
                                               std::to_string(default_classes().size()) + " shape/color pairs exist");
  }
  if (image_size < 8) throw Error(ErrorCode::InvalidConfig, "image_size must be at least 8");
  if (classes.empty()) classes.assign(default_classes().begin(), default_classes().begin() + n_classes);
  if (classes.size() != n_classes) throw Error(ErrorCode::InvalidConfig, "class list length differs from n_classes");
  std::set<std::pair<int, int>> seen;
  for (const auto& c : classes) {
    if (!seen.insert({int(c.shape), int(c.color)}).second) {
      throw Error(ErrorCode::InvalidConfig, "duplicate class " + c.name());
    }
  }
}

namespace {

template <typename E>
E enum_from(std::string_view name, std::initializer_list<E> options) {
  for (E e : options)
    if (to_string(e) == name) return e;
  throw Error(ErrorCode::InvalidConfig, "unknown value '" + std::string(name) + "'");
}

}  // namespace

std::string DatasetManifest::to_json() const {
  json j;
  j["n_classes"] = n_classes;
  j["n_train"] = n_train;
  j["n_eval"] = n_eval;
  j["image_size"] = image_size;
  j["seed"] = seed;
  j["classes"] = json::array();
  for (const auto& c : classes) j["classes"].push_back({{"shape", to_string(c.shape)}, {"color", to_string(c.color)}});
  return j.dump(2) + "\n";
}

DatasetManifest DatasetManifest::from_json(std::string_view text) {
  DatasetManifest m;
  try {
    const json j = json::parse(text);
    static const std::set<std::string> known{"n_classes", "n_train", "n_eval", "image_size", "seed", "classes"};
    for (const auto& [key, _] : j.items()) {
      if (!known.count(key)) throw Error(ErrorCode::InvalidConfig, "unknown manifest key '" + key + "'");
    }
    m.n_classes = j.at("n_classes").get<std::size_t>();
    m.n_train = j.at("n_train").get<std::size_t>();
    m.n_eval = j.at("n_eval").get<std::size_t>();
    m.image_size = j.at("image_size").get<std::size_t>();
    m.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("classes")) {
      for (const auto& c : j.at("classes")) {
        m.classes.push_back({enum_from(c.at("shape").get<std::string>(), {ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle}),
                             enum_from(c.at("color").get<std::string>(), {ColorKind::Red, ColorKind::Green, ColorKind::Blue})});
      }
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, std::string("manifest: ") + e.what());
  }
  m.resolve();
  return m;
}

SynthSample generate_sample(const DatasetManifest& manifest, std::size_t index) {
  const std::size_t s = manifest.image_size;
  Rng rng = Rng::derive(manifest.seed, index);
  SynthSample out;
  out.label = index % manifest.n_classes;
  const ClassDescriptor cls = manifest.classes.at(out.label);
  out.image = Tensor<float>({3, s, s});
  for (auto& v : out.image.values()) v = static_cast<float>(rng.uniform(0.3, 0.7));

  const std::size_t side = rng.integer(s / 4, s / 2);
  const std::size_t x0 = rng.integer(0, s - side), y0 = rng.integer(0, s - side);
  const double half = static_cast<double>(side) / 2.0;
  const auto inside = [&](std::size_t r, std::size_t c) {
    switch (cls.shape) {
      case ShapeKind::Square:
        return true;
      case ShapeKind::Circle: {
        const double dy = static_cast<double>(r) + 0.5 - half, dx = static_cast<double>(c) + 0.5 - half;
        return dx * dx + dy * dy <= half * half;
      }
      case ShapeKind::Triangle: {
        // Apex at the top, row r spans r + 1 pixels, centered.
        const std::size_t start = (side - (r + 1)) / 2;
        return c >= start && c < start + r + 1;
      }
    }
    return false;
  };
  const std::size_t channel = static_cast<std::size_t>(cls.color);
  std::size_t bx0 = s, by0 = s, bx1 = 0, by1 = 0;
  for (std::size_t r = 0; r < side; ++r)
    for (std::size_t c = 0; c < side; ++c) {
      if (!inside(r, c)) continue;
      const std::size_t y = y0 + r, x = x0 + c;
      for (std::size_t ch = 0; ch < 3; ++ch) out.image[(ch * s + y) * s + x] = ch == channel ? 1.0f : 0.15f;
      bx0 = std::min(bx0, x);
      by0 = std::min(by0, y);
      bx1 = std::max(bx1, x + 1);
      by1 = std::max(by1, y + 1);
    }
  out.bbox = {bx0, by0, bx1, by1};
  return out;
}

std::vector<std::size_t> Dataset::train_indices() const {
  std::vector<std::size_t> out(manifest.n_train);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = i;
  return out;
}

std::vector<std::size_t> Dataset::eval_indices() const {
  std::vector<std::size_t> out(manifest.n_eval);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = manifest.n_train + i;
  return out;
}

Dataset generate_dataset(DatasetManifest manifest) {
  manifest.resolve();
  Dataset d;
  d.manifest = manifest;
  const std::size_t n = manifest.n_train + manifest.n_eval, s = manifest.image_size, item = 3 * s * s;
  if (n == 0) return d;
  d.images = Tensor<float>({n, 3, s, s});
  for (std::size_t i = 0; i < n; ++i) {
    auto sample = generate_sample(manifest, i);
    std::copy(sample.image.values().begin(), sample.image.values().end(), d.images.data() + i * item);
    d.labels.push_back(sample.label);
    d.bboxes.push_back(sample.bbox);
  }
  return d;
}

void save_dataset(const Dataset& d, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::string labels, boxes;
  for (std::size_t i = 0; i < d.size(); ++i) {
    io::put_le(labels, static_cast<std::uint32_t>(d.labels[i]));
    for (std::size_t v : {d.bboxes[i].x0, d.bboxes[i].y0, d.bboxes[i].x1, d.bboxes[i].y1}) {
      io::put_le(boxes, static_cast<std::uint32_t>(v));
    }
  }
  io::write_file_atomic(dir / "samples.bin", io::encode_f32<float>(d.images.values()));
  io::write_file_atomic(dir / "labels.bin", labels);
  io::write_file_atomic(dir / "bboxes.bin", boxes);
  io::write_file_atomic(dir / "manifest.json", d.manifest.to_json());
}

Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset d;
  d.manifest = DatasetManifest::from_json(io::read_file(dir / "manifest.json"));
  const std::size_t n = d.manifest.n_train + d.manifest.n_eval, s = d.manifest.image_size;
  const std::string samples = io::read_file(dir / "samples.bin");
  const std::string labels = io::read_file(dir / "labels.bin");
  const std::string boxes = io::read_file(dir / "bboxes.bin");
  if (samples.size() != n * 3 * s * s * 4 || labels.size() != n * 4 || boxes.size() != n * 16) {
    throw Error(ErrorCode::TruncatedBlob, "dataset files in " + dir.string() + " do not match the manifest");
  }
  if (n > 0) d.images = Tensor<float>({n, 3, s, s}, io::decode_f32<float>(samples, 0, n * 3 * s * s));
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = io::get_le<std::uint32_t>(labels, 4 * i);
    if (label >= d.manifest.n_classes) throw Error(ErrorCode::CorruptHeader, "label out of range in labels.bin");
    d.labels.push_back(label);
    BBox b{io::get_le<std::uint32_t>(boxes, 16 * i), io::get_le<std::uint32_t>(boxes, 16 * i + 4),
           io::get_le<std::uint32_t>(boxes, 16 * i + 8), io::get_le<std::uint32_t>(boxes, 16 * i + 12)};
    d.bboxes.push_back(b);
  }
  return d;
}

Dataset generate(const DatasetManifest& manifest, const std::filesystem::path& dir) {
  Dataset d = generate_dataset(manifest);
  save_dataset(d, dir);
  return d;
}

template <typename T>
Tensor<T> flip_horizontal(const Tensor<T>& image) {
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor<T> out(image.shape());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out[(ch * h + y) * w + x] = image[(ch * h + y) * w + (w - 1 - x)];
  return out;
}

BBox flip_box(const BBox& b, std::size_t width) { return {width - b.x1, b.y0, width - b.x0, b.y1}; }

template <typename T>
Tensor<T> raw_images(const Dataset& d, const std::vector<std::size_t>& indices) {
  const std::size_t s = d.manifest.image_size, item = 3 * s * s;
  if (indices.empty()) throw Error(ErrorCode::IndexOutOfRange, "empty index list");
  Tensor<T> out({indices.size(), 3, s, s});
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const std::size_t i = indices[b];
    if (i >= d.size()) {
      throw Error(ErrorCode::IndexOutOfRange, "sample " + std::to_string(i) + " of " + std::to_string(d.size()));
    }
    std::transform(d.images.data() + i * item, d.images.data() + (i + 1) * item, out.data() + b * item,
                   [](float v) { return static_cast<T>(v); });
  }
  return out;
}

template <typename T>
Batch<T> load_batch(const Dataset& d, const std::vector<std::size_t>& indices, bool encode6,
                    const NormalizationSpec& norm, double flip_prob, Rng& rng) {
  const std::size_t s = d.manifest.image_size, item = 3 * s * s;
  Batch<T> batch;
  Tensor<T> raw = raw_images<T>(d, indices);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    BBox box = d.bboxes[indices[b]];
    if (rng.bernoulli(flip_prob)) {
      Tensor<T> img({3, s, s}, std::vector<T>(raw.data() + b * item, raw.data() + (b + 1) * item));
      img = flip_horizontal(img);
      std::copy(img.values().begin(), img.values().end(), raw.data() + b * item);
      box = flip_box(box, s);
    }
    batch.labels.push_back(d.labels[indices[b]]);
    batch.bboxes.push_back(box);
  }
  batch.x = encode_input(raw, norm, encode6 ? 6 : 3);
  return batch;
}

template Tensor<float> flip_horizontal(const Tensor<float>&);
template Tensor<double> flip_horizontal(const Tensor<double>&);
template Tensor<float> raw_images(const Dataset&, const std::vector<std::size_t>&);
template Tensor<double> raw_images(const Dataset&, const std::vector<std::size_t>&);
template Batch<float> load_batch(const Dataset&, const std::vector<std::size_t>&, bool, const NormalizationSpec&, double,
                                 Rng&);
template Batch<double> load_batch(const Dataset&, const std::vector<std::size_t>&, bool, const NormalizationSpec&,
                                  double, Rng&);

}  // namespace bcos
