#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "bcos/metrics.hpp"
#include "bcos/normalization.hpp"

namespace bcos {

enum class ShapeKind { Square, Circle, Triangle };
enum class ColorKind { Red, Green, Blue };

std::string_view to_string(ShapeKind s) noexcept;
std::string_view to_string(ColorKind c) noexcept;

struct ClassDescriptor {
  ShapeKind shape = ShapeKind::Square;
  ColorKind color = ColorKind::Red;
  std::string name() const;  // e.g. "red square"
  bool operator==(const ClassDescriptor&) const = default;
};

/// All nine (shape, color) classes in the default order; the first k are
/// used when a manifest asks for k classes. Consecutive entries differ in
/// both shape and color.
const std::vector<ClassDescriptor>& default_classes();

struct DatasetManifest {
  std::size_t n_classes = 3;
  std::size_t n_train = 3000;
  std::size_t n_eval = 600;
  std::size_t image_size = 32;
  std::uint64_t seed = 42;
  std::vector<ClassDescriptor> classes;  // empty: default_classes() prefix

  /// Fills `classes` if empty and checks consistency; throws TooManyClasses
  /// or InvalidConfig.
  void resolve();
  std::string to_json() const;
  static DatasetManifest from_json(std::string_view text);
};

struct SynthSample {
  Tensor<float> image;  // [3,S,S] in [0,1]
  std::size_t label = 0;
  BBox bbox;
};

/// Sample `index` of the dataset: label index % n_classes, drawn from its own
/// derived random stream. Train samples are indices [0, n_train), eval
/// samples follow.
SynthSample generate_sample(const DatasetManifest& manifest, std::size_t index);

struct Dataset {
  DatasetManifest manifest;
  Tensor<float> images;  // [N,3,S,S], N = n_train + n_eval; unset when N = 0
  std::vector<std::size_t> labels;
  std::vector<BBox> bboxes;

  std::size_t size() const { return labels.size(); }
  std::vector<std::size_t> train_indices() const;
  std::vector<std::size_t> eval_indices() const;
};

Dataset generate_dataset(DatasetManifest manifest);

/// Writes manifest.json, samples.bin, labels.bin and bboxes.bin.
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

/// generate_dataset + save_dataset.
Dataset generate(const DatasetManifest& manifest, const std::filesystem::path& dir);

template <typename T>
struct Batch {
  Tensor<T> x;  // encoded model input [B,C,S,S]
  std::vector<std::size_t> labels;
  std::vector<BBox> bboxes;
};

/// Optional horizontal flip (box flipped with the image), then the 6-channel
/// add-inverse encoding (encode6) or 3-channel normalization.
template <typename T>
Batch<T> load_batch(const Dataset& dataset, const std::vector<std::size_t>& indices, bool encode6,
                    const NormalizationSpec& norm, double flip_prob, Rng& rng);

/// Raw [B,3,S,S] images for the given indices.
template <typename T>
Tensor<T> raw_images(const Dataset& dataset, const std::vector<std::size_t>& indices);

/// Mirror of a [C,H,W] image about its vertical axis.
template <typename T>
Tensor<T> flip_horizontal(const Tensor<T>& image);

BBox flip_box(const BBox& box, std::size_t width);

}  // namespace bcos
