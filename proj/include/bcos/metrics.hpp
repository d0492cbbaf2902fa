#pragma once

#include <functional>
#include <string>
#include <vector>

#include "bcos/explainer.hpp"

namespace bcos {

/// Pixel rectangle [x0, x1) x [y0, y1).
struct BBox {
  std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  std::size_t area() const { return (x1 - x0) * (y1 - y0); }
  bool contains(std::size_t x, std::size_t y) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }
  bool operator==(const BBox&) const = default;
};

struct EnergyScore {
  double score = 0.0;
  bool degenerate = false;  // no positive energy anywhere
};

/// Share of the positive energy of an [H,W] map that falls in the box.
/// Throws BBoxOutOfBounds for empty or out-of-image boxes.
template <typename T>
EnergyScore energy_in_box(const Tensor<T>& positive_energy, const BBox& box);

/// EPG: energy_in_box on the attribution's positive energy.
template <typename T>
EnergyScore epg_score(const AttributionMap<T>& attr, const BBox& box);

/// Box of grid cell `cell` (row-major) in an n x n grid of size x size tiles.
BBox grid_cell_box(std::size_t n, std::size_t size, std::size_t cell);

/// Stitches n*n [3,S,S] images row-major into one [3,nS,nS] image.
template <typename T>
Tensor<T> stitch_grid(const std::vector<Tensor<T>>& cells, std::size_t n);

template <typename T>
struct GridSpec {
  std::size_t n = 2;
  std::vector<Tensor<T>> cell_images;  // raw [3,S,S] images in [0,1]
  std::vector<std::size_t> cell_classes;
  double confidence_threshold = 0.99;
};

/// Softmax confidence of `label` for raw [0,1] images, run through the
/// model's own input encoding. Images are [N,3,S,S].
template <typename T>
std::vector<double> label_confidence(const ModelGraph<T>& model, const Tensor<T>& images,
                                     const std::vector<std::size_t>& labels);

/// GridPG for one target cell: positive energy of the target class's
/// contribution map inside that cell over the whole grid. Throws
/// LowConfidenceCell when a cell image is not classified as its label with
/// confidence >= threshold.
template <typename T>
EnergyScore gridpg_score(const ModelGraph<T>& model, const GridSpec<T>& grid, std::size_t target_cell,
                         EnergyMode energy = EnergyMode::SumThenClamp);

struct LocalisationReport {
  std::string metric = "gridpg";
  std::size_t n = 0;
  double mean_score = 0.0;
  bool mean_defined = false;
  std::vector<double> per_grid_scores;
  std::size_t grids_evaluated = 0;
  std::size_t grids_rejected = 0;
  std::size_t degenerate_maps = 0;
};

struct GridPgOptions {
  std::size_t n = 2;
  std::size_t n_grids = 50;
  double confidence_threshold = 0.99;
  std::uint64_t seed = 0;
  bool all_cells = true;  // false: one seeded target cell per grid
  EnergyMode energy = EnergyMode::SumThenClamp;
  std::size_t max_attempts_per_grid = 100;
};

/// Positive-energy map [nS,nS] for a stitched raw grid image and a class.
/// `target_cell` is passed so stub attributors can be written; real models
/// ignore it.
template <typename T>
using GridAttributor = std::function<Tensor<T>(const Tensor<T>& raw_grid, std::size_t class_k, std::size_t target_cell)>;

/// Samples grids of n*n distinct classes from the pool (one random item per
/// class, classes and items drawn from a per-attempt derived stream). Grids
/// containing an item with confident[i] == false are rejected and redrawn.
/// Throws InsufficientConfidentSamples if fewer than n*n classes have a
/// confident item.
template <typename T>
LocalisationReport gridpg_evaluate(const Tensor<T>& images, const std::vector<std::size_t>& labels,
                                   const std::vector<bool>& confident, const GridAttributor<T>& attributor,
                                   const GridPgOptions& options);

/// Model-backed GridPG over a pool of raw images.
template <typename T>
LocalisationReport gridpg_evaluate(const ModelGraph<T>& model, const Tensor<T>& images,
                                   const std::vector<std::size_t>& labels, const GridPgOptions& options);

/// EPG over a set of raw images, explaining each image's own label.
/// Reported as a LocalisationReport with metric "epg" and n = 0;
/// per_grid_scores then holds one score per image and degenerate maps
/// score 0.
template <typename T>
LocalisationReport epg_evaluate(const ModelGraph<T>& model, const Tensor<T>& images,
                                const std::vector<std::size_t>& labels, const std::vector<BBox>& boxes,
                                EnergyMode energy = EnergyMode::SumThenClamp);

}  // namespace bcos
