#include "bcos/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

namespace bcos {

template <typename T>
EnergyScore energy_in_box(const Tensor<T>& e, const BBox& box) {
  if (e.rank() != 2) throw Error(ErrorCode::ShapeMismatch, "energy map must be [H,W], got " + shape_str(e.shape()));
  const std::size_t h = e.dim(0), w = e.dim(1);
  if (box.x0 >= box.x1 || box.y0 >= box.y1 || box.x1 > w || box.y1 > h) {
    throw Error(ErrorCode::BBoxOutOfBounds, "box [" + std::to_string(box.x0) + "," + std::to_string(box.x1) + ")x[" +
                                                std::to_string(box.y0) + "," + std::to_string(box.y1) +
                                                ") does not fit a " + std::to_string(w) + "x" + std::to_string(h) +
                                                " map");
  }
  double inside = 0, total = 0;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double v = std::max(static_cast<double>(e[y * w + x]), 0.0);
      total += v;
      if (box.contains(x, y)) inside += v;
    }
  if (total <= 0.0) return {0.0, true};
  return {inside / total, false};
}

template <typename T>
EnergyScore epg_score(const AttributionMap<T>& attr, const BBox& box) {
  return energy_in_box(attr.positive_energy, box);
}

BBox grid_cell_box(std::size_t n, std::size_t size, std::size_t cell) {
  if (cell >= n * n) throw Error(ErrorCode::IndexOutOfRange, "grid cell " + std::to_string(cell) + " out of range");
  const std::size_t r = cell / n, c = cell % n;
  return {c * size, r * size, (c + 1) * size, (r + 1) * size};
}

template <typename T>
Tensor<T> stitch_grid(const std::vector<Tensor<T>>& cells, std::size_t n) {
  if (cells.size() != n * n || cells.empty()) throw Error(ErrorCode::ShapeMismatch, "grid needs n*n cell images");
  const Shape& s0 = cells.front().shape();
  if (s0.size() != 3 || s0[1] != s0[2]) throw Error(ErrorCode::ShapeMismatch, "cells must be square [C,S,S]");
  const std::size_t ch = s0[0], s = s0[1], side = n * s;
  Tensor<T> out({ch, side, side});
  for (std::size_t cell = 0; cell < cells.size(); ++cell) {
    if (cells[cell].shape() != s0) throw Error(ErrorCode::ShapeMismatch, "grid cells differ in shape");
    const std::size_t oy = (cell / n) * s, ox = (cell % n) * s;
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t y = 0; y < s; ++y)
        std::copy_n(cells[cell].data() + (c * s + y) * s, s, out.data() + (c * side + oy + y) * side + ox);
  }
  return out;
}

template <typename T>
std::vector<double> label_confidence(const ModelGraph<T>& model, const Tensor<T>& images,
                                     const std::vector<std::size_t>& labels) {
  const std::size_t n = images.dim(0);
  if (labels.size() != n) throw Error(ErrorCode::ShapeMismatch, "one label per image required");
  const std::size_t item = images.size() / n;
  std::vector<double> out(n);
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < n; start += kChunk) {
    const std::size_t m = std::min(kChunk, n - start);
    Shape s = images.shape();
    s[0] = m;
    Tensor<T> chunk(s, std::vector<T>(images.data() + start * item, images.data() + (start + m) * item));
    const auto logits =
        forward(model, encode_input(chunk, model.normalization, model.input_channels), Mode::Eval, false).logits;
    const std::size_t k = logits.dim(1);
    for (std::size_t i = 0; i < m; ++i) {
      const T* z = logits.data() + i * k;
      const double zmax = *std::max_element(z, z + k);
      double denom = 0;
      for (std::size_t j = 0; j < k; ++j) denom += std::exp(static_cast<double>(z[j]) - zmax);
      const std::size_t label = labels[start + i];
      if (label >= k) throw Error(ErrorCode::IndexOutOfRange, "label exceeds class count");
      out[start + i] = std::exp(static_cast<double>(z[label]) - zmax) / denom;
    }
  }
  return out;
}

namespace {

template <typename T>
GridAttributor<T> model_attributor(const ModelGraph<T>& model, EnergyMode energy) {
  return [&model, energy](const Tensor<T>& raw_grid, std::size_t class_k, std::size_t) {
    const auto x = encode_input(raw_grid, model.normalization, model.input_channels);
    return contribution_map(model, x, class_k, energy).positive_energy;
  };
}

}  // namespace

template <typename T>
EnergyScore gridpg_score(const ModelGraph<T>& model, const GridSpec<T>& grid, std::size_t target_cell,
                         EnergyMode energy) {
  const std::size_t cells = grid.n * grid.n;
  if (grid.cell_images.size() != cells || grid.cell_classes.size() != cells) {
    throw Error(ErrorCode::ShapeMismatch, "grid needs n*n images and classes");
  }
  if (std::set<std::size_t>(grid.cell_classes.begin(), grid.cell_classes.end()).size() != cells) {
    throw Error(ErrorCode::InvalidConfig, "grid classes must be pairwise distinct");
  }
  const std::size_t s = grid.cell_images.front().dim(1);
  Shape bs{cells, 3, s, s};
  std::vector<T> flat;
  for (const auto& img : grid.cell_images) flat.insert(flat.end(), img.values().begin(), img.values().end());
  const auto conf = label_confidence(model, Tensor<T>(bs, std::move(flat)), grid.cell_classes);
  for (std::size_t i = 0; i < cells; ++i) {
    if (conf[i] < grid.confidence_threshold) {
      throw Error(ErrorCode::LowConfidenceCell, "cell " + std::to_string(i) + " confidence " +
                                                    std::to_string(conf[i]) + " below threshold");
    }
  }
  const auto raw = stitch_grid(grid.cell_images, grid.n);
  const auto e = model_attributor(model, energy)(raw, grid.cell_classes.at(target_cell), target_cell);
  return energy_in_box(e, grid_cell_box(grid.n, s, target_cell));
}

template <typename T>
LocalisationReport gridpg_evaluate(const Tensor<T>& images, const std::vector<std::size_t>& labels,
                                   const std::vector<bool>& confident, const GridAttributor<T>& attributor,
                                   const GridPgOptions& options) {
  LocalisationReport report;
  report.n = options.n;
  const std::size_t cells = options.n * options.n;
  if (options.n < 2) throw Error(ErrorCode::InvalidConfig, "grid side must be >= 2");
  if (images.rank() != 4 || images.dim(0) != labels.size() || confident.size() != labels.size()) {
    throw Error(ErrorCode::ShapeMismatch, "images, labels and confidence flags disagree");
  }
  if (options.n_grids == 0) return report;

  std::map<std::size_t, std::vector<std::size_t>> by_class;
  std::set<std::size_t> confident_classes;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    by_class[labels[i]].push_back(i);
    if (confident[i]) confident_classes.insert(labels[i]);
  }
  if (confident_classes.size() < cells) {
    throw Error(ErrorCode::InsufficientConfidentSamples,
                std::to_string(confident_classes.size()) + " classes have confidently classified samples, " +
                    std::to_string(cells) + " needed");
  }
  std::vector<std::size_t> classes;
  for (const auto& [c, _] : by_class) classes.push_back(c);

  const std::size_t s = images.dim(2), item = images.size() / images.dim(0);
  const std::size_t max_attempts = options.n_grids * options.max_attempts_per_grid;
  for (std::size_t attempt = 0; report.grids_evaluated < options.n_grids && attempt < max_attempts; ++attempt) {
    Rng rng = Rng::derive(options.seed, attempt);
    std::vector<std::size_t> pick = classes;
    rng.shuffle(pick.begin(), pick.end());
    pick.resize(cells);
    std::vector<std::size_t> members;
    bool ok = true;
    for (std::size_t c : pick) {
      const auto& pool = by_class[c];
      const std::size_t idx = pool[rng.integer(0, pool.size() - 1)];
      ok = ok && confident[idx];
      members.push_back(idx);
    }
    if (!ok) {
      ++report.grids_rejected;
      continue;
    }
    std::vector<Tensor<T>> tiles;
    for (std::size_t idx : members) {
      tiles.emplace_back(Shape{images.dim(1), s, s},
                         std::vector<T>(images.data() + idx * item, images.data() + (idx + 1) * item));
    }
    const auto raw = stitch_grid(tiles, options.n);
    std::vector<std::size_t> targets(cells);
    std::iota(targets.begin(), targets.end(), 0);
    if (!options.all_cells) targets = {rng.integer(0, cells - 1)};
    double sum = 0;
    for (std::size_t cell : targets) {
      const auto e = attributor(raw, pick[cell], cell);
      const auto score = energy_in_box(e, grid_cell_box(options.n, s, cell));
      report.degenerate_maps += score.degenerate;
      sum += score.score;
    }
    report.per_grid_scores.push_back(sum / static_cast<double>(targets.size()));
    ++report.grids_evaluated;
  }
  if (!report.per_grid_scores.empty()) {
    report.mean_defined = true;
    report.mean_score = std::accumulate(report.per_grid_scores.begin(), report.per_grid_scores.end(), 0.0) /
                        static_cast<double>(report.per_grid_scores.size());
  }
  return report;
}

template <typename T>
LocalisationReport gridpg_evaluate(const ModelGraph<T>& model, const Tensor<T>& images,
                                   const std::vector<std::size_t>& labels, const GridPgOptions& options) {
  const auto conf = label_confidence(model, images, labels);
  std::vector<bool> confident(conf.size());
  for (std::size_t i = 0; i < conf.size(); ++i) confident[i] = conf[i] >= options.confidence_threshold;
  return gridpg_evaluate<T>(images, labels, confident, model_attributor(model, options.energy), options);
}

template <typename T>
LocalisationReport epg_evaluate(const ModelGraph<T>& model, const Tensor<T>& images,
                                const std::vector<std::size_t>& labels, const std::vector<BBox>& boxes,
                                EnergyMode energy) {
  if (images.rank() != 4 || images.dim(0) != labels.size() || boxes.size() != labels.size()) {
    throw Error(ErrorCode::ShapeMismatch, "images, labels and boxes disagree");
  }
  LocalisationReport report;
  report.metric = "epg";
  const std::size_t n = labels.size();
  const std::size_t per = images.size() / std::max<std::size_t>(n, 1);
  const Shape item{images.dim(1), images.dim(2), images.dim(3)};
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor<T> raw(item, std::vector<T>(images.data() + i * per, images.data() + (i + 1) * per));
    const Tensor<T> x = encode_input(raw, model.normalization, model.input_channels);
    const auto attr = contribution_map(model, x, labels[i], energy);
    const EnergyScore s = epg_score(attr, boxes[i]);
    if (s.degenerate) ++report.degenerate_maps;
    report.per_grid_scores.push_back(s.score);
    sum += s.score;
  }
  report.grids_evaluated = n;
  report.mean_defined = n > 0;
  report.mean_score = n > 0 ? sum / static_cast<double>(n) : 0.0;
  return report;
}

#define BCOS_METRICS_INSTANTIATE(T)                                                                              \
  template EnergyScore energy_in_box(const Tensor<T>&, const BBox&);                                             \
  template EnergyScore epg_score(const AttributionMap<T>&, const BBox&);                                         \
  template Tensor<T> stitch_grid(const std::vector<Tensor<T>>&, std::size_t);                                    \
  template std::vector<double> label_confidence(const ModelGraph<T>&, const Tensor<T>&,                          \
                                                const std::vector<std::size_t>&);                                \
  template EnergyScore gridpg_score(const ModelGraph<T>&, const GridSpec<T>&, std::size_t, EnergyMode);          \
  template LocalisationReport gridpg_evaluate(const Tensor<T>&, const std::vector<std::size_t>&,                 \
                                              const std::vector<bool>&, const GridAttributor<T>&,                \
                                              const GridPgOptions&);                                             \
  template LocalisationReport gridpg_evaluate(const ModelGraph<T>&, const Tensor<T>&,                            \
                                              const std::vector<std::size_t>&, const GridPgOptions&);        \
  template LocalisationReport epg_evaluate(const ModelGraph<T>&, const Tensor<T>&, const std::vector<std::size_t>&, \
                                           const std::vector<BBox>&, EnergyMode);

BCOS_METRICS_INSTANTIATE(float)
BCOS_METRICS_INSTANTIATE(double)

}  // namespace bcos
