#include "doctest.h"

#include <cmath>

#include "bcos/metrics.hpp"
#include "support/models.hpp"

using namespace bcos;
using T64 = Tensor<double>;

namespace {

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("no error thrown");
  return ErrorCode::Io;
}

struct Pool {
  T64 images;
  std::vector<std::size_t> labels;
  std::vector<bool> confident;
};

Pool make_pool(std::size_t classes, std::size_t per_class, std::size_t size, Rng& rng) {
  Pool p;
  p.images = rng.uniform_tensor<double>({classes * per_class, 3, size, size}, 0, 1);
  for (std::size_t i = 0; i < classes * per_class; ++i) p.labels.push_back(i % classes);
  p.confident.assign(p.labels.size(), true);
  return p;
}

T64 cell_indicator(std::size_t n, std::size_t s, std::size_t cell, bool inside) {
  T64 e({n * s, n * s});
  const auto box = grid_cell_box(n, s, cell);
  for (std::size_t y = 0; y < n * s; ++y)
    for (std::size_t x = 0; x < n * s; ++x) e[y * n * s + x] = box.contains(x, y) == inside ? 1.0 : 0.0;
  return e;
}

}  // namespace

TEST_CASE("EPG examples") {
  T64 e({4, 4});
  e.at({1, 1}) = 2.0;
  e.at({2, 2}) = 3.0;
  CHECK(energy_in_box(e, BBox{1, 1, 3, 3}).score == 1.0);

  T64 half({2, 2}, std::vector<double>{1, 1, 0, 0});
  CHECK(energy_in_box(half, BBox{0, 0, 1, 1}).score == 0.5);

  const auto none = energy_in_box(T64({3, 3}), BBox{0, 0, 1, 1});
  CHECK(none.score == 0.0);
  CHECK(none.degenerate);

  // Negative entries carry no energy.
  T64 neg({1, 2}, std::vector<double>{-5, 1});
  CHECK(energy_in_box(neg, BBox{1, 0, 2, 1}).score == 1.0);

  CHECK(code_of([&] { energy_in_box(e, BBox{0, 0, 5, 2}); }) == ErrorCode::BBoxOutOfBounds);
  CHECK(code_of([&] { energy_in_box(e, BBox{2, 0, 2, 2}); }) == ErrorCode::BBoxOutOfBounds);

  AttributionMap<double> a;
  a.positive_energy = e;
  CHECK(epg_score(a, BBox{0, 0, 2, 2}).score == doctest::Approx(0.4));
}

TEST_CASE("scores are scale invariant, bounded and monotone") {
  Rng rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    auto e = rng.uniform_tensor<double>({8, 8}, -1, 1);
    const BBox box{rng.integer(0, 3), rng.integer(0, 3), rng.integer(4, 8), rng.integer(4, 8)};
    const double base = energy_in_box(e, box).score;
    CHECK(base >= 0.0);
    CHECK(base <= 1.0);
    for (double g : {0.5, 2.0}) CHECK(std::abs(energy_in_box(e * g, box).score - base) <= 1e-9);

    e.at({box.y0, box.x0}) += 0.5;
    CHECK(energy_in_box(e, box).score >= base);

    double total = 0;
    for (std::size_t cell = 0; cell < 4; ++cell) total += energy_in_box(e, grid_cell_box(2, 4, cell)).score;
    CHECK(std::abs(total - 1.0) <= 1e-6);
  }
}

TEST_CASE("grid helpers") {
  CHECK(grid_cell_box(3, 5, 4) == BBox{5, 5, 10, 10});
  CHECK(grid_cell_box(2, 4, 1) == BBox{4, 0, 8, 4});
  CHECK_THROWS_AS(grid_cell_box(2, 4, 4), Error);

  std::vector<T64> cells;
  for (int i = 0; i < 4; ++i) cells.push_back(T64::full({3, 2, 2}, i));
  const auto g = stitch_grid(cells, 2);
  CHECK(g.shape() == Shape{3, 4, 4});
  CHECK(g.at({0, 0, 3}) == 1.0);
  CHECK(g.at({2, 3, 0}) == 2.0);
  CHECK(g.at({1, 3, 3}) == 3.0);
}

TEST_CASE("GridPG stub oracles") {
  Rng rng(8);
  for (std::size_t n : {2u, 3u}) {
    const auto pool = make_pool(n * n + 1, 3, 4, rng);
    GridPgOptions opt;
    opt.n = n;
    opt.n_grids = 10;
    opt.seed = 5;
    const GridAttributor<double> perfect = [&](const T64&, std::size_t, std::size_t cell) {
      return cell_indicator(n, 4, cell, true);
    };
    const GridAttributor<double> anti = [&](const T64&, std::size_t, std::size_t cell) {
      return cell_indicator(n, 4, cell, false);
    };
    const GridAttributor<double> uniform = [&](const T64&, std::size_t, std::size_t) {
      return T64::full({n * 4, n * 4}, 1.0);
    };
    const auto rp = gridpg_evaluate<double>(pool.images, pool.labels, pool.confident, perfect, opt);
    const auto ra = gridpg_evaluate<double>(pool.images, pool.labels, pool.confident, anti, opt);
    const auto ru = gridpg_evaluate<double>(pool.images, pool.labels, pool.confident, uniform, opt);
    CHECK(rp.grids_evaluated == 10);
    CHECK(rp.mean_score == 1.0);
    CHECK(ra.mean_score == 0.0);
    CHECK(std::abs(ru.mean_score - 1.0 / double(n * n)) <= 1e-15);
    CHECK(rp.mean_defined);

    opt.all_cells = false;
    CHECK(gridpg_evaluate<double>(pool.images, pool.labels, pool.confident, perfect, opt).mean_score == 1.0);
  }
}

TEST_CASE("GridPG sampling rules") {
  Rng rng(9);
  auto pool = make_pool(4, 4, 4, rng);
  const GridAttributor<double> uniform = [](const T64&, std::size_t, std::size_t) { return T64::full({8, 8}, 1); };

  GridPgOptions opt;
  opt.n_grids = 0;
  const auto empty = gridpg_evaluate<double>(pool.images, pool.labels, pool.confident, uniform, opt);
  CHECK_FALSE(empty.mean_defined);
  CHECK(empty.per_grid_scores.empty());

  // Grids are class-distinct.
  opt.n_grids = 20;
  const GridAttributor<double> check_classes = [&](const T64& raw, std::size_t cls, std::size_t cell) {
    CHECK(raw.shape() == Shape{3, 8, 8});
    (void)cls;
    (void)cell;
    return T64::full({8, 8}, 1);
  };
  CHECK(gridpg_evaluate<double>(pool.images, pool.labels, pool.confident, check_classes, opt).grids_evaluated == 20);

  // Unconfident items cause rejections, and too few confident classes fail.
  for (std::size_t i = 0; i < pool.labels.size(); i += 3) pool.confident[i] = false;
  const auto r = gridpg_evaluate<double>(pool.images, pool.labels, pool.confident, uniform, opt);
  CHECK(r.grids_rejected > 0);
  CHECK(r.grids_evaluated == 20);
  for (std::size_t i = 0; i < pool.labels.size(); ++i)
    if (pool.labels[i] == 3) pool.confident[i] = false;
  CHECK(code_of([&] { gridpg_evaluate<double>(pool.images, pool.labels, pool.confident, uniform, opt); }) ==
        ErrorCode::InsufficientConfidentSamples);

  // Same seed, same report.
  pool.confident.assign(pool.labels.size(), true);
  const GridAttributor<double> noisy = [](const T64& raw, std::size_t, std::size_t) {
    T64 e({8, 8});
    for (std::size_t i = 0; i < 64; ++i) e[i] = raw[i];
    return e;
  };
  const auto a = gridpg_evaluate<double>(pool.images, pool.labels, pool.confident, noisy, opt);
  const auto b = gridpg_evaluate<double>(pool.images, pool.labels, pool.confident, noisy, opt);
  CHECK(a.per_grid_scores == b.per_grid_scores);
}

TEST_CASE("gridpg_score on a model rejects unconfident cells") {
  Rng rng(1);
  auto m = testing::tiny_bcos_models<double>(1, 4, 4, false, rng).front();
  GridSpec<double> grid;
  grid.n = 2;
  for (std::size_t i = 0; i < 4; ++i) {
    grid.cell_images.push_back(rng.uniform_tensor<double>({3, 4, 4}, 0, 1));
    grid.cell_classes.push_back(i);
  }
  grid.confidence_threshold = 0.999999;
  CHECK(code_of([&] { gridpg_score(m, grid, 0); }) == ErrorCode::LowConfidenceCell);

  grid.confidence_threshold = 0.0;
  double total = 0;
  for (std::size_t cell = 0; cell < 4; ++cell) {
    const auto s = gridpg_score(m, grid, cell);
    CHECK(s.score >= 0.0);
    CHECK(s.score <= 1.0);
    total += s.score;
  }
  CHECK(total > 0.0);

  grid.cell_classes[1] = 0;
  CHECK(code_of([&] { gridpg_score(m, grid, 0); }) == ErrorCode::InvalidConfig);
}

TEST_CASE("epg_evaluate scores each image against its own box") {
  Rng rng(17);
  const auto model = testing::tiny_bcos_models<double>(1, 3, 8, false, rng).front();
  const std::size_t n = 5;
  const auto images = rng.uniform_tensor<double>({n, 3, 8, 8}, 0, 1);
  const std::vector<std::size_t> labels{0, 1, 2, 0, 1};
  const std::vector<BBox> boxes{{0, 0, 4, 4}, {2, 2, 8, 8}, {0, 0, 8, 8}, {1, 3, 2, 7}, {0, 0, 8, 1}};
  const auto report = epg_evaluate(model, images, labels, boxes);
  CHECK(report.metric == "epg");
  REQUIRE(report.per_grid_scores.size() == n);
  double sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    T64 raw({3, 8, 8}, std::vector<double>(images.data() + i * 192, images.data() + (i + 1) * 192));
    const auto x = encode_input(raw, model.normalization, model.input_channels);
    const double expected = epg_score(contribution_map(model, x, labels[i]), boxes[i]).score;
    CHECK(report.per_grid_scores[i] == expected);
    sum += expected;
  }
  // The whole-image box holds all the energy unless the map is degenerate.
  CHECK(report.per_grid_scores[2] == doctest::Approx(report.degenerate_maps ? report.per_grid_scores[2] : 1.0));
  CHECK(report.mean_score == doctest::Approx(sum / n));
  CHECK(code_of([&] { epg_evaluate(model, images, labels, std::vector<BBox>(n, BBox{0, 0, 9, 9})); }) ==
        ErrorCode::BBoxOutOfBounds);
}
