#include "doctest.h"

#include "crm/masking.hpp"

#include <cmath>
#include <set>
#include <sstream>

using namespace crm;

namespace {

Image ramp_image(int h, int w, int c) {
  Image img(h, w, c);
  for (int i = 0; i < img.pixels.size(); ++i) img.pixels.data()[i] = 0.001 * i;
  return img;
}

MaskGrid grid_from(std::initializer_list<std::initializer_list<int>> rows) {
  MaskGrid m;
  const int h = static_cast<int>(rows.size());
  const int w = static_cast<int>(rows.begin()->size());
  m.cells.resize(h, w);
  int y = 0;
  for (const auto& r : rows) {
    int x = 0;
    for (int v : r) m.cells(y, x++) = static_cast<std::uint8_t>(v);
    ++y;
  }
  return m;
}

}  // namespace

TEST_CASE("patchify shapes") {
  auto g = patchify(Image(64, 64, 3), 32);
  CHECK(g.grid_h == 2);
  CHECK(g.grid_w == 2);
  CHECK(g.tokens.cols() == 3072);

  auto big = patchify(Image(480, 640, 3), 16);
  CHECK(big.grid_h == 30);
  CHECK(big.grid_w == 40);
}

TEST_CASE("patchify rejects non-divisible axes by name") {
  try {
    patchify(Image(50, 64, 3), 32);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    CHECK(std::string(e.what()).find("height") != std::string::npos);
  }
  try {
    patchify(Image(64, 50, 3), 32);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    CHECK(std::string(e.what()).find("width") != std::string::npos);
  }
  CHECK_THROWS_AS(patchify(Image(8, 8, 1), 0), ParameterError);
}

TEST_CASE("patchify layout and round trip") {
  Image img = ramp_image(8, 12, 2);
  auto g = patchify(img, 4);
  // cell (1, 2), inner (py=3, px=1), channel 1
  const int row = 1 * 3 + 2;
  const int col = (3 * 4 + 1) * 2 + 1;
  CHECK(g.tokens(row, col) == img.at(4 + 3, 8 + 1, 1));
  Image back = unpatchify(g, 2);
  CHECK(back.height == 8);
  CHECK(back.width == 12);
  CHECK((back.pixels.array() == img.pixels.array()).all());
}

TEST_CASE("patch sampling counts") {
  std::mt19937_64 rng(1);
  CHECK(sample_mask(8, 8, MaskStrategy::patch, 0.5, rng).zeros() == 32);
  CHECK(sample_mask(4, 4, MaskStrategy::patch, 0.0, rng).zeros() == 0);
  CHECK(sample_mask(4, 4, MaskStrategy::patch, 1.0, rng).zeros() == 16);
  for (int gh : {1, 2, 3, 5, 8}) {
    for (int gw : {1, 2, 4, 7}) {
      for (double r : {0.0, 0.1, 0.25, 0.3, 0.5, 0.7, 0.9, 1.0}) {
        auto m = sample_mask(gh, gw, MaskStrategy::patch, r, rng);
        CHECK(m.zeros() == std::lround(r * (gh * gw)));
      }
    }
  }
  CHECK_THROWS_AS(sample_mask(4, 4, MaskStrategy::patch, -0.1, rng), ParameterError);
  CHECK_THROWS_AS(sample_mask(4, 4, MaskStrategy::patch, 1.1, rng), ParameterError);
}

TEST_CASE("square sampling covers every placement") {
  // Enumerate the 9 offsets of a 2x2 block in a 4x4 grid.
  std::set<std::pair<int, int>> valid;
  for (int y = 0; y <= 2; ++y)
    for (int x = 0; x <= 2; ++x) valid.insert({y, x});
  std::set<std::pair<int, int>> seen;
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 400; ++trial) {
    auto m = sample_mask(4, 4, MaskStrategy::square, 0.0, rng);
    REQUIRE(m.zeros() == 4);
    int y0 = 4, x0 = 4;
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x)
        if (!m.cells(y, x)) {
          y0 = std::min(y0, y);
          x0 = std::min(x0, x);
        }
    REQUIRE(valid.count({y0, x0}) == 1);
    for (int y = y0; y < y0 + 2; ++y)
      for (int x = x0; x < x0 + 2; ++x) REQUIRE(m.cells(y, x) == 0);
    seen.insert({y0, x0});
  }
  CHECK(seen == valid);
}

TEST_CASE("square on odd grids uses ceiling") {
  std::mt19937_64 rng(3);
  auto m = sample_mask(5, 3, MaskStrategy::square, 0.5, rng);
  CHECK(m.zeros() == 3 * 2);
  auto one = sample_mask(1, 1, MaskStrategy::square, 0.5, rng);
  CHECK(one.zeros() == 1);
}

TEST_CASE("sampling is deterministic in the seed") {
  for (auto s : {MaskStrategy::patch, MaskStrategy::square}) {
    std::mt19937_64 a(42), b(42);
    CHECK(sample_mask(8, 8, s, 0.5, a) == sample_mask(8, 8, s, 0.5, b));
  }
}

TEST_CASE("complement") {
  auto ones = grid_from({{1, 1}, {1, 1}});
  CHECK(complement(ones).zeros() == 4);
  auto m = grid_from({{1, 0}, {0, 1}});
  CHECK(complement(m) == grid_from({{0, 1}, {1, 0}}));
  CHECK(complement(complement(m)) == m);
  std::mt19937_64 rng(5);
  auto r = sample_mask(6, 6, MaskStrategy::patch, 0.4, rng);
  CHECK(((r.cells + complement(r).cells) == 1).all());
}

TEST_CASE("broadcast to token grid") {
  auto m = grid_from({{1, 0}, {0, 1}});
  auto b = broadcast_to_token_grid(m, 4, 4);
  CHECK(b.rows() == 4);
  CHECK((b != 0).count() == 8);
  CHECK(b(0, 1) == 1);
  CHECK(b(0, 2) == 0);
  CHECK(b(3, 3) == 1);
  CHECK((broadcast_to_token_grid(m, 2, 2) == m.cells).all());
  auto z = grid_from({{0, 0}, {0, 0}});
  CHECK((broadcast_to_token_grid(z, 6, 6) == 0).all());
  CHECK_THROWS_AS(broadcast_to_token_grid(m, 5, 4), DimensionError);
}

TEST_CASE("apply_complementary_mask hand case") {
  TokenGrid<double> rgb, thr;
  rgb.grid_h = thr.grid_h = 1;
  rgb.grid_w = thr.grid_w = 2;
  rgb.tokens = Eigen::MatrixXd(2, 1);
  rgb.tokens << 5, 7;
  thr.tokens = Eigen::MatrixXd(2, 1);
  thr.tokens << 2, 4;
  thr.modality = Modality::thermal;
  MaskToken<double> lr{RowVector<double>::Constant(1, 9.0), Modality::rgb, true};
  MaskToken<double> lt{RowVector<double>::Constant(1, 8.0), Modality::thermal, true};
  MaskPair pair;
  pair.keep_rgb = grid_from({{1, 0}});
  pair.keep_thr = complement(pair.keep_rgb);
  auto [a, b] = apply_complementary_mask(rgb, thr, pair, lr, lt);
  CHECK(a.tokens(0, 0) == 5);
  CHECK(a.tokens(1, 0) == 9);
  CHECK(b.tokens(0, 0) == 8);
  CHECK(b.tokens(1, 0) == 4);
}

TEST_CASE("apply_complementary_mask extremes and errors") {
  std::mt19937_64 rng(9);
  TokenGrid<double> rgb{Eigen::MatrixXd::Random(16, 3), 4, 4, 4, Modality::rgb};
  TokenGrid<double> thr{Eigen::MatrixXd::Random(16, 3), 4, 4, 4, Modality::thermal};
  MaskToken<double> lr{RowVector<double>::Constant(3, -1.0), Modality::rgb, true};
  MaskToken<double> lt{RowVector<double>::Constant(3, -2.0), Modality::thermal, true};
  MaskPair all;
  all.keep_rgb = grid_from({{1, 1}, {1, 1}});
  all.keep_thr = complement(all.keep_rgb);
  auto [a, b] = apply_complementary_mask(rgb, thr, all, lr, lt);
  CHECK((a.tokens.array() == rgb.tokens.array()).all());
  CHECK((b.tokens.rowwise() - lt.vector).isZero(0));

  MaskPair none;
  none.keep_rgb = grid_from({{0, 0}, {0, 0}});
  none.keep_thr = complement(none.keep_rgb);
  auto [c, d] = apply_complementary_mask(rgb, thr, none, lr, lt);
  CHECK((c.tokens.rowwise() - lr.vector).isZero(0));
  CHECK((d.tokens.array() == thr.tokens.array()).all());

  MaskToken<double> bad{RowVector<double>::Zero(2), Modality::rgb, true};
  CHECK_THROWS_AS(apply_complementary_mask(rgb, thr, all, bad, lt), DimensionError);
}

TEST_CASE("individual masks") {
  std::mt19937_64 rng(11);
  auto p = sample_individual_masks(8, 8, 0.5, 0.5, rng);
  CHECK_FALSE(p.complementary);
  CHECK(p.keep_rgb.zeros() == 32);
  CHECK(p.keep_thr.zeros() == 32);
  auto z = sample_individual_masks(4, 4, 0.0, 0.0, rng);
  CHECK(z.keep_rgb.zeros() == 0);
  CHECK(z.keep_thr.zeros() == 0);
  CHECK_THROWS_AS(sample_individual_masks(4, 4, 0.6, 0.4, rng), ParameterError);

  auto r = sample_individual_masks(8, 8, 0.3, 0.7, rng);
  CHECK(r.keep_rgb.zeros() >= std::lround(0.3 * 64));
  CHECK(r.keep_rgb.zeros() <= std::lround(0.7 * 64));
}

TEST_CASE("individual masks leave a quarter of cells doubly masked") {
  long both = 0;
  for (int seed = 0; seed < 1000; ++seed) {
    std::mt19937_64 rng(seed);
    auto p = sample_individual_masks(8, 8, 0.5, 0.5, rng);
    both += ((p.keep_rgb.cells == 0) && (p.keep_thr.cells == 0)).count();
  }
  const double frac = static_cast<double>(both) / (1000.0 * 64.0);
  CHECK(std::abs(frac - 0.25) <= 0.02);
}

TEST_CASE("mask overlay") {
  Image img = ramp_image(8, 8, 3);
  auto ones = grid_from({{1, 1}, {1, 1}});
  ones.cell_px = 4;
  CHECK((render_mask_overlay(img, ones).pixels.array() == img.pixels.array()).all());
  auto zeros = grid_from({{0, 0}, {0, 0}});
  zeros.cell_px = 4;
  CHECK((render_mask_overlay(img, zeros, 0.25).pixels.array() == 0.25).all());
  auto one = grid_from({{1, 0}, {1, 1}});
  one.cell_px = 4;
  Image out = render_mask_overlay(img, one, 0.0);
  int changed = 0;
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      const bool blank = out.at(y, x, 0) == 0.0 && out.at(y, x, 2) == 0.0;
      if (y < 4 && x >= 4) {
        CHECK(blank);
        ++changed;
      } else {
        CHECK(out.at(y, x, 1) == img.at(y, x, 1));
      }
    }
  CHECK(changed == 16);
  auto odd = grid_from({{1, 0, 1}});
  odd.cell_px = 4;
  CHECK_THROWS_AS(render_mask_overlay(img, odd), DimensionError);
}

TEST_CASE("mask grid text round trip") {
  std::mt19937_64 rng(2);
  auto m = sample_mask(3, 5, MaskStrategy::patch, 0.4, rng, 8);
  std::stringstream ss;
  write_mask_grid(ss, m);
  CHECK(ss.str().substr(0, 10).find('\n') != std::string::npos);
  auto back = read_mask_grid(ss, 8);
  CHECK(back == m);
}
