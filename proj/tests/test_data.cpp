#include "doctest.h"

#include "crm/data.hpp"
#include "crm/errors.hpp"
#include "crm/png_io.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace crm;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("crm_test_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

SceneSpec quiet_spec() {
  SceneSpec s;
  s.noise_std = 0.0;
  return s;
}

// max spread of thr - 0.05 y / H along each anti-diagonal; the thermal
// background depends on x + y only once the vertical gradient is removed.
double thermal_background_spread(const ScenePair& p) {
  const int H = p.height(), W = p.width();
  std::vector<double> lo(H + W, 1e9), hi(H + W, -1e9);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double v = p.thr.at(y, x, 0) - 0.05 * y / H;
      lo[x + y] = std::min(lo[x + y], v);
      hi[x + y] = std::max(hi[x + y], v);
    }
  double spread = 0.0;
  for (int d = 0; d < H + W - 1; ++d) spread = std::max(spread, hi[d] - lo[d]);
  return spread;
}

// rgb channel 0 + channel 1 is constant over the background.
double rgb_background_spread(const ScenePair& p) {
  const Eigen::ArrayXd s = p.rgb.pixels.col(0).array() + p.rgb.pixels.col(1).array();
  return s.maxCoeff() - s.minCoeff();
}

}  // namespace

TEST_CASE("scene generation is deterministic") {
  const SceneSpec spec;
  auto a = generate_dataset(spec, 5, 77);
  auto b = generate_dataset(spec, 5, 77);
  REQUIRE(a.size() == 5);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].id == b[i].id);
    CHECK((a[i].rgb.pixels.array() == b[i].rgb.pixels.array()).all());
    CHECK((a[i].thr.pixels.array() == b[i].thr.pixels.array()).all());
    CHECK((a[i].gt.dense.labels == b[i].gt.dense.labels).all());
  }
  auto c = generate_dataset(spec, 1, 78);
  CHECK_FALSE((a[0].rgb.pixels.array() == c[0].rgb.pixels.array()).all());
  CHECK(a[3].id == "0003");
}

TEST_CASE("scene contents") {
  const SceneSpec spec;
  for (const auto& p : generate_dataset(spec, 50, 3)) {
    CHECK(p.rgb.height == 64);
    CHECK(p.rgb.channels == 3);
    CHECK(p.thr.channels == 1);
    CHECK(p.rgb.pixels.minCoeff() >= 0.0);
    CHECK(p.rgb.pixels.maxCoeff() <= 1.0);
    CHECK(p.thr.pixels.minCoeff() >= 0.0);
    CHECK(p.thr.pixels.maxCoeff() <= 1.0);
    CHECK(gt_consistent(p.gt));
    CHECK(p.objects.size() <= 5);
    CHECK((p.gt.dense.labels >= 0).all());
    CHECK((p.gt.dense.labels < spec.num_classes).all());
    // every pixel is labelled: background is a scored class
    CHECK((p.gt.dense.labels != kIgnoreLabel).all());
    for (const auto& o : p.objects) {
      CHECK(o.class_id >= 1);
      CHECK(o.class_id < spec.num_classes);
    }
  }
}

TEST_CASE("rgb-only objects leave the thermal image untouched") {
  SceneSpec spec = quiet_spec();
  spec.rgb_only_fraction = 1.0;
  spec.thr_only_fraction = 0.0;
  spec.both_fraction = 0.0;
  for (const auto& p : generate_dataset(spec, 20, 5)) {
    REQUIRE_FALSE(p.objects.empty());
    CHECK(thermal_background_spread(p) < 1e-12);
    CHECK(rgb_background_spread(p) > 0.01);
  }

  spec.rgb_only_fraction = 0.0;
  spec.thr_only_fraction = 1.0;
  for (const auto& p : generate_dataset(spec, 20, 5)) {
    CHECK(rgb_background_spread(p) < 1e-12);
    CHECK(thermal_background_spread(p) > 0.01);
  }
}

TEST_CASE("visibility draws follow the configured fractions") {
  const SceneSpec spec;
  std::array<int, 3> counts{0, 0, 0};
  int n = 0;
  for (const auto& p : generate_dataset(spec, 500, 11)) {
    for (const auto& o : p.objects) {
      ++counts[static_cast<int>(o.visibility)];
      ++n;
    }
  }
  REQUIRE(n > 500);
  const double sigma = std::sqrt(n * (1.0 / 3.0) * (2.0 / 3.0));
  for (int c : counts) CHECK(std::abs(c - n / 3.0) <= 3.0 * sigma);
}

TEST_CASE("scene spec validation") {
  SceneSpec s;
  s.width = 60;
  CHECK_THROWS_AS(s.validate(), ParameterError);
  s = SceneSpec{};
  s.rgb_only_fraction = -0.1;
  CHECK_THROWS_AS(s.validate(), ParameterError);
  s = SceneSpec{};
  s.min_objects = 4;
  s.max_objects = 2;
  CHECK_THROWS_AS(s.validate(), ParameterError);
}

TEST_CASE("dataset directory round trip") {
  const auto root = scratch("roundtrip");
  auto pairs = generate_dataset(SceneSpec{}, 4, 9);
  write_dataset(root, pairs, {{"0000", "train"}, {"0001", "train"}, {"0002", "val"}, {"0003", "val"}});
  auto all = load_dataset(root, 4);
  REQUIRE(all.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    const auto back = all.get(i);
    CHECK(back.id == pairs[i].id);
    CHECK((back.rgb.pixels - pairs[i].rgb.pixels).cwiseAbs().maxCoeff() <= 0.5 / 255.0 + 1e-12);
    CHECK((back.thr.pixels - pairs[i].thr.pixels).cwiseAbs().maxCoeff() <= 0.5 / 255.0 + 1e-12);
    CHECK((back.gt.dense.labels == pairs[i].gt.dense.labels).all());
    CHECK(back.gt.segments.size() == pairs[i].gt.segments.size());
  }
  auto val = load_dataset(root, 4, "val");
  REQUIRE(val.size() == 2);
  CHECK(val.id(0) == "0002");
  CHECK(load_dataset(root, 4, "test").size() == 0);
}

TEST_CASE("loader edge cases") {
  SUBCASE("empty directory") {
    const auto root = scratch("empty");
    CHECK(load_dataset(root, 4).size() == 0);
  }
  SUBCASE("missing root") {
    CHECK_THROWS_AS(load_dataset(fs::temp_directory_path() / "crm_test_data_absent_dir", 4), IoError);
  }
  SUBCASE("single triple") {
    const auto root = scratch("single");
    write_dataset(root, generate_dataset(SceneSpec{}, 1, 2));
    auto d = load_dataset(root, 4);
    REQUIRE(d.size() == 1);
    CHECK(d.get(0).rgb.height == 64);
  }
  SUBCASE("missing thermal file names id and path") {
    const auto root = scratch("missing");
    write_dataset(root, generate_dataset(SceneSpec{}, 4, 2));
    fs::remove(root / "thr" / "0003.png");
    try {
      load_dataset(root, 4);
      FAIL("expected DataError");
    } catch (const DataError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("0003") != std::string::npos);
      CHECK(msg.find((root / "thr" / "0003.png").string()) != std::string::npos);
    }
  }
  SUBCASE("label out of range") {
    const auto root = scratch("badlabel");
    auto pairs = generate_dataset(SceneSpec{}, 1, 2);
    write_dataset(root, pairs);
    LabelMap bad = pairs[0].gt.dense;
    bad.at(3, 3) = 7;
    write_label_png(root / "labels" / "0000.png", bad);
    auto d = load_dataset(root, 4);
    try {
      d.get(0);
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("0000") != std::string::npos);
    }
  }
  SUBCASE("split requested without split file") {
    const auto root = scratch("nosplit");
    write_dataset(root, generate_dataset(SceneSpec{}, 1, 2));
    CHECK_THROWS_AS(load_dataset(root, 4, "train"), DataError);
  }
}

TEST_CASE("augmentation") {
  auto pair = generate_dataset(SceneSpec{}, 1, 21)[0];

  SUBCASE("flip is an involution") {
    auto twice = flip_horizontal(flip_horizontal(pair));
    CHECK((twice.rgb.pixels.array() == pair.rgb.pixels.array()).all());
    CHECK((twice.gt.dense.labels == pair.gt.dense.labels).all());
    auto once = flip_horizontal(pair);
    CHECK(once.rgb.at(5, 0, 1) == pair.rgb.at(5, 63, 1));
    CHECK(once.gt.dense.at(9, 2) == pair.gt.dense.at(9, 61));
    CHECK(gt_consistent(once.gt));
  }
  SUBCASE("full-size crop is the identity") {
    auto c = crop(pair, 0, 0, 64, 64);
    CHECK((c.rgb.pixels.array() == pair.rgb.pixels.array()).all());
    CHECK((c.thr.pixels.array() == pair.thr.pixels.array()).all());
    CHECK((c.gt.dense.labels == pair.gt.dense.labels).all());
  }
  SUBCASE("crop window") {
    auto c = crop(pair, 32, 0, 32, 32);
    CHECK(c.height() == 32);
    CHECK(c.rgb.at(0, 0, 2) == pair.rgb.at(32, 0, 2));
    CHECK(c.gt.dense.at(4, 7) == pair.gt.dense.at(36, 7));
    CHECK(gt_consistent(c.gt));
    CHECK_THROWS_AS(crop(pair, 40, 0, 32, 32), ParameterError);
  }
  SUBCASE("random augmentation keeps ground truth consistent") {
    AugmentConfig cfg;
    cfg.crop_height = cfg.crop_width = 32;
    for (int s = 0; s < 20; ++s) {
      std::mt19937_64 rng(s);
      auto a = augment(pair, rng, cfg);
      CHECK(a.height() == 32);
      CHECK(gt_consistent(a.gt));
      CHECK(a.rgb.pixels.minCoeff() >= 0.0);
      CHECK(a.rgb.pixels.maxCoeff() <= 1.0);
    }
    cfg.crop_height = 30;
    std::mt19937_64 rng(0);
    CHECK_THROWS_AS(augment(pair, rng, cfg), ParameterError);
  }
  SUBCASE("augmentation is deterministic in the rng") {
    AugmentConfig cfg;
    std::mt19937_64 a(4), b(4);
    CHECK((augment(pair, a, cfg).rgb.pixels.array() == augment(pair, b, cfg).rgb.pixels.array()).all());
  }
}
