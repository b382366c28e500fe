#include "doctest.h"

#include "gradcheck.hpp"
#include "oracles.hpp"

#include "crm/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

using namespace crm;
using namespace oracle;

namespace {

PredictionVars<double> vars(Tape<double>& t, const Eigen::MatrixXd& cls, const Eigen::MatrixXd& z, int h, int w,
                            PredictionSource src = PredictionSource::rgbt, bool masked = false) {
  return {t.constant(cls), t.constant(z), h, w, src, masked};
}

}  // namespace

TEST_CASE("dice hand cases") {
  CHECK(dice_loss(Eigen::ArrayXd::Ones(16), BinaryMask::Ones(16)) == 0.0);
  CHECK(dice_loss(Eigen::ArrayXd::Ones(16), BinaryMask::Zero(16)) == doctest::Approx(1 - 1.0 / 17));
  CHECK(dice_loss(Eigen::ArrayXd::Constant(4, 0.5), BinaryMask::Ones(4)) == 1.0 - 5.0 / 7.0);
  CHECK_THROWS_AS(dice_loss(Eigen::ArrayXd::Ones(3), BinaryMask::Ones(4)), DimensionError);
}

TEST_CASE("bce hand cases") {
  CHECK(bce_loss(Eigen::ArrayXd::Zero(9), mask_of({1, 0, 1, 0, 1, 0, 1, 1, 1})) == doctest::Approx(std::log(2.0)));
  Eigen::ArrayXd big(2);
  big << 60.0, -60.0;
  CHECK(bce_loss(big, mask_of({1, 0})) < 1e-20);
  CHECK(bce_loss(Eigen::ArrayXd::Constant(1, 1.0), mask_of({1})) == doctest::Approx(std::log1p(std::exp(-1.0))));
  CHECK(bce_loss(Eigen::ArrayXd::Constant(1, 1.0), mask_of({1})) == doctest::Approx(0.3133).epsilon(1e-4));
  CHECK_THROWS_AS(bce_loss(Eigen::ArrayXd::Ones(3), BinaryMask::Ones(4)), DimensionError);
}

TEST_CASE("mask loss") {
  LossWeights w;
  CHECK(mask_loss(Eigen::ArrayXd::Zero(4), BinaryMask::Ones(4), w) ==
        doctest::Approx(5 * std::log(2.0) + 5 * (1 - 5.0 / 7.0)));
  CHECK(mask_loss(Eigen::ArrayXd::Zero(4), BinaryMask::Ones(4), w) == doctest::Approx(4.894).epsilon(1e-3));
  CHECK(mask_loss(Eigen::ArrayXd::Constant(16, 40.0), BinaryMask::Ones(16), w) < 1e-10);
  LossWeights no_ce = w;
  no_ce.ce = 0;
  Eigen::ArrayXd z(4);
  z << 0.3, -1.0, 2.0, 0.0;
  const BinaryMask g = mask_of({1, 0, 1, 1});
  const Eigen::ArrayXd p = 1.0 / (1.0 + (-z).exp());
  CHECK(mask_loss(z, g, no_ce) == doctest::Approx(5 * dice_loss(p, g)));
}

TEST_CASE("valid mask restricts the pixels") {
  Eigen::ArrayXd z(4);
  z << 0.3, -1.0, 50.0, 0.0;
  const BinaryMask g = mask_of({1, 0, 0, 1});
  const BinaryMask valid = mask_of({1, 1, 0, 1});
  Eigen::ArrayXd z3(3);
  z3 << 0.3, -1.0, 0.0;
  CHECK(bce_loss(z, g, &valid) == doctest::Approx(bce_loss(z3, mask_of({1, 0, 1}))));
}

TEST_CASE("supervised loss against scalar oracle") {
  std::mt19937_64 rng(17);
  LossWeights w;
  for (int trial = 0; trial < 40; ++trial) {
    const int K = 3, N = 4, h = 4, wd = 4;
    GtSegments gt = random_gt(h, wd, K, rng, trial % 2 == 0);
    Eigen::MatrixXd cls = random_normal<double>(N, K + 1, 1.5, rng);
    Eigen::MatrixXd z = random_normal<double>(h * wd, N, 2.0, rng);
    Tape<double> t(false);
    const double got = supervised_loss(vars(t, cls, z, h, wd), gt, w).scalar();
    const double want = ref_supervised(cls, z, gt, w);
    REQUIRE(std::abs(got - want) <= 1e-9 * std::abs(want));
  }
}

TEST_CASE("supervised loss on a hand-built pair") {
  // One segment covering the left column of a 2x2 image, N = 2, K = 1.
  LabelMap dense(2, 2, kIgnoreLabel);
  dense.labels << 0, kIgnoreLabel, 0, kIgnoreLabel;
  GtSegments gt = segments_from_labels(dense, 1);
  REQUIRE(gt.segments.size() == 1);
  Eigen::MatrixXd cls(2, 2);
  cls << 2.0, -1.0,
         0.0, 1.0;
  Eigen::MatrixXd z(4, 2);
  z << 3.0, -2.0,
       0.0, 0.0,
       1.0, 0.5,
       0.0, 0.0;
  LossWeights w;
  // Query 0 matches (high class-0 score, positive logits on the mask).
  const double p0 = 1 / (1 + std::exp(-3.0)), p1 = 1 / (1 + std::exp(-1.0));
  const double bce = (std::log1p(std::exp(-3.0)) + std::log1p(std::exp(-1.0))) / 2;
  const double dice = 1 - (2 * (p0 + p1) + 1) / (p0 + p1 + 2 + 1);
  const double ce0 = std::log(std::exp(2.0) + std::exp(-1.0)) - 2.0;
  const double ce1 = std::log(1 + std::exp(1.0)) - 1.0;
  const double want = 5 * bce + 5 * dice + 2 * ce0 + 0.1 * ce1;
  Tape<double> t(false);
  CHECK(supervised_loss(vars(t, cls, z, 2, 2), gt, w).scalar() == doctest::Approx(want).epsilon(1e-12));
  auto a = hungarian_match(Prediction<double>{cls, z, 2, 2}, gt, w);
  REQUIRE(a.pairs.size() == 1);
  CHECK(a.pairs[0] == std::pair<int, int>{0, 0});
  CHECK(a.unmatched_queries == std::vector<int>{1});
}

TEST_CASE("supervised loss edge cases") {
  LossWeights w;
  Tape<double> t(false);
  // Uniform logits, K = 1, empty ground truth: every query pays 0.1 * ln 2.
  GtSegments empty = segments_from_labels(LabelMap(2, 2, kIgnoreLabel), 1);
  const Eigen::MatrixXd uni = Eigen::MatrixXd::Zero(3, 2);
  CHECK(supervised_loss(vars(t, uni, Eigen::MatrixXd::Zero(4, 3), 2, 2), empty, w).scalar() ==
        doctest::Approx(3 * 0.1 * std::log(2.0)));

  // Saturated perfect prediction tends to zero.
  LabelMap dense(2, 2);
  dense.labels << 0, 0, 1, 1;
  GtSegments gt = segments_from_labels(dense, 2);
  Eigen::MatrixXd cls = Eigen::MatrixXd::Constant(3, 3, -40.0);
  cls(0, 0) = 40;
  cls(1, 1) = 40;
  cls(2, 2) = 40;
  Eigen::MatrixXd z(4, 3);
  z << 40, -40, -40,
       40, -40, -40,
      -40, 40, -40,
      -40, 40, -40;
  CHECK(supervised_loss(vars(t, cls, z, 2, 2), gt, w).scalar() < 1e-10);

  // More segments than queries.
  CHECK_THROWS_AS(supervised_loss(vars(t, Eigen::MatrixXd::Zero(1, 3), Eigen::MatrixXd::Zero(4, 1), 2, 2), gt, w),
                  CapacityError);
}

TEST_CASE("segment order does not change the loss") {
  std::mt19937_64 rng(23);
  LossWeights w;
  GtSegments gt = random_gt(4, 4, 4, rng, false);
  REQUIRE(gt.segments.size() >= 2);
  Eigen::MatrixXd cls = random_normal<double>(5, 5, 1.0, rng);
  Eigen::MatrixXd z = random_normal<double>(16, 5, 1.0, rng);
  Tape<double> t(false);
  const double a = supervised_loss(vars(t, cls, z, 4, 4), gt, w).scalar();
  std::reverse(gt.segments.begin(), gt.segments.end());
  const double b = supervised_loss(vars(t, cls, z, 4, 4), gt, w).scalar();
  CHECK(a == doctest::Approx(b).epsilon(1e-12));
}

TEST_CASE("matching equals exhaustive minimum") {
  std::mt19937_64 rng(31);
  LossWeights w;
  for (int trial = 0; trial < 100; ++trial) {
    const int N = 1 + trial % 6;
    GtSegments gt = random_gt(3, 3, 6, rng, false);
    while (static_cast<int>(gt.segments.size()) > N) gt.segments.pop_back();
    Prediction<double> p{random_normal<double>(N, 7, 1.0, rng), random_normal<double>(9, N, 1.0, rng), 3, 3};
    const Eigen::MatrixXd cost = matching_cost(p.class_logits, p.mask_logits, gt, w);
    auto a = hungarian_match(p, gt, w);
    double got = 0;
    for (auto [q, s] : a.pairs) got += cost(q, s);
    std::vector<int> perm(N);
    std::iota(perm.begin(), perm.end(), 0);
    double best = 1e300;
    do {
      double c = 0;
      for (std::size_t s = 0; s < gt.segments.size(); ++s) c += cost(perm[s], static_cast<Eigen::Index>(s));
      best = std::min(best, c);
    } while (std::next_permutation(perm.begin(), perm.end()));
    REQUIRE(got == doctest::Approx(best).epsilon(1e-12));
    REQUIRE(a.pairs.size() + a.unmatched_queries.size() == static_cast<std::size_t>(N));
  }
}

TEST_CASE("matching cost entries follow the definition") {
  std::mt19937_64 rng(37);
  LossWeights w;
  GtSegments gt = random_gt(4, 4, 3, rng, true);
  Eigen::MatrixXd cls = random_normal<double>(4, 4, 1.0, rng);
  Eigen::MatrixXd z = random_normal<double>(16, 4, 1.0, rng);
  const Eigen::MatrixXd cost = matching_cost(cls, z, gt, w);
  const BinaryMask valid = gt.valid();
  for (int n = 0; n < 4; ++n)
    for (std::size_t s = 0; s < gt.segments.size(); ++s) {
      double e = 0;
      for (int k = 0; k < 4; ++k) e += std::exp(cls(n, k));
      const double want = -2.0 * std::exp(cls(n, gt.segments[s].class_id)) / e +
                          ref_mask_loss(z, n, gt.segments[s].mask, valid, w);
      CHECK(cost(n, static_cast<Eigen::Index>(s)) == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("distillation distances") {
  Tape<double> t(false);
  Eigen::MatrixXd a(2, 2), b = Eigen::MatrixXd::Zero(2, 2);
  a << 1, 0, 0, 1;
  auto clean = vars(t, a, Eigen::MatrixXd::Zero(4, 2), 2, 2);
  auto masked = vars(t, b, Eigen::MatrixXd::Zero(4, 2), 2, 2, PredictionSource::rgbt, true);
  CHECK(l1_class_distance(clean, masked).scalar() == 0.5);
  CHECK(l1_class_distance(clean, clean).scalar() == 0.0);
  CHECK(l1_class_distance(clean.value(), masked.value()) == 0.5);
  CHECK(sdc_loss(clean, masked).scalar() == 0.5);
  CHECK_THROWS_AS(sdc_loss(masked, clean), ContractError);

  std::mt19937_64 rng(41);
  Eigen::MatrixXd c = random_normal<double>(3, 4, 1.0, rng);
  Eigen::MatrixXd r = random_normal<double>(3, 4, 1.0, rng);
  auto cv = vars(t, c, Eigen::MatrixXd::Zero(4, 3), 2, 2);
  for (double alpha : {0.5, 2.0, -3.0}) {
    auto mv = vars(t, c + alpha * r, Eigen::MatrixXd::Zero(4, 3), 2, 2, PredictionSource::rgbt, true);
    CHECK(sdc_loss(cv, mv).scalar() == doctest::Approx(std::abs(alpha) * r.cwiseAbs().mean()));
  }
  auto mr = vars(t, c.array() + 0.25, Eigen::MatrixXd::Zero(4, 3), 2, 2, PredictionSource::rgb_only, true);
  auto mt = vars(t, c.array() - 0.25, Eigen::MatrixXd::Zero(4, 3), 2, 2, PredictionSource::thr_only, true);
  CHECK(sdn_loss(cv, mr, mt).scalar() == doctest::Approx(0.5));
  CHECK_THROWS_AS(sdn_loss(cv, mt, mr), ContractError);
  CHECK_THROWS_AS(l1_class_distance(cv, clean), DimensionError);
}

TEST_CASE("teacher receives no gradient") {
  std::mt19937_64 rng(43);
  Parameter<double> teacher, student;
  teacher.value = random_normal<double>(3, 4, 1.0, rng);
  student.value = random_normal<double>(3, 4, 1.0, rng);
  Tape<double> t;
  PredictionVars<double> c{t.parameter(teacher), t.constant(Eigen::MatrixXd::Zero(4, 3)), 2, 2};
  PredictionVars<double> m{t.parameter(student), t.constant(Eigen::MatrixXd::Zero(4, 3)), 2, 2,
                           PredictionSource::rgbt, true};
  t.backward(sdc_loss(c, m));
  CHECK(teacher.grad.size() == 0);
  CHECK(student.grad.cwiseAbs().sum() > 0);
}

TEST_CASE("mws and total composition") {
  std::mt19937_64 rng(47);
  LossWeights w;
  GtSegments gt = random_gt(4, 4, 3, rng, true);
  auto mk = [&](Tape<double>& t, PredictionSource s, bool m) {
    return vars(t, random_normal<double>(4, 4, 1.0, rng), random_normal<double>(16, 4, 1.0, rng), 4, 4, s, m);
  };
  Tape<double> t(false);
  ForwardVariants<double> v;
  v.clean_pair = mk(t, PredictionSource::rgbt, false);
  v.clean_rgb = mk(t, PredictionSource::rgb_only, false);
  v.clean_thr = mk(t, PredictionSource::thr_only, false);
  v.masked_pair = mk(t, PredictionSource::rgbt, true);
  v.masked_rgb = mk(t, PredictionSource::rgb_only, true);
  v.masked_thr = mk(t, PredictionSource::thr_only, true);

  const double s_pair = supervised_loss(*v.clean_pair, gt, w).scalar();
  const double s_rgb = supervised_loss(*v.clean_rgb, gt, w).scalar();
  const double s_thr = supervised_loss(*v.clean_thr, gt, w).scalar();
  const double s_mask = supervised_loss(*v.masked_pair, gt, w).scalar();
  CHECK(mws_loss(*v.clean_pair, *v.clean_rgb, *v.clean_thr, &*v.masked_pair, gt, w).scalar() ==
        doctest::Approx(s_pair + s_rgb + s_thr + s_mask).epsilon(1e-12));
  CHECK(mws_loss<double>(*v.clean_pair, *v.clean_rgb, *v.clean_thr, nullptr, gt, w).scalar() ==
        doctest::Approx(s_pair + s_rgb + s_thr).epsilon(1e-12));

  LossFlags all;
  auto b = total_loss(v, gt, w, all);
  CHECK(b.total_value() == doctest::Approx(b.supervised_value() + b.sdc_value() + b.sdn_value()).epsilon(1e-12));
  CHECK(b.sdc_value() == doctest::Approx(l1_class_distance(v.clean_pair->value(), v.masked_pair->value())));

  LossFlags baseline{false, false, false, false, true};
  auto base = total_loss(v, gt, w, baseline);
  CHECK(base.total_value() == doctest::Approx(s_pair).epsilon(1e-12));
  CHECK_FALSE(base.sdc.valid());

  ForwardVariants<double> partial;
  partial.clean_pair = v.clean_pair;
  CHECK_THROWS_AS(total_loss(partial, gt, w, all), ContractError);
}

TEST_CASE("zero residuals leave only supervision") {
  std::mt19937_64 rng(53);
  LossWeights w;
  GtSegments gt = random_gt(4, 4, 3, rng, false);
  Tape<double> t(false);
  const Eigen::MatrixXd cls = random_normal<double>(4, 4, 1.0, rng);
  const Eigen::MatrixXd z = random_normal<double>(16, 4, 1.0, rng);
  ForwardVariants<double> v;
  v.clean_pair = vars(t, cls, z, 4, 4);
  v.clean_rgb = vars(t, cls, z, 4, 4, PredictionSource::rgb_only);
  v.clean_thr = vars(t, cls, z, 4, 4, PredictionSource::thr_only);
  v.masked_pair = vars(t, cls, z, 4, 4, PredictionSource::rgbt, true);
  v.masked_rgb = vars(t, cls, z, 4, 4, PredictionSource::rgb_only, true);
  v.masked_thr = vars(t, cls, z, 4, 4, PredictionSource::thr_only, true);
  auto b = total_loss(v, gt, w, LossFlags{});
  CHECK(b.sdc_value() == 0.0);
  CHECK(b.sdn_value() == 0.0);
  CHECK(b.total_value() == b.supervised_value());
}

TEST_CASE("supervised loss gradient") {
  std::mt19937_64 rng(59);
  LossWeights w;
  GtSegments gt = random_gt(6, 6, 3, rng, true);
  auto r = gradcheck::inputs(
      [&](Tape<double>&, const std::vector<Var<double>>& x) {
        PredictionVars<double> p{x[0], x[1], 3, 3};
        return supervised_loss(p, gt, w);
      },
      {random_normal<double>(4, 4, 1.0, rng), random_normal<double>(9, 4, 1.0, rng)});
  CHECK(r.passed == r.checked);
}
