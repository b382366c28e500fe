#include "doctest.h"

#include "gradcheck.hpp"

#include "crm/losses.hpp"
#include "crm/model.hpp"

#include <random>

using namespace crm;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.embed_dim = 8;
  c.heads = 2;
  c.queries = 2;
  c.num_classes = 2;
  c.decoder_layers = 1;
  c.input_height = 16;
  c.input_width = 16;
  c.window = 2;
  return c;
}

Image random_image(int h, int w, int c, std::mt19937_64& rng) {
  Image img(h, w, c);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (Eigen::Index i = 0; i < img.pixels.size(); ++i) img.pixels.data()[i] = u(rng);
  return img;
}

bool same(const Prediction<double>& a, const Prediction<double>& b) {
  return (a.class_logits.array() == b.class_logits.array()).all() && (a.mask_logits.array() == b.mask_logits.array()).all();
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c;
  CHECK_NOTHROW(c.validate());
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig{};
  c.queries = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig{};
  c.input_height = 8;
  c.input_width = 8;
  c.encoder_stages = 3;  // 2x2 -> 1x1 -> cannot halve again
  CHECK_THROWS_AS(Model<double>(c, 1), ConfigError);
}

TEST_CASE("shape contracts across a config sweep") {
  std::mt19937_64 rng(1);
  for (int n : {1, 4, 8}) {
    for (int k : {1, 4, 19}) {
      for (int stages : {1, 2, 3}) {
        ModelConfig c = tiny();
        c.queries = n;
        c.num_classes = k;
        c.encoder_stages = stages;
        c.input_height = c.input_width = 32;
        Model<double> m(c, 3);
        Image rgb = random_image(32, 32, 3, rng), thr = random_image(32, 32, 1, rng);
        auto p = m.predict(&rgb, &thr);
        REQUIRE(p.class_logits.rows() == n);
        REQUIRE(p.class_logits.cols() == k + 1);
        REQUIRE(p.mask_logits.cols() == n);
        REQUIRE(p.mask_h == 8);
        REQUIRE(p.mask_w == 8);
        REQUIRE(p.mask_logits.rows() == 64);
        auto labels = semantic_inference(p, 32, 32);
        REQUIRE(labels.labels.size() == 32 * 32);
        REQUIRE(labels.labels.minCoeff() >= 0);
        REQUIRE(labels.labels.maxCoeff() < k);
      }
    }
  }
}

TEST_CASE("embedding") {
  Model<double> m(tiny(), 2);
  auto zero = m.embed(patchify(Image(16, 16, 3), 4));
  CHECK(zero.grid_h == 4);
  CHECK(zero.tokens.cols() == 8);
  const auto* bias = m.parameters().find("encoder.rgb.embed.bias");
  REQUIRE(bias);
  CHECK((zero.tokens.rowwise() - bias->value.row(0)).isZero(0));

  std::mt19937_64 rng(5);
  Image a = random_image(16, 16, 3, rng);
  Image b = a;
  b.pixels(5 * 16 + 9, 1) += 0.5;  // pixel (5, 9) lives in cell (1, 2)
  auto ea = m.embed(patchify(a, 4)), eb = m.embed(patchify(b, 4));
  for (int r = 0; r < 16; ++r) {
    if (r == 1 * 4 + 2) {
      CHECK_FALSE((ea.tokens.row(r).array() == eb.tokens.row(r).array()).all());
    } else {
      CHECK((ea.tokens.row(r).array() == eb.tokens.row(r).array()).all());
    }
  }
  CHECK_THROWS_AS(m.embed(patchify(Image(16, 16, 2), 4)), DimensionError);
}

TEST_CASE("encoder pyramid") {
  ModelConfig c = tiny();
  c.input_height = c.input_width = 32;
  Model<double> m(c, 4);
  std::mt19937_64 rng(6);
  TokenGrid<double> x{random_normal<double>(64, 8, 1.0, rng), 8, 8, 4, Modality::rgb};
  auto f = m.encode(x);
  REQUIRE(f.levels.size() == 2);
  CHECK(f.levels[0].h == 8);
  CHECK(f.levels[0].features.cols() == 8);
  CHECK(f.levels[1].h == 4);
  CHECK(f.levels[1].w == 4);
  CHECK(f.levels[1].features.cols() == 16);
  auto again = m.encode(x);
  CHECK((again.levels[1].features.array() == f.levels[1].features.array()).all());
  TokenGrid<double> xt = x;
  xt.modality = Modality::thermal;
  auto ft = m.encode(xt);
  CHECK_FALSE(ft.levels[1].features.isApprox(f.levels[1].features));
}

TEST_CASE("fusion") {
  Model<double> m(tiny(), 5);
  FeaturePyramid<double> a, b;
  Eigen::MatrixXd fa(1, 2), fb(1, 2);
  fa << 1, -2;
  fb << 0, 3;
  a.levels.push_back({fa, 1, 1});
  b.levels.push_back({fb, 1, 1});
  auto f = m.fuse(a, b);
  CHECK(f.levels[0].features(0, 0) == doctest::Approx(-1.0).epsilon(1e-6));
  CHECK(f.levels[0].features(0, 1) == doctest::Approx(1.0).epsilon(1e-6));

  std::mt19937_64 rng(7);
  FeaturePyramid<double> p, q;
  p.levels.push_back({random_normal<double>(16, 8, 1.0, rng), 4, 4});
  q.levels.push_back({random_normal<double>(16, 8, 1.0, rng), 4, 4});
  auto pq = m.fuse(p, q), qp = m.fuse(q, p);
  CHECK((pq.levels[0].features.array() == qp.levels[0].features.array()).all());
  auto pp = m.fuse(p, p);
  Tape<double> t(false);
  auto norm = ad::standardize_rows(t.constant(p.levels[0].features), 1e-6).value();
  CHECK((pp.levels[0].features.array() == norm.array()).all());
  CHECK(pq.levels[0].features.rowwise().mean().cwiseAbs().maxCoeff() < 1e-12);

  FeaturePyramid<double> bad;
  bad.levels.push_back({random_normal<double>(16, 4, 1.0, rng), 4, 4});
  CHECK_THROWS_AS(m.fuse(p, bad), DimensionError);
}

TEST_CASE("pixel decoder") {
  ModelConfig c = tiny();
  c.input_height = c.input_width = 32;
  Model<double> m(c, 8);
  std::mt19937_64 rng(9);
  Tape<double> t(false);
  PyramidVars<double> f;
  f.levels.push_back({t.constant(random_normal<double>(64, 8, 1.0, rng)), 8, 8});
  const Eigen::MatrixXd coarse = random_normal<double>(16, 16, 1.0, rng);
  f.levels.push_back({t.constant(coarse), 4, 4});
  auto pix = m.decode_pixels(t, f);
  CHECK(pix.pixel_embeddings.h == 8);
  CHECK(pix.pixel_embeddings.features.rows() == 64);
  CHECK(pix.pixel_embeddings.features.cols() == 8);
  CHECK(pix.memory.size() == 2);
  CHECK(pix.memory[0].h == 4);

  PyramidVars<double> g = f;
  g.levels[1].features = t.constant(2.0 * coarse);
  auto pix2 = m.decode_pixels(t, g);
  CHECK_FALSE(pix2.pixel_embeddings.features.value().isApprox(pix.pixel_embeddings.features.value()));

  PyramidVars<double> single;
  single.levels.push_back(f.levels[0]);
  auto ps = m.decode_pixels(t, single);
  CHECK(ps.pixel_embeddings.h == 8);
}

TEST_CASE("query decoder") {
  ModelConfig c = tiny();
  c.queries = 1;
  c.num_classes = 1;
  Model<double> m(c, 10);
  std::mt19937_64 rng(11);
  Tape<double> t(false);
  PixelDecoding<double> pix;
  pix.memory.push_back({t.constant(random_normal<double>(4, 8, 1.0, rng)), 2, 2});
  pix.pixel_embeddings = {t.constant(Eigen::MatrixXd::Zero(16, 8)), 4, 4};
  auto p = m.decode_queries(t, pix);
  CHECK(p.class_logits.rows() == 1);
  CHECK(p.class_logits.cols() == 2);
  CHECK(p.mask_logits.rows() == 16);
  CHECK(p.mask_logits.value().isZero(0));

  const Eigen::MatrixXd emb = random_normal<double>(16, 8, 1.0, rng);
  std::vector<int> perm(16);
  for (int i = 0; i < 16; ++i) perm[i] = (i * 5 + 3) % 16;
  Eigen::MatrixXd permuted(16, 8);
  for (int i = 0; i < 16; ++i) permuted.row(i) = emb.row(perm[i]);
  pix.pixel_embeddings.features = t.constant(emb);
  auto a = m.decode_queries(t, pix).mask_logits.value();
  pix.pixel_embeddings.features = t.constant(permuted);
  auto b = m.decode_queries(t, pix).mask_logits.value();
  for (int i = 0; i < 16; ++i) CHECK(b(i, 0) == a(perm[i], 0));
}

TEST_CASE("forward variants") {
  Model<double> m(tiny(), 12);
  std::mt19937_64 rng(13);
  TokenGrid<double> x{random_normal<double>(16, 8, 1.0, rng), 4, 4, 4, Modality::rgb};
  TokenGrid<double> xt = x;
  xt.modality = Modality::thermal;

  m.counters().reset();
  auto both = m.forward(&x, &xt);
  CHECK(both.source == PredictionSource::rgbt);
  CHECK(m.counters().fusions == 1);

  m.counters().reset();
  auto rgb_only = m.forward(&x, nullptr);
  CHECK(rgb_only.source == PredictionSource::rgb_only);
  CHECK(m.counters().thr_encoder == 0);
  CHECK(m.counters().rgb_encoder == 1);
  CHECK(m.counters().fusions == 0);

  auto thr_only = m.forward(nullptr, &xt);
  CHECK(thr_only.source == PredictionSource::thr_only);
  CHECK_FALSE(both.class_logits.isApprox(rgb_only.class_logits));
  CHECK_THROWS_AS(m.forward(nullptr, nullptr), InputError);

  CHECK(same(m.forward(&x, &xt), both));
}

TEST_CASE("single-modality forward leaves the other encoder untouched") {
  Model<double> m(tiny(), 14);
  std::mt19937_64 rng(15);
  Image rgb = random_image(16, 16, 3, rng);
  LabelMap dense(16, 16);
  for (int i = 0; i < 256; ++i) dense.labels(i) = (i % 16) < 8 ? 0 : 1;
  GtSegments gt = segments_from_labels(dense, 2);
  m.parameters().zero_grad();
  Tape<double> t;
  auto x = m.embed_image(t, rgb, Modality::rgb);
  auto p = m.forward(t, &x, nullptr);
  t.backward(supervised_loss(p, gt, LossWeights{}));
  double thr_grad = 0, rgb_grad = 0;
  for (const auto& prm : m.parameters()) {
    const double g = prm.grad.size() ? prm.grad.cwiseAbs().sum() : 0.0;
    if (prm.name.rfind("encoder.thr", 0) == 0) thr_grad += g;
    if (prm.name.rfind("encoder.rgb", 0) == 0) rgb_grad += g;
  }
  CHECK(thr_grad == 0.0);
  CHECK(rgb_grad > 0.0);
}

TEST_CASE("gradient w.r.t. input tokens") {
  ModelConfig c = tiny();
  Model<double> m(c, 16);
  std::mt19937_64 rng(17);
  auto r = gradcheck::inputs(
      [&](Tape<double>& t, const std::vector<Var<double>>& x) {
        TokenVars<double> a{x[0], 4, 4, Modality::rgb, false};
        TokenVars<double> b{x[1], 4, 4, Modality::thermal, false};
        auto p = m.forward(t, &a, &b);
        std::vector<int> target{0, 2};
        return ad::weighted_cross_entropy(p.class_logits, target, std::vector<double>{1.0, 0.5});
      },
      {random_normal<double>(16, 8, 1.0, rng), random_normal<double>(16, 8, 1.0, rng)});
  CHECK(r.pass_fraction() == 1.0);
}

TEST_CASE("semantic inference") {
  // One query, confident class 0, positive mask everywhere.
  Prediction<double> p;
  p.class_logits = Eigen::MatrixXd(1, 3);
  p.class_logits << 20, -20, -20;
  p.mask_logits = Eigen::MatrixXd::Constant(4, 1, 10.0);
  p.mask_h = p.mask_w = 2;
  CHECK((semantic_inference(p, 4, 4).labels == 0).all());

  // Two queries on disjoint halves.
  Prediction<double> h;
  h.class_logits = Eigen::MatrixXd(2, 3);
  h.class_logits << 10, -10, -10,
                    -10, 10, -10;
  h.mask_h = h.mask_w = 4;
  h.mask_logits.resize(16, 2);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) {
      h.mask_logits(y * 4 + x, 0) = x < 2 ? 8.0 : -8.0;
      h.mask_logits(y * 4 + x, 1) = x < 2 ? -8.0 : 8.0;
    }
  auto seg = semantic_inference(h, 4, 4);
  const Eigen::MatrixXd scores = semantic_scores(h, 4, 4);
  for (int i = 0; i < 16; ++i) {
    const int want = scores(i, 1) > scores(i, 0) ? 1 : 0;
    CHECK(seg.labels(i) == want);
    CHECK(seg.labels(i) == ((i % 4) < 2 ? 0 : 1));
  }

  // Everything is no-object: still a total decision, lowest id on ties.
  Prediction<double> none;
  none.class_logits = Eigen::MatrixXd(1, 3);
  none.class_logits << 0, 0, 50;
  none.mask_logits = Eigen::MatrixXd::Zero(4, 1);
  none.mask_h = none.mask_w = 2;
  CHECK((semantic_inference(none, 2, 2).labels == 0).all());
}

TEST_CASE("predictions are deterministic") {
  Model<double> m(tiny(), 18);
  std::mt19937_64 rng(19);
  Image rgb = random_image(16, 16, 3, rng), thr = random_image(16, 16, 1, rng);
  CHECK(same(m.predict(&rgb, &thr), m.predict(&rgb, &thr)));
  Model<double> m2(tiny(), 18);
  CHECK(same(m.predict(&rgb, &thr), m2.predict(&rgb, &thr)));
}
