#include "crm/model.hpp"

#include <cmath>

namespace crm {

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (embed_dim < 1) fail("embed_dim must be >= 1");
  if (heads < 1 || embed_dim % heads != 0) fail("embed_dim must be divisible by heads");
  if (queries < 1) fail("queries must be >= 1");
  if (num_classes < 1) fail("num_classes must be >= 1");
  if (encoder_stages < 1) fail("encoder_stages must be >= 1");
  if (encoder_depth < 1) fail("encoder_depth must be >= 1");
  if (decoder_layers < 0) fail("decoder_layers must be >= 0");
  if (backbone_patch_px < 1) fail("backbone_patch_px must be >= 1");
  if (window < 1) fail("window must be >= 1");
  if (mlp_ratio < 1) fail("mlp_ratio must be >= 1");
  if (rgb_channels < 1 || thr_channels < 1) fail("channel counts must be >= 1");
  if (input_height % backbone_patch_px != 0 || input_width % backbone_patch_px != 0) {
    fail("input size must be divisible by backbone_patch_px");
  }
  int gh = token_grid_h(), gw = token_grid_w();
  for (int s = 0; s < encoder_stages; ++s) {
    if (s > 0) {
      if (gh % 2 != 0 || gw % 2 != 0 || gh < 2 || gw < 2) {
        fail("token grid " + std::to_string(gh) + "x" + std::to_string(gw) + " too small to downsample at stage " +
             std::to_string(s));
      }
      gh /= 2;
      gw /= 2;
    }
    const bool last = s + 1 == encoder_stages;
    if (!last && (gh % std::min(window, gh) != 0 || gw % std::min(window, gw) != 0)) {
      fail("stage " + std::to_string(s) + " grid is not divisible by the attention window");
    }
  }
}

const char* to_string(PredictionSource s) {
  switch (s) {
    case PredictionSource::rgbt: return "rgbt";
    case PredictionSource::rgb_only: return "rgb_only";
    case PredictionSource::thr_only: return "thr_only";
  }
  return "?";
}

std::vector<ad::AttentionGroup> window_groups(int h, int w, int window, int shift) {
  const int wh = std::min(window, h), ww = std::min(window, w);
  if (h % wh != 0 || w % ww != 0) throw DimensionError("window_groups: grid not divisible by window");
  std::vector<ad::AttentionGroup> groups;
  for (int wy = 0; wy < h / wh; ++wy) {
    for (int wx = 0; wx < w / ww; ++wx) {
      ad::AttentionGroup g;
      for (int i = 0; i < wh; ++i) {
        for (int j = 0; j < ww; ++j) {
          const int y = (wy * wh + i + shift) % h;
          const int x = (wx * ww + j + shift) % w;
          g.query_rows.push_back(y * w + x);
        }
      }
      g.key_rows = g.query_rows;
      groups.push_back(std::move(g));
    }
  }
  return groups;
}

std::vector<ad::AttentionGroup> full_group(int rows) { return cross_group(rows, rows); }

std::vector<ad::AttentionGroup> cross_group(int query_rows, int key_rows) {
  ad::AttentionGroup g;
  g.query_rows.resize(query_rows);
  g.key_rows.resize(key_rows);
  for (int i = 0; i < query_rows; ++i) g.query_rows[i] = i;
  for (int i = 0; i < key_rows; ++i) g.key_rows[i] = i;
  return {std::move(g)};
}

std::vector<int> nearest_upsample_index(int h, int w, int out_h, int out_w) {
  std::vector<int> idx(static_cast<std::size_t>(out_h) * out_w);
  for (int y = 0; y < out_h; ++y) {
    for (int x = 0; x < out_w; ++x) {
      const int sy = static_cast<int>(static_cast<long>(y) * h / out_h);
      const int sx = static_cast<int>(static_cast<long>(x) * w / out_w);
      idx[static_cast<std::size_t>(y) * out_w + x] = sy * w + sx;
    }
  }
  return idx;
}

template <typename Scalar>
Model<Scalar>::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const int d = config_.embed_dim;
  rgb_encoder_ = build_encoder("encoder.rgb", config_.rgb_channels, rng);
  thr_encoder_ = build_encoder("encoder.thr", config_.thr_channels, rng);
  mask_token_rgb_ = params_.add("mask_token.rgb", random_normal<Scalar>(1, d, 0.02, rng), false);
  mask_token_thr_ = params_.add("mask_token.thr", random_normal<Scalar>(1, d, 0.02, rng), false);

  for (int s = 0; s < config_.encoder_stages; ++s) {
    const int c = d << s;
    lateral_.push_back(Linear<Scalar>::create(params_, "pixel_decoder.lateral" + std::to_string(s), c, d, rng));
  }
  pixel_out_ = Linear<Scalar>::create(params_, "pixel_decoder.out", d, d, rng);

  query_feat_ = params_.add("decoder.query_feat", random_normal<Scalar>(config_.queries, d, 1.0, rng), false);
  const int hidden = d * config_.mlp_ratio;
  for (int l = 0; l < config_.decoder_layers; ++l) {
    const std::string p = "decoder.layer" + std::to_string(l);
    DecoderLayer layer;
    layer.cross_q = Linear<Scalar>::create(params_, p + ".cross_q", d, d, rng);
    layer.cross_kv = Linear<Scalar>::create(params_, p + ".cross_kv", d, 2 * d, rng);
    layer.cross_out = Linear<Scalar>::create(params_, p + ".cross_out", d, d, rng);
    layer.cross_norm = LayerNorm<Scalar>::create(params_, p + ".cross_norm", d);
    layer.self_qkv = Linear<Scalar>::create(params_, p + ".self_qkv", d, 3 * d, rng);
    layer.self_out = Linear<Scalar>::create(params_, p + ".self_out", d, d, rng);
    layer.self_norm = LayerNorm<Scalar>::create(params_, p + ".self_norm", d);
    layer.ffn1 = Linear<Scalar>::create(params_, p + ".ffn1", d, hidden, rng);
    layer.ffn2 = Linear<Scalar>::create(params_, p + ".ffn2", hidden, d, rng);
    layer.ffn_norm = LayerNorm<Scalar>::create(params_, p + ".ffn_norm", d);
    decoder_.push_back(layer);
  }
  decoder_norm_ = LayerNorm<Scalar>::create(params_, "decoder.norm", d);
  class_head_ = Linear<Scalar>::create(params_, "decoder.class_head", d, config_.num_classes + 1, rng);
  mask_embed1_ = Linear<Scalar>::create(params_, "decoder.mask_embed1", d, d, rng);
  mask_embed2_ = Linear<Scalar>::create(params_, "decoder.mask_embed2", d, d, rng);
}

template <typename Scalar>
typename Model<Scalar>::Encoder Model<Scalar>::build_encoder(const std::string& prefix, int in_channels,
                                                             std::mt19937_64& rng) {
  Encoder e;
  const int d = config_.embed_dim;
  const int p = config_.backbone_patch_px;
  e.embed = Linear<Scalar>::create(params_, prefix + ".embed", p * p * in_channels, d, rng);
  for (int s = 0; s < config_.encoder_stages; ++s) {
    Stage st;
    st.channels = d << s;
    st.heads = config_.heads << s;
    const std::string sp = prefix + ".stage" + std::to_string(s);
    if (s > 0) {
      const int prev = st.channels / 2;
      st.merge_norm = LayerNorm<Scalar>::create(params_, sp + ".merge_norm", 4 * prev);
      st.merge = Linear<Scalar>::create(params_, sp + ".merge", 4 * prev, st.channels, rng, false);
    }
    for (int b = 0; b < config_.encoder_depth; ++b) {
      const std::string bp = sp + ".block" + std::to_string(b);
      const int c = st.channels;
      Block blk;
      blk.norm1 = LayerNorm<Scalar>::create(params_, bp + ".norm1", c);
      blk.qkv = Linear<Scalar>::create(params_, bp + ".qkv", c, 3 * c, rng);
      blk.proj = Linear<Scalar>::create(params_, bp + ".proj", c, c, rng);
      blk.norm2 = LayerNorm<Scalar>::create(params_, bp + ".norm2", c);
      blk.fc1 = Linear<Scalar>::create(params_, bp + ".fc1", c, c * config_.mlp_ratio, rng);
      blk.fc2 = Linear<Scalar>::create(params_, bp + ".fc2", c * config_.mlp_ratio, c, rng);
      st.blocks.push_back(blk);
    }
    e.stages.push_back(std::move(st));
  }
  return e;
}

template <typename Scalar>
TokenVars<Scalar> Model<Scalar>::embed(Tape<Scalar>& t, const TokenGrid<double>& raw) const {
  const Encoder& e = encoder_for(raw.modality);
  const int expected = static_cast<int>(params_[e.embed.weight].value.rows());
  if (raw.tokens.cols() != expected) {
    throw DimensionError(std::string("embed: ") + to_string(raw.modality) + " patch length " +
                         std::to_string(raw.tokens.cols()) + " does not match projection input " +
                         std::to_string(expected));
  }
  Var<Scalar> x = t.constant(raw.tokens.template cast<Scalar>());
  return {e.embed(t, params_, x), raw.grid_h, raw.grid_w, raw.modality, false};
}

template <typename Scalar>
TokenVars<Scalar> Model<Scalar>::embed_image(Tape<Scalar>& t, const Image& image, Modality modality) const {
  return embed(t, patchify(image, config_.backbone_patch_px, modality));
}

template <typename Scalar>
TokenVars<Scalar> Model<Scalar>::mask(Tape<Scalar>& t, const TokenVars<Scalar>& x,
                                      const std::vector<std::uint8_t>& keep) const {
  Var<Scalar> token = t.parameter(mask_token(x.modality));
  return {ad::substitute_rows(x.tokens, keep, token), x.grid_h, x.grid_w, x.modality, true};
}

template <typename Scalar>
Var<Scalar> Model<Scalar>::run_block(Tape<Scalar>& t, const Block& b, const Var<Scalar>& x, int heads,
                                     std::shared_ptr<const std::vector<ad::AttentionGroup>> groups) const {
  const Eigen::Index c = x.cols();
  Var<Scalar> h = b.norm1(t, params_, x);
  Var<Scalar> qkv = b.qkv(t, params_, h);
  Var<Scalar> a = ad::attention(ad::slice_cols(qkv, 0, c), ad::slice_cols(qkv, c, c), ad::slice_cols(qkv, 2 * c, c),
                                heads, std::move(groups));
  Var<Scalar> y = ad::add(x, b.proj(t, params_, a));
  Var<Scalar> m = b.fc2(t, params_, ad::gelu(b.fc1(t, params_, b.norm2(t, params_, y))));
  return ad::add(y, m);
}

template <typename Scalar>
PyramidVars<Scalar> Model<Scalar>::encode(Tape<Scalar>& t, const TokenVars<Scalar>& in) const {
  const Encoder& e = encoder_for(in.modality);
  (in.modality == Modality::rgb ? counters_.rgb_encoder : counters_.thr_encoder)++;
  if (in.tokens.cols() != config_.embed_dim) throw DimensionError("encode: token width != embed_dim");
  PyramidVars<Scalar> out;
  out.masked = in.masked;
  Var<Scalar> x = in.tokens;
  int h = in.grid_h, w = in.grid_w;
  const int stages = static_cast<int>(e.stages.size());
  for (int s = 0; s < stages; ++s) {
    const Stage& st = e.stages[s];
    if (s > 0) {
      if (h % 2 != 0 || w % 2 != 0) throw ConfigError("encode: grid too small to downsample");
      const int oh = h / 2, ow = w / 2;
      std::vector<Var<Scalar>> parts;
      for (int dy = 0; dy < 2; ++dy) {
        for (int dx = 0; dx < 2; ++dx) {
          std::vector<int> idx(static_cast<std::size_t>(oh) * ow);
          for (int y = 0; y < oh; ++y) {
            for (int xx = 0; xx < ow; ++xx) idx[static_cast<std::size_t>(y) * ow + xx] = (2 * y + dy) * w + 2 * xx + dx;
          }
          parts.push_back(ad::gather_rows(x, std::move(idx)));
        }
      }
      x = (*st.merge)(t, params_, (*st.merge_norm)(t, params_, ad::hconcat(parts)));
      h = oh;
      w = ow;
    }
    const bool last = s + 1 == stages;
    for (std::size_t b = 0; b < st.blocks.size(); ++b) {
      std::shared_ptr<const std::vector<ad::AttentionGroup>> groups;
      if (last) {
        groups = std::make_shared<const std::vector<ad::AttentionGroup>>(full_group(h * w));
      } else {
        const int shift = (b % 2 == 1) ? std::min(config_.window, h) / 2 : 0;
        groups = std::make_shared<const std::vector<ad::AttentionGroup>>(window_groups(h, w, config_.window, shift));
      }
      x = run_block(t, st.blocks[b], x, st.heads, std::move(groups));
    }
    out.levels.push_back({x, h, w});
  }
  return out;
}

template <typename Scalar>
PyramidVars<Scalar> Model<Scalar>::fuse(const PyramidVars<Scalar>& a, const PyramidVars<Scalar>& b) const {
  if (a.levels.size() != b.levels.size()) throw DimensionError("fuse: pyramids have different level counts");
  counters_.fusions++;
  PyramidVars<Scalar> out;
  out.masked = a.masked || b.masked;
  const Scalar eps = static_cast<Scalar>(config_.fusion_eps);
  for (std::size_t l = 0; l < a.levels.size(); ++l) {
    const auto& la = a.levels[l];
    const auto& lb = b.levels[l];
    if (la.h != lb.h || la.w != lb.w) throw DimensionError("fuse: level " + std::to_string(l) + " spatial mismatch");
    out.levels.push_back({ad::standardize_rows(ad::maximum(la.features, lb.features), eps), la.h, la.w});
  }
  return out;
}

template <typename Scalar>
PyramidVars<Scalar> Model<Scalar>::normalize(const PyramidVars<Scalar>& a) const {
  PyramidVars<Scalar> out;
  out.masked = a.masked;
  const Scalar eps = static_cast<Scalar>(config_.fusion_eps);
  for (const auto& l : a.levels) out.levels.push_back({ad::standardize_rows(l.features, eps), l.h, l.w});
  return out;
}

template <typename Scalar>
PixelDecoding<Scalar> Model<Scalar>::decode_pixels(Tape<Scalar>& t, const PyramidVars<Scalar>& f) const {
  if (f.levels.empty() || f.levels.size() > lateral_.size()) throw DimensionError("decode_pixels: bad level count");
  PixelDecoding<Scalar> out;
  const int top = static_cast<int>(f.levels.size()) - 1;
  LevelVar<Scalar> y{lateral_[top](t, params_, f.levels[top].features), f.levels[top].h, f.levels[top].w};
  out.memory.push_back(y);
  for (int l = top - 1; l >= 0; --l) {
    const auto& lv = f.levels[l];
    Var<Scalar> up = ad::gather_rows(y.features, nearest_upsample_index(y.h, y.w, lv.h, lv.w));
    y = {ad::add(lateral_[l](t, params_, lv.features), up), lv.h, lv.w};
    out.memory.push_back(y);
  }
  out.pixel_embeddings = {pixel_out_(t, params_, ad::gelu(y.features)), y.h, y.w};
  return out;
}

template <typename Scalar>
PredictionVars<Scalar> Model<Scalar>::decode_queries(Tape<Scalar>& t, const PixelDecoding<Scalar>& pix) const {
  counters_.decoder++;
  const int n = config_.queries;
  const int heads = config_.heads;
  const Eigen::Index d = config_.embed_dim;
  Var<Scalar> q = t.parameter(params_[query_feat_]);
  const auto self_groups = std::make_shared<const std::vector<ad::AttentionGroup>>(full_group(n));
  for (std::size_t l = 0; l < decoder_.size(); ++l) {
    const DecoderLayer& L = decoder_[l];
    const LevelVar<Scalar>& mem = pix.memory[l % pix.memory.size()];
    const auto cross = std::make_shared<const std::vector<ad::AttentionGroup>>(cross_group(n, mem.h * mem.w));
    Var<Scalar> kv = L.cross_kv(t, params_, mem.features);
    Var<Scalar> a = ad::attention(L.cross_q(t, params_, q), ad::slice_cols(kv, 0, d), ad::slice_cols(kv, d, d), heads, cross);
    q = L.cross_norm(t, params_, ad::add(q, L.cross_out(t, params_, a)));

    Var<Scalar> qkv = L.self_qkv(t, params_, q);
    a = ad::attention(ad::slice_cols(qkv, 0, d), ad::slice_cols(qkv, d, d), ad::slice_cols(qkv, 2 * d, d), heads,
                      self_groups);
    q = L.self_norm(t, params_, ad::add(q, L.self_out(t, params_, a)));

    Var<Scalar> ffn = L.ffn2(t, params_, ad::gelu(L.ffn1(t, params_, q)));
    q = L.ffn_norm(t, params_, ad::add(q, ffn));
  }
  q = decoder_norm_(t, params_, q);
  PredictionVars<Scalar> p;
  p.class_logits = class_head_(t, params_, q);
  Var<Scalar> me = mask_embed2_(t, params_, ad::gelu(mask_embed1_(t, params_, q)));
  p.mask_logits = ad::matmul_bt(pix.pixel_embeddings.features, me);
  p.mask_h = pix.pixel_embeddings.h;
  p.mask_w = pix.pixel_embeddings.w;
  return p;
}

template <typename Scalar>
PredictionVars<Scalar> Model<Scalar>::decode(Tape<Scalar>& t, const PyramidVars<Scalar>* rgb,
                                             const PyramidVars<Scalar>* thr) const {
  if (!rgb && !thr) throw InputError("forward: at least one modality must be present");
  PyramidVars<Scalar> f = (rgb && thr) ? fuse(*rgb, *thr) : normalize(rgb ? *rgb : *thr);
  PredictionVars<Scalar> p = decode_queries(t, decode_pixels(t, f));
  p.source = (rgb && thr) ? PredictionSource::rgbt : (rgb ? PredictionSource::rgb_only : PredictionSource::thr_only);
  p.masked_input = f.masked;
  return p;
}

template <typename Scalar>
PredictionVars<Scalar> Model<Scalar>::forward(Tape<Scalar>& t, const TokenVars<Scalar>* rgb,
                                              const TokenVars<Scalar>* thr) const {
  if (!rgb && !thr) throw InputError("forward: at least one modality must be present");
  if (rgb && rgb->modality != Modality::rgb) throw InputError("forward: rgb slot holds thermal tokens");
  if (thr && thr->modality != Modality::thermal) throw InputError("forward: thermal slot holds rgb tokens");
  std::optional<PyramidVars<Scalar>> fr, ft;
  if (rgb) fr = encode(t, *rgb);
  if (thr) ft = encode(t, *thr);
  return decode(t, fr ? &*fr : nullptr, ft ? &*ft : nullptr);
}

template <typename Scalar>
TokenGrid<Scalar> Model<Scalar>::embed(const TokenGrid<double>& raw) const {
  Tape<Scalar> t(false);
  TokenVars<Scalar> v = embed(t, raw);
  return {v.tokens.value(), raw.grid_h, raw.grid_w, config_.backbone_patch_px, raw.modality};
}

template <typename Scalar>
FeaturePyramid<Scalar> Model<Scalar>::encode(const TokenGrid<Scalar>& x) const {
  Tape<Scalar> t(false);
  PyramidVars<Scalar> p = encode(t, {t.constant(x.tokens), x.grid_h, x.grid_w, x.modality, false});
  FeaturePyramid<Scalar> out;
  for (const auto& l : p.levels) out.levels.push_back({l.features.value(), l.h, l.w});
  return out;
}

template <typename Scalar>
FeaturePyramid<Scalar> Model<Scalar>::fuse(const FeaturePyramid<Scalar>& a, const FeaturePyramid<Scalar>& b) const {
  Tape<Scalar> t(false);
  PyramidVars<Scalar> va, vb;
  for (const auto& l : a.levels) va.levels.push_back({t.constant(l.features), l.h, l.w});
  for (const auto& l : b.levels) vb.levels.push_back({t.constant(l.features), l.h, l.w});
  for (std::size_t i = 0; i < std::min(va.levels.size(), vb.levels.size()); ++i) {
    if (va.levels[i].features.cols() != vb.levels[i].features.cols()) {
      throw DimensionError("fuse: level " + std::to_string(i) + " channel mismatch");
    }
  }
  PyramidVars<Scalar> f = fuse(va, vb);
  FeaturePyramid<Scalar> out;
  for (const auto& l : f.levels) out.levels.push_back({l.features.value(), l.h, l.w});
  return out;
}

template <typename Scalar>
Prediction<Scalar> Model<Scalar>::forward(const TokenGrid<Scalar>* rgb, const TokenGrid<Scalar>* thr) const {
  Tape<Scalar> t(false);
  std::optional<TokenVars<Scalar>> vr, vt;
  if (rgb) vr = TokenVars<Scalar>{t.constant(rgb->tokens), rgb->grid_h, rgb->grid_w, Modality::rgb, false};
  if (thr) vt = TokenVars<Scalar>{t.constant(thr->tokens), thr->grid_h, thr->grid_w, Modality::thermal, false};
  return forward(t, vr ? &*vr : nullptr, vt ? &*vt : nullptr).value();
}

template <typename Scalar>
Prediction<Scalar> Model<Scalar>::predict(const Image* rgb, const Image* thr) const {
  Tape<Scalar> t(false);
  std::optional<TokenVars<Scalar>> vr, vt;
  if (rgb) vr = embed_image(t, *rgb, Modality::rgb);
  if (thr) vt = embed_image(t, *thr, Modality::thermal);
  return forward(t, vr ? &*vr : nullptr, vt ? &*vt : nullptr).value();
}

template <typename Scalar>
Matrix<Scalar> semantic_scores(const Prediction<Scalar>& p, int out_h, int out_w) {
  if (out_h < p.mask_h || out_w < p.mask_w) throw DimensionError("semantic_inference: target smaller than masks");
  Tape<Scalar> t(false);
  const Matrix<Scalar> up = ad::resize_bilinear(t.constant(p.mask_logits), p.mask_h, p.mask_w, out_h, out_w).value();
  const Eigen::Index k = p.num_classes();
  Matrix<Scalar> cls(p.class_logits.rows(), k);
  for (Eigen::Index n = 0; n < p.class_logits.rows(); ++n) {
    const Scalar mx = p.class_logits.row(n).maxCoeff();
    RowVector<Scalar> e = (p.class_logits.row(n).array() - mx).exp().matrix();
    cls.row(n) = e.head(k) / e.sum();
  }
  Matrix<Scalar> sig = up.unaryExpr([](Scalar z) { return Scalar(1) / (Scalar(1) + std::exp(-z)); });
  return sig * cls;
}

template <typename Scalar>
LabelMap semantic_inference(const Prediction<Scalar>& p, int out_h, int out_w) {
  const Matrix<Scalar> scores = semantic_scores(p, out_h, out_w);
  LabelMap m(out_h, out_w, 0);
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    int best = 0;
    for (Eigen::Index k = 1; k < scores.cols(); ++k) {
      if (scores(i, k) > scores(i, best)) best = static_cast<int>(k);
    }
    m.labels(i) = best;
  }
  return m;
}

template class Model<float>;
template class Model<double>;
template LabelMap semantic_inference<float>(const Prediction<float>&, int, int);
template LabelMap semantic_inference<double>(const Prediction<double>&, int, int);
template Matrix<float> semantic_scores<float>(const Prediction<float>&, int, int);
template Matrix<double> semantic_scores<double>(const Prediction<double>&, int, int);

}  // namespace crm
