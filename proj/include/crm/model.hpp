#pragma once

// Two-stream mask-classification segmentation network.
//
// Each modality has its own patch embedding and hierarchical transformer
// encoder. Encoder pyramids are merged by elementwise max followed by
// per-position channel standardisation (or just standardised when only one
// modality is given), upsampled by a lateral pixel decoder, and decoded by a
// query transformer into N class-logit vectors and N mask-logit maps.

#include "crm/autodiff.hpp"
#include "crm/masking.hpp"
#include "crm/parameters.hpp"

#include <atomic>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace crm {

struct ModelConfig {
  int embed_dim = 32;
  int encoder_stages = 2;
  int encoder_depth = 1;  // transformer blocks per stage
  int heads = 2;
  int queries = 8;
  int num_classes = 4;  // K, excluding the no-object class
  int decoder_layers = 2;
  int backbone_patch_px = 4;
  int window = 4;
  int mlp_ratio = 2;
  int input_height = 64;
  int input_width = 64;
  int rgb_channels = 3;
  int thr_channels = 1;
  double fusion_eps = 1e-6;

  // Throws ConfigError describing the first violated constraint.
  void validate() const;
  int token_grid_h() const { return input_height / backbone_patch_px; }
  int token_grid_w() const { return input_width / backbone_patch_px; }
};

enum class PredictionSource { rgbt, rgb_only, thr_only };

const char* to_string(PredictionSource s);

template <typename Scalar>
struct Prediction {
  Matrix<Scalar> class_logits;  // N x (K + 1); column K is "no object"
  Matrix<Scalar> mask_logits;   // (h * w) x N; column n is query n's map, row-major pixels
  int mask_h = 0;
  int mask_w = 0;
  PredictionSource source = PredictionSource::rgbt;
  bool masked_input = false;

  Eigen::Index queries() const { return class_logits.rows(); }
  Eigen::Index num_classes() const { return class_logits.cols() - 1; }
};

template <typename Scalar>
struct PredictionVars {
  Var<Scalar> class_logits;
  Var<Scalar> mask_logits;
  int mask_h = 0;
  int mask_w = 0;
  PredictionSource source = PredictionSource::rgbt;
  bool masked_input = false;

  Prediction<Scalar> value() const {
    return {class_logits.value(), mask_logits.value(), mask_h, mask_w, source, masked_input};
  }
};

template <typename Scalar>
struct FeatureLevel {
  Matrix<Scalar> features;  // (h * w) x channels
  int h = 0;
  int w = 0;
};

template <typename Scalar>
struct FeaturePyramid {
  std::vector<FeatureLevel<Scalar>> levels;  // finest first, coarsest last
};

template <typename Scalar>
struct LevelVar {
  Var<Scalar> features;
  int h = 0;
  int w = 0;
};

template <typename Scalar>
struct TokenVars {
  Var<Scalar> tokens;
  int grid_h = 0;
  int grid_w = 0;
  Modality modality = Modality::rgb;
  bool masked = false;
};

template <typename Scalar>
struct PyramidVars {
  std::vector<LevelVar<Scalar>> levels;
  bool masked = false;
};

template <typename Scalar>
struct PixelDecoding {
  LevelVar<Scalar> pixel_embeddings;
  std::vector<LevelVar<Scalar>> memory;  // coarsest first
};

// Diagnostic pass counters, used to verify which branches ran.
struct PassCounters {
  std::atomic<long> rgb_encoder{0};
  std::atomic<long> thr_encoder{0};
  std::atomic<long> fusions{0};
  std::atomic<long> decoder{0};

  PassCounters() = default;
  PassCounters(const PassCounters&) {}
  PassCounters& operator=(const PassCounters&) { return *this; }
  void reset() {
    rgb_encoder = 0;
    thr_encoder = 0;
    fusions = 0;
    decoder = 0;
  }
};

template <typename Scalar>
class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ParameterSet<Scalar>& parameters() { return params_; }
  const ParameterSet<Scalar>& parameters() const { return params_; }
  PassCounters& counters() const { return counters_; }

  const Parameter<Scalar>& mask_token(Modality m) const {
    return params_[m == Modality::rgb ? mask_token_rgb_ : mask_token_thr_];
  }

  // ---- recorded on a tape ----
  TokenVars<Scalar> embed(Tape<Scalar>& t, const TokenGrid<double>& raw_patches) const;
  TokenVars<Scalar> embed_image(Tape<Scalar>& t, const Image& image, Modality modality) const;
  // Replaces tokens where keep == 0 with the modality's learnable mask token.
  TokenVars<Scalar> mask(Tape<Scalar>& t, const TokenVars<Scalar>& x, const std::vector<std::uint8_t>& keep) const;
  PyramidVars<Scalar> encode(Tape<Scalar>& t, const TokenVars<Scalar>& x) const;
  PyramidVars<Scalar> fuse(const PyramidVars<Scalar>& a, const PyramidVars<Scalar>& b) const;
  PyramidVars<Scalar> normalize(const PyramidVars<Scalar>& a) const;
  PixelDecoding<Scalar> decode_pixels(Tape<Scalar>& t, const PyramidVars<Scalar>& f) const;
  PredictionVars<Scalar> decode_queries(Tape<Scalar>& t, const PixelDecoding<Scalar>& pix) const;
  // Either pointer may be null, not both.
  PredictionVars<Scalar> forward(Tape<Scalar>& t, const TokenVars<Scalar>* rgb, const TokenVars<Scalar>* thr) const;
  // Decodes pyramids that were already encoded (shared across forward variants).
  PredictionVars<Scalar> decode(Tape<Scalar>& t, const PyramidVars<Scalar>* rgb, const PyramidVars<Scalar>* thr) const;

  // ---- value-level convenience, evaluated without recording ----
  TokenGrid<Scalar> embed(const TokenGrid<double>& raw_patches) const;
  FeaturePyramid<Scalar> encode(const TokenGrid<Scalar>& x) const;
  FeaturePyramid<Scalar> fuse(const FeaturePyramid<Scalar>& a, const FeaturePyramid<Scalar>& b) const;
  Prediction<Scalar> forward(const TokenGrid<Scalar>* rgb, const TokenGrid<Scalar>* thr) const;
  Prediction<Scalar> predict(const Image* rgb, const Image* thr) const;

 private:
  struct Block {
    LayerNorm<Scalar> norm1, norm2;
    Linear<Scalar> qkv, proj, fc1, fc2;
  };
  struct Stage {
    std::optional<LayerNorm<Scalar>> merge_norm;
    std::optional<Linear<Scalar>> merge;
    std::vector<Block> blocks;
    int channels = 0;
    int heads = 0;
  };
  struct Encoder {
    Linear<Scalar> embed;
    std::vector<Stage> stages;
  };
  struct DecoderLayer {
    Linear<Scalar> cross_q, cross_kv, cross_out;
    LayerNorm<Scalar> cross_norm;
    Linear<Scalar> self_qkv, self_out;
    LayerNorm<Scalar> self_norm;
    Linear<Scalar> ffn1, ffn2;
    LayerNorm<Scalar> ffn_norm;
  };

  Encoder build_encoder(const std::string& prefix, int in_channels, std::mt19937_64& rng);
  const Encoder& encoder_for(Modality m) const { return m == Modality::rgb ? rgb_encoder_ : thr_encoder_; }
  Var<Scalar> run_block(Tape<Scalar>& t, const Block& b, const Var<Scalar>& x, int heads,
                        std::shared_ptr<const std::vector<ad::AttentionGroup>> groups) const;

  ModelConfig config_;
  ParameterSet<Scalar> params_;
  Encoder rgb_encoder_;
  Encoder thr_encoder_;
  std::size_t mask_token_rgb_ = 0;
  std::size_t mask_token_thr_ = 0;
  std::vector<Linear<Scalar>> lateral_;
  Linear<Scalar> pixel_out_;
  std::size_t query_feat_ = 0;
  std::vector<DecoderLayer> decoder_;
  LayerNorm<Scalar> decoder_norm_;
  Linear<Scalar> class_head_;
  Linear<Scalar> mask_embed1_, mask_embed2_;
  mutable PassCounters counters_;
};

// Window partition of an h x w token grid (row-major rows). The window is
// clamped to the grid; shift applies a cyclic offset to both axes.
std::vector<ad::AttentionGroup> window_groups(int h, int w, int window, int shift);
std::vector<ad::AttentionGroup> full_group(int rows);
std::vector<ad::AttentionGroup> cross_group(int query_rows, int key_rows);

// Nearest-neighbour row index map from an (h, w) grid to an (out_h, out_w) grid.
std::vector<int> nearest_upsample_index(int h, int w, int out_h, int out_w);

// Dense labels from class probabilities times mask probabilities, after
// bilinear resizing of mask logits to (out_h, out_w). Ties go to the lowest class id.
template <typename Scalar>
LabelMap semantic_inference(const Prediction<Scalar>& p, int out_h, int out_w);

// Per-pixel class scores (out_h * out_w) x K used by semantic_inference.
template <typename Scalar>
Matrix<Scalar> semantic_scores(const Prediction<Scalar>& p, int out_h, int out_w);

extern template class Model<float>;
extern template class Model<double>;
extern template LabelMap semantic_inference<float>(const Prediction<float>&, int, int);
extern template LabelMap semantic_inference<double>(const Prediction<double>&, int, int);
extern template Matrix<float> semantic_scores<float>(const Prediction<float>&, int, int);
extern template Matrix<double> semantic_scores<double>(const Prediction<double>&, int, int);

}  // namespace crm
