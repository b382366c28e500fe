#pragma once

// Complementary and individual random masking of two token grids.

#include "crm/errors.hpp"
#include "crm/tensor.hpp"

#include <cstdint>
#include <iosfwd>
#include <random>
#include <string>
#include <vector>

namespace crm {

enum class MaskStrategy { patch, square };

MaskStrategy parse_mask_strategy(const std::string& name);
const char* to_string(MaskStrategy s);

// Binary keep-mask over a coarse grid: 1 keeps the token, 0 masks it.
struct MaskGrid {
  Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> cells;  // gh x gw
  int cell_px = 0;
  double ratio = 0.0;

  int grid_h() const { return static_cast<int>(cells.rows()); }
  int grid_w() const { return static_cast<int>(cells.cols()); }
  Eigen::Index zeros() const { return (cells == 0).count(); }

  bool operator==(const MaskGrid& o) const {
    return cell_px == o.cell_px && cells.rows() == o.cells.rows() && cells.cols() == o.cells.cols() &&
           (cells == o.cells).all();
  }
};

struct MaskPair {
  MaskGrid keep_rgb;  // M
  MaskGrid keep_thr;  // 1 - M when complementary
  bool complementary = true;
};

// Patch embeddings (or raw patches) of one modality on a gh x gw grid.
// Row r = y * grid_w + x holds the token at grid cell (y, x).
template <typename Scalar>
struct TokenGrid {
  Matrix<Scalar> tokens;
  int grid_h = 0;
  int grid_w = 0;
  int patch_px = 0;
  Modality modality = Modality::rgb;

  Eigen::Index dim() const { return tokens.cols(); }
};

template <typename Scalar>
struct MaskToken {
  RowVector<Scalar> vector;
  Modality modality = Modality::rgb;
  bool trainable = true;
};

// Non-overlapping patch_px x patch_px windows, each flattened as (py, px, channel).
TokenGrid<double> patchify(const Image& image, int patch_px, Modality modality = Modality::rgb);
Image unpatchify(const TokenGrid<double>& patches, int channels);

// Exactly round(ratio * gh * gw) zero cells (patch) or one ceil(gh/2) x ceil(gw/2)
// zero rectangle at a uniform offset (square; ratio ignored).
MaskGrid sample_mask(int gh, int gw, MaskStrategy strategy, double ratio, std::mt19937_64& rng, int cell_px = 0);

MaskGrid complement(const MaskGrid& m);

MaskPair sample_complementary_masks(int gh, int gw, MaskStrategy strategy, double ratio, std::mt19937_64& rng,
                                    int cell_px = 0);

// Two independent patch masks with ratios drawn uniformly from [ratio_low, ratio_high].
MaskPair sample_individual_masks(int gh, int gw, double ratio_low, double ratio_high, std::mt19937_64& rng,
                                 int cell_px = 0);

// Kronecker expansion of the mask onto a finer token grid.
Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> broadcast_to_token_grid(const MaskGrid& m, int token_gh,
                                                                                    int token_gw);

// Row-major flattening of broadcast_to_token_grid, one entry per token row.
std::vector<std::uint8_t> token_keep_vector(const MaskGrid& m, int token_gh, int token_gw);

// Where keep_rgb = 1 the rgb token is kept; elsewhere it becomes l_rgb.
// The thermal grid uses keep_thr the same way with l_thr.
template <typename Scalar>
std::pair<TokenGrid<Scalar>, TokenGrid<Scalar>> apply_complementary_mask(const TokenGrid<Scalar>& x_rgb,
                                                                         const TokenGrid<Scalar>& x_thr,
                                                                         const MaskPair& pair,
                                                                         const MaskToken<Scalar>& l_rgb,
                                                                         const MaskToken<Scalar>& l_thr) {
  if (x_rgb.grid_h != x_thr.grid_h || x_rgb.grid_w != x_thr.grid_w) {
    throw DimensionError("apply_complementary_mask: rgb and thermal grids differ");
  }
  if (x_rgb.dim() != x_thr.dim() || l_rgb.vector.size() != x_rgb.dim() || l_thr.vector.size() != x_rgb.dim()) {
    throw DimensionError("apply_complementary_mask: token dimension mismatch");
  }
  const auto keep_rgb = token_keep_vector(pair.keep_rgb, x_rgb.grid_h, x_rgb.grid_w);
  const auto keep_thr = token_keep_vector(pair.keep_thr, x_thr.grid_h, x_thr.grid_w);
  TokenGrid<Scalar> out_rgb = x_rgb;
  TokenGrid<Scalar> out_thr = x_thr;
  for (std::size_t i = 0; i < keep_rgb.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    if (!keep_rgb[i]) out_rgb.tokens.row(r) = l_rgb.vector;
    if (!keep_thr[i]) out_thr.tokens.row(r) = l_thr.vector;
  }
  return {std::move(out_rgb), std::move(out_thr)};
}

// Masked cells filled with a constant colour; image dims must be cell_px multiples of the grid.
Image render_mask_overlay(const Image& image, const MaskGrid& m, double fill = 0.5);

// Plain-text grid: one row per line, cells as '0'/'1' separated by spaces.
void write_mask_grid(std::ostream& os, const MaskGrid& m);
MaskGrid read_mask_grid(std::istream& is, int cell_px = 0);

}  // namespace crm
