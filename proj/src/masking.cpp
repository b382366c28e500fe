#include "crm/masking.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <iterator>
#include <numeric>
#include <ostream>
#include <sstream>

namespace crm {

MaskStrategy parse_mask_strategy(const std::string& name) {
  if (name == "patch") return MaskStrategy::patch;
  if (name == "square") return MaskStrategy::square;
  throw ConfigError("unknown mask strategy '" + name + "' (expected patch or square)");
}

const char* to_string(MaskStrategy s) { return s == MaskStrategy::patch ? "patch" : "square"; }

TokenGrid<double> patchify(const Image& image, int patch_px, Modality modality) {
  if (patch_px < 1) throw ParameterError("patchify: patch_px must be >= 1");
  if (image.height % patch_px != 0) {
    throw DimensionError("patchify: height " + std::to_string(image.height) + " not divisible by patch " +
                         std::to_string(patch_px));
  }
  if (image.width % patch_px != 0) {
    throw DimensionError("patchify: width " + std::to_string(image.width) + " not divisible by patch " +
                         std::to_string(patch_px));
  }
  TokenGrid<double> g;
  g.grid_h = image.height / patch_px;
  g.grid_w = image.width / patch_px;
  g.patch_px = patch_px;
  g.modality = modality;
  const int c = image.channels;
  g.tokens.resize(static_cast<Eigen::Index>(g.grid_h) * g.grid_w, static_cast<Eigen::Index>(patch_px) * patch_px * c);
  for (int gy = 0; gy < g.grid_h; ++gy) {
    for (int gx = 0; gx < g.grid_w; ++gx) {
      const Eigen::Index row = static_cast<Eigen::Index>(gy) * g.grid_w + gx;
      Eigen::Index col = 0;
      for (int py = 0; py < patch_px; ++py) {
        for (int px = 0; px < patch_px; ++px) {
          const Eigen::Index pix = static_cast<Eigen::Index>(gy * patch_px + py) * image.width + gx * patch_px + px;
          for (int ch = 0; ch < c; ++ch) g.tokens(row, col++) = image.pixels(pix, ch);
        }
      }
    }
  }
  return g;
}

Image unpatchify(const TokenGrid<double>& patches, int channels) {
  const int p = patches.patch_px;
  if (channels < 1 || patches.tokens.cols() != static_cast<Eigen::Index>(p) * p * channels) {
    throw DimensionError("unpatchify: patch length does not match patch_px^2 * channels");
  }
  Image img(patches.grid_h * p, patches.grid_w * p, channels);
  for (int gy = 0; gy < patches.grid_h; ++gy) {
    for (int gx = 0; gx < patches.grid_w; ++gx) {
      const Eigen::Index row = static_cast<Eigen::Index>(gy) * patches.grid_w + gx;
      Eigen::Index col = 0;
      for (int py = 0; py < p; ++py) {
        for (int px = 0; px < p; ++px) {
          for (int ch = 0; ch < channels; ++ch) img.at(gy * p + py, gx * p + px, ch) = patches.tokens(row, col++);
        }
      }
    }
  }
  return img;
}

MaskGrid sample_mask(int gh, int gw, MaskStrategy strategy, double ratio, std::mt19937_64& rng, int cell_px) {
  if (gh < 1 || gw < 1) throw ParameterError("sample_mask: grid dims must be >= 1");
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ParameterError("sample_mask: ratio must lie in [0, 1]");
  MaskGrid m;
  m.cell_px = cell_px;
  m.cells.setOnes(gh, gw);
  if (strategy == MaskStrategy::patch) {
    m.ratio = ratio;
    const int n = gh * gw;
    const auto k = static_cast<int>(std::lround(ratio * n));
    std::vector<int> all(n);
    std::iota(all.begin(), all.end(), 0);
    std::vector<int> chosen;
    chosen.reserve(k);
    std::sample(all.begin(), all.end(), std::back_inserter(chosen), k, rng);
    for (int idx : chosen) m.cells(idx / gw, idx % gw) = 0;
  } else {
    const int sh = (gh + 1) / 2;
    const int sw = (gw + 1) / 2;
    std::uniform_int_distribution<int> oy(0, gh - sh);
    std::uniform_int_distribution<int> ox(0, gw - sw);
    const int y0 = oy(rng);
    const int x0 = ox(rng);
    m.cells.block(y0, x0, sh, sw).setZero();
    m.ratio = static_cast<double>(sh * sw) / (gh * gw);
  }
  return m;
}

MaskGrid complement(const MaskGrid& m) {
  MaskGrid c = m;
  c.cells = 1 - m.cells;
  c.ratio = 1.0 - m.ratio;
  return c;
}

MaskPair sample_complementary_masks(int gh, int gw, MaskStrategy strategy, double ratio, std::mt19937_64& rng,
                                    int cell_px) {
  MaskPair p;
  p.keep_rgb = sample_mask(gh, gw, strategy, ratio, rng, cell_px);
  p.keep_thr = complement(p.keep_rgb);
  p.complementary = true;
  return p;
}

MaskPair sample_individual_masks(int gh, int gw, double ratio_low, double ratio_high, std::mt19937_64& rng,
                                 int cell_px) {
  if (!(ratio_low >= 0.0 && ratio_high <= 1.0 && ratio_low <= ratio_high)) {
    throw ParameterError("sample_individual_masks: need 0 <= ratio_low <= ratio_high <= 1");
  }
  std::uniform_real_distribution<double> u(ratio_low, ratio_high);
  MaskPair p;
  p.complementary = false;
  const double r_rgb = ratio_low == ratio_high ? ratio_low : u(rng);
  p.keep_rgb = sample_mask(gh, gw, MaskStrategy::patch, r_rgb, rng, cell_px);
  const double r_thr = ratio_low == ratio_high ? ratio_low : u(rng);
  p.keep_thr = sample_mask(gh, gw, MaskStrategy::patch, r_thr, rng, cell_px);
  return p;
}

Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> broadcast_to_token_grid(const MaskGrid& m, int token_gh,
                                                                                    int token_gw) {
  const int gh = m.grid_h(), gw = m.grid_w();
  if (gh < 1 || gw < 1 || token_gh % gh != 0 || token_gw % gw != 0) {
    throw DimensionError("broadcast_to_token_grid: token grid " + std::to_string(token_gh) + "x" +
                         std::to_string(token_gw) + " is not a multiple of mask grid " + std::to_string(gh) + "x" +
                         std::to_string(gw));
  }
  const int by = token_gh / gh, bx = token_gw / gw;
  Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> out(token_gh, token_gw);
  for (int y = 0; y < token_gh; ++y) {
    for (int x = 0; x < token_gw; ++x) out(y, x) = m.cells(y / by, x / bx);
  }
  return out;
}

std::vector<std::uint8_t> token_keep_vector(const MaskGrid& m, int token_gh, int token_gw) {
  const auto b = broadcast_to_token_grid(m, token_gh, token_gw);
  std::vector<std::uint8_t> keep(static_cast<std::size_t>(token_gh) * token_gw);
  for (int y = 0; y < token_gh; ++y) {
    for (int x = 0; x < token_gw; ++x) keep[static_cast<std::size_t>(y) * token_gw + x] = b(y, x);
  }
  return keep;
}

Image render_mask_overlay(const Image& image, const MaskGrid& m, double fill) {
  const int gh = m.grid_h(), gw = m.grid_w();
  if (gh < 1 || gw < 1 || image.height % gh != 0 || image.width % gw != 0 || image.height / gh != image.width / gw) {
    throw DimensionError("render_mask_overlay: image " + std::to_string(image.height) + "x" +
                         std::to_string(image.width) + " does not tile into square cells of a " + std::to_string(gh) +
                         "x" + std::to_string(gw) + " mask");
  }
  const int cell = image.height / gh;
  if (m.cell_px != 0 && m.cell_px != cell) {
    throw DimensionError("render_mask_overlay: mask cell size " + std::to_string(m.cell_px) +
                         " does not match image cell size " + std::to_string(cell));
  }
  Image out = image;
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      if (m.cells(y / cell, x / cell) == 0) out.pixels.row(y * image.width + x).setConstant(fill);
    }
  }
  return out;
}

void write_mask_grid(std::ostream& os, const MaskGrid& m) {
  for (int y = 0; y < m.grid_h(); ++y) {
    for (int x = 0; x < m.grid_w(); ++x) {
      if (x) os << ' ';
      os << static_cast<int>(m.cells(y, x));
    }
    os << '\n';
  }
}

MaskGrid read_mask_grid(std::istream& is, int cell_px) {
  std::vector<std::vector<std::uint8_t>> rows;
  std::string line;
  while (std::getline(is, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    std::vector<std::uint8_t> row;
    int v = 0;
    while (ls >> v) {
      if (v != 0 && v != 1) throw DataError("mask grid cell must be 0 or 1, got " + std::to_string(v));
      row.push_back(static_cast<std::uint8_t>(v));
    }
    if (!rows.empty() && row.size() != rows.front().size()) throw DataError("mask grid rows have unequal length");
    rows.push_back(std::move(row));
  }
  MaskGrid m;
  m.cell_px = cell_px;
  if (rows.empty()) return m;
  m.cells.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t y = 0; y < rows.size(); ++y) {
    for (std::size_t x = 0; x < rows[y].size(); ++x) m.cells(y, x) = rows[y][x];
  }
  m.ratio = static_cast<double>(m.zeros()) / static_cast<double>(m.cells.size());
  return m;
}

}  // namespace crm
