#include "crm/experiments.hpp"

#include "crm/errors.hpp"
#include "crm/png_io.hpp"
#include "crm/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace crm {

namespace fs = std::filesystem;

std::vector<Condition> ablation_conditions(const std::string& suite, const TrainConfig& base) {
  std::vector<Condition> out;
  auto flags = [&](const std::string& name, bool mws, bool masking, bool sdc, bool sdn) {
    TrainConfig c = base;
    c.use_mws = mws;
    c.use_masking = masking;
    c.use_sdc = sdc;
    c.use_sdn = sdn;
    c.masking_mode = MaskingMode::crm;
    out.push_back({name, c});
  };
  if (suite == "loss_terms") {
    flags("baseline", false, false, false, false);
    flags("mws", true, false, false, false);
    flags("mws_crm", true, true, false, false);
    flags("mws_crm_sdc", true, true, true, false);
    flags("mws_crm_sdn", true, true, false, true);
    flags("full", true, true, true, true);
  } else if (suite == "mask_strategy") {
    TrainConfig sq = base;
    sq.mask_strategy = MaskStrategy::square;
    sq.masking_mode = MaskingMode::crm;
    out.push_back({"square", sq});
    for (int px : {8, 16, 32, 64}) {
      TrainConfig c = base;
      c.mask_strategy = MaskStrategy::patch;
      c.masking_mode = MaskingMode::crm;
      c.mask_patch_px = px;
      out.push_back({"patch" + std::to_string(px), c});
    }
  } else if (suite == "crm_vs_irm") {
    TrainConfig crm = base;
    crm.masking_mode = MaskingMode::crm;
    crm.mask_strategy = MaskStrategy::patch;
    out.push_back({"crm", crm});
    for (int r : {3, 4, 5, 6, 7}) {
      TrainConfig c = base;
      c.masking_mode = MaskingMode::irm;
      c.mask_strategy = MaskStrategy::patch;
      c.irm_ratio_low = c.irm_ratio_high = r / 10.0;
      out.push_back({"irm_0." + std::to_string(r), c});
    }
  } else {
    throw ConfigError("unknown ablation suite '" + suite + "' (expected loss_terms, mask_strategy or crm_vs_irm)");
  }
  for (const auto& c : out) c.config.validate();
  return out;
}

std::string RunRecord::to_json() const {
  char hash[17];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(config_hash));
  nlohmann::ordered_json j;
  j["suite"] = suite;
  j["condition"] = condition;
  j["seed"] = seed;
  j["config_hash"] = hash;
  j["iterations"] = iterations;
  j["miou"] = robustness.miou_rgbt;
  j["miou_rgb_drop"] = robustness.miou_rgb_drop;
  j["miou_thr_drop"] = robustness.miou_thr_drop;
  j["diff_rgb_drop"] = robustness.diff_rgb_drop;
  j["diff_thr_drop"] = robustness.diff_thr_drop;
  return j.dump();
}

RunRecord RunRecord::from_json(const std::string& line) {
  RunRecord r;
  try {
    const auto j = nlohmann::json::parse(line);
    r.suite = j.at("suite").get<std::string>();
    r.condition = j.at("condition").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.config_hash = std::stoull(j.at("config_hash").get<std::string>(), nullptr, 16);
    r.iterations = j.at("iterations").get<int>();
    r.robustness = RobustnessReport::from(j.at("miou").get<double>(), j.at("miou_rgb_drop").get<double>(),
                                          j.at("miou_thr_drop").get<double>());
  } catch (const std::exception& e) {
    throw DataError(std::string("malformed result record: ") + e.what());
  }
  return r;
}

namespace {

template <typename Scalar>
RunRecord run_in_precision(const TrainConfig& cfg, const fs::path& dir, bool quiet) {
  auto data = make_datasets(cfg);
  Model<Scalar> model(cfg.model, cfg.seed);
  TrainOptions opts;
  opts.quiet = quiet;
  // Pick up an interrupted run of the same configuration.
  if (fs::exists(dir / "latest.ckpt") && read_checkpoint_meta(dir / "latest.ckpt").config_hash == cfg.hash())
    opts.resume = dir / "latest.ckpt";
  train(model, cfg, *data.train, data.val.get(), dir, opts);
  RunRecord r;
  r.iterations = cfg.total_iters;
  r.robustness = robustness_report(model, *data.val);
  return r;
}

}  // namespace

RunRecord train_and_evaluate(const std::string& suite, const std::string& condition, const TrainConfig& cfg,
                             const fs::path& dir, bool quiet) {
  const fs::path result = dir / "result.json";
  if (fs::exists(result)) {
    std::ifstream in(result);
    std::string line;
    std::getline(in, line);
    RunRecord r = RunRecord::from_json(line);
    if (r.config_hash == cfg.hash()) return r;
  }
  fs::create_directories(dir);
  const auto t0 = std::chrono::steady_clock::now();
  RunRecord r = cfg.precision == Precision::float32 ? run_in_precision<float>(cfg, dir, quiet)
                                                    : run_in_precision<double>(cfg, dir, quiet);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  r.suite = suite;
  r.condition = condition;
  r.seed = cfg.seed;
  r.config_hash = cfg.hash();
  std::ofstream(result, std::ios::trunc) << r.to_json() << '\n';
  return r;
}

std::vector<RunRecord> run_conditions(const std::string& suite, const std::vector<Condition>& conditions,
                                      const std::vector<std::uint64_t>& seeds, const fs::path& out_dir, bool quiet) {
  std::vector<RunRecord> out;
  for (const auto& c : conditions) {
    for (auto seed : seeds) {
      TrainConfig cfg = c.config;
      cfg.seed = seed;
      const fs::path dir = out_dir / c.name / ("seed" + std::to_string(seed));
      out.push_back(train_and_evaluate(suite, c.name, cfg, dir, quiet));
    }
  }
  return out;
}

double median(std::vector<double> v) {
  if (v.empty()) throw InputError("median of an empty list");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<SummaryRow> summarize(const std::vector<RunRecord>& records) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<const RunRecord*>> groups;
  for (const auto& r : records) {
    if (!groups.count(r.condition)) order.push_back(r.condition);
    groups[r.condition].push_back(&r);
  }
  std::vector<SummaryRow> rows;
  for (const auto& name : order) {
    const auto& g = groups[name];
    auto med = [&](double RobustnessReport::*field) {
      std::vector<double> v;
      for (const auto* r : g) v.push_back(r->robustness.*field);
      return median(v);
    };
    SummaryRow row;
    row.condition = name;
    row.runs = static_cast<int>(g.size());
    row.median.miou_rgbt = med(&RobustnessReport::miou_rgbt);
    row.median.miou_rgb_drop = med(&RobustnessReport::miou_rgb_drop);
    row.median.miou_thr_drop = med(&RobustnessReport::miou_thr_drop);
    row.median.diff_rgb_drop = med(&RobustnessReport::diff_rgb_drop);
    row.median.diff_thr_drop = med(&RobustnessReport::diff_thr_drop);
    rows.push_back(row);
  }
  return rows;
}

std::string format_table(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) width[c] = header[c].size();
  for (const auto& r : rows) {
    if (r.size() != header.size()) throw DimensionError("format_table: row width differs from header");
    for (std::size_t c = 0; c < r.size(); ++c) width[c] = std::max(width[c], r[c].size());
  }
  std::ostringstream os;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (c) os << "  ";
      const std::string pad(width[c] - cells[c].size(), ' ');
      os << (c == 0 ? cells[c] + pad : pad + cells[c]);
    }
    os << '\n';
  };
  line(header);
  std::size_t total = 0;
  for (auto w : width) total += w;
  os << std::string(total + 2 * (width.size() - 1), '-') << '\n';
  for (const auto& r : rows) line(r);
  return os.str();
}

namespace {

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
  return buf;
}

std::string signed_pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%+.2f", 100.0 * v);
  return buf;
}

}  // namespace

std::string summary_table(const std::vector<SummaryRow>& rows) {
  std::vector<std::vector<std::string>> cells;
  for (const auto& r : rows) {
    cells.push_back({r.condition, pct(r.median.miou_rgbt), pct(r.median.miou_rgb_drop), signed_pct(r.median.diff_rgb_drop),
                     pct(r.median.miou_thr_drop), signed_pct(r.median.diff_thr_drop), std::to_string(r.runs)});
  }
  return format_table({"condition", "mIoU", "RGB drop", "diff", "THR drop", "diff", "runs"}, cells);
}

void emit_tables(const fs::path& out_dir, const std::vector<RunRecord>& records) {
  fs::create_directories(out_dir);
  {
    std::ofstream out(out_dir / "results.jsonl", std::ios::trunc);
    if (!out) throw IoError("cannot write " + (out_dir / "results.jsonl").string());
    for (const auto& r : records) out << r.to_json() << '\n';
  }
  std::ofstream t(out_dir / "table.txt", std::ios::trunc);
  if (!t) throw IoError("cannot write " + (out_dir / "table.txt").string());
  t << summary_table(summarize(records));
}

std::array<std::uint8_t, 3> label_color(int label) {
  if (label == kIgnoreLabel || label < 0) return {0, 0, 0};
  static const std::array<std::array<std::uint8_t, 3>, 8> palette{{{64, 64, 64},
                                                                    {230, 40, 40},
                                                                    {40, 80, 230},
                                                                    {240, 210, 40},
                                                                    {40, 200, 70},
                                                                    {200, 50, 210},
                                                                    {30, 210, 230},
                                                                    {250, 140, 20}}};
  if (label < static_cast<int>(palette.size())) return palette[label];
  const auto h = mix64(static_cast<std::uint64_t>(label));
  return {static_cast<std::uint8_t>(h), static_cast<std::uint8_t>(h >> 8), static_cast<std::uint8_t>(h >> 16)};
}

namespace {

std::uint8_t to8(double v) { return static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(v, 0.0, 1.0))); }

void blend_panel(std::vector<std::uint8_t>& buf, int total_w, int x_off, const Image& rgb, const LabelMap& labels) {
  for (int y = 0; y < rgb.height; ++y) {
    for (int x = 0; x < rgb.width; ++x) {
      const auto col = label_color(labels.at(y, x));
      const std::size_t o = 3 * (static_cast<std::size_t>(y) * total_w + x_off + x);
      for (int c = 0; c < 3; ++c) buf[o + c] = to8(0.4 * rgb.at(y, x, c) + 0.6 * col[c] / 255.0);
    }
  }
}

void image_panel(std::vector<std::uint8_t>& buf, int total_w, int x_off, const Image& img) {
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const std::size_t o = 3 * (static_cast<std::size_t>(y) * total_w + x_off + x);
      for (int c = 0; c < 3; ++c) buf[o + c] = to8(img.at(y, x, img.channels == 1 ? 0 : c));
    }
  }
}

}  // namespace

void write_overlay(const fs::path& path, const OverlayItem& item) {
  const int h = item.pair.height(), w = item.pair.width();
  if (item.prediction.height != h || item.prediction.width != w)
    throw DimensionError("write_overlay: prediction size differs from the image");
  const int gap = 2, total = 2 * w + gap;
  std::vector<std::uint8_t> buf(3 * static_cast<std::size_t>(h) * total, 255);
  blend_panel(buf, total, 0, item.pair.rgb, item.prediction);
  blend_panel(buf, total, w + gap, item.pair.rgb, item.pair.gt.dense);
  write_rgb8_png(path, h, total, buf);
}

void write_mask_illustration(const fs::path& path, const ScenePair& pair, const MaskPair& masks) {
  const int h = pair.height(), w = pair.width();
  const int gap = 2, total = 2 * w + gap;
  std::vector<std::uint8_t> buf(3 * static_cast<std::size_t>(h) * total, 255);
  image_panel(buf, total, 0, render_mask_overlay(pair.rgb, masks.keep_rgb));
  image_panel(buf, total, w + gap, render_mask_overlay(pair.thr, masks.keep_thr));
  write_rgb8_png(path, h, total, buf);
}

void write_mask_strategy_grids(const fs::path& out_dir, const ScenePair& pair, double ratio, int backbone_patch_px,
                               std::uint64_t seed) {
  fs::create_directories(out_dir);
  const int h = pair.height(), w = pair.width();
  {
    auto rng = derive_rng(seed, {0});
    const auto m = sample_complementary_masks(h / backbone_patch_px, w / backbone_patch_px, MaskStrategy::square,
                                              ratio, rng, backbone_patch_px);
    write_mask_illustration(out_dir / "masks_square.png", pair, m);
  }
  for (int px : {8, 16, 32, 64}) {
    if (h % px || w % px) continue;
    auto rng = derive_rng(seed, {static_cast<std::uint64_t>(px)});
    const auto m = sample_complementary_masks(h / px, w / px, MaskStrategy::patch, ratio, rng, px);
    write_mask_illustration(out_dir / ("masks_patch" + std::to_string(px) + ".png"), pair, m);
  }
}

}  // namespace crm
