#include "crm/data.hpp"

#include "crm/config.hpp"
#include "crm/errors.hpp"
#include "crm/png_io.hpp"
#include "crm/rng.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace crm {

namespace fs = std::filesystem;

void SceneSpec::validate() const {
  auto fail = [](const std::string& m) { throw ParameterError("scene spec: " + m); };
  if (height < 1 || width < 1) fail("image size must be positive");
  if (num_classes < 2) fail("num_classes must be >= 2 (class 0 is the background)");
  if (num_classes > 255) fail("num_classes must be < 255");
  if (min_objects < 0 || max_objects < min_objects) fail("object count range is invalid");
  if (rgb_only_fraction < 0 || thr_only_fraction < 0 || both_fraction < 0) fail("visibility fractions must be >= 0");
  if (std::abs(rgb_only_fraction + thr_only_fraction + both_fraction - 1.0) > 1e-9) {
    fail("visibility fractions must sum to 1");
  }
  if (noise_std < 0) fail("noise_std must be >= 0");
  for (int p : {backbone_patch_px, mask_patch_px}) {
    if (p < 1 || height % p != 0 || width % p != 0) {
      fail("image size " + std::to_string(height) + "x" + std::to_string(width) + " not divisible by patch " +
           std::to_string(p));
    }
  }
  if (max_placement_tries < 1) fail("max_placement_tries must be >= 1");
}

void SceneSpec::write(Config& c, const std::string& p) const {
  c.set(p + "height", std::to_string(height));
  c.set(p + "width", std::to_string(width));
  c.set(p + "num_classes", std::to_string(num_classes));
  c.set(p + "min_objects", std::to_string(min_objects));
  c.set(p + "max_objects", std::to_string(max_objects));
  c.set(p + "rgb_only_fraction", format_double(rgb_only_fraction));
  c.set(p + "thr_only_fraction", format_double(thr_only_fraction));
  c.set(p + "both_fraction", format_double(both_fraction));
  c.set(p + "noise_std", format_double(noise_std));
  c.set(p + "backbone_patch_px", std::to_string(backbone_patch_px));
  c.set(p + "mask_patch_px", std::to_string(mask_patch_px));
  c.set(p + "max_placement_tries", std::to_string(max_placement_tries));
}

SceneSpec SceneSpec::read(const Config& c, const std::string& p) {
  SceneSpec s;
  s.height = c.get_int(p + "height", s.height);
  s.width = c.get_int(p + "width", s.width);
  s.num_classes = c.get_int(p + "num_classes", s.num_classes);
  s.min_objects = c.get_int(p + "min_objects", s.min_objects);
  s.max_objects = c.get_int(p + "max_objects", s.max_objects);
  s.rgb_only_fraction = c.get_double(p + "rgb_only_fraction", s.rgb_only_fraction);
  s.thr_only_fraction = c.get_double(p + "thr_only_fraction", s.thr_only_fraction);
  s.both_fraction = c.get_double(p + "both_fraction", s.both_fraction);
  s.noise_std = c.get_double(p + "noise_std", s.noise_std);
  s.backbone_patch_px = c.get_int(p + "backbone_patch_px", s.backbone_patch_px);
  s.mask_patch_px = c.get_int(p + "mask_patch_px", s.mask_patch_px);
  s.max_placement_tries = c.get_int(p + "max_placement_tries", s.max_placement_tries);
  return s;
}

const char* to_string(Visibility v) {
  switch (v) {
    case Visibility::rgb_only: return "rgb_only";
    case Visibility::thr_only: return "thr_only";
    case Visibility::both: return "both";
  }
  return "?";
}

const char* to_string(ShapeKind s) {
  switch (s) {
    case ShapeKind::rect: return "rect";
    case ShapeKind::disc: return "disc";
    case ShapeKind::bar: return "bar";
  }
  return "?";
}

namespace {

std::array<double, 3> class_color(int c, int num_classes) {
  static const std::array<std::array<double, 3>, 6> palette{{{0.90, 0.15, 0.15},
                                                             {0.15, 0.30, 0.90},
                                                             {0.95, 0.85, 0.15},
                                                             {0.15, 0.80, 0.25},
                                                             {0.80, 0.20, 0.85},
                                                             {0.10, 0.85, 0.90}}};
  if (c - 1 < static_cast<int>(palette.size())) return palette[c - 1];
  // Evenly spaced hues for larger label sets.
  const double h = 6.0 * (c - 1) / (num_classes - 1);
  const double x = 1.0 - std::abs(std::fmod(h, 2.0) - 1.0);
  const int sector = static_cast<int>(h) % 6;
  static const int order[6][3] = {{0, 1, 2}, {1, 0, 2}, {2, 0, 1}, {2, 1, 0}, {1, 2, 0}, {0, 2, 1}};
  std::array<double, 3> v{0.1, 0.1, 0.1};
  v[order[sector][0]] = 0.9;
  v[order[sector][1]] = 0.1 + 0.8 * x;
  return v;
}

double class_heat(int c, int num_classes) { return 0.45 + 0.5 * c / (num_classes - 1); }

bool inside(const SceneObject& o, int y, int x) {
  if (y < o.y0 || y >= o.y1 || x < o.x0 || x >= o.x1) return false;
  if (o.shape != ShapeKind::disc) return true;
  const double cy = 0.5 * (o.y0 + o.y1 - 1), cx = 0.5 * (o.x0 + o.x1 - 1);
  const double r = 0.5 * (o.y1 - o.y0);
  return (y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r;
}

}  // namespace

ScenePair generate_scene(const SceneSpec& spec, std::mt19937_64& rng) {
  spec.validate();
  const int H = spec.height, W = spec.width, K = spec.num_classes;
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  ScenePair s;
  s.rgb = Image(H, W, 3);
  s.thr = Image(H, W, 1);
  LabelMap dense(H, W, 0);

  // Low-frequency textured background.
  const double fy = 0.05 + 0.15 * u01(rng), fx = 0.05 + 0.15 * u01(rng), ph = 6.283 * u01(rng);
  const double ty = 0.03 + 0.1 * u01(rng), tph = 6.283 * u01(rng);
  const std::array<double, 3> base{0.35 + 0.1 * u01(rng), 0.40 + 0.1 * u01(rng), 0.35 + 0.1 * u01(rng)};
  const double heat = 0.2 + 0.1 * u01(rng);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const int p = y * W + x;
      const double t = 0.06 * std::sin(fy * y + fx * x + ph);
      for (int c = 0; c < 3; ++c) s.rgb.pixels(p, c) = base[c] + t * (c == 1 ? -1.0 : 1.0);
      s.thr.pixels(p, 0) = heat + 0.04 * std::sin(ty * (x + y) + tph) + 0.05 * y / H;
    }
  }

  std::uniform_int_distribution<int> count_dist(spec.min_objects, spec.max_objects);
  std::uniform_int_distribution<int> class_dist(1, K - 1);
  std::discrete_distribution<int> vis_dist({spec.rgb_only_fraction, spec.thr_only_fraction, spec.both_fraction});
  std::uniform_int_distribution<int> shape_dist(0, 2);
  Eigen::Array<std::uint8_t, Eigen::Dynamic, 1> occupied = Eigen::Array<std::uint8_t, Eigen::Dynamic, 1>::Zero(H * W);

  const int n = count_dist(rng);
  for (int i = 0; i < n; ++i) {
    SceneObject o;
    o.class_id = class_dist(rng);
    o.visibility = static_cast<Visibility>(vis_dist(rng));
    o.shape = static_cast<ShapeKind>(shape_dist(rng));
    const double jitter = 0.06 * (u01(rng) - 0.5);
    bool placed = false;
    for (int attempt = 0; attempt < spec.max_placement_tries && !placed; ++attempt) {
      int h = 0, w = 0;
      switch (o.shape) {
        case ShapeKind::rect:
          h = 8 + static_cast<int>(u01(rng) * 15);
          w = 8 + static_cast<int>(u01(rng) * 15);
          break;
        case ShapeKind::disc:
          h = w = 10 + 2 * static_cast<int>(u01(rng) * 7);
          break;
        case ShapeKind::bar: {
          const int thick = 4 + static_cast<int>(u01(rng) * 3);
          const int len = 18 + static_cast<int>(u01(rng) * 23);
          if (u01(rng) < 0.5) {
            h = thick;
            w = len;
          } else {
            h = len;
            w = thick;
          }
          break;
        }
      }
      h = std::min(h, H);
      w = std::min(w, W);
      o.y0 = static_cast<int>(u01(rng) * (H - h + 1));
      o.x0 = static_cast<int>(u01(rng) * (W - w + 1));
      o.y1 = o.y0 + h;
      o.x1 = o.x0 + w;
      bool free = true;
      for (int y = o.y0; y < o.y1 && free; ++y)
        for (int x = o.x0; x < o.x1 && free; ++x)
          if (inside(o, y, x) && occupied(y * W + x)) free = false;
      placed = free;
    }
    if (!placed) continue;

    const auto color = class_color(o.class_id, K);
    const double temp = class_heat(o.class_id, K) + jitter;
    const bool in_rgb = o.visibility != Visibility::thr_only;
    const bool in_thr = o.visibility != Visibility::rgb_only;
    for (int y = o.y0; y < o.y1; ++y) {
      for (int x = o.x0; x < o.x1; ++x) {
        if (!inside(o, y, x)) continue;
        const int p = y * W + x;
        occupied(p) = 1;
        dense.labels(p) = o.class_id;
        if (in_rgb) {
          for (int c = 0; c < 3; ++c) s.rgb.pixels(p, c) = color[c] + jitter;
        }
        if (in_thr) s.thr.pixels(p, 0) = temp;
      }
    }
    s.objects.push_back(o);
  }

  if (spec.noise_std > 0) {
    std::normal_distribution<double> noise(0.0, spec.noise_std);
    for (Eigen::Index i = 0; i < s.rgb.pixels.size(); ++i) s.rgb.pixels.data()[i] += noise(rng);
    for (Eigen::Index i = 0; i < s.thr.pixels.size(); ++i) s.thr.pixels.data()[i] += noise(rng);
  }
  s.rgb.pixels = s.rgb.pixels.cwiseMax(0.0).cwiseMin(1.0);
  s.thr.pixels = s.thr.pixels.cwiseMax(0.0).cwiseMin(1.0);
  s.gt = segments_from_labels(dense, K);
  return s;
}

std::vector<ScenePair> generate_dataset(const SceneSpec& spec, int count, std::uint64_t seed,
                                        const std::string& prefix) {
  if (count < 0) throw ParameterError("generate_dataset: count must be >= 0");
  std::vector<ScenePair> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const std::uint64_t s = derive_seed(seed, {static_cast<std::uint64_t>(i)});
    std::mt19937_64 rng(s);
    ScenePair p = generate_scene(spec, rng);
    char buf[32];
    std::snprintf(buf, sizeof buf, "%04d", i);
    p.id = prefix + buf;
    p.seed = s;
    out.push_back(std::move(p));
  }
  return out;
}

DirectoryDataset::DirectoryDataset(fs::path root, std::vector<std::string> ids, int num_classes)
    : root_(std::move(root)), ids_(std::move(ids)), num_classes_(num_classes) {}

ScenePair DirectoryDataset::get(std::size_t i) const {
  const std::string& id = ids_.at(i);
  ScenePair s;
  s.id = id;
  s.rgb = read_png(root_ / "rgb" / (id + ".png"), 3);
  s.thr = read_png(root_ / "thr" / (id + ".png"), 1);
  const fs::path label_path = root_ / "labels" / (id + ".png");
  LabelMap labels = read_label_png(label_path);
  if (s.thr.height != s.rgb.height || s.thr.width != s.rgb.width || labels.height != s.rgb.height ||
      labels.width != s.rgb.width) {
    throw DataError("id '" + id + "': rgb, thr and label images differ in size");
  }
  try {
    s.gt = segments_from_labels(labels, num_classes_);
  } catch (const DataError& e) {
    throw DataError("id '" + id + "' (" + label_path.string() + "): " + e.what());
  }
  return s;
}

namespace {

std::set<std::string> png_stems(const fs::path& dir) {
  std::set<std::string> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") out.insert(e.path().stem().string());
  }
  return out;
}

}  // namespace

DirectoryDataset load_dataset(const fs::path& root, int num_classes, const std::optional<std::string>& split) {
  if (!fs::is_directory(root)) throw IoError("dataset root '" + root.string() + "' is not a directory");
  const char* subdirs[3] = {"rgb", "thr", "labels"};
  std::set<std::string> all;
  for (const char* d : subdirs) {
    auto s = png_stems(root / d);
    all.insert(s.begin(), s.end());
  }
  for (const auto& id : all) {
    for (const char* d : subdirs) {
      const fs::path p = root / d / (id + ".png");
      if (!fs::is_regular_file(p)) {
        throw DataError("id '" + id + "': missing " + d + " file " + p.string());
      }
    }
  }
  std::vector<std::string> ids(all.begin(), all.end());
  if (split) {
    const fs::path sp = root / "split.txt";
    std::ifstream f(sp);
    if (!f) throw DataError("split '" + *split + "' requested but " + sp.string() + " is missing");
    std::vector<std::string> keep;
    std::string line;
    while (std::getline(f, line)) {
      std::istringstream ls(line);
      std::string id, name;
      if (!(ls >> id >> name) || id[0] == '#') continue;
      if (name != *split) continue;
      if (!all.count(id)) throw DataError("split.txt lists id '" + id + "' with no image files");
      keep.push_back(id);
    }
    ids = std::move(keep);
  }
  return DirectoryDataset(root, std::move(ids), num_classes);
}

void write_dataset(const fs::path& root, const std::vector<ScenePair>& pairs,
                   const std::map<std::string, std::string>& splits) {
  std::error_code ec;
  for (const char* d : {"rgb", "thr", "labels"}) {
    fs::create_directories(root / d, ec);
    if (ec) throw IoError("cannot create '" + (root / d).string() + "': " + ec.message());
  }
  for (const auto& p : pairs) {
    if (p.id.empty()) throw DataError("write_dataset: scene without id");
    write_png(root / "rgb" / (p.id + ".png"), p.rgb);
    write_png(root / "thr" / (p.id + ".png"), p.thr);
    write_label_png(root / "labels" / (p.id + ".png"), p.gt.dense);
  }
  if (!splits.empty()) {
    std::ofstream f(root / "split.txt");
    if (!f) throw IoError("cannot write '" + (root / "split.txt").string() + "'");
    for (const auto& [id, name] : splits) f << id << ' ' << name << '\n';
  }
}

void AugmentConfig::write(Config& c, const std::string& p) const {
  c.set(p + "flip_prob", format_double(flip_prob));
  c.set(p + "jitter", jitter ? "true" : "false");
  c.set(p + "brightness", format_double(brightness));
  c.set(p + "contrast", format_double(contrast));
  c.set(p + "saturation", format_double(saturation));
  c.set(p + "thr_brightness", format_double(thr_brightness));
  c.set(p + "thr_contrast", format_double(thr_contrast));
  c.set(p + "crop_height", std::to_string(crop_height));
  c.set(p + "crop_width", std::to_string(crop_width));
}

AugmentConfig AugmentConfig::read(const Config& c, const std::string& p) {
  AugmentConfig a;
  a.flip_prob = c.get_double(p + "flip_prob", a.flip_prob);
  a.jitter = c.get_bool(p + "jitter", a.jitter);
  a.brightness = c.get_double(p + "brightness", a.brightness);
  a.contrast = c.get_double(p + "contrast", a.contrast);
  a.saturation = c.get_double(p + "saturation", a.saturation);
  a.thr_brightness = c.get_double(p + "thr_brightness", a.thr_brightness);
  a.thr_contrast = c.get_double(p + "thr_contrast", a.thr_contrast);
  a.crop_height = c.get_int(p + "crop_height", a.crop_height);
  a.crop_width = c.get_int(p + "crop_width", a.crop_width);
  return a;
}

namespace {

Image flip_image(const Image& img) {
  Image out(img.height, img.width, img.channels);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) out.pixels.row(y * img.width + x) = img.pixels.row(y * img.width + img.width - 1 - x);
  return out;
}

Image crop_image(const Image& img, int y0, int x0, int h, int w) {
  Image out(h, w, img.channels);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out.pixels.row(y * w + x) = img.pixels.row((y0 + y) * img.width + x0 + x);
  return out;
}

GtSegments relabel(const LabelMap& dense, const GtSegments& like) {
  int num_classes = 1;
  for (const auto& s : like.segments) num_classes = std::max(num_classes, s.class_id + 1);
  for (Eigen::Index i = 0; i < dense.labels.size(); ++i) {
    if (dense.labels(i) != kIgnoreLabel) num_classes = std::max(num_classes, dense.labels(i) + 1);
  }
  return segments_from_labels(dense, num_classes);
}

}  // namespace

ScenePair flip_horizontal(const ScenePair& pair) {
  ScenePair out = pair;
  out.rgb = flip_image(pair.rgb);
  out.thr = flip_image(pair.thr);
  LabelMap d(pair.gt.height, pair.gt.width);
  for (int y = 0; y < d.height; ++y)
    for (int x = 0; x < d.width; ++x) d.labels(y * d.width + x) = pair.gt.dense.labels(y * d.width + d.width - 1 - x);
  out.gt = relabel(d, pair.gt);
  for (auto& o : out.objects) {
    const int x0 = pair.width() - o.x1, x1 = pair.width() - o.x0;
    o.x0 = x0;
    o.x1 = x1;
  }
  return out;
}

ScenePair crop(const ScenePair& pair, int y0, int x0, int h, int w) {
  if (h < 1 || w < 1 || y0 < 0 || x0 < 0 || y0 + h > pair.height() || x0 + w > pair.width()) {
    throw ParameterError("crop window outside the image");
  }
  ScenePair out = pair;
  out.rgb = crop_image(pair.rgb, y0, x0, h, w);
  out.thr = crop_image(pair.thr, y0, x0, h, w);
  LabelMap d(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) d.labels(y * w + x) = pair.gt.dense.labels((y0 + y) * pair.width() + x0 + x);
  out.gt = relabel(d, pair.gt);
  out.objects.clear();
  for (auto o : pair.objects) {
    o.y0 = std::max(o.y0 - y0, 0);
    o.x0 = std::max(o.x0 - x0, 0);
    o.y1 = std::min(o.y1 - y0, h);
    o.x1 = std::min(o.x1 - x0, w);
    if (o.y1 > o.y0 && o.x1 > o.x0) out.objects.push_back(o);
  }
  return out;
}

ScenePair augment(const ScenePair& pair, std::mt19937_64& rng, const AugmentConfig& cfg) {
  const int ch = cfg.crop_height > 0 ? cfg.crop_height : pair.height();
  const int cw = cfg.crop_width > 0 ? cfg.crop_width : pair.width();
  if (ch > pair.height() || cw > pair.width()) throw ParameterError("crop size exceeds the image size");
  for (int p : {cfg.backbone_patch_px, cfg.mask_patch_px}) {
    if (p < 1 || ch % p != 0 || cw % p != 0) {
      throw ParameterError("crop size " + std::to_string(ch) + "x" + std::to_string(cw) + " not divisible by patch " +
                           std::to_string(p));
    }
  }
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  ScenePair out = u01(rng) < cfg.flip_prob ? flip_horizontal(pair) : pair;
  const int y0 = std::uniform_int_distribution<int>(0, pair.height() - ch)(rng);
  const int x0 = std::uniform_int_distribution<int>(0, pair.width() - cw)(rng);
  if (ch != pair.height() || cw != pair.width()) out = crop(out, y0, x0, ch, cw);

  if (cfg.jitter) {
    auto factor = [&](double amount) { return 1.0 + amount * (2.0 * u01(rng) - 1.0); };
    const double b = factor(cfg.brightness), c = factor(cfg.contrast), s = factor(cfg.saturation);
    const double tb = factor(cfg.thr_brightness), tc = factor(cfg.thr_contrast);
    Eigen::MatrixXd& rgb = out.rgb.pixels;
    rgb *= b;
    const Eigen::VectorXd gray = rgb * Eigen::Vector3d(0.299, 0.587, 0.114);
    const double mean = gray.mean();
    rgb = ((rgb.array() - mean) * c + mean).matrix();
    const Eigen::VectorXd gray2 = rgb * Eigen::Vector3d(0.299, 0.587, 0.114);
    rgb = ((rgb.colwise() - gray2) * s).colwise() + gray2;
    rgb = rgb.cwiseMax(0.0).cwiseMin(1.0);

    Eigen::MatrixXd& thr = out.thr.pixels;
    thr *= tb;
    const double tmean = thr.mean();
    thr = ((thr.array() - tmean) * tc + tmean).matrix().cwiseMax(0.0).cwiseMin(1.0);
  }
  return out;
}

bool gt_consistent(const GtSegments& gt) {
  if (gt.dense.height != gt.height || gt.dense.width != gt.width) return false;
  Eigen::ArrayXi cover = Eigen::ArrayXi::Zero(gt.dense.labels.size());
  std::set<int> seen;
  for (const auto& s : gt.segments) {
    if (s.mask.size() != gt.dense.labels.size()) return false;
    if (!seen.insert(s.class_id).second) return false;
    cover += s.mask.cast<int>();
  }
  if ((cover > 1).any()) return false;
  return (labels_from_segments(gt).labels == gt.dense.labels).all();
}

}  // namespace crm
