#pragma once

// Synthetic paired scenes, the on-disk dataset format, and augmentation.

#include "crm/segments.hpp"
#include "crm/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace crm {

class Config;

struct SceneSpec {
  int height = 64;
  int width = 64;
  int num_classes = 4;  // class 0 is the background; objects use 1..K-1
  int min_objects = 2;
  int max_objects = 5;
  double rgb_only_fraction = 1.0 / 3.0;
  double thr_only_fraction = 1.0 / 3.0;
  double both_fraction = 1.0 / 3.0;
  double noise_std = 0.03;
  int backbone_patch_px = 4;
  int mask_patch_px = 32;
  int max_placement_tries = 30;

  void validate() const;
  void write(Config& c, const std::string& prefix = "data.") const;
  static SceneSpec read(const Config& c, const std::string& prefix = "data.");
};

enum class Visibility { rgb_only, thr_only, both };
enum class ShapeKind { rect, disc, bar };

const char* to_string(Visibility v);
const char* to_string(ShapeKind s);

struct SceneObject {
  int class_id = 1;
  Visibility visibility = Visibility::both;
  ShapeKind shape = ShapeKind::rect;
  // Bounding box, inclusive-exclusive.
  int y0 = 0, x0 = 0, y1 = 0, x1 = 0;
};

struct ScenePair {
  std::string id;
  Image rgb;  // H x W x 3 in [0, 1]
  Image thr;  // H x W x 1 in [0, 1]
  GtSegments gt;
  std::vector<SceneObject> objects;  // empty for loaded data
  std::uint64_t seed = 0;

  int height() const { return rgb.height; }
  int width() const { return rgb.width; }
};

// Draws a scene from rng. Objects that cannot be placed without overlap
// within max_placement_tries are skipped.
ScenePair generate_scene(const SceneSpec& spec, std::mt19937_64& rng);

// count scenes with ids "<prefix>0000"...; scene i uses its own seed derived from (seed, i).
std::vector<ScenePair> generate_dataset(const SceneSpec& spec, int count, std::uint64_t seed,
                                        const std::string& prefix = "");

class Dataset {
 public:
  virtual ~Dataset() = default;
  virtual std::size_t size() const = 0;
  virtual ScenePair get(std::size_t i) const = 0;
  virtual std::string id(std::size_t i) const = 0;
};

class InMemoryDataset : public Dataset {
 public:
  InMemoryDataset() = default;
  explicit InMemoryDataset(std::vector<ScenePair> pairs) : pairs_(std::move(pairs)) {}
  std::size_t size() const override { return pairs_.size(); }
  ScenePair get(std::size_t i) const override { return pairs_.at(i); }
  std::string id(std::size_t i) const override { return pairs_.at(i).id; }
  const std::vector<ScenePair>& pairs() const { return pairs_; }

 private:
  std::vector<ScenePair> pairs_;
};

// root/{rgb,thr,labels}/<id>.png, optional root/split.txt with "<id> <split>" lines.
// Files are decoded on access.
class DirectoryDataset : public Dataset {
 public:
  DirectoryDataset(std::filesystem::path root, std::vector<std::string> ids, int num_classes);
  std::size_t size() const override { return ids_.size(); }
  ScenePair get(std::size_t i) const override;
  std::string id(std::size_t i) const override { return ids_.at(i); }
  const std::filesystem::path& root() const { return root_; }

 private:
  std::filesystem::path root_;
  std::vector<std::string> ids_;
  int num_classes_;
};

// Every id found under rgb/, thr/ or labels/ must exist in all three, otherwise DataError
// naming the id and the missing path. With split set, only ids listed under it are kept.
DirectoryDataset load_dataset(const std::filesystem::path& root, int num_classes,
                              const std::optional<std::string>& split = std::nullopt);

// Writes pairs in the directory format; split.txt is written when splits is non-empty.
void write_dataset(const std::filesystem::path& root, const std::vector<ScenePair>& pairs,
                   const std::map<std::string, std::string>& splits = {});

struct AugmentConfig {
  double flip_prob = 0.5;
  bool jitter = true;
  double brightness = 0.2;
  double contrast = 0.2;
  double saturation = 0.2;
  double thr_brightness = 0.2;
  double thr_contrast = 0.2;
  int crop_height = 0;  // 0 keeps the full size
  int crop_width = 0;
  int backbone_patch_px = 4;
  int mask_patch_px = 32;

  void write(Config& c, const std::string& prefix = "augment.") const;
  static AugmentConfig read(const Config& c, const std::string& prefix = "augment.");
};

ScenePair augment(const ScenePair& pair, std::mt19937_64& rng, const AugmentConfig& cfg);

ScenePair flip_horizontal(const ScenePair& pair);
// Crop of the given window; segments recomputed, empty ones dropped.
ScenePair crop(const ScenePair& pair, int y0, int x0, int height, int width);

// True when the dense map and the segment masks describe the same labelling.
bool gt_consistent(const GtSegments& gt);

}  // namespace crm
