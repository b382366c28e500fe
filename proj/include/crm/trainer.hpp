#pragma once

// Training loop: poly-decayed AdamW over batches of forward variants,
// periodic validation, checkpoints and an NDJSON loss log.

#include "crm/config.hpp"
#include "crm/data.hpp"
#include "crm/losses.hpp"
#include "crm/model.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace crm {

enum class MaskingMode { crm, irm };
enum class Precision { float32, float64 };

MaskingMode parse_masking_mode(const std::string& name);
const char* to_string(MaskingMode m);
Precision parse_precision(const std::string& name);
const char* to_string(Precision p);

struct TrainConfig {
  ModelConfig model;
  LossWeights weights;
  SceneSpec data;
  AugmentConfig augment;
  bool use_augment = true;

  std::uint64_t seed = 0;
  std::uint64_t data_seed = 1234;
  int num_train = 400;
  int num_val = 100;
  std::string dataset_dir;  // empty: synthetic scenes from `data`

  double base_lr = 1e-4;
  double poly_power = 0.9;
  int total_iters = 3000;
  int batch_size = 8;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int eval_interval = 500;  // 0 disables periodic validation
  Precision precision = Precision::float64;

  bool use_mws = true;
  bool use_masking = true;
  bool use_sdc = true;
  bool use_sdn = true;
  bool teacher_stop_gradient = true;
  MaskingMode masking_mode = MaskingMode::crm;
  MaskStrategy mask_strategy = MaskStrategy::patch;
  double mask_ratio = 0.5;
  int mask_patch_px = 32;
  double irm_ratio_low = 0.3;
  double irm_ratio_high = 0.7;

  // Throws ConfigError on the first violated constraint.
  void validate() const;
  LossFlags loss_flags() const;
  // data/augment with patch sizes taken from the model and masking settings.
  SceneSpec scene_spec() const;
  AugmentConfig augment_config() const;
  Config to_config() const;
  // Unknown keys are a ConfigError.
  static TrainConfig from_config(const Config& c);
  // Digest of the canonical text form.
  std::uint64_t hash() const;
};

double poly_lr(double base_lr, int iter, int total_iters, double power = 0.9);

template <typename Scalar>
class AdamW {
 public:
  AdamW(const ParameterSet<Scalar>& params, double beta1, double beta2, double eps, double weight_decay);

  // Uses each parameter's accumulated grad; decay only where Parameter::decay is set.
  void step(ParameterSet<Scalar>& params, double lr);

  long steps() const { return t_; }
  std::vector<Matrix<Scalar>>& first_moment() { return m_; }
  std::vector<Matrix<Scalar>>& second_moment() { return v_; }
  const std::vector<Matrix<Scalar>>& first_moment() const { return m_; }
  const std::vector<Matrix<Scalar>>& second_moment() const { return v_; }
  void set_steps(long t) { t_ = t; }

 private:
  double beta1_, beta2_, eps_, wd_;
  long t_ = 0;
  std::vector<Matrix<Scalar>> m_, v_;
};

struct StepStats {
  int iteration = 0;
  double supervised = 0.0;
  double sdc = 0.0;
  double sdn = 0.0;
  double total = 0.0;
  double lr = 0.0;
};

// Forward variants for one sample. Masks are drawn from rng when masking is on.
template <typename Scalar>
ForwardVariants<Scalar> forward_variants(const Model<Scalar>& model, Tape<Scalar>& t, const ScenePair& pair,
                                         const TrainConfig& cfg, std::mt19937_64& rng);

// Masks for an image of the given size (the model input size by default).
MaskPair sample_training_masks(const TrainConfig& cfg, int height, int width, std::mt19937_64& rng);
MaskPair sample_training_masks(const TrainConfig& cfg, std::mt19937_64& rng);

// Dataset indices of batch `iter`: epoch-wise permutations derived from (seed, epoch).
std::vector<std::size_t> batch_indices(const TrainConfig& cfg, std::size_t dataset_size, int iter);

// One optimisation step on batch `iter`. Throws TrainingError on a non-finite loss.
template <typename Scalar>
StepStats train_step(Model<Scalar>& model, AdamW<Scalar>& opt, const Dataset& data, const TrainConfig& cfg, int iter);

struct CheckpointMeta {
  int iteration = 0;
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;
  std::uint64_t rng_digest = 0;
  double best_miou = -1.0;
  Precision precision = Precision::float64;
  std::string config_text;
};

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, const Model<Scalar>& model, const AdamW<Scalar>* opt,
                     const CheckpointMeta& meta);

// Reads meta only.
CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path);

// Restores parameters (and optimiser state when opt is given). A config hash
// different from expected_hash is a ConfigError unless force is set.
template <typename Scalar>
CheckpointMeta load_checkpoint(const std::filesystem::path& path, Model<Scalar>& model, AdamW<Scalar>* opt,
                               std::optional<std::uint64_t> expected_hash, bool force = false);

struct TrainOptions {
  std::optional<std::filesystem::path> resume;
  bool force = false;
  std::optional<int> stop_after;  // stop once this many iterations are done
  bool quiet = true;
};

struct TrainResult {
  int iterations_done = 0;
  double best_miou = -1.0;
  std::optional<double> final_miou;
  std::vector<StepStats> steps;  // steps run in this call
  std::filesystem::path latest;
  std::filesystem::path best;
};

// out_dir receives config.txt, log.jsonl, latest.ckpt and (with validation
// data) best.ckpt. val may be null.
template <typename Scalar>
TrainResult train(Model<Scalar>& model, const TrainConfig& cfg, const Dataset& train_data, const Dataset* val,
                  const std::filesystem::path& out_dir, const TrainOptions& opts = {});

// Training and validation sets named by cfg: a directory dataset when
// dataset_dir is set, otherwise synthetic scenes from data_seed.
struct DataSplits {
  std::unique_ptr<Dataset> train;
  std::unique_ptr<Dataset> val;
};
DataSplits make_datasets(const TrainConfig& cfg);

}  // namespace crm
