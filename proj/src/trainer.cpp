#include "crm/trainer.hpp"

#include "crm/errors.hpp"
#include "crm/evaluate.hpp"
#include "crm/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>

namespace crm {

namespace {

constexpr std::uint64_t kStepStream = 0x5354;
constexpr std::uint64_t kOrderStream = 0x4f52;
constexpr char kMagic[8] = {'C', 'R', 'M', 'C', 'K', 'P', 'T', '1'};

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << v;
  return os.str();
}

std::uint64_t parse_hex64(const std::string& s) { return std::stoull(s, nullptr, 16); }

void write_model_config(Config& c, const ModelConfig& m) {
  c.set("model.embed_dim", std::to_string(m.embed_dim));
  c.set("model.encoder_stages", std::to_string(m.encoder_stages));
  c.set("model.encoder_depth", std::to_string(m.encoder_depth));
  c.set("model.heads", std::to_string(m.heads));
  c.set("model.queries", std::to_string(m.queries));
  c.set("model.num_classes", std::to_string(m.num_classes));
  c.set("model.decoder_layers", std::to_string(m.decoder_layers));
  c.set("model.backbone_patch_px", std::to_string(m.backbone_patch_px));
  c.set("model.window", std::to_string(m.window));
  c.set("model.mlp_ratio", std::to_string(m.mlp_ratio));
  c.set("model.input_height", std::to_string(m.input_height));
  c.set("model.input_width", std::to_string(m.input_width));
  c.set("model.fusion_eps", format_double(m.fusion_eps));
}

ModelConfig read_model_config(const Config& c) {
  ModelConfig m;
  m.embed_dim = c.get_int("model.embed_dim", m.embed_dim);
  m.encoder_stages = c.get_int("model.encoder_stages", m.encoder_stages);
  m.encoder_depth = c.get_int("model.encoder_depth", m.encoder_depth);
  m.heads = c.get_int("model.heads", m.heads);
  m.queries = c.get_int("model.queries", m.queries);
  m.num_classes = c.get_int("model.num_classes", m.num_classes);
  m.decoder_layers = c.get_int("model.decoder_layers", m.decoder_layers);
  m.backbone_patch_px = c.get_int("model.backbone_patch_px", m.backbone_patch_px);
  m.window = c.get_int("model.window", m.window);
  m.mlp_ratio = c.get_int("model.mlp_ratio", m.mlp_ratio);
  m.input_height = c.get_int("model.input_height", m.input_height);
  m.input_width = c.get_int("model.input_width", m.input_width);
  m.fusion_eps = c.get_double("model.fusion_eps", m.fusion_eps);
  return m;
}

std::string b(bool v) { return v ? "true" : "false"; }

template <typename Scalar>
bool finite(const Var<Scalar>& v) {
  return !v.valid() || std::isfinite(static_cast<double>(v.scalar()));
}

template <typename Scalar>
std::string nonfinite_variants(const ForwardVariants<Scalar>& v) {
  std::string out;
  auto check = [&](const std::optional<PredictionVars<Scalar>>& p, const char* name) {
    if (p && !(p->class_logits.value().allFinite() && p->mask_logits.value().allFinite())) out += std::string(" ") + name;
  };
  check(v.clean_pair, "clean_pair");
  check(v.clean_rgb, "clean_rgb");
  check(v.clean_thr, "clean_thr");
  check(v.masked_pair, "masked_pair");
  check(v.masked_rgb, "masked_rgb");
  check(v.masked_thr, "masked_thr");
  return out;
}

}  // namespace

MaskingMode parse_masking_mode(const std::string& name) {
  if (name == "crm") return MaskingMode::crm;
  if (name == "irm") return MaskingMode::irm;
  throw ConfigError("unknown masking mode '" + name + "' (expected crm or irm)");
}

const char* to_string(MaskingMode m) { return m == MaskingMode::crm ? "crm" : "irm"; }

Precision parse_precision(const std::string& name) {
  if (name == "float32") return Precision::float32;
  if (name == "float64") return Precision::float64;
  throw ConfigError("unknown precision '" + name + "' (expected float32 or float64)");
}

const char* to_string(Precision p) { return p == Precision::float32 ? "float32" : "float64"; }

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("train config: " + msg); };
  model.validate();
  weights.validate();
  try {
    scene_spec().validate();
  } catch (const ParameterError& e) {
    fail(e.what());
  }
  if (data.height != model.input_height || data.width != model.input_width)
    fail("data.height/width must match model.input_height/width");
  if (data.num_classes != model.num_classes) fail("data.num_classes must match model.num_classes");
  if (!(base_lr > 0.0)) fail("base_lr must be > 0");
  if (!(poly_power > 0.0)) fail("poly_power must be > 0");
  if (total_iters < 1) fail("total_iters must be >= 1");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (weight_decay < 0.0) fail("weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) fail("betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) fail("adam_eps must be > 0");
  if (eval_interval < 0) fail("eval_interval must be >= 0");
  if (dataset_dir.empty() && num_train < 1) fail("num_train must be >= 1");
  if (num_val < 0) fail("num_val must be >= 0");
  if ((use_sdc || use_sdn) && !use_masking) fail("self-distillation (use_sdc/use_sdn) requires use_masking");
  if (!(mask_ratio >= 0.0 && mask_ratio <= 1.0)) fail("mask.ratio must lie in [0, 1]");
  if (!(irm_ratio_low >= 0.0 && irm_ratio_low <= irm_ratio_high && irm_ratio_high <= 1.0))
    fail("mask.irm_ratio_low/high must satisfy 0 <= low <= high <= 1");
  if (mask_patch_px < 1 || mask_patch_px % model.backbone_patch_px != 0)
    fail("mask.patch_px must be a positive multiple of model.backbone_patch_px");
  const int ch = augment.crop_height > 0 ? augment.crop_height : model.input_height;
  const int cw = augment.crop_width > 0 ? augment.crop_width : model.input_width;
  if (ch > model.input_height || cw > model.input_width) fail("crop larger than the input");
  if (ch % mask_patch_px != 0 || cw % mask_patch_px != 0)
    fail("training image size must be a multiple of mask.patch_px (" + std::to_string(mask_patch_px) + ")");
}

SceneSpec TrainConfig::scene_spec() const {
  SceneSpec s = data;
  s.backbone_patch_px = model.backbone_patch_px;
  s.mask_patch_px = mask_patch_px;
  return s;
}

AugmentConfig TrainConfig::augment_config() const {
  AugmentConfig a = augment;
  a.backbone_patch_px = model.backbone_patch_px;
  a.mask_patch_px = mask_patch_px;
  return a;
}

LossFlags TrainConfig::loss_flags() const {
  LossFlags f;
  f.use_mws = use_mws;
  f.use_masking = use_masking;
  f.use_sdc = use_sdc;
  f.use_sdn = use_sdn;
  f.teacher_stop_gradient = teacher_stop_gradient;
  return f;
}

Config TrainConfig::to_config() const {
  Config c;
  write_model_config(c, model);
  c.set("loss.cls_matched", format_double(weights.cls_matched));
  c.set("loss.cls_noobj", format_double(weights.cls_noobj));
  c.set("loss.ce", format_double(weights.ce));
  c.set("loss.dice", format_double(weights.dice));
  scene_spec().write(c, "data.");
  augment.write(c, "augment.");
  c.set("augment.enabled", b(use_augment));
  c.set("seed", std::to_string(seed));
  c.set("data_seed", std::to_string(data_seed));
  c.set("train.num_train", std::to_string(num_train));
  c.set("train.num_val", std::to_string(num_val));
  c.set("train.dataset_dir", dataset_dir);
  c.set("train.base_lr", format_double(base_lr));
  c.set("train.poly_power", format_double(poly_power));
  c.set("train.total_iters", std::to_string(total_iters));
  c.set("train.batch_size", std::to_string(batch_size));
  c.set("train.weight_decay", format_double(weight_decay));
  c.set("train.beta1", format_double(beta1));
  c.set("train.beta2", format_double(beta2));
  c.set("train.adam_eps", format_double(adam_eps));
  c.set("train.eval_interval", std::to_string(eval_interval));
  c.set("train.precision", to_string(precision));
  c.set("train.use_mws", b(use_mws));
  c.set("train.use_masking", b(use_masking));
  c.set("train.use_sdc", b(use_sdc));
  c.set("train.use_sdn", b(use_sdn));
  c.set("train.teacher_stop_gradient", b(teacher_stop_gradient));
  c.set("mask.mode", to_string(masking_mode));
  c.set("mask.strategy", to_string(mask_strategy));
  c.set("mask.ratio", format_double(mask_ratio));
  c.set("mask.patch_px", std::to_string(mask_patch_px));
  c.set("mask.irm_ratio_low", format_double(irm_ratio_low));
  c.set("mask.irm_ratio_high", format_double(irm_ratio_high));
  return c;
}

TrainConfig TrainConfig::from_config(const Config& c) {
  TrainConfig t;
  t.model = read_model_config(c);
  t.weights.cls_matched = c.get_double("loss.cls_matched", t.weights.cls_matched);
  t.weights.cls_noobj = c.get_double("loss.cls_noobj", t.weights.cls_noobj);
  t.weights.ce = c.get_double("loss.ce", t.weights.ce);
  t.weights.dice = c.get_double("loss.dice", t.weights.dice);

  t.mask_patch_px = c.get_int("mask.patch_px", t.mask_patch_px);
  // Scene geometry follows the model unless given explicitly.
  Config geometry = c;
  auto fill = [&](const std::string& key, int v) {
    if (!c.has(key)) geometry.set(key, std::to_string(v));
  };
  fill("data.height", t.model.input_height);
  fill("data.width", t.model.input_width);
  fill("data.num_classes", t.model.num_classes);
  fill("data.backbone_patch_px", t.model.backbone_patch_px);
  fill("data.mask_patch_px", t.mask_patch_px);
  t.data = SceneSpec::read(geometry, "data.");
  t.augment = AugmentConfig::read(geometry, "augment.");
  t.augment.backbone_patch_px = t.model.backbone_patch_px;
  t.augment.mask_patch_px = t.mask_patch_px;
  // Mark the data/augment keys of the caller's config as consumed.
  for (const auto& [k, v] : c.entries())
    if (k.rfind("data.", 0) == 0 || (k.rfind("augment.", 0) == 0 && k != "augment.enabled")) c.get_string(k, v);

  t.use_augment = c.get_bool("augment.enabled", t.use_augment);
  t.seed = c.get_u64("seed", t.seed);
  t.data_seed = c.get_u64("data_seed", t.data_seed);
  t.num_train = c.get_int("train.num_train", t.num_train);
  t.num_val = c.get_int("train.num_val", t.num_val);
  t.dataset_dir = c.get_string("train.dataset_dir", t.dataset_dir);
  t.base_lr = c.get_double("train.base_lr", t.base_lr);
  t.poly_power = c.get_double("train.poly_power", t.poly_power);
  t.total_iters = c.get_int("train.total_iters", t.total_iters);
  t.batch_size = c.get_int("train.batch_size", t.batch_size);
  t.weight_decay = c.get_double("train.weight_decay", t.weight_decay);
  t.beta1 = c.get_double("train.beta1", t.beta1);
  t.beta2 = c.get_double("train.beta2", t.beta2);
  t.adam_eps = c.get_double("train.adam_eps", t.adam_eps);
  t.eval_interval = c.get_int("train.eval_interval", t.eval_interval);
  t.precision = parse_precision(c.get_string("train.precision", to_string(t.precision)));
  t.use_mws = c.get_bool("train.use_mws", t.use_mws);
  t.use_masking = c.get_bool("train.use_masking", t.use_masking);
  t.use_sdc = c.get_bool("train.use_sdc", t.use_sdc);
  t.use_sdn = c.get_bool("train.use_sdn", t.use_sdn);
  t.teacher_stop_gradient = c.get_bool("train.teacher_stop_gradient", t.teacher_stop_gradient);
  t.masking_mode = parse_masking_mode(c.get_string("mask.mode", to_string(t.masking_mode)));
  try {
    t.mask_strategy = parse_mask_strategy(c.get_string("mask.strategy", to_string(t.mask_strategy)));
  } catch (const ParameterError& e) {
    throw ConfigError(e.what());
  }
  t.mask_ratio = c.get_double("mask.ratio", t.mask_ratio);
  t.irm_ratio_low = c.get_double("mask.irm_ratio_low", t.irm_ratio_low);
  t.irm_ratio_high = c.get_double("mask.irm_ratio_high", t.irm_ratio_high);

  if (auto extra = c.unused(); !extra.empty()) {
    std::string msg = "unknown config key(s):";
    for (const auto& k : extra) msg += " " + k;
    throw ConfigError(msg);
  }
  return t;
}

std::uint64_t TrainConfig::hash() const {
  const std::string text = to_config().to_text();
  return fnv1a(text.data(), text.size());
}

double poly_lr(double base_lr, int iter, int total_iters, double power) {
  if (total_iters < 1) throw ParameterError("poly_lr: total_iters must be >= 1");
  if (iter < 0 || iter > total_iters)
    throw ParameterError("poly_lr: iteration " + std::to_string(iter) + " outside [0, " +
                         std::to_string(total_iters) + "]");
  return base_lr * std::pow(1.0 - static_cast<double>(iter) / total_iters, power);
}

template <typename Scalar>
AdamW<Scalar>::AdamW(const ParameterSet<Scalar>& params, double beta1, double beta2, double eps, double weight_decay)
    : beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {
  for (const auto& p : params) {
    m_.push_back(Matrix<Scalar>::Zero(p.value.rows(), p.value.cols()));
    v_.push_back(Matrix<Scalar>::Zero(p.value.rows(), p.value.cols()));
  }
}

template <typename Scalar>
void AdamW<Scalar>::step(ParameterSet<Scalar>& params, double lr) {
  if (params.size() != m_.size()) throw ContractError("AdamW: parameter set changed size");
  ++t_;
  const Scalar b1 = Scalar(beta1_), b2 = Scalar(beta2_);
  const Scalar c1 = Scalar(1.0 - std::pow(beta1_, static_cast<double>(t_)));
  const Scalar c2 = Scalar(1.0 - std::pow(beta2_, static_cast<double>(t_)));
  const Scalar eta = Scalar(lr), eps = Scalar(eps_), wd = Scalar(wd_);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (p.grad.size() == 0) p.zero_grad();
    m_[i] = b1 * m_[i] + (Scalar(1) - b1) * p.grad;
    v_[i] = b2 * v_[i] + (Scalar(1) - b2) * p.grad.cwiseAbs2();
    Matrix<Scalar> update =
        (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps);
    if (p.decay) update += wd * p.value;
    p.value -= eta * update;
  }
}

MaskPair sample_training_masks(const TrainConfig& cfg, int height, int width, std::mt19937_64& rng) {
  if (cfg.mask_strategy == MaskStrategy::square) {
    const int cell = cfg.model.backbone_patch_px;
    if (cfg.masking_mode == MaskingMode::irm)
      throw ConfigError("independent masking only supports the patch strategy");
    return sample_complementary_masks(height / cell, width / cell, MaskStrategy::square, cfg.mask_ratio, rng, cell);
  }
  const int cell = cfg.mask_patch_px;
  if (cfg.masking_mode == MaskingMode::irm)
    return sample_individual_masks(height / cell, width / cell, cfg.irm_ratio_low, cfg.irm_ratio_high, rng, cell);
  return sample_complementary_masks(height / cell, width / cell, MaskStrategy::patch, cfg.mask_ratio, rng, cell);
}

MaskPair sample_training_masks(const TrainConfig& cfg, std::mt19937_64& rng) {
  return sample_training_masks(cfg, cfg.model.input_height, cfg.model.input_width, rng);
}

template <typename Scalar>
ForwardVariants<Scalar> forward_variants(const Model<Scalar>& model, Tape<Scalar>& t, const ScenePair& pair,
                                         const TrainConfig& cfg, std::mt19937_64& rng) {
  ForwardVariants<Scalar> v;
  const auto xr = model.embed_image(t, pair.rgb, Modality::rgb);
  const auto xt = model.embed_image(t, pair.thr, Modality::thermal);
  const auto fr = model.encode(t, xr);
  const auto ft = model.encode(t, xt);
  v.clean_pair = model.decode(t, &fr, &ft);
  if (cfg.use_mws) {
    v.clean_rgb = model.decode(t, &fr, nullptr);
    v.clean_thr = model.decode(t, nullptr, &ft);
  }
  if (cfg.use_masking) {
    const MaskPair masks = sample_training_masks(cfg, pair.height(), pair.width(), rng);
    const auto mr = model.mask(t, xr, token_keep_vector(masks.keep_rgb, xr.grid_h, xr.grid_w));
    const auto mt = model.mask(t, xt, token_keep_vector(masks.keep_thr, xt.grid_h, xt.grid_w));
    const auto fmr = model.encode(t, mr);
    const auto fmt = model.encode(t, mt);
    v.masked_pair = model.decode(t, &fmr, &fmt);
    if (cfg.use_sdn) {
      v.masked_rgb = model.decode(t, &fmr, nullptr);
      v.masked_thr = model.decode(t, nullptr, &fmt);
    }
  }
  return v;
}

std::vector<std::size_t> batch_indices(const TrainConfig& cfg, std::size_t n, int iter) {
  if (n == 0) throw DataError("training dataset is empty");
  std::map<std::uint64_t, std::vector<std::size_t>> perms;
  std::vector<std::size_t> out;
  out.reserve(cfg.batch_size);
  for (int b = 0; b < cfg.batch_size; ++b) {
    const std::uint64_t g = static_cast<std::uint64_t>(iter) * cfg.batch_size + b;
    const std::uint64_t epoch = g / n;
    auto it = perms.find(epoch);
    if (it == perms.end()) {
      std::vector<std::size_t> p(n);
      std::iota(p.begin(), p.end(), std::size_t{0});
      auto rng = derive_rng(cfg.seed, {kOrderStream, epoch});
      std::shuffle(p.begin(), p.end(), rng);
      it = perms.emplace(epoch, std::move(p)).first;
    }
    out.push_back(it->second[g % n]);
  }
  return out;
}

template <typename Scalar>
StepStats train_step(Model<Scalar>& model, AdamW<Scalar>& opt, const Dataset& data, const TrainConfig& cfg, int iter) {
  const auto idx = batch_indices(cfg, data.size(), iter);
  StepStats s;
  s.iteration = iter;
  s.lr = poly_lr(cfg.base_lr, iter, cfg.total_iters, cfg.poly_power);
  model.parameters().zero_grad();
  const double inv = 1.0 / static_cast<double>(idx.size());
  const LossFlags flags = cfg.loss_flags();
  for (std::size_t b = 0; b < idx.size(); ++b) {
    auto rng = derive_rng(cfg.seed, {kStepStream, static_cast<std::uint64_t>(iter), b});
    ScenePair pair = data.get(idx[b]);
    if (cfg.use_augment) pair = augment(pair, rng, cfg.augment_config());
    Tape<Scalar> t;
    const auto v = forward_variants(model, t, pair, cfg, rng);
    // Matching rejects non-finite costs, so bad outputs are caught before the loss.
    const std::string bad = nonfinite_variants(v);
    if (!bad.empty()) {
      std::ostringstream os;
      os << "non-finite loss at iteration " << iter << " (sample '" << pair.id
         << "'): supervised=nan sdc=nan sdn=nan total=nan; non-finite outputs in" << bad;
      throw TrainingError(os.str());
    }
    const auto loss = total_loss(v, pair.gt, cfg.weights, flags);
    if (!finite(loss.supervised) || !finite(loss.sdc) || !finite(loss.sdn) || !finite(loss.total)) {
      std::ostringstream os;
      os << "non-finite loss at iteration " << iter << " (sample '" << pair.id << "'): supervised="
         << loss.supervised_value() << " sdc=" << loss.sdc_value() << " sdn=" << loss.sdn_value()
         << " total=" << loss.total_value();
      throw TrainingError(os.str());
    }
    t.backward(loss.total, Scalar(inv));
    s.supervised += inv * loss.supervised_value();
    s.sdc += inv * loss.sdc_value();
    s.sdn += inv * loss.sdn_value();
    s.total += inv * loss.total_value();
  }
  opt.step(model.parameters(), s.lr);
  return s;
}

// ---- checkpoints ----

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, const Model<Scalar>& model, const AdamW<Scalar>* opt,
                     const CheckpointMeta& meta) {
  using nlohmann::json;
  std::vector<std::pair<std::string, const Matrix<Scalar>*>> arrays;
  const auto& ps = model.parameters();
  for (std::size_t i = 0; i < ps.size(); ++i) arrays.emplace_back("param/" + ps[i].name, &ps[i].value);
  if (opt) {
    for (std::size_t i = 0; i < ps.size(); ++i) {
      arrays.emplace_back("adam.m/" + ps[i].name, &opt->first_moment()[i]);
      arrays.emplace_back("adam.v/" + ps[i].name, &opt->second_moment()[i]);
    }
  }
  json manifest;
  manifest["iteration"] = meta.iteration;
  manifest["config_hash"] = hex64(meta.config_hash);
  manifest["seed"] = meta.seed;
  manifest["rng_digest"] = hex64(meta.rng_digest);
  manifest["best_miou"] = meta.best_miou;
  manifest["precision"] = to_string(meta.precision);
  manifest["config"] = meta.config_text;
  manifest["adam_steps"] = opt ? opt->steps() : 0;
  json list = json::array();
  for (const auto& [name, m] : arrays) list.push_back({{"name", name}, {"rows", m->rows()}, {"cols", m->cols()}});
  manifest["arrays"] = list;
  const std::string header = manifest.dump();

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + tmp);
    out.write(kMagic, sizeof kMagic);
    const std::uint64_t len = header.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    std::vector<double> buf;
    for (const auto& [name, m] : arrays) {
      buf.resize(static_cast<std::size_t>(m->size()));
      Eigen::Map<Eigen::MatrixXd>(buf.data(), m->rows(), m->cols()) = m->template cast<double>();
      out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(double)));
    }
    if (!out) throw IoError("failed writing checkpoint " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

namespace {

struct RawCheckpoint {
  nlohmann::json manifest;
  std::map<std::string, Eigen::MatrixXd> arrays;
};

RawCheckpoint read_raw(const std::filesystem::path& path, bool with_arrays) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  char magic[sizeof kMagic];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw DataError("not a checkpoint file: " + path.string());
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || len > (1u << 30)) throw DataError("corrupt checkpoint header: " + path.string());
  std::string header(len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(len));
  if (!in) throw DataError("truncated checkpoint header: " + path.string());
  RawCheckpoint raw;
  try {
    raw.manifest = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("corrupt checkpoint manifest in " + path.string() + ": " + e.what());
  }
  if (!with_arrays) return raw;
  for (const auto& a : raw.manifest.at("arrays")) {
    const auto rows = a.at("rows").get<Eigen::Index>();
    const auto cols = a.at("cols").get<Eigen::Index>();
    Eigen::MatrixXd m(rows, cols);
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (!in) throw DataError("truncated checkpoint data: " + path.string());
    raw.arrays.emplace(a.at("name").get<std::string>(), std::move(m));
  }
  return raw;
}

CheckpointMeta meta_from(const nlohmann::json& j) {
  CheckpointMeta m;
  m.iteration = j.at("iteration").get<int>();
  m.config_hash = parse_hex64(j.at("config_hash").get<std::string>());
  m.seed = j.at("seed").get<std::uint64_t>();
  m.rng_digest = parse_hex64(j.at("rng_digest").get<std::string>());
  m.best_miou = j.at("best_miou").get<double>();
  m.precision = parse_precision(j.at("precision").get<std::string>());
  m.config_text = j.at("config").get<std::string>();
  return m;
}

template <typename Scalar>
void restore(const std::map<std::string, Eigen::MatrixXd>& arrays, const std::string& key, Matrix<Scalar>& dst) {
  auto it = arrays.find(key);
  if (it == arrays.end()) throw DataError("checkpoint lacks array '" + key + "'");
  if (it->second.rows() != dst.rows() || it->second.cols() != dst.cols())
    throw DimensionError("checkpoint array '" + key + "' is " + std::to_string(it->second.rows()) + "x" +
                         std::to_string(it->second.cols()) + ", model expects " + std::to_string(dst.rows()) + "x" +
                         std::to_string(dst.cols()));
  dst = it->second.template cast<Scalar>();
}

}  // namespace

CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path) {
  return meta_from(read_raw(path, false).manifest);
}

template <typename Scalar>
CheckpointMeta load_checkpoint(const std::filesystem::path& path, Model<Scalar>& model, AdamW<Scalar>* opt,
                               std::optional<std::uint64_t> expected_hash, bool force) {
  const RawCheckpoint raw = read_raw(path, true);
  const CheckpointMeta meta = meta_from(raw.manifest);
  if (expected_hash && *expected_hash != meta.config_hash && !force)
    throw ConfigError("checkpoint " + path.string() + " was written with config hash " + hex64(meta.config_hash) +
                      ", current config hashes to " + hex64(*expected_hash) + " (use force to load anyway)");
  auto& ps = model.parameters();
  for (std::size_t i = 0; i < ps.size(); ++i) restore(raw.arrays, "param/" + ps[i].name, ps[i].value);
  if (opt) {
    for (std::size_t i = 0; i < ps.size(); ++i) {
      restore(raw.arrays, "adam.m/" + ps[i].name, opt->first_moment()[i]);
      restore(raw.arrays, "adam.v/" + ps[i].name, opt->second_moment()[i]);
    }
    opt->set_steps(raw.manifest.at("adam_steps").get<long>());
  }
  return meta;
}

// ---- loop ----

namespace {

void rewrite_log_until(const std::filesystem::path& log, int iteration) {
  std::ifstream in(log);
  if (!in) return;
  std::vector<std::string> keep;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      if (nlohmann::json::parse(line).at("iteration").get<int>() <= iteration) keep.push_back(line);
    } catch (const nlohmann::json::exception&) {
      // partial trailing line from an interrupted run
    }
  }
  in.close();
  std::ofstream out(log, std::ios::trunc);
  for (const auto& l : keep) out << l << '\n';
}

}  // namespace

template <typename Scalar>
TrainResult train(Model<Scalar>& model, const TrainConfig& cfg, const Dataset& train_data, const Dataset* val,
                  const std::filesystem::path& out_dir, const TrainOptions& opts) {
  cfg.validate();
  std::filesystem::create_directories(out_dir);
  {
    std::ofstream c(out_dir / "config.txt", std::ios::trunc);
    c << cfg.to_config().to_text();
  }
  AdamW<Scalar> opt(model.parameters(), cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
  TrainResult r;
  r.latest = out_dir / "latest.ckpt";
  r.best = out_dir / "best.ckpt";
  const auto log_path = out_dir / "log.jsonl";

  int start = 0;
  if (opts.resume) {
    const CheckpointMeta meta = load_checkpoint(*opts.resume, model, &opt, cfg.hash(), opts.force);
    start = meta.iteration;
    r.best_miou = meta.best_miou;
    rewrite_log_until(log_path, start);
  } else {
    std::ofstream(log_path, std::ios::trunc);
  }
  std::ofstream log(log_path, std::ios::app);
  if (!log) throw IoError("cannot write " + log_path.string());

  const int end = std::min(cfg.total_iters, opts.stop_after.value_or(cfg.total_iters));
  auto meta_at = [&](int done) {
    CheckpointMeta m;
    m.iteration = done;
    m.config_hash = cfg.hash();
    m.seed = cfg.seed;
    m.rng_digest = derive_seed(cfg.seed, {kStepStream, static_cast<std::uint64_t>(done)});
    m.best_miou = r.best_miou;
    m.precision = cfg.precision;
    m.config_text = cfg.to_config().to_text();
    return m;
  };

  for (int it = start; it < end; ++it) {
    const StepStats s = train_step(model, opt, train_data, cfg, it);
    r.steps.push_back(s);
    const int done = it + 1;
    nlohmann::json rec{{"iteration", done}, {"l_mws", s.supervised}, {"l_sdc", s.sdc},
                       {"l_sdn", s.sdn},    {"total", s.total},      {"lr", s.lr}};
    log << rec.dump() << '\n';
    if (!opts.quiet && (done % 50 == 0 || done == end))
      std::cerr << "iter " << done << "/" << cfg.total_iters << " total " << s.total << " lr " << s.lr << '\n';

    const bool periodic = cfg.eval_interval > 0 && done % cfg.eval_interval == 0;
    const bool last = done == cfg.total_iters;
    if (val && val->size() > 0 && (periodic || last)) {
      const double m = evaluate(model, *val, InputMode::rgbt).metrics.value_or_zero();
      log << nlohmann::json{{"iteration", done}, {"val_miou", m}}.dump() << '\n';
      if (!opts.quiet) std::cerr << "iter " << done << " val mIoU " << m << '\n';
      if (last) r.final_miou = m;
      if (m > r.best_miou) {
        r.best_miou = m;
        save_checkpoint(r.best, model, &opt, meta_at(done));
      }
    }
    log.flush();
    if (periodic || done == end) save_checkpoint(r.latest, model, &opt, meta_at(done));
  }
  r.iterations_done = std::max(start, end);
  return r;
}

DataSplits make_datasets(const TrainConfig& cfg) {
  DataSplits s;
  if (!cfg.dataset_dir.empty()) {
    s.train = std::make_unique<DirectoryDataset>(load_dataset(cfg.dataset_dir, cfg.model.num_classes, "train"));
    s.val = std::make_unique<DirectoryDataset>(load_dataset(cfg.dataset_dir, cfg.model.num_classes, "val"));
  } else {
    s.train = std::make_unique<InMemoryDataset>(
        generate_dataset(cfg.scene_spec(), cfg.num_train, derive_seed(cfg.data_seed, {1}), "train_"));
    s.val = std::make_unique<InMemoryDataset>(
        generate_dataset(cfg.scene_spec(), cfg.num_val, derive_seed(cfg.data_seed, {2}), "val_"));
  }
  return s;
}

#define CRM_TRAINER_INSTANTIATE(S)                                                                                  \
  template class AdamW<S>;                                                                                          \
  template ForwardVariants<S> forward_variants<S>(const Model<S>&, Tape<S>&, const ScenePair&, const TrainConfig&, \
                                                  std::mt19937_64&);                                                \
  template StepStats train_step<S>(Model<S>&, AdamW<S>&, const Dataset&, const TrainConfig&, int);                 \
  template void save_checkpoint<S>(const std::filesystem::path&, const Model<S>&, const AdamW<S>*,                 \
                                   const CheckpointMeta&);                                                          \
  template CheckpointMeta load_checkpoint<S>(const std::filesystem::path&, Model<S>&, AdamW<S>*,                   \
                                             std::optional<std::uint64_t>, bool);                                   \
  template TrainResult train<S>(Model<S>&, const TrainConfig&, const Dataset&, const Dataset*,                      \
                                const std::filesystem::path&, const TrainOptions&);

CRM_TRAINER_INSTANTIATE(float)
CRM_TRAINER_INSTANTIATE(double)

}  // namespace crm
