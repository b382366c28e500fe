// crmseg: data generation, training, evaluation and reporting.

#include "crm/errors.hpp"
#include "crm/experiments.hpp"
#include "crm/png_io.hpp"
#include "crm/rng.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

using namespace crm;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* app, Common& c, bool out_required = true) {
  app->add_option("--config", c.config, "key = value configuration file");
  app->add_option("--seed", c.seed, "random seed (overrides the config)");
  auto* o = app->add_option("--out", c.out, "output directory");
  if (out_required) o->required();
  app->add_option("--override", c.overrides, "extra key=value setting; repeatable");
}

Config load_config(const Common& c, const std::optional<std::string>& fallback_text = std::nullopt) {
  Config cfg;
  if (!c.config.empty()) {
    cfg = Config::load(c.config);
  } else if (fallback_text) {
    std::istringstream in(*fallback_text);
    cfg = Config::parse(in, "checkpoint");
  }
  for (const auto& kv : c.overrides) cfg.apply_override(kv);
  return cfg;
}

TrainConfig train_config(const Common& c, const std::optional<std::string>& fallback_text = std::nullopt) {
  TrainConfig t = TrainConfig::from_config(load_config(c, fallback_text));
  if (c.seed) t.seed = *c.seed;
  t.validate();
  return t;
}

// Model with parameters from a checkpoint; config falls back to the one stored in it.
template <typename Fn>
void with_checkpoint_model(const Common& c, const std::string& ckpt, Fn&& fn) {
  const CheckpointMeta meta = read_checkpoint_meta(ckpt);
  const TrainConfig cfg = train_config(c, meta.config_text);
  if (cfg.precision == Precision::float32) {
    Model<float> m(cfg.model, cfg.seed);
    load_checkpoint<float>(ckpt, m, nullptr, std::nullopt, true);
    fn(m, cfg);
  } else {
    Model<double> m(cfg.model, cfg.seed);
    load_checkpoint<double>(ckpt, m, nullptr, std::nullopt, true);
    fn(m, cfg);
  }
}

nlohmann::ordered_json eval_json(const EvalResult& r) {
  nlohmann::ordered_json j;
  j["mode"] = to_string(r.mode);
  j["images"] = r.images;
  j["miou"] = r.metrics.miou ? nlohmann::ordered_json(*r.metrics.miou) : nlohmann::ordered_json(nullptr);
  auto per = nlohmann::ordered_json::array();
  for (const auto& v : r.metrics.per_class) per.push_back(v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr));
  j["per_class_iou"] = per;
  return j;
}

std::vector<RunRecord> collect_results(const fs::path& root) {
  std::vector<fs::path> files;
  if (fs::is_regular_file(root)) {
    files.push_back(root);
  } else if (fs::is_directory(root)) {
    for (const auto& e : fs::recursive_directory_iterator(root))
      if (e.is_regular_file() && (e.path().filename() == "result.json" || e.path().extension() == ".jsonl"))
        files.push_back(e.path());
  } else {
    throw IoError("results path '" + root.string() + "' does not exist");
  }
  // Aggregated .jsonl files keep the suite's condition order, so read them first.
  std::sort(files.begin(), files.end(), [](const fs::path& a, const fs::path& b) {
    const bool ja = a.extension() == ".jsonl", jb = b.extension() == ".jsonl";
    return ja != jb ? ja : a < b;
  });
  std::vector<RunRecord> out;
  std::set<std::tuple<std::string, std::string, std::uint64_t, std::uint64_t>> seen;
  for (const auto& f : files) {
    std::ifstream in(f);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line, nullptr, false);
      if (j.is_discarded() || !j.contains("condition")) continue;
      RunRecord r = RunRecord::from_json(line);
      if (seen.emplace(r.suite, r.condition, r.seed, r.config_hash).second) out.push_back(std::move(r));
    }
  }
  return out;
}

int run(int argc, char** argv) {
  CLI::App app{"RGB-thermal segmentation with complementary random masking"};
  app.require_subcommand(1);

  Common gen_c;
  int gen_train = -1, gen_val = -1;
  auto* gen = app.add_subcommand("generate-data", "write a synthetic paired dataset");
  add_common(gen, gen_c);
  gen->add_option("--train", gen_train, "training scenes (default: train.num_train)");
  gen->add_option("--val", gen_val, "validation scenes (default: train.num_val)");

  Common tr_c;
  std::string resume;
  bool force = false, verbose = false;
  int stop_after = 0;
  auto* tr = app.add_subcommand("train", "train a model");
  add_common(tr, tr_c);
  tr->add_option("--resume", resume, "checkpoint to resume from");
  tr->add_flag("--force", force, "resume even if the config hash differs");
  tr->add_flag("--verbose", verbose, "progress on stderr");
  tr->add_option("--stop-after", stop_after, "stop (with a checkpoint) after this iteration");

  Common ev_c;
  std::string ev_mode = "rgbt", ev_ckpt;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on the validation split");
  add_common(ev, ev_c);
  ev->add_option("--mode", ev_mode, "rgbt, rgb_only, thr_only, rgb_drop_zero or thr_drop_zero");
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint file")->required();

  Common rb_c;
  std::string rb_ckpt;
  auto* rb = app.add_subcommand("robustness", "mIoU with each modality dropped");
  add_common(rb, rb_c);
  rb->add_option("--checkpoint", rb_ckpt, "checkpoint file")->required();

  Common ab_c;
  std::string suite;
  int ab_seeds = 1;
  bool ab_verbose = false;
  auto* ab = app.add_subcommand("ablate", "train and evaluate an ablation suite");
  add_common(ab, ab_c);
  ab->add_option("--suite", suite, "loss_terms, mask_strategy or crm_vs_irm")->required();
  ab->add_option("--seeds", ab_seeds, "number of seeds per condition (seed, seed+1, ...)");
  ab->add_flag("--verbose", ab_verbose, "progress on stderr");

  Common vm_c;
  std::string vm_strategy = "patch";
  int vm_px = 32;
  std::optional<double> vm_ratio;
  auto* vm = app.add_subcommand("visualize-masks", "draw one complementary mask pair on a scene");
  add_common(vm, vm_c);
  vm->add_option("--strategy", vm_strategy, "patch or square");
  vm->add_option("--patch-px", vm_px, "mask cell size in pixels (patch strategy)");
  vm->add_option("--ratio", vm_ratio, "rgb masking ratio (default: mask.ratio)");

  Common rp_c;
  std::string rp_ckpt, rp_results;
  int rp_overlays = 8;
  auto* rp = app.add_subcommand("report", "tables, overlays and mask illustrations");
  add_common(rp, rp_c);
  rp->add_option("--checkpoint", rp_ckpt, "checkpoint for overlays and evaluation records");
  rp->add_option("--results", rp_results, "result records (file or directory searched recursively)");
  rp->add_option("--overlays", rp_overlays, "number of validation overlays");

  CLI11_PARSE(app, argc, argv);

  if (*gen) {
    TrainConfig cfg = train_config(gen_c);
    if (gen_c.seed) cfg.data_seed = *gen_c.seed;
    if (gen_train >= 0) cfg.num_train = gen_train;
    if (gen_val >= 0) cfg.num_val = gen_val;
    cfg.dataset_dir.clear();
    auto splits = make_datasets(cfg);
    std::vector<ScenePair> pairs;
    std::map<std::string, std::string> split_of;
    for (auto* d : {splits.train.get(), splits.val.get()}) {
      const std::string name = d == splits.train.get() ? "train" : "val";
      for (std::size_t i = 0; i < d->size(); ++i) {
        pairs.push_back(d->get(i));
        split_of[pairs.back().id] = name;
      }
    }
    write_dataset(gen_c.out, pairs, split_of);
    std::cout << "wrote " << pairs.size() << " scenes to " << gen_c.out << '\n';
  } else if (*tr) {
    const TrainConfig cfg = train_config(tr_c);
    auto data = make_datasets(cfg);
    TrainOptions opts;
    if (!resume.empty()) opts.resume = resume;
    opts.force = force;
    if (stop_after > 0) opts.stop_after = stop_after;
    opts.quiet = !verbose;
    auto go = [&](auto& model) {
      const TrainResult r = train(model, cfg, *data.train, data.val.get(), tr_c.out, opts);
      std::cout << "iterations " << r.iterations_done << ", best val mIoU " << r.best_miou << '\n';
    };
    if (cfg.precision == Precision::float32) {
      Model<float> m(cfg.model, cfg.seed);
      go(m);
    } else {
      Model<double> m(cfg.model, cfg.seed);
      go(m);
    }
  } else if (*ev) {
    const InputMode mode = parse_input_mode(ev_mode);
    with_checkpoint_model(ev_c, ev_ckpt, [&](const auto& model, const TrainConfig& cfg) {
      auto data = make_datasets(cfg);
      const EvalResult r = evaluate(model, *data.val, mode);
      fs::create_directories(ev_c.out);
      std::ofstream(fs::path(ev_c.out) / ("eval_" + ev_mode + ".jsonl"), std::ios::trunc) << eval_json(r).dump() << '\n';
      std::cout << eval_json(r).dump() << '\n';
    });
  } else if (*rb) {
    with_checkpoint_model(rb_c, rb_ckpt, [&](const auto& model, const TrainConfig& cfg) {
      auto data = make_datasets(cfg);
      RunRecord rec;
      rec.suite = "robustness";
      rec.condition = fs::path(rb_ckpt).stem().string();
      rec.seed = cfg.seed;
      rec.config_hash = cfg.hash();
      rec.iterations = read_checkpoint_meta(rb_ckpt).iteration;
      rec.robustness = robustness_report(model, *data.val);
      emit_tables(rb_c.out, {rec});
      std::cout << summary_table(summarize({rec}));
    });
  } else if (*ab) {
    const TrainConfig base = train_config(ab_c);
    std::vector<std::uint64_t> seeds;
    for (int i = 0; i < ab_seeds; ++i) seeds.push_back(base.seed + static_cast<std::uint64_t>(i));
    const auto records = run_conditions(suite, ablation_conditions(suite, base), seeds, ab_c.out, !ab_verbose);
    emit_tables(ab_c.out, records);
    std::cout << summary_table(summarize(records));
  } else if (*vm) {
    TrainConfig cfg = train_config(vm_c);
    const auto pair = generate_dataset(cfg.scene_spec(), 1, cfg.data_seed, "example_")[0];
    const double ratio = vm_ratio.value_or(cfg.mask_ratio);
    const MaskStrategy strategy = parse_mask_strategy(vm_strategy);
    const int cell = strategy == MaskStrategy::square ? cfg.model.backbone_patch_px : vm_px;
    if (cell < 1 || pair.height() % cell || pair.width() % cell)
      throw ParameterError("--patch-px " + std::to_string(cell) + " does not divide the image size");
    auto rng = derive_rng(cfg.seed, {0x564d});
    const auto masks = sample_complementary_masks(pair.height() / cell, pair.width() / cell, strategy, ratio, rng, cell);
    fs::create_directories(vm_c.out);
    const std::string stem = strategy == MaskStrategy::square ? "square" : "patch" + std::to_string(cell);
    write_mask_illustration(fs::path(vm_c.out) / ("masks_" + stem + ".png"), pair, masks);
    std::ofstream grid(fs::path(vm_c.out) / ("masks_" + stem + ".txt"), std::ios::trunc);
    write_mask_grid(grid, masks.keep_rgb);
    std::cout << "wrote " << (fs::path(vm_c.out) / ("masks_" + stem + ".png")).string() << '\n';
  } else if (*rp) {
    fs::create_directories(rp_c.out);
    if (!rp_results.empty()) {
      const auto records = collect_results(rp_results);
      emit_tables(rp_c.out, records);
      std::cout << summary_table(summarize(records));
    }
    if (!rp_ckpt.empty()) {
      with_checkpoint_model(rp_c, rp_ckpt, [&](const auto& model, const TrainConfig& cfg) {
        auto data = make_datasets(cfg);
        const fs::path dir = fs::path(rp_c.out) / "overlays";
        fs::create_directories(dir);
        std::ofstream evals(fs::path(rp_c.out) / "eval.jsonl", std::ios::trunc);
        int written = 0;
        for (InputMode m : {InputMode::rgbt, InputMode::rgb_only, InputMode::thr_only, InputMode::rgb_drop_zero,
                            InputMode::thr_drop_zero}) {
          PredictionSink sink;
          if (m == InputMode::rgbt) {
            sink = [&](const ScenePair& pair, const LabelMap& pred) {
              if (written++ < rp_overlays) write_overlay(dir / (pair.id + "_overlay.png"), {pair, pred});
            };
          }
          evals << eval_json(evaluate(model, *data.val, m, sink)).dump() << '\n';
        }
        if (data.val->size() > 0)
          write_mask_strategy_grids(fs::path(rp_c.out) / "masks", data.val->get(0), cfg.mask_ratio,
                                    cfg.model.backbone_patch_px, cfg.seed);
      });
    }
    if (rp_results.empty() && rp_ckpt.empty()) {
      emit_tables(rp_c.out, {});
      std::cout << summary_table({});
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
