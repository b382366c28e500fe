#pragma once

// Ablation suites, per-run result records, and report artefacts
// (NDJSON records, aligned tables, overlays, mask illustrations).

#include "crm/evaluate.hpp"
#include "crm/trainer.hpp"

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace crm {

struct Condition {
  std::string name;
  TrainConfig config;
};

// loss_terms, mask_strategy or crm_vs_irm; anything else is a ConfigError.
std::vector<Condition> ablation_conditions(const std::string& suite, const TrainConfig& base);

struct RunRecord {
  std::string suite;
  std::string condition;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;
  int iterations = 0;
  RobustnessReport robustness;
  double seconds = 0.0;

  std::string to_json() const;
  static RunRecord from_json(const std::string& line);
};

// Trains cfg from scratch in dir and evaluates on its validation split.
// A result.json left by an earlier run with the same config hash is reused.
RunRecord train_and_evaluate(const std::string& suite, const std::string& condition, const TrainConfig& cfg,
                             const std::filesystem::path& dir, bool quiet = true);

// Every condition for every seed, in condition-major order. Results land in
// out_dir/<condition>/seed<k>/ as they complete, so an interrupted suite resumes.
std::vector<RunRecord> run_conditions(const std::string& suite, const std::vector<Condition>& conditions,
                                      const std::vector<std::uint64_t>& seeds, const std::filesystem::path& out_dir,
                                      bool quiet = true);

struct SummaryRow {
  std::string condition;
  int runs = 0;
  RobustnessReport median;  // fieldwise median over seeds
};

// One row per condition, in order of first appearance.
std::vector<SummaryRow> summarize(const std::vector<RunRecord>& records);

double median(std::vector<double> v);

// Left-aligned first column, right-aligned numeric columns.
std::string format_table(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows);
std::string summary_table(const std::vector<SummaryRow>& rows);

struct OverlayItem {
  ScenePair pair;
  LabelMap prediction;
};

// Writes results.jsonl and table.txt into out_dir.
void emit_tables(const std::filesystem::path& out_dir, const std::vector<RunRecord>& records);

// <id>_overlay.png: rgb blended with prediction colours | rgb blended with ground-truth colours.
void write_overlay(const std::filesystem::path& path, const OverlayItem& item);

// Two panels: the masked rgb and masked thermal image of one complementary draw.
void write_mask_illustration(const std::filesystem::path& path, const ScenePair& pair, const MaskPair& masks);

// Mask illustrations for square and patch 8/16/32/64 (where the size divides the image), named masks_<condition>.png.
void write_mask_strategy_grids(const std::filesystem::path& out_dir, const ScenePair& pair, double ratio,
                               int backbone_patch_px, std::uint64_t seed);

std::array<std::uint8_t, 3> label_color(int label);

}  // namespace crm
