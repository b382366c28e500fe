#pragma once

#include "crm/data.hpp"
#include "crm/metrics.hpp"
#include "crm/model.hpp"

#include <functional>
#include <string>

namespace crm {

enum class InputMode { rgbt, rgb_only, thr_only, rgb_drop_zero, thr_drop_zero };

InputMode parse_input_mode(const std::string& name);
const char* to_string(InputMode m);

struct EvalResult {
  InputMode mode = InputMode::rgbt;
  ConfusionMatrix confusion;
  MiouResult metrics;
  std::size_t images = 0;
};

// Dense prediction for one pair under the given input mode.
template <typename Scalar>
LabelMap predict_labels(const Model<Scalar>& model, const ScenePair& pair, InputMode mode);

// Per-image callback receives (pair, prediction); may be empty.
using PredictionSink = std::function<void(const ScenePair&, const LabelMap&)>;

template <typename Scalar>
EvalResult evaluate(const Model<Scalar>& model, const Dataset& data, InputMode mode, const PredictionSink& sink = {});

struct RobustnessReport {
  double miou_rgbt = 0.0;
  double miou_rgb_drop = 0.0;  // thermal-only forward
  double miou_thr_drop = 0.0;  // rgb-only forward
  double diff_rgb_drop = 0.0;  // miou_rgb_drop - miou_rgbt
  double diff_thr_drop = 0.0;  // miou_thr_drop - miou_rgbt

  static RobustnessReport from(double rgbt, double rgb_drop, double thr_drop);
};

template <typename Scalar>
RobustnessReport robustness_report(const Model<Scalar>& model, const Dataset& data);

}  // namespace crm
