#include "crm/evaluate.hpp"

#include "crm/errors.hpp"

namespace crm {

InputMode parse_input_mode(const std::string& name) {
  if (name == "rgbt") return InputMode::rgbt;
  if (name == "rgb_only") return InputMode::rgb_only;
  if (name == "thr_only") return InputMode::thr_only;
  if (name == "rgb_drop_zero") return InputMode::rgb_drop_zero;
  if (name == "thr_drop_zero") return InputMode::thr_drop_zero;
  throw ParameterError("unknown input mode '" + name + "'");
}

const char* to_string(InputMode m) {
  switch (m) {
    case InputMode::rgbt: return "rgbt";
    case InputMode::rgb_only: return "rgb_only";
    case InputMode::thr_only: return "thr_only";
    case InputMode::rgb_drop_zero: return "rgb_drop_zero";
    case InputMode::thr_drop_zero: return "thr_drop_zero";
  }
  return "?";
}

template <typename Scalar>
LabelMap predict_labels(const Model<Scalar>& model, const ScenePair& pair, InputMode mode) {
  Prediction<Scalar> p;
  switch (mode) {
    case InputMode::rgbt: p = model.predict(&pair.rgb, &pair.thr); break;
    case InputMode::rgb_only: p = model.predict(&pair.rgb, nullptr); break;
    case InputMode::thr_only: p = model.predict(nullptr, &pair.thr); break;
    case InputMode::rgb_drop_zero: {
      const Image zero(pair.rgb.height, pair.rgb.width, pair.rgb.channels);
      p = model.predict(&zero, &pair.thr);
      break;
    }
    case InputMode::thr_drop_zero: {
      const Image zero(pair.thr.height, pair.thr.width, pair.thr.channels);
      p = model.predict(&pair.rgb, &zero);
      break;
    }
  }
  return semantic_inference(p, pair.height(), pair.width());
}

template <typename Scalar>
EvalResult evaluate(const Model<Scalar>& model, const Dataset& data, InputMode mode, const PredictionSink& sink) {
  EvalResult r;
  r.mode = mode;
  r.confusion = ConfusionMatrix(model.config().num_classes);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const ScenePair pair = data.get(i);
    const LabelMap pred = predict_labels(model, pair, mode);
    accumulate(r.confusion, pred, pair.gt.dense);
    if (sink) sink(pair, pred);
    ++r.images;
  }
  r.metrics = miou(r.confusion);
  return r;
}

RobustnessReport RobustnessReport::from(double rgbt, double rgb_drop, double thr_drop) {
  RobustnessReport r;
  r.miou_rgbt = rgbt;
  r.miou_rgb_drop = rgb_drop;
  r.miou_thr_drop = thr_drop;
  r.diff_rgb_drop = rgb_drop - rgbt;
  r.diff_thr_drop = thr_drop - rgbt;
  return r;
}

template <typename Scalar>
RobustnessReport robustness_report(const Model<Scalar>& model, const Dataset& data) {
  const double rgbt = evaluate(model, data, InputMode::rgbt).metrics.value_or_zero();
  const double rgb_drop = evaluate(model, data, InputMode::thr_only).metrics.value_or_zero();
  const double thr_drop = evaluate(model, data, InputMode::rgb_only).metrics.value_or_zero();
  return RobustnessReport::from(rgbt, rgb_drop, thr_drop);
}

#define CRM_EVAL_INSTANTIATE(S)                                                                       \
  template LabelMap predict_labels<S>(const Model<S>&, const ScenePair&, InputMode);                 \
  template EvalResult evaluate<S>(const Model<S>&, const Dataset&, InputMode, const PredictionSink&); \
  template RobustnessReport robustness_report<S>(const Model<S>&, const Dataset&);

CRM_EVAL_INSTANTIATE(float)
CRM_EVAL_INSTANTIATE(double)

}  // namespace crm
