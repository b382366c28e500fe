#pragma once

// Training objectives: matched mask/class supervision, modality-wise
// supervision, and self-distillation between clean and masked forwards.

#include "crm/autodiff.hpp"
#include "crm/model.hpp"
#include "crm/segments.hpp"

#include <optional>
#include <utility>
#include <vector>

namespace crm {

struct LossWeights {
  double cls_matched = 2.0;
  double cls_noobj = 0.1;
  double ce = 5.0;
  double dice = 5.0;

  void validate() const;
};

inline constexpr double kDiceSmoothing = 1.0;

struct Assignment {
  std::vector<std::pair<int, int>> pairs;  // (query, segment), ordered by segment
  std::vector<int> unmatched_queries;      // ascending
};

// 1 - (2 sum(p g) + 1) / (sum(p) + sum(g) + 1) over valid pixels (all when valid is null).
double dice_loss(const Eigen::ArrayXd& probs, const BinaryMask& gt, const BinaryMask* valid = nullptr);
// Mean over valid pixels of the logit-space binary cross-entropy.
double bce_loss(const Eigen::ArrayXd& logits, const BinaryMask& gt, const BinaryMask* valid = nullptr);
// ce * bce(logits) + dice * dice(sigmoid(logits)).
double mask_loss(const Eigen::ArrayXd& logits, const BinaryMask& gt, const LossWeights& w,
                 const BinaryMask* valid = nullptr);

// N x S matching cost, computed on mask logits already resized to the ground-truth grid.
template <typename Scalar>
Eigen::MatrixXd matching_cost(const Matrix<Scalar>& class_logits, const Matrix<Scalar>& mask_logits,
                              const GtSegments& gt, const LossWeights& w);

template <typename Scalar>
Assignment hungarian_match(const Prediction<Scalar>& p, const GtSegments& gt, const LossWeights& w);

// Matched supervision of one prediction, normalised by max(1, #segments).
template <typename Scalar>
Var<Scalar> supervised_loss(const PredictionVars<Scalar>& p, const GtSegments& gt, const LossWeights& w);
template <typename Scalar>
double supervised_loss(const Prediction<Scalar>& p, const GtSegments& gt, const LossWeights& w);

// Mean |teacher - student| over all class logits. With stop_gradient the
// teacher receives no gradient.
template <typename Scalar>
Var<Scalar> l1_class_distance(const PredictionVars<Scalar>& teacher, const PredictionVars<Scalar>& student,
                              bool stop_gradient = true);
template <typename Scalar>
double l1_class_distance(const Prediction<Scalar>& a, const Prediction<Scalar>& b);

template <typename Scalar>
Var<Scalar> sdc_loss(const PredictionVars<Scalar>& clean_pair, const PredictionVars<Scalar>& masked_pair,
                     bool stop_gradient = true);
template <typename Scalar>
Var<Scalar> sdn_loss(const PredictionVars<Scalar>& clean_pair, const PredictionVars<Scalar>& masked_rgb_only,
                     const PredictionVars<Scalar>& masked_thr_only, bool stop_gradient = true);

// Sum of supervised losses over the clean pair, clean rgb-only and clean
// thermal-only predictions, plus the masked pair when given.
template <typename Scalar>
Var<Scalar> mws_loss(const PredictionVars<Scalar>& clean_pair, const PredictionVars<Scalar>& clean_rgb,
                     const PredictionVars<Scalar>& clean_thr, const PredictionVars<Scalar>* masked_pair,
                     const GtSegments& gt, const LossWeights& w);

// Which terms of the total objective are active.
struct LossFlags {
  bool use_mws = true;
  bool use_masking = true;  // masked pair forward + its supervised term
  bool use_sdc = true;
  bool use_sdn = true;
  bool teacher_stop_gradient = true;
};

template <typename Scalar>
struct ForwardVariants {
  std::optional<PredictionVars<Scalar>> clean_pair, clean_rgb, clean_thr;
  std::optional<PredictionVars<Scalar>> masked_pair, masked_rgb, masked_thr;
};

template <typename Scalar>
struct LossBreakdown {
  Var<Scalar> supervised;  // L_MWS, or plain L_sup of the clean pair when MWS is off
  Var<Scalar> sdc;
  Var<Scalar> sdn;
  Var<Scalar> total;

  double supervised_value() const { return supervised.valid() ? double(supervised.scalar()) : 0.0; }
  double sdc_value() const { return sdc.valid() ? double(sdc.scalar()) : 0.0; }
  double sdn_value() const { return sdn.valid() ? double(sdn.scalar()) : 0.0; }
  double total_value() const { return double(total.scalar()); }
};

// Unweighted sum of the enabled terms. Throws ContractError if a required variant is missing.
template <typename Scalar>
LossBreakdown<Scalar> total_loss(const ForwardVariants<Scalar>& v, const GtSegments& gt, const LossWeights& w,
                                 const LossFlags& flags);

// Mask logits bilinearly resized to the ground-truth grid (identity when sizes match).
template <typename Scalar>
Var<Scalar> mask_logits_at(const PredictionVars<Scalar>& p, int height, int width);

#define CRM_LOSSES_EXTERN(S)                                                                                         \
  extern template Eigen::MatrixXd matching_cost<S>(const Matrix<S>&, const Matrix<S>&, const GtSegments&,           \
                                                   const LossWeights&);                                              \
  extern template Assignment hungarian_match<S>(const Prediction<S>&, const GtSegments&, const LossWeights&);        \
  extern template Var<S> supervised_loss<S>(const PredictionVars<S>&, const GtSegments&, const LossWeights&);        \
  extern template double supervised_loss<S>(const Prediction<S>&, const GtSegments&, const LossWeights&);            \
  extern template Var<S> l1_class_distance<S>(const PredictionVars<S>&, const PredictionVars<S>&, bool);             \
  extern template double l1_class_distance<S>(const Prediction<S>&, const Prediction<S>&);                           \
  extern template Var<S> sdc_loss<S>(const PredictionVars<S>&, const PredictionVars<S>&, bool);                      \
  extern template Var<S> sdn_loss<S>(const PredictionVars<S>&, const PredictionVars<S>&, const PredictionVars<S>&,   \
                                     bool);                                                                          \
  extern template Var<S> mws_loss<S>(const PredictionVars<S>&, const PredictionVars<S>&, const PredictionVars<S>&,   \
                                     const PredictionVars<S>*, const GtSegments&, const LossWeights&);               \
  extern template LossBreakdown<S> total_loss<S>(const ForwardVariants<S>&, const GtSegments&, const LossWeights&,   \
                                                 const LossFlags&);                                                  \
  extern template Var<S> mask_logits_at<S>(const PredictionVars<S>&, int, int);

CRM_LOSSES_EXTERN(float)
CRM_LOSSES_EXTERN(double)
#undef CRM_LOSSES_EXTERN

}  // namespace crm
