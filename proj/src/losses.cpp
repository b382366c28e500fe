#include "crm/losses.hpp"

#include "crm/hungarian.hpp"

#include <cmath>
#include <string>

namespace crm {

namespace {

double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }
double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

void check_len(Eigen::Index a, Eigen::Index b, const char* op) {
  if (a != b) throw DimensionError(std::string(op) + ": prediction and ground truth sizes differ");
}

// Sum over matched pairs of ce * bce + dice * dice, with the gradient
// w.r.t. the (P x N) mask logits computed alongside the value.
template <typename Scalar>
Var<Scalar> matched_mask_loss(const Var<Scalar>& z, const std::vector<std::pair<int, int>>& pairs,
                              const GtSegments& gt, const BinaryMask& valid, const LossWeights& w) {
  auto& t = *z.tape();
  const auto& Z = z.value();
  const Eigen::Index P = Z.rows();
  const double pv = static_cast<double>((valid != 0).count());
  Matrix<Scalar> dz = Matrix<Scalar>::Zero(Z.rows(), Z.cols());
  double total = 0.0;
  for (const auto& [q, s] : pairs) {
    const BinaryMask& g = gt.segments[s].mask;
    double bce = 0.0, inter = 0.0, psum = 0.0, gsum = 0.0;
    for (Eigen::Index i = 0; i < P; ++i) {
      if (!valid(i)) continue;
      const double zi = static_cast<double>(Z(i, q));
      const double gi = g(i);
      const double p = sigmoid(zi);
      bce += softplus(zi) - zi * gi;
      inter += p * gi;
      psum += p;
      gsum += gi;
    }
    const double denom = psum + gsum + kDiceSmoothing;
    const double numer = 2.0 * inter + kDiceSmoothing;
    total += w.ce * (pv > 0 ? bce / pv : 0.0) + w.dice * (1.0 - numer / denom);
    for (Eigen::Index i = 0; i < P; ++i) {
      if (!valid(i)) continue;
      const double zi = static_cast<double>(Z(i, q));
      const double gi = g(i);
      const double p = sigmoid(zi);
      const double d_bce = pv > 0 ? (p - gi) / pv : 0.0;
      const double d_dice_dp = -(2.0 * gi * denom - numer) / (denom * denom);
      dz(i, q) += static_cast<Scalar>(w.ce * d_bce + w.dice * d_dice_dp * p * (1.0 - p));
    }
  }
  Matrix<Scalar> out(1, 1);
  out(0, 0) = static_cast<Scalar>(total);
  const int iz = z.id();
  return t.push(std::move(out), t.needs_grad(iz), [iz, dz = std::move(dz)](Tape<Scalar>& tp, int self) {
    tp.accumulate(iz, dz * tp.grad(self)(0, 0));
  });
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw ContractError(msg);
}

}  // namespace

void LossWeights::validate() const {
  if (cls_matched < 0 || cls_noobj < 0 || ce < 0 || dice < 0) throw ConfigError("loss weights must be >= 0");
}

double dice_loss(const Eigen::ArrayXd& probs, const BinaryMask& gt, const BinaryMask* valid) {
  check_len(probs.size(), gt.size(), "dice_loss");
  if (valid) check_len(valid->size(), gt.size(), "dice_loss");
  double inter = 0.0, psum = 0.0, gsum = 0.0;
  for (Eigen::Index i = 0; i < probs.size(); ++i) {
    if (valid && !(*valid)(i)) continue;
    inter += probs(i) * gt(i);
    psum += probs(i);
    gsum += gt(i);
  }
  return 1.0 - (2.0 * inter + kDiceSmoothing) / (psum + gsum + kDiceSmoothing);
}

double bce_loss(const Eigen::ArrayXd& logits, const BinaryMask& gt, const BinaryMask* valid) {
  check_len(logits.size(), gt.size(), "bce_loss");
  if (valid) check_len(valid->size(), gt.size(), "bce_loss");
  double sum = 0.0;
  Eigen::Index n = 0;
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    if (valid && !(*valid)(i)) continue;
    sum += softplus(logits(i)) - logits(i) * gt(i);
    ++n;
  }
  return n > 0 ? sum / static_cast<double>(n) : 0.0;
}

double mask_loss(const Eigen::ArrayXd& logits, const BinaryMask& gt, const LossWeights& w, const BinaryMask* valid) {
  const Eigen::ArrayXd probs = logits.unaryExpr([](double z) { return sigmoid(z); });
  return w.ce * bce_loss(logits, gt, valid) + w.dice * dice_loss(probs, gt, valid);
}

template <typename Scalar>
Eigen::MatrixXd matching_cost(const Matrix<Scalar>& class_logits, const Matrix<Scalar>& mask_logits,
                              const GtSegments& gt, const LossWeights& w) {
  const Eigen::Index P = mask_logits.rows();
  const Eigen::Index N = mask_logits.cols();
  const auto S = static_cast<Eigen::Index>(gt.segments.size());
  if (P != static_cast<Eigen::Index>(gt.height) * gt.width) throw DimensionError("matching_cost: mask size != gt size");
  if (class_logits.rows() != N) throw DimensionError("matching_cost: class/mask query counts differ");

  const Eigen::MatrixXd Z = mask_logits.template cast<double>();
  const Eigen::VectorXd valid = gt.valid().template cast<double>();
  const double pv = valid.sum();
  Eigen::MatrixXd G(P, S);
  for (Eigen::Index s = 0; s < S; ++s) G.col(s) = gt.segments[s].mask.template cast<double>().matrix().cwiseProduct(valid);

  const Eigen::MatrixXd sp = Z.unaryExpr([](double z) { return softplus(z); });
  const Eigen::MatrixXd sig = Z.unaryExpr([](double z) { return sigmoid(z); });
  const Eigen::RowVectorXd sp_sum = valid.transpose() * sp;
  const Eigen::RowVectorXd sig_sum = valid.transpose() * sig;
  const Eigen::RowVectorXd g_sum = G.colwise().sum();
  const Eigen::MatrixXd zg = Z.transpose() * G;
  const Eigen::MatrixXd inter = sig.transpose() * G;

  Eigen::MatrixXd cost(N, S);
  for (Eigen::Index n = 0; n < N; ++n) {
    const Eigen::RowVectorXd row = class_logits.row(n).template cast<double>();
    const double mx = row.maxCoeff();
    const Eigen::RowVectorXd e = (row.array() - mx).exp().matrix();
    const double z = e.sum();
    for (Eigen::Index s = 0; s < S; ++s) {
      const double prob = e(gt.segments[s].class_id) / z;
      const double bce = pv > 0 ? (sp_sum(n) - zg(n, s)) / pv : 0.0;
      const double dice = 1.0 - (2.0 * inter(n, s) + kDiceSmoothing) / (sig_sum(n) + g_sum(s) + kDiceSmoothing);
      cost(n, s) = -w.cls_matched * prob + w.ce * bce + w.dice * dice;
    }
  }
  return cost;
}

namespace {

Assignment assign_from_cost(const Eigen::MatrixXd& cost_ns) {
  const auto N = static_cast<int>(cost_ns.rows());
  const auto S = static_cast<int>(cost_ns.cols());
  if (S > N) {
    throw CapacityError("hungarian_match: " + std::to_string(S) + " segments exceed " + std::to_string(N) + " queries");
  }
  Assignment a;
  std::vector<char> used(N, 0);
  if (S > 0) {
    const Eigen::MatrixXd by_segment = cost_ns.transpose();
    const std::vector<int> q = solve_assignment_canonical(by_segment);
    for (int s = 0; s < S; ++s) {
      a.pairs.emplace_back(q[s], s);
      used[q[s]] = 1;
    }
  }
  for (int n = 0; n < N; ++n) {
    if (!used[n]) a.unmatched_queries.push_back(n);
  }
  return a;
}

}  // namespace

template <typename Scalar>
Assignment hungarian_match(const Prediction<Scalar>& p, const GtSegments& gt, const LossWeights& w) {
  if (static_cast<Eigen::Index>(gt.segments.size()) > p.queries()) {
    throw CapacityError("hungarian_match: " + std::to_string(gt.segments.size()) + " segments exceed " +
                        std::to_string(p.queries()) + " queries");
  }
  Tape<Scalar> t(false);
  const Matrix<Scalar> z =
      ad::resize_bilinear(t.constant(p.mask_logits), p.mask_h, p.mask_w, gt.height, gt.width).value();
  return assign_from_cost(matching_cost(p.class_logits, z, gt, w));
}

template <typename Scalar>
Var<Scalar> mask_logits_at(const PredictionVars<Scalar>& p, int height, int width) {
  return ad::resize_bilinear(p.mask_logits, p.mask_h, p.mask_w, height, width);
}

template <typename Scalar>
Var<Scalar> supervised_loss(const PredictionVars<Scalar>& p, const GtSegments& gt, const LossWeights& w) {
  const Eigen::Index N = p.class_logits.rows();
  const Eigen::Index K = p.class_logits.cols() - 1;
  const auto S = static_cast<Eigen::Index>(gt.segments.size());
  if (S > N) {
    throw CapacityError("supervised_loss: " + std::to_string(S) + " segments exceed " + std::to_string(N) + " queries");
  }
  for (const auto& seg : gt.segments) {
    if (seg.class_id < 0 || seg.class_id >= K) throw DataError("supervised_loss: segment class out of range");
  }
  Var<Scalar> z = mask_logits_at(p, gt.height, gt.width);
  const Assignment a = assign_from_cost(matching_cost(p.class_logits.value(), z.value(), gt, w));

  std::vector<int> target(N, static_cast<int>(K));
  std::vector<Scalar> weight(N, static_cast<Scalar>(w.cls_noobj));
  for (const auto& [q, s] : a.pairs) {
    target[q] = gt.segments[s].class_id;
    weight[q] = static_cast<Scalar>(w.cls_matched);
  }
  std::vector<Var<Scalar>> terms;
  terms.push_back(ad::weighted_cross_entropy(p.class_logits, std::move(target), std::move(weight)));
  if (!a.pairs.empty()) terms.push_back(matched_mask_loss(z, a.pairs, gt, gt.valid(), w));
  const Scalar norm = Scalar(1) / static_cast<Scalar>(std::max<Eigen::Index>(1, S));
  return ad::scale(ad::sum_scalars(terms), norm);
}

template <typename Scalar>
double supervised_loss(const Prediction<Scalar>& p, const GtSegments& gt, const LossWeights& w) {
  Tape<Scalar> t(false);
  PredictionVars<Scalar> v{t.constant(p.class_logits), t.constant(p.mask_logits), p.mask_h, p.mask_w, p.source,
                           p.masked_input};
  return static_cast<double>(supervised_loss(v, gt, w).scalar());
}

template <typename Scalar>
Var<Scalar> l1_class_distance(const PredictionVars<Scalar>& teacher, const PredictionVars<Scalar>& student,
                              bool stop_gradient) {
  if (teacher.class_logits.rows() != student.class_logits.rows() ||
      teacher.class_logits.cols() != student.class_logits.cols()) {
    throw DimensionError("l1_class_distance: class logit shapes differ");
  }
  Var<Scalar> a = stop_gradient ? ad::detach(teacher.class_logits) : teacher.class_logits;
  return ad::l1_mean(a, student.class_logits);
}

template <typename Scalar>
double l1_class_distance(const Prediction<Scalar>& a, const Prediction<Scalar>& b) {
  if (a.class_logits.rows() != b.class_logits.rows() || a.class_logits.cols() != b.class_logits.cols()) {
    throw DimensionError("l1_class_distance: class logit shapes differ");
  }
  return static_cast<double>((a.class_logits - b.class_logits).cwiseAbs().mean());
}

template <typename Scalar>
Var<Scalar> sdc_loss(const PredictionVars<Scalar>& clean_pair, const PredictionVars<Scalar>& masked_pair,
                     bool stop_gradient) {
  require(clean_pair.source == PredictionSource::rgbt && !clean_pair.masked_input,
          "sdc_loss: teacher must be the clean rgb-thermal prediction");
  require(masked_pair.source == PredictionSource::rgbt && masked_pair.masked_input,
          "sdc_loss: student must be the masked rgb-thermal prediction");
  return l1_class_distance(clean_pair, masked_pair, stop_gradient);
}

template <typename Scalar>
Var<Scalar> sdn_loss(const PredictionVars<Scalar>& clean_pair, const PredictionVars<Scalar>& masked_rgb_only,
                     const PredictionVars<Scalar>& masked_thr_only, bool stop_gradient) {
  require(clean_pair.source == PredictionSource::rgbt && !clean_pair.masked_input,
          "sdn_loss: teacher must be the clean rgb-thermal prediction");
  require(masked_rgb_only.source == PredictionSource::rgb_only && masked_rgb_only.masked_input,
          "sdn_loss: expected a masked rgb-only prediction");
  require(masked_thr_only.source == PredictionSource::thr_only && masked_thr_only.masked_input,
          "sdn_loss: expected a masked thermal-only prediction");
  return ad::sum_scalars<Scalar>({l1_class_distance(clean_pair, masked_rgb_only, stop_gradient),
                                  l1_class_distance(clean_pair, masked_thr_only, stop_gradient)});
}

template <typename Scalar>
Var<Scalar> mws_loss(const PredictionVars<Scalar>& clean_pair, const PredictionVars<Scalar>& clean_rgb,
                     const PredictionVars<Scalar>& clean_thr, const PredictionVars<Scalar>* masked_pair,
                     const GtSegments& gt, const LossWeights& w) {
  require(clean_pair.source == PredictionSource::rgbt && !clean_pair.masked_input,
          "mws_loss: first prediction must be the clean rgb-thermal pair");
  require(clean_rgb.source == PredictionSource::rgb_only && !clean_rgb.masked_input,
          "mws_loss: expected a clean rgb-only prediction");
  require(clean_thr.source == PredictionSource::thr_only && !clean_thr.masked_input,
          "mws_loss: expected a clean thermal-only prediction");
  std::vector<Var<Scalar>> terms{supervised_loss(clean_pair, gt, w), supervised_loss(clean_rgb, gt, w),
                                 supervised_loss(clean_thr, gt, w)};
  if (masked_pair) {
    require(masked_pair->source == PredictionSource::rgbt && masked_pair->masked_input,
            "mws_loss: expected a masked rgb-thermal prediction");
    terms.push_back(supervised_loss(*masked_pair, gt, w));
  }
  return ad::sum_scalars(terms);
}

template <typename Scalar>
LossBreakdown<Scalar> total_loss(const ForwardVariants<Scalar>& v, const GtSegments& gt, const LossWeights& w,
                                 const LossFlags& flags) {
  require(v.clean_pair.has_value(), "total_loss: clean pair prediction is required");
  const bool stop = flags.teacher_stop_gradient;
  LossBreakdown<Scalar> b;
  const PredictionVars<Scalar>* masked_pair = nullptr;
  if (flags.use_masking) {
    require(v.masked_pair.has_value(), "total_loss: masking enabled but masked pair prediction missing");
    masked_pair = &*v.masked_pair;
  }
  if (flags.use_mws) {
    require(v.clean_rgb && v.clean_thr, "total_loss: modality-wise supervision needs clean single-modality predictions");
    b.supervised = mws_loss(*v.clean_pair, *v.clean_rgb, *v.clean_thr, masked_pair, gt, w);
  } else if (masked_pair) {
    b.supervised = ad::sum_scalars<Scalar>({supervised_loss(*v.clean_pair, gt, w), supervised_loss(*masked_pair, gt, w)});
  } else {
    b.supervised = supervised_loss(*v.clean_pair, gt, w);
  }
  std::vector<Var<Scalar>> terms{b.supervised};
  if (flags.use_sdc) {
    require(v.masked_pair.has_value(), "total_loss: self-distillation needs the masked pair prediction");
    b.sdc = sdc_loss(*v.clean_pair, *v.masked_pair, stop);
    terms.push_back(b.sdc);
  }
  if (flags.use_sdn) {
    require(v.masked_rgb && v.masked_thr, "total_loss: non-local distillation needs masked single-modality predictions");
    b.sdn = sdn_loss(*v.clean_pair, *v.masked_rgb, *v.masked_thr, stop);
    terms.push_back(b.sdn);
  }
  b.total = ad::sum_scalars(terms);
  return b;
}

#define CRM_LOSSES_INSTANTIATE(S)                                                                                   \
  template Eigen::MatrixXd matching_cost<S>(const Matrix<S>&, const Matrix<S>&, const GtSegments&,                  \
                                            const LossWeights&);                                                     \
  template Assignment hungarian_match<S>(const Prediction<S>&, const GtSegments&, const LossWeights&);               \
  template Var<S> supervised_loss<S>(const PredictionVars<S>&, const GtSegments&, const LossWeights&);               \
  template double supervised_loss<S>(const Prediction<S>&, const GtSegments&, const LossWeights&);                   \
  template Var<S> l1_class_distance<S>(const PredictionVars<S>&, const PredictionVars<S>&, bool);                    \
  template double l1_class_distance<S>(const Prediction<S>&, const Prediction<S>&);                                  \
  template Var<S> sdc_loss<S>(const PredictionVars<S>&, const PredictionVars<S>&, bool);                             \
  template Var<S> sdn_loss<S>(const PredictionVars<S>&, const PredictionVars<S>&, const PredictionVars<S>&, bool);   \
  template Var<S> mws_loss<S>(const PredictionVars<S>&, const PredictionVars<S>&, const PredictionVars<S>&,          \
                              const PredictionVars<S>*, const GtSegments&, const LossWeights&);                      \
  template LossBreakdown<S> total_loss<S>(const ForwardVariants<S>&, const GtSegments&, const LossWeights&,          \
                                          const LossFlags&);                                                         \
  template Var<S> mask_logits_at<S>(const PredictionVars<S>&, int, int);

CRM_LOSSES_INSTANTIATE(float)
CRM_LOSSES_INSTANTIATE(double)

}  // namespace crm
