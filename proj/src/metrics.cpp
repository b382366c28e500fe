#include "crm/metrics.hpp"

#include "crm/errors.hpp"

#include <string>

namespace crm {

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& o) {
  if (o.num_classes() != num_classes()) throw DimensionError("confusion matrices have different class counts");
  counts += o.counts;
  ignore_count += o.ignore_count;
  return *this;
}

void accumulate(ConfusionMatrix& cm, const LabelMap& pred, const LabelMap& gt) {
  if (pred.height != gt.height || pred.width != gt.width || pred.labels.size() != gt.labels.size()) {
    throw DimensionError("accumulate: prediction " + std::to_string(pred.height) + "x" + std::to_string(pred.width) +
                         " vs ground truth " + std::to_string(gt.height) + "x" + std::to_string(gt.width));
  }
  const int k = cm.num_classes();
  for (Eigen::Index i = 0; i < gt.labels.size(); ++i) {
    const int g = gt.labels(i);
    if (g == kIgnoreLabel) {
      ++cm.ignore_count;
      continue;
    }
    const int p = pred.labels(i);
    if (g < 0 || g >= k) throw DataError("accumulate: ground-truth label " + std::to_string(g) + " out of range");
    if (p < 0 || p >= k) throw DataError("accumulate: predicted label " + std::to_string(p) + " out of range");
    ++cm.counts(g, p);
  }
}

MiouResult miou(const ConfusionMatrix& cm) {
  MiouResult r;
  const int k = cm.num_classes();
  r.per_class.resize(k);
  double sum = 0.0;
  int defined = 0;
  for (int c = 0; c < k; ++c) {
    const std::int64_t tp = cm.counts(c, c);
    const std::int64_t denom = cm.counts.row(c).sum() + cm.counts.col(c).sum() - tp;
    if (denom == 0) continue;
    r.per_class[c] = static_cast<double>(tp) / static_cast<double>(denom);
    sum += *r.per_class[c];
    ++defined;
  }
  if (defined > 0) r.miou = sum / defined;
  return r;
}

}  // namespace crm
