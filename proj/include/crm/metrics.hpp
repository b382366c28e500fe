#pragma once

#include "crm/tensor.hpp"

#include <cstdint>
#include <optional>
#include <vector>

namespace crm {

struct ConfusionMatrix {
  Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic> counts;  // rows = ground truth, cols = predicted
  std::int64_t ignore_count = 0;

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(int num_classes)
      : counts(Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>::Zero(num_classes, num_classes)) {}

  int num_classes() const { return static_cast<int>(counts.rows()); }
  std::int64_t total() const { return counts.sum() + ignore_count; }
  ConfusionMatrix& operator+=(const ConfusionMatrix& o);
};

// Adds one image. Ground-truth pixels equal to kIgnoreLabel only bump ignore_count.
void accumulate(ConfusionMatrix& cm, const LabelMap& pred, const LabelMap& gt);

struct MiouResult {
  std::vector<std::optional<double>> per_class;  // nullopt where the class never occurs
  std::optional<double> miou;                    // nullopt: no evaluable classes

  bool evaluable() const { return miou.has_value(); }
  // Convenience for reports: mIoU or 0 when nothing was evaluable.
  double value_or_zero() const { return miou.value_or(0.0); }
};

MiouResult miou(const ConfusionMatrix& cm);

}  // namespace crm
