#include "crm/segments.hpp"

#include "crm/errors.hpp"

#include <string>

namespace crm {

GtSegments segments_from_labels(const LabelMap& dense, int num_classes) {
  if (dense.labels.size() != static_cast<Eigen::Index>(dense.height) * dense.width) {
    throw DimensionError("label map size does not match its height and width");
  }
  std::vector<long> count(num_classes, 0);
  for (Eigen::Index i = 0; i < dense.labels.size(); ++i) {
    const int v = dense.labels(i);
    if (v == kIgnoreLabel) continue;
    if (v < 0 || v >= num_classes) {
      throw DataError("label " + std::to_string(v) + " outside [0, " + std::to_string(num_classes) + ")");
    }
    ++count[v];
  }
  GtSegments gt;
  gt.height = dense.height;
  gt.width = dense.width;
  gt.dense = dense;
  for (int c = 0; c < num_classes; ++c) {
    if (count[c] == 0) continue;
    gt.segments.push_back({c, (dense.labels == c).cast<std::uint8_t>()});
  }
  return gt;
}

LabelMap labels_from_segments(const GtSegments& gt) {
  LabelMap out;
  out.height = gt.height;
  out.width = gt.width;
  out.labels = LabelArray::Constant(static_cast<Eigen::Index>(gt.height) * gt.width, kIgnoreLabel);
  for (const auto& s : gt.segments) {
    for (Eigen::Index i = 0; i < s.mask.size(); ++i) {
      if (s.mask(i)) out.labels(i) = s.class_id;
    }
  }
  return out;
}

}  // namespace crm
