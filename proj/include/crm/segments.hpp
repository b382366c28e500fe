#pragma once

#include "crm/tensor.hpp"

#include <vector>

namespace crm {

struct Segment {
  int class_id = 0;
  BinaryMask mask;  // height * width, row-major
};

// Semantic ground truth: one segment per class present, plus the dense map.
// Pixels labelled kIgnoreLabel belong to no segment.
struct GtSegments {
  int height = 0;
  int width = 0;
  std::vector<Segment> segments;
  LabelMap dense;

  BinaryMask valid() const { return (dense.labels != kIgnoreLabel).cast<std::uint8_t>(); }
};

// Throws DataError on labels outside [0, num_classes) other than kIgnoreLabel.
GtSegments segments_from_labels(const LabelMap& dense, int num_classes);

// Dense map rebuilt from segments; pixels outside every segment get kIgnoreLabel.
LabelMap labels_from_segments(const GtSegments& gt);

}  // namespace crm
