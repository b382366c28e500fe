#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <string>

namespace crm {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

// Flattened binary map, row-major pixel order (index = y * width + x).
using BinaryMask = Eigen::Array<std::uint8_t, Eigen::Dynamic, 1>;

// Flattened integer label map, row-major pixel order.
using LabelArray = Eigen::Array<int, Eigen::Dynamic, 1>;

inline constexpr int kIgnoreLabel = 255;

enum class Modality { rgb, thermal };

inline const char* to_string(Modality m) { return m == Modality::rgb ? "rgb" : "thermal"; }

// Image with one row per pixel (row-major pixel order), one column per channel.
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  Eigen::MatrixXd pixels;

  Image() = default;
  Image(int h, int w, int c) : height(h), width(w), channels(c), pixels(Eigen::MatrixXd::Zero(h * w, c)) {}

  double& at(int y, int x, int c) { return pixels(y * width + x, c); }
  double at(int y, int x, int c) const { return pixels(y * width + x, c); }
};

struct LabelMap {
  int height = 0;
  int width = 0;
  LabelArray labels;

  LabelMap() = default;
  LabelMap(int h, int w, int fill = 0) : height(h), width(w), labels(LabelArray::Constant(h * w, fill)) {}

  int& at(int y, int x) { return labels(y * width + x); }
  int at(int y, int x) const { return labels(y * width + x); }
};

}  // namespace crm
