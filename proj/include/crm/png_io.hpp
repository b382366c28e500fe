#pragma once

#include "crm/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace crm {

// 8-bit PNG I/O. Values in [0, 1] are stored as round(255 v).
Image read_png(const std::filesystem::path& path, int channels);
void write_png(const std::filesystem::path& path, const Image& image);

// Single-channel 8-bit class-id images (lossless for ids 0..255).
LabelMap read_label_png(const std::filesystem::path& path);
void write_label_png(const std::filesystem::path& path, const LabelMap& labels);

// Raw 8-bit RGB buffer, row-major, 3 bytes per pixel.
void write_rgb8_png(const std::filesystem::path& path, int height, int width, const std::vector<std::uint8_t>& rgb);

}  // namespace crm
