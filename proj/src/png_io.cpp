#include "crm/png_io.hpp"

#include "crm/errors.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

namespace crm {

namespace {

struct PngReader {
  png_image image;
  explicit PngReader(const std::filesystem::path& path) {
    std::memset(&image, 0, sizeof image);
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.c_str())) {
      throw IoError("cannot read PNG '" + path.string() + "': " + image.message);
    }
  }
  ~PngReader() { png_image_free(&image); }
};

void write_raw(const std::filesystem::path& path, int height, int width, png_uint_32 format,
               const std::vector<std::uint8_t>& buf) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(width);
  image.height = static_cast<png_uint_32>(height);
  image.format = format;
  if (!png_image_write_to_file(&image, path.c_str(), 0, buf.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw IoError("cannot write PNG '" + path.string() + "': " + msg);
  }
}

std::uint8_t quantize(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

}  // namespace

Image read_png(const std::filesystem::path& path, int channels) {
  if (channels != 1 && channels != 3) throw ParameterError("read_png: channels must be 1 or 3");
  PngReader r(path);
  r.image.format = channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(r.image));
  if (!png_image_finish_read(&r.image, nullptr, buf.data(), 0, nullptr)) {
    throw IoError("cannot decode PNG '" + path.string() + "': " + r.image.message);
  }
  Image img(static_cast<int>(r.image.height), static_cast<int>(r.image.width), channels);
  for (Eigen::Index p = 0; p < img.pixels.rows(); ++p) {
    for (int c = 0; c < channels; ++c) img.pixels(p, c) = buf[p * channels + c] / 255.0;
  }
  return img;
}

void write_png(const std::filesystem::path& path, const Image& image) {
  if (image.channels != 1 && image.channels != 3) throw ParameterError("write_png: channels must be 1 or 3");
  std::vector<std::uint8_t> buf(static_cast<std::size_t>(image.pixels.size()));
  for (Eigen::Index p = 0; p < image.pixels.rows(); ++p) {
    for (int c = 0; c < image.channels; ++c) buf[p * image.channels + c] = quantize(image.pixels(p, c));
  }
  write_raw(path, image.height, image.width, image.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY, buf);
}

LabelMap read_label_png(const std::filesystem::path& path) {
  PngReader r(path);
  if (r.image.format & (PNG_FORMAT_FLAG_COLOR | PNG_FORMAT_FLAG_LINEAR)) {
    throw DataError("label image '" + path.string() + "' must be single-channel 8-bit");
  }
  r.image.format = PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(r.image));
  if (!png_image_finish_read(&r.image, nullptr, buf.data(), 0, nullptr)) {
    throw IoError("cannot decode PNG '" + path.string() + "': " + r.image.message);
  }
  LabelMap m(static_cast<int>(r.image.height), static_cast<int>(r.image.width));
  for (Eigen::Index i = 0; i < m.labels.size(); ++i) m.labels(i) = buf[i];
  return m;
}

void write_label_png(const std::filesystem::path& path, const LabelMap& labels) {
  std::vector<std::uint8_t> buf(static_cast<std::size_t>(labels.labels.size()));
  for (Eigen::Index i = 0; i < labels.labels.size(); ++i) {
    const int v = labels.labels(i);
    if (v < 0 || v > 255) throw DataError("label " + std::to_string(v) + " does not fit in 8 bits");
    buf[i] = static_cast<std::uint8_t>(v);
  }
  write_raw(path, labels.height, labels.width, PNG_FORMAT_GRAY, buf);
}

void write_rgb8_png(const std::filesystem::path& path, int height, int width, const std::vector<std::uint8_t>& rgb) {
  if (rgb.size() != static_cast<std::size_t>(height) * width * 3) throw DimensionError("write_rgb8_png: buffer size");
  write_raw(path, height, width, PNG_FORMAT_RGB, rgb);
}

}  // namespace crm
