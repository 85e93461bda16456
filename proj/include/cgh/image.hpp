#pragma once

// 8-bit grayscale images: PNG I/O (libpng), resampling, and conversion to and
// from optical fields.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cgh/error.hpp"
#include "cgh/solvers.hpp"
#include "cgh/tensor.hpp"

namespace cgh {

struct Image8 {
  std::size_t rows = 0, cols = 0;
  std::vector<std::uint8_t> data;

  Image8() = default;
  Image8(std::size_t r, std::size_t c, std::uint8_t fill = 0) : rows(r), cols(c), data(r * c, fill) {}

  std::uint8_t& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  std::uint8_t operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  friend bool operator==(const Image8&, const Image8&) = default;
};

/// Reads any PNG as 8-bit gray; colour inputs are converted to luma by libpng.
inline Image8 read_png(const std::string& path) {
  if (!std::filesystem::exists(path)) throw IoError("image not found: " + path);
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str()))
    throw IoError("cannot read PNG '" + path + "': " + img.message);
  img.format = PNG_FORMAT_GRAY;
  Image8 out(img.height, img.width);
  if (!png_image_finish_read(&img, nullptr, out.data.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw IoError("cannot decode PNG '" + path + "': " + msg);
  }
  return out;
}

inline void write_png(const std::string& path, const Image8& im) {
  if (im.empty()) throw ConfigError("cannot write an empty image");
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = png_uint_32(im.cols);
  img.height = png_uint_32(im.rows);
  img.format = PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&img, path.c_str(), 0, im.data.data(), 0, nullptr))
    throw IoError("cannot write PNG '" + path + "': " + img.message);
}

/// Bilinear resampling with pixel-centre alignment.
inline Image8 resize(const Image8& src, std::size_t rows, std::size_t cols) {
  if (src.empty() || rows == 0 || cols == 0) throw ConfigError("resize: empty image or size");
  if (src.rows == rows && src.cols == cols) return src;
  Image8 out(rows, cols);
  const double sr = double(src.rows) / double(rows), sc = double(src.cols) / double(cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const double y = std::clamp((double(r) + 0.5) * sr - 0.5, 0.0, double(src.rows - 1));
      const double x = std::clamp((double(c) + 0.5) * sc - 0.5, 0.0, double(src.cols - 1));
      const std::size_t y0 = std::size_t(y), x0 = std::size_t(x);
      const std::size_t y1 = std::min(y0 + 1, src.rows - 1), x1 = std::min(x0 + 1, src.cols - 1);
      const double fy = y - double(y0), fx = x - double(x0);
      const double v = (1 - fy) * ((1 - fx) * src(y0, x0) + fx * src(y0, x1)) +
                       fy * ((1 - fx) * src(y1, x0) + fx * src(y1, x1));
      out(r, c) = std::uint8_t(std::lround(std::clamp(v, 0.0, 255.0)));
    }
  return out;
}

/// Centre crop to the target aspect ratio, then resize.
inline Image8 fit(const Image8& src, std::size_t rows, std::size_t cols) {
  const double want = double(cols) / double(rows), have = double(src.cols) / double(src.rows);
  std::size_t cr = src.rows, cc = src.cols;
  if (have > want)
    cc = std::max<std::size_t>(1, std::size_t(std::lround(double(src.rows) * want)));
  else
    cr = std::max<std::size_t>(1, std::size_t(std::lround(double(src.cols) / want)));
  Image8 crop(cr, cc);
  const std::size_t r0 = (src.rows - cr) / 2, c0 = (src.cols - cc) / 2;
  for (std::size_t r = 0; r < cr; ++r)
    for (std::size_t c = 0; c < cc; ++c) crop(r, c) = src(r0 + r, c0 + c);
  return resize(crop, rows, cols);
}

/// Gray levels taken directly as amplitude, scaled to unit mean square so the
/// target carries the same energy as a unit-amplitude SLM field.
inline RealField target_amplitude(const Image8& im, double pitch) {
  RealField y(im.rows, im.cols, pitch);
  double ms = 0.0;
  for (std::size_t i = 0; i < im.size(); ++i) {
    y[i] = im.data[i] / 255.0;
    ms += y[i] * y[i];
  }
  ms /= double(im.size());
  if (ms > 0.0)
    for (auto& v : y) v /= std::sqrt(ms);
  return y;
}

/// Phase level round(phi * 255 / 2 pi).
inline Image8 quantize_phase(const Hologram& h) {
  Image8 out(h.rows(), h.cols());
  for (std::size_t i = 0; i < out.size(); ++i)
    out.data[i] = std::uint8_t(std::lround(std::clamp(h.phase[i] * 255.0 / kTwoPi, 0.0, 255.0)));
  return out;
}

inline Hologram dequantize_phase(const Image8& levels, double pitch) {
  Hologram h{RealField(levels.rows, levels.cols, pitch)};
  for (std::size_t i = 0; i < levels.size(); ++i) {
    const double p = levels.data[i] * kTwoPi / 255.0;
    h.phase[i] = p >= kTwoPi ? 0.0 : p;
  }
  return h;
}

/// Amplitude image scaled by the least-squares gain against `reference`
/// (the scale a display calibration would apply), clamped to 8 bits. With no
/// reference the maximum maps to 255.
inline Image8 amplitude_to_image(const RealField& amp, const Image8* reference = nullptr) {
  double s = 0.0;
  if (reference) {
    if (reference->rows != amp.rows() || reference->cols != amp.cols())
      throw DimensionError("reference image size does not match the field");
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < amp.size(); ++i) {
      num += amp[i] * reference->data[i];
      den += amp[i] * amp[i];
    }
    s = den > 0.0 ? num / den : 0.0;
  } else {
    const double mx = *std::max_element(amp.begin(), amp.end());
    s = mx > 0.0 ? 255.0 / mx : 0.0;
  }
  Image8 out(amp.rows(), amp.cols());
  for (std::size_t i = 0; i < amp.size(); ++i)
    out.data[i] = std::uint8_t(std::lround(std::clamp(s * amp[i], 0.0, 255.0)));
  return out;
}

/// Phase in [0, 2 pi) mapped linearly to 0..255 for viewing.
inline Image8 phase_to_image(const ComplexField& f) { return quantize_phase(extract_phase(f)); }

}  // namespace cgh
