#pragma once

// Training images: a directory of PNGs or procedurally generated scenes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "cgh/error.hpp"
#include "cgh/image.hpp"
#include "cgh/random.hpp"

namespace cgh {

struct Sample {
  std::string id;
  Image8 image;
};

/// Every *.png under `dir` (sorted by name), fitted to rows x cols.
inline std::vector<Sample> load_image_dir(const std::string& dir, std::size_t rows, std::size_t cols) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("dataset directory not found: " + dir);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::string ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".png") files.push_back(e.path());
  }
  if (files.empty()) throw ConfigError("dataset directory has no PNG images: " + dir);
  std::sort(files.begin(), files.end());
  std::vector<Sample> out;
  for (const auto& f : files) out.push_back({f.stem().string(), fit(read_png(f.string()), rows, cols)});
  return out;
}

/// Piecewise-smooth test scene: a tilted background, 3-8 ellipses or
/// rectangles, and sometimes a sinusoidal texture.
inline Image8 synthetic_scene(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  Rng rng(seed);
  const double base = rng.uniform(0.1, 0.5), ga = rng.uniform(-0.5, 0.5), gb = rng.uniform(-0.5, 0.5);
  std::vector<double> img(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      img[r * cols + c] = base + ga * double(c) / double(cols) + gb * double(r) / double(rows);
  const int shapes = 3 + int(rng.below(6));
  for (int s = 0; s < shapes; ++s) {
    const double cx = rng.uniform(), cy = rng.uniform();
    const double rx = rng.uniform(0.05, 0.3), ry = rng.uniform(0.05, 0.3), v = rng.uniform();
    const bool ellipse = rng.uniform() < 0.5;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) {
        const double dx = double(c) / double(cols) - cx, dy = double(r) / double(rows) - cy;
        const bool in = ellipse ? (dx * dx) / (rx * rx) + (dy * dy) / (ry * ry) < 1.0
                                : std::abs(dx) < rx && std::abs(dy) < ry;
        if (in) img[r * cols + c] = v;
      }
  }
  if (rng.uniform() < 0.5) {
    const double f = rng.uniform(3.0, 12.0), th = rng.uniform(0.0, std::numbers::pi);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) {
        const double p = double(c) / double(cols) * std::cos(th) + double(r) / double(rows) * std::sin(th);
        img[r * cols + c] += 0.15 * std::sin(2.0 * std::numbers::pi * f * p);
      }
  }
  Image8 out(rows, cols);
  for (std::size_t i = 0; i < img.size(); ++i)
    out.data[i] = std::uint8_t(std::lround(std::clamp(img[i], 0.0, 1.0) * 255.0));
  return out;
}

inline std::vector<Sample> synthetic_dataset(std::size_t count, std::size_t rows, std::size_t cols,
                                             std::uint64_t seed) {
  std::vector<Sample> out;
  for (std::size_t i = 0; i < count; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "scene%03zu", i);
    out.push_back({id, synthetic_scene(rows, cols, derive_seed(seed, i))});
  }
  return out;
}

}  // namespace cgh
