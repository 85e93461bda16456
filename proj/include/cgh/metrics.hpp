#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "cgh/error.hpp"
#include "cgh/image.hpp"

namespace cgh {

inline constexpr double kPsnrCap = 100.0;

namespace detail {

inline void require_same_dims(const Image8& a, const Image8& b, const char* what) {
  if (a.rows != b.rows || a.cols != b.cols || a.empty())
    throw DimensionError(std::string(what) + ": image sizes differ (" + std::to_string(a.rows) + "x" +
                         std::to_string(a.cols) + " vs " + std::to_string(b.rows) + "x" +
                         std::to_string(b.cols) + ")");
}

}  // namespace detail

/// 10 log10(255^2 / MSE), capped at 100 dB (identical images).
inline double psnr(const Image8& a, const Image8& b) {
  detail::require_same_dims(a, b, "psnr");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = double(a.data[i]) - double(b.data[i]);
    s += d * d;
  }
  const double mse = s / double(a.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(255.0 * 255.0 / mse));
}

/// Mean SSIM over the valid region of an 11x11 Gaussian window (sigma 1.5),
/// K1 = 0.01, K2 = 0.03, dynamic range 255.
inline double ssim(const Image8& a, const Image8& b) {
  detail::require_same_dims(a, b, "ssim");
  constexpr std::size_t K = 11;
  if (a.rows < K || a.cols < K) throw DimensionError("ssim: images must be at least 11x11");
  std::array<double, K> w{};
  double ws = 0.0;
  for (std::size_t i = 0; i < K; ++i) {
    const double d = double(i) - 5.0;
    ws += w[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
  }
  for (auto& v : w) v /= ws;
  const double C1 = std::pow(0.01 * 255.0, 2), C2 = std::pow(0.03 * 255.0, 2);
  const std::size_t H = a.rows, W = a.cols, Ho = H - K + 1, Wo = W - K + 1;

  // Separable filtering of x, y, x^2, y^2, xy: rows first, then columns.
  auto filter = [&](auto&& value) {
    std::vector<double> tmp(H * Wo), out(Ho * Wo);
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t c = 0; c < Wo; ++c) {
        double s = 0.0;
        for (std::size_t k = 0; k < K; ++k) s += w[k] * value(r * W + c + k);
        tmp[r * Wo + c] = s;
      }
    for (std::size_t r = 0; r < Ho; ++r)
      for (std::size_t c = 0; c < Wo; ++c) {
        double s = 0.0;
        for (std::size_t k = 0; k < K; ++k) s += w[k] * tmp[(r + k) * Wo + c];
        out[r * Wo + c] = s;
      }
    return out;
  };
  auto x = [&](std::size_t i) { return double(a.data[i]); };
  auto y = [&](std::size_t i) { return double(b.data[i]); };
  const auto mx = filter(x), my = filter(y);
  const auto sxx = filter([&](std::size_t i) { return x(i) * x(i); });
  const auto syy = filter([&](std::size_t i) { return y(i) * y(i); });
  const auto sxy = filter([&](std::size_t i) { return x(i) * y(i); });
  double total = 0.0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i];
    const double cxy = sxy[i] - mx[i] * my[i];
    total += ((2.0 * mx[i] * my[i] + C1) * (2.0 * cxy + C2)) /
             ((mx[i] * mx[i] + my[i] * my[i] + C1) * (vx + vy + C2));
  }
  return total / double(mx.size());
}

}  // namespace cgh
