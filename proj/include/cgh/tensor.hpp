#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cgh/error.hpp"

namespace cgh {

using cplx = std::complex<double>;

namespace detail {

template <typename T>
std::string join_dims(const std::vector<T>& dims) {
  std::ostringstream os;
  for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "x" : "") << dims[i];
  return os.str();
}

}  // namespace detail

/// Dense row-major 2-D grid of samples with a physical pixel pitch (meters).
template <typename T>
class Grid2D {
 public:
  using value_type = T;

  Grid2D() = default;

  Grid2D(std::size_t rows, std::size_t cols, double pitch, T fill = T{})
      : rows_(rows), cols_(cols), pitch_(pitch), data_(rows * cols, fill) {
    validate();
  }

  Grid2D(std::size_t rows, std::size_t cols, double pitch, std::vector<T> data)
      : rows_(rows), cols_(cols), pitch_(pitch), data_(std::move(data)) {
    validate();
    if (data_.size() != rows_ * cols_)
      throw DimensionError("grid data has " + std::to_string(data_.size()) +
                           " values, expected " + std::to_string(rows_ * cols_));
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  double pitch() const noexcept { return pitch_; }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  auto begin() noexcept { return data_.begin(); }
  auto end() noexcept { return data_.end(); }
  auto begin() const noexcept { return data_.begin(); }
  auto end() const noexcept { return data_.end(); }

  bool same_shape(const Grid2D& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](const T& v) {
      if constexpr (std::is_same_v<T, cplx>)
        return std::isfinite(v.real()) && std::isfinite(v.imag());
      else
        return std::isfinite(v);
    });
  }

 private:
  void validate() const {
    if (rows_ < 1 || cols_ < 1) throw ConfigError("grid dimensions must be at least 1x1");
    if (!(pitch_ > 0.0)) throw ConfigError("pixel pitch must be positive");
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  double pitch_ = 1.0;
  std::vector<T> data_;
};

/// Complex optical field sampled on the SLM or image plane.
using ComplexField = Grid2D<cplx>;
/// Real-valued field, e.g. a target amplitude |U_z|.
using RealField = Grid2D<double>;

inline RealField abs(const ComplexField& f) {
  RealField out(f.rows(), f.cols(), f.pitch());
  for (std::size_t i = 0; i < f.size(); ++i) out[i] = std::abs(f[i]);
  return out;
}

inline ComplexField to_complex(const RealField& f) {
  ComplexField out(f.rows(), f.cols(), f.pitch());
  for (std::size_t i = 0; i < f.size(); ++i) out[i] = f[i];
  return out;
}

inline double norm2(const ComplexField& f) {
  double s = 0.0;
  for (const auto& v : f) s += std::norm(v);
  return std::sqrt(s);
}

// ---------------------------------------------------------------------------
// Tensor: N-d complex array with planar (split real/imag) storage. Network
// activations use the {C, H, W} layout; real-valued tensors keep im() zero.

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, bool is_complex = true)
      : shape_(std::move(shape)),
        complex_(is_complex),
        re_(shape_size(shape_), 0.0),
        im_(shape_size(shape_), 0.0) {}

  static Tensor real(Shape shape) { return Tensor(std::move(shape), false); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return re_.size(); }
  bool is_complex() const noexcept { return complex_; }
  bool empty() const noexcept { return re_.empty(); }

  std::span<double> re() noexcept { return re_; }
  std::span<double> im() noexcept { return im_; }
  std::span<const double> re() const noexcept { return re_; }
  std::span<const double> im() const noexcept { return im_; }
  double* re_data() noexcept { return re_.data(); }
  double* im_data() noexcept { return im_.data(); }
  const double* re_data() const noexcept { return re_.data(); }
  const double* im_data() const noexcept { return im_.data(); }

  cplx get(std::size_t i) const { return {re_[i], im_[i]}; }
  void set(std::size_t i, cplx v) {
    re_[i] = v.real();
    im_[i] = complex_ ? v.imag() : 0.0;
  }

  /// Element of a rank-3 {C, H, W} tensor addressed as (row, col, channel).
  cplx at(std::size_t row, std::size_t col, std::size_t ch) const {
    return get((ch * shape_[1] + row) * shape_[2] + col);
  }

  void reshape(Shape s) {
    if (shape_size(s) != size())
      throw DimensionError("cannot reshape " + detail::join_dims(shape_) + " to " +
                           detail::join_dims(s));
    shape_ = std::move(s);
  }

  void fill_zero() {
    std::fill(re_.begin(), re_.end(), 0.0);
    std::fill(im_.begin(), im_.end(), 0.0);
  }

  void fill_zero_imag() { std::fill(im_.begin(), im_.end(), 0.0); }

  bool all_finite() const {
    auto fin = [](double v) { return std::isfinite(v); };
    return std::all_of(re_.begin(), re_.end(), fin) && std::all_of(im_.begin(), im_.end(), fin);
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.complex_ == b.complex_ && a.re_ == b.re_ && a.im_ == b.im_;
  }

 private:
  Shape shape_;
  bool complex_ = true;
  std::vector<double> re_;
  std::vector<double> im_;
};

/// Feature map of H x W locations with C complex channels, stored {C, H, W}.
using FeatureMap = Tensor;

inline FeatureMap make_feature_map(std::size_t h, std::size_t w, std::size_t c) {
  return Tensor({c, h, w});
}

inline Tensor field_to_tensor(const ComplexField& f) {
  Tensor t({1, f.rows(), f.cols()});
  for (std::size_t i = 0; i < f.size(); ++i) t.set(i, f[i]);
  return t;
}

inline ComplexField tensor_to_field(const Tensor& t, double pitch) {
  if (t.rank() != 3 || t.dim(0) != 1)
    throw DimensionError("expected a {1,H,W} tensor, got " + detail::join_dims(t.shape()));
  ComplexField f(t.dim(1), t.dim(2), pitch);
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = t.get(i);
  return f;
}

// ---------------------------------------------------------------------------

/// <x, y> = sum_j x_j * conj(y_j).
inline cplx hermitian_inner(std::span<const cplx> x, std::span<const cplx> y) {
  if (x.size() != y.size())
    throw DimensionError("hermitian_inner: length mismatch " + std::to_string(x.size()) +
                         " vs " + std::to_string(y.size()));
  double re = 0.0, im = 0.0;
  for (std::size_t j = 0; j < x.size(); ++j) {
    const double a = x[j].real(), b = x[j].imag();
    const double c = y[j].real(), d = y[j].imag();
    re += a * c + b * d;
    im += b * c - a * d;
  }
  return {re, im};
}

/// Learnable per-channel complex affine applied after normalization.
struct ComplexAffine {
  Tensor gamma;  // {C}
  Tensor beta;   // {C}

  static ComplexAffine identity(std::size_t channels) {
    ComplexAffine a{Tensor({channels}), Tensor({channels})};
    std::fill(a.gamma.re().begin(), a.gamma.re().end(), 1.0);
    return a;
  }
};

inline constexpr double kLayerNormEps = 1e-5;

/// Per location: subtract the complex channel mean, divide by
/// sqrt(var(re) + var(im) + eps), then apply gamma * n + beta.
inline FeatureMap complex_layer_norm(const FeatureMap& f, const ComplexAffine& affine,
                                     double eps = kLayerNormEps) {
  if (f.rank() != 3 || f.dim(0) < 1) throw DimensionError("complex_layer_norm: expected {C,H,W}");
  const std::size_t C = f.dim(0), HW = f.dim(1) * f.dim(2);
  if (affine.gamma.size() != C || affine.beta.size() != C)
    throw DimensionError("complex_layer_norm: affine size does not match channel count");
  FeatureMap out(f.shape());
  const double* xr = f.re_data();
  const double* xi = f.im_data();
  for (std::size_t p = 0; p < HW; ++p) {
    double mr = 0.0, mi = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      mr += xr[c * HW + p];
      mi += xi[c * HW + p];
    }
    mr /= double(C);
    mi /= double(C);
    double var = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      const double dr = xr[c * HW + p] - mr, di = xi[c * HW + p] - mi;
      var += dr * dr + di * di;
    }
    const double inv = 1.0 / std::sqrt(var / double(C) + eps);
    for (std::size_t c = 0; c < C; ++c) {
      const cplx n((xr[c * HW + p] - mr) * inv, (xi[c * HW + p] - mi) * inv);
      out.set(c * HW + p, affine.gamma.get(c) * n + affine.beta.get(c));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Bilinear sampling with clamped coordinates.

struct SamplePoint {
  double row = 0.0;
  double col = 0.0;
};

struct SampleGrid {
  std::vector<SamplePoint> points;
};

/// Four-tap stencil for one (clamped) sample position.
struct BilinearTap {
  std::size_t r0 = 0, r1 = 0, c0 = 0, c1 = 0;
  double fr = 0.0, fc = 0.0;
  bool row_clamped = false, col_clamped = false;

  double w00() const { return (1.0 - fr) * (1.0 - fc); }
  double w01() const { return (1.0 - fr) * fc; }
  double w10() const { return fr * (1.0 - fc); }
  double w11() const { return fr * fc; }
};

inline BilinearTap bilinear_tap(double row, double col, std::size_t h, std::size_t w) {
  BilinearTap t;
  const double rmax = double(h - 1), cmax = double(w - 1);
  t.row_clamped = !(row >= 0.0 && row <= rmax);
  t.col_clamped = !(col >= 0.0 && col <= cmax);
  const double r = std::clamp(std::isfinite(row) ? row : 0.0, 0.0, rmax);
  const double c = std::clamp(std::isfinite(col) ? col : 0.0, 0.0, cmax);
  t.r0 = static_cast<std::size_t>(std::floor(r));
  t.c0 = static_cast<std::size_t>(std::floor(c));
  t.r1 = std::min(t.r0 + 1, h - 1);
  t.c1 = std::min(t.c0 + 1, w - 1);
  t.fr = r - double(t.r0);
  t.fc = c - double(t.c0);
  return t;
}

/// Interpolates each channel of f at every grid point. Out-of-range
/// coordinates are clamped to the map border.
inline std::vector<std::vector<cplx>> bilinear_sample(const FeatureMap& f, const SampleGrid& grid) {
  if (f.rank() != 3) throw DimensionError("bilinear_sample: expected {C,H,W}");
  const std::size_t C = f.dim(0), H = f.dim(1), W = f.dim(2);
  std::vector<std::vector<cplx>> out;
  out.reserve(grid.points.size());
  for (const auto& p : grid.points) {
    const BilinearTap t = bilinear_tap(p.row, p.col, H, W);
    std::vector<cplx> v(C);
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t base = c * H * W;
      v[c] = t.w00() * f.get(base + t.r0 * W + t.c0) + t.w01() * f.get(base + t.r0 * W + t.c1) +
             t.w10() * f.get(base + t.r1 * W + t.c0) + t.w11() * f.get(base + t.r1 * W + t.c1);
    }
    out.push_back(std::move(v));
  }
  return out;
}

}  // namespace cgh
