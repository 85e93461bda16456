#pragma once

// Scalar free-space propagation between the SLM plane and the image plane.
//
// Three regimes are dispatched on the propagation distance z:
//   z <= z1        angular spectrum transfer function H(fx, fy, z)
//   z1 < z <= z2   FFT of the sampled Rayleigh-Sommerfeld impulse response h
//   z > z2         FFT of h' = h windowed to the grid's Nyquist band
// with z1 = N dx sqrt(dx^2 - (lambda/2)^2) / lambda and
//      z2 = (25 N^4 dx^4 / lambda)^(1/3), N = max(width, height).
//
// Every kernel is stored in the unshifted FFT layout (DC at index 0) and
// applied as ifft2(kernel * fft2(u)) with orthonormal transforms, so the
// output plane has the same size and pitch as the input plane.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <string_view>

#include "cgh/error.hpp"
#include "cgh/fft.hpp"
#include "cgh/tensor.hpp"

namespace cgh {

struct OpticalConfig {
  double wavelength = 520e-9;  // m
  double pitch = 8e-6;         // m
  double distance = 0.20;      // m
  std::size_t width = 1920;
  std::size_t height = 1080;

  std::size_t extent() const noexcept { return std::max(width, height); }

  void validate() const {
    if (!(wavelength > 0.0) || !std::isfinite(wavelength))
      throw ConfigError("wavelength must be positive");
    if (!(pitch > 0.0) || !std::isfinite(pitch)) throw ConfigError("pitch must be positive");
    if (!(pitch > wavelength / 2.0))
      throw DomainError("pitch must exceed wavelength/2 (got pitch=" + std::to_string(pitch) +
                        ", wavelength=" + std::to_string(wavelength) + ")");
    if (!(distance >= 0.0) || !std::isfinite(distance))
      throw ConfigError("distance must be non-negative");
    if (width < 2 || height < 2) throw ConfigError("grid must be at least 2x2");
  }
};

enum class Regime { Asm, IrMid, IrFar };

inline std::string_view regime_name(Regime r) {
  switch (r) {
    case Regime::Asm: return "ASM";
    case Regime::IrMid: return "IR_MID";
    case Regime::IrFar: return "IR_FAR";
  }
  return "?";
}

/// Largest distance at which the ASM transfer function is used.
inline double asm_threshold(const OpticalConfig& cfg) {
  const double lam = cfg.wavelength, dx = cfg.pitch;
  if (!(lam > 0.0)) throw ConfigError("wavelength must be positive");
  // compare before squaring: a fused multiply-add leaves a tiny positive radicand at dx == lam/2
  if (!(dx > lam / 2.0)) throw DomainError("asm_threshold: pitch <= wavelength/2");
  return double(cfg.extent()) * dx * std::sqrt((dx - lam / 2.0) * (dx + lam / 2.0)) / lam;
}

/// Distance beyond which the windowed impulse response is used.
inline double far_threshold(const OpticalConfig& cfg) {
  if (!(cfg.wavelength > 0.0)) throw ConfigError("wavelength must be positive");
  const double n_dx = double(cfg.extent()) * cfg.pitch;
  return std::cbrt(25.0 * std::pow(n_dx, 4) / cfg.wavelength);
}

/// Ties go to the nearer regime: z == z1 is ASM, z == z2 is IR_MID.
inline Regime select_regime(const OpticalConfig& cfg) {
  const double z = cfg.distance;
  if (z <= asm_threshold(cfg)) return Regime::Asm;
  if (z <= far_threshold(cfg)) return Regime::IrMid;
  return Regime::IrFar;
}

namespace detail {

/// Signed FFT frequency (cycles/m) of index k on an n-point grid.
inline double fft_frequency(std::size_t k, std::size_t n, double pitch) {
  const long kk = k < (n + 1) / 2 ? long(k) : long(k) - long(n);
  return double(kk) / (double(n) * pitch);
}

/// Spatial coordinate of sample j on an n-point grid centred at index n/2.
inline double centred_coordinate(std::size_t j, std::size_t n, double pitch) {
  return (double(j) - double(n / 2)) * pitch;
}

/// Moves the sample at (H/2, W/2) to index (0, 0).
inline ComplexField ifftshift(const ComplexField& f) {
  ComplexField out(f.rows(), f.cols(), f.pitch());
  const std::size_t H = f.rows(), W = f.cols();
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c)
      out((r + H - H / 2) % H, (c + W - W / 2) % W) = f(r, c);
  return out;
}

}  // namespace detail

/// H(fx, fy, z) = exp(i 2 pi z sqrt(1/lambda^2 - fx^2 - fy^2)) on the
/// propagating band and 0 for evanescent frequencies. z may be negative.
inline ComplexField asm_transfer(const OpticalConfig& cfg, double z) {
  const std::size_t H = cfg.height, W = cfg.width;
  const double inv_lam2 = 1.0 / (cfg.wavelength * cfg.wavelength);
  ComplexField k(H, W, cfg.pitch);
  for (std::size_t r = 0; r < H; ++r) {
    const double fy = detail::fft_frequency(r, H, cfg.pitch);
    for (std::size_t c = 0; c < W; ++c) {
      const double fx = detail::fft_frequency(c, W, cfg.pitch);
      const double arg = inv_lam2 - fx * fx - fy * fy;
      if (arg < 0.0) continue;
      k(r, c) = std::polar(1.0, 2.0 * std::numbers::pi * z * std::sqrt(arg));
    }
  }
  return k;
}

inline ComplexField asm_kernel(const OpticalConfig& cfg) {
  cfg.validate();
  return asm_transfer(cfg, cfg.distance);
}

/// Rayleigh-Sommerfeld impulse response h = z / (i lambda r^2) exp(i 2 pi r / lambda)
/// sampled on the grid with the optical axis at sample (H/2, W/2).
inline ComplexField impulse_response(const OpticalConfig& cfg) {
  cfg.validate();
  const double z = cfg.distance, lam = cfg.wavelength;
  if (!(z > 0.0)) throw ConfigError("impulse response requires z > 0");
  ComplexField h(cfg.height, cfg.width, cfg.pitch);
  for (std::size_t r = 0; r < cfg.height; ++r) {
    const double y = detail::centred_coordinate(r, cfg.height, cfg.pitch);
    for (std::size_t c = 0; c < cfg.width; ++c) {
      const double x = detail::centred_coordinate(c, cfg.width, cfg.pitch);
      const double rr2 = x * x + y * y + z * z;
      const double rr = std::sqrt(rr2);
      h(r, c) = (z / (lam * rr2)) * cplx(0.0, -1.0) *
                std::polar(1.0, 2.0 * std::numbers::pi * rr / lam);
    }
  }
  return h;
}

/// 1 where the local chirp frequency x/(lambda r), y/(lambda r) stays within
/// the grid Nyquist limit 1/(2 dx), 0 elsewhere. Same layout as impulse_response.
inline RealField far_window(const OpticalConfig& cfg) {
  cfg.validate();
  const double z = cfg.distance, lam = cfg.wavelength;
  const double nyquist = 1.0 / (2.0 * cfg.pitch);
  RealField win(cfg.height, cfg.width, cfg.pitch);
  for (std::size_t r = 0; r < cfg.height; ++r) {
    const double y = detail::centred_coordinate(r, cfg.height, cfg.pitch);
    for (std::size_t c = 0; c < cfg.width; ++c) {
      const double x = detail::centred_coordinate(c, cfg.width, cfg.pitch);
      const double rr = std::sqrt(x * x + y * y + z * z);
      const bool ok = std::abs(x) / (lam * rr) <= nyquist && std::abs(y) / (lam * rr) <= nyquist;
      win(r, c) = ok ? 1.0 : 0.0;
    }
  }
  return win;
}

namespace detail {

// Discretised convolution with a spatial kernel h: sum_x' h(x - x') u(x') dx^2.
// Under the unitary DFT this is ifft2(sqrt(HW) dx^2 fft2(ifftshift(h)) * fft2(u)).
inline ComplexField spatial_to_transfer(const ComplexField& h) {
  ComplexField k = fft2(ifftshift(h));
  const double scale = std::sqrt(double(h.rows()) * double(h.cols())) * h.pitch() * h.pitch();
  for (auto& v : k) v *= scale;
  return k;
}

}  // namespace detail

inline ComplexField ir_mid_kernel(const OpticalConfig& cfg) {
  return detail::spatial_to_transfer(impulse_response(cfg));
}

inline ComplexField ir_far_kernel(const OpticalConfig& cfg) {
  ComplexField h = impulse_response(cfg);
  const RealField win = far_window(cfg);
  for (std::size_t i = 0; i < h.size(); ++i) h[i] *= win[i];
  return detail::spatial_to_transfer(h);
}

/// Precomputed propagation operator for one optical configuration.
struct PropagationPlan {
  Regime regime = Regime::Asm;
  ComplexField kernel;
  OpticalConfig config;
  double z1 = 0.0;
  double z2 = 0.0;

  std::size_t rows() const noexcept { return config.height; }
  std::size_t cols() const noexcept { return config.width; }
};

/// Builds the kernel of a given regime regardless of the thresholds; used to
/// compare branches near z1 and z2.
inline PropagationPlan build_plan(const OpticalConfig& cfg, Regime regime) {
  cfg.validate();
  PropagationPlan plan;
  plan.regime = regime;
  plan.config = cfg;
  plan.z1 = asm_threshold(cfg);
  plan.z2 = far_threshold(cfg);
  switch (regime) {
    case Regime::Asm: plan.kernel = asm_kernel(cfg); break;
    case Regime::IrMid: plan.kernel = ir_mid_kernel(cfg); break;
    case Regime::IrFar: plan.kernel = ir_far_kernel(cfg); break;
  }
  return plan;
}

inline PropagationPlan build_plan(const OpticalConfig& cfg) {
  cfg.validate();
  return build_plan(cfg, select_regime(cfg));
}

namespace detail {

inline void check_plan_dims(const ComplexField& f, const PropagationPlan& plan) {
  if (f.rows() != plan.rows() || f.cols() != plan.cols())
    throw DimensionError("field is " + std::to_string(f.rows()) + "x" + std::to_string(f.cols()) +
                         " but plan expects " + std::to_string(plan.rows()) + "x" +
                         std::to_string(plan.cols()));
}

/// In-place ifft2(k * fft2(u)) on a row-major buffer, conj(k) when adjoint.
inline void apply_kernel(std::vector<cplx>& u, const PropagationPlan& plan, bool adjoint) {
  const std::size_t H = plan.rows(), W = plan.cols();
  fft2_inplace(u, H, W, FFTW_FORWARD);
  const auto& k = plan.kernel;
  if (adjoint)
    for (std::size_t i = 0; i < u.size(); ++i) u[i] *= std::conj(k[i]);
  else
    for (std::size_t i = 0; i < u.size(); ++i) u[i] *= k[i];
  fft2_inplace(u, H, W, FFTW_BACKWARD);
}

}  // namespace detail

/// U_z = ifft2(kernel * fft2(U_0)); output pitch equals input pitch.
inline ComplexField propagate(const ComplexField& field, const PropagationPlan& plan) {
  detail::check_plan_dims(field, plan);
  detail::require_finite(field, "propagate");
  ComplexField out = field;
  detail::apply_kernel(out.storage(), plan, false);
  return out;
}

/// Conjugate transpose of propagate: <propagate(a), b> == <a, adjoint_propagate(b)>.
inline ComplexField adjoint_propagate(const ComplexField& field, const PropagationPlan& plan) {
  detail::check_plan_dims(field, plan);
  detail::require_finite(field, "adjoint_propagate");
  ComplexField out = field;
  detail::apply_kernel(out.storage(), plan, true);
  return out;
}

}  // namespace cgh
