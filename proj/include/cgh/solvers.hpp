#pragma once

// Classical phase-retrieval building blocks: initialisation, the closed-form
// gradient step on F(x) = 1/2 || y - |Phi x| ||^2, Gerchberg-Saxton, and a
// complex total-variation denoiser.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "cgh/error.hpp"
#include "cgh/propagation.hpp"
#include "cgh/random.hpp"
#include "cgh/tensor.hpp"

namespace cgh {

inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

/// |u| below this is treated as zero; its unit-phase factor becomes 1.
inline constexpr double kMagnitudeGuard = 1e-12;

/// Phase-only SLM pattern, every entry in [0, 2 pi).
struct Hologram {
  RealField phase;

  std::size_t rows() const { return phase.rows(); }
  std::size_t cols() const { return phase.cols(); }

  /// exp(i phase), the field leaving the SLM.
  ComplexField field() const {
    ComplexField f(phase.rows(), phase.cols(), phase.pitch());
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = std::polar(1.0, phase[i]);
    return f;
  }
};

/// atan2 wrapped into [0, 2 pi); exact zeros map to 0.
inline double wrap_phase(double re, double im) {
  if (re == 0.0 && im == 0.0) return 0.0;
  double p = std::atan2(im, re);
  if (p < 0.0) p += kTwoPi;
  if (p >= kTwoPi) p = 0.0;
  return p;
}

inline Hologram extract_phase(const ComplexField& x) {
  detail::require_finite(x, "extract_phase");
  Hologram h{RealField(x.rows(), x.cols(), x.pitch())};
  for (std::size_t i = 0; i < x.size(); ++i) h.phase[i] = wrap_phase(x[i].real(), x[i].imag());
  return h;
}

/// u / |u| with the zero guard.
inline cplx unit_phase(cplx u) {
  const double m = std::abs(u);
  return m < kMagnitudeGuard ? cplx(1.0, 0.0) : u / m;
}

namespace detail {

inline void check_target(const RealField& y, const PropagationPlan& plan) {
  if (y.rows() != plan.rows() || y.cols() != plan.cols())
    throw DimensionError("target is " + std::to_string(y.rows()) + "x" + std::to_string(y.cols()) +
                         " but plan expects " + std::to_string(plan.rows()) + "x" +
                         std::to_string(plan.cols()));
  for (double v : y)
    if (!(v >= 0.0) || !std::isfinite(v))
      throw ConfigError("target amplitude must be finite and non-negative");
}

}  // namespace detail

/// x0 = Phi^H (y * exp(i theta)), theta i.i.d. uniform on [0, 2 pi) from seed.
inline ComplexField init_field(const RealField& y, const PropagationPlan& plan, std::uint64_t seed) {
  detail::check_target(y, plan);
  Rng rng(seed);
  ComplexField u(y.rows(), y.cols(), y.pitch());
  for (std::size_t i = 0; i < u.size(); ++i) u[i] = std::polar(y[i], kTwoPi * rng.uniform());
  return adjoint_propagate(u, plan);
}

/// F(x) = 1/2 || y - |Phi x| ||^2.
inline double fidelity(const ComplexField& x, const RealField& y, const PropagationPlan& plan) {
  const ComplexField u = propagate(x, plan);
  double s = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double r = y[i] - std::abs(u[i]);
    s += r * r;
  }
  return 0.5 * s;
}

/// Descent direction -grad F(x) = Phi^H[(Phi x / |Phi x|) (y - |Phi x|)], where
/// grad is the conjugate cotangent dF/dRe + i dF/dIm.
inline ComplexField fidelity_descent(const ComplexField& x, const RealField& y,
                                     const PropagationPlan& plan) {
  ComplexField u = propagate(x, plan);
  for (std::size_t i = 0; i < u.size(); ++i) u[i] = unit_phase(u[i]) * (y[i] - std::abs(u[i]));
  return adjoint_propagate(u, plan);
}

/// v = x + rho * Phi^H[(Phi x / |Phi x|) (y - |Phi x|)].
inline ComplexField gradient_step(const ComplexField& x, const RealField& y,
                                  const PropagationPlan& plan, double rho) {
  if (!(rho > 0.0)) throw ConfigError("gradient_step: rho must be positive");
  detail::check_target(y, plan);
  ComplexField d = fidelity_descent(x, y, plan);
  ComplexField v = x;
  for (std::size_t i = 0; i < v.size(); ++i) v[i] += rho * d[i];
  return v;
}

struct GsResult {
  Hologram hologram;
  ComplexField image_field;
  /// || y - |Phi x_k| || after each SLM-plane projection.
  std::vector<double> amplitude_error;
};

/// Gerchberg-Saxton alternating projections starting from init_field.
inline GsResult gs_solve(const RealField& y, const PropagationPlan& plan, int iters,
                         std::uint64_t seed) {
  if (iters < 1) throw ConfigError("gs_solve: iters must be >= 1");
  ComplexField x = init_field(y, plan, seed);
  GsResult res;
  res.amplitude_error.reserve(std::size_t(iters));
  ComplexField u = x;
  for (int it = 0; it < iters; ++it) {
    u = propagate(x, plan);
    for (std::size_t i = 0; i < u.size(); ++i) u[i] = y[i] * unit_phase(u[i]);
    x = adjoint_propagate(u, plan);
    for (auto& v : x) v = unit_phase(v);
    u = propagate(x, plan);
    double e = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
      const double r = y[i] - std::abs(u[i]);
      e += r * r;
    }
    res.amplitude_error.push_back(std::sqrt(e));
  }
  res.hologram = extract_phase(x);
  res.image_field = std::move(u);
  return res;
}

// ---------------------------------------------------------------------------
// Complex total variation (ROF) denoising.

struct TvResult {
  ComplexField denoised;
  /// 1/2 || weight * div p - v ||^2 per dual iteration (non-increasing).
  std::vector<double> dual_objective;
  /// 1/2 || x - v ||^2 + weight * TV(x) of the primal iterate.
  std::vector<double> primal_objective;
};

namespace detail {

// Forward differences with a zero row/column at the far border; the real
// and imaginary channels share one isotropic magnitude per pixel.
struct TvGradient {
  std::vector<cplx> dx, dy;
};

inline TvGradient tv_grad(const ComplexField& x) {
  const std::size_t H = x.rows(), W = x.cols();
  TvGradient g{std::vector<cplx>(x.size()), std::vector<cplx>(x.size())};
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) {
      const std::size_t i = r * W + c;
      if (c + 1 < W) g.dx[i] = x[i + 1] - x[i];
      if (r + 1 < H) g.dy[i] = x[i + W] - x[i];
    }
  return g;
}

/// div = -grad^T.
inline ComplexField tv_div(const TvGradient& p, std::size_t H, std::size_t W, double pitch) {
  ComplexField d(H, W, pitch);
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) {
      const std::size_t i = r * W + c;
      cplx v{};
      if (c + 1 < W) v += p.dx[i];
      if (c > 0) v -= p.dx[i - 1];
      if (r + 1 < H) v += p.dy[i];
      if (r > 0) v -= p.dy[i - W];
      d[i] = v;
    }
  return d;
}

inline double tv_norm(const ComplexField& x) {
  const TvGradient g = tv_grad(x);
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += std::sqrt(std::norm(g.dx[i]) + std::norm(g.dy[i]));
  return s;
}

}  // namespace detail

/// Approximately solves argmin_x 1/2 ||x - v||^2 + weight * TV(x) by projected
/// gradient on the dual (step 1/8, the inverse Lipschitz bound of div).
inline TvResult tv_denoise_complex_traced(const ComplexField& v, double weight, int iters) {
  if (!(weight > 0.0)) throw ConfigError("tv_denoise_complex: weight must be positive");
  if (iters < 1) throw ConfigError("tv_denoise_complex: iters must be >= 1");
  const std::size_t H = v.rows(), W = v.cols();
  constexpr double tau = 0.125;
  detail::TvGradient p{std::vector<cplx>(v.size()), std::vector<cplx>(v.size())};
  TvResult res;
  ComplexField x = v;
  for (int it = 0; it < iters; ++it) {
    const detail::TvGradient g = detail::tv_grad(x);
    for (std::size_t i = 0; i < v.size(); ++i) {
      const cplx qx = p.dx[i] - (tau / weight) * g.dx[i];
      const cplx qy = p.dy[i] - (tau / weight) * g.dy[i];
      const double n = std::sqrt(std::norm(qx) + std::norm(qy));
      const double s = n > 1.0 ? 1.0 / n : 1.0;
      p.dx[i] = qx * s;
      p.dy[i] = qy * s;
    }
    const ComplexField d = detail::tv_div(p, H, W, v.pitch());
    double dual = 0.0, fit = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      x[i] = v[i] - weight * d[i];
      dual += std::norm(x[i]);
      fit += std::norm(x[i] - v[i]);
    }
    res.dual_objective.push_back(0.5 * dual);
    res.primal_objective.push_back(0.5 * fit + weight * detail::tv_norm(x));
  }
  res.denoised = std::move(x);
  return res;
}

inline ComplexField tv_denoise_complex(const ComplexField& v, double weight, int iters) {
  return tv_denoise_complex_traced(v, weight, iters).denoised;
}

}  // namespace cgh
