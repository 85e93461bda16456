#pragma once

// Half-quadratic-splitting unfolding: alternate a closed-form gradient step on
// the amplitude fidelity with a denoiser (PCD, complex TV or identity).

#include <cstdint>
#include <string>
#include <vector>

#include "cgh/autodiff.hpp"
#include "cgh/error.hpp"
#include "cgh/ops.hpp"
#include "cgh/pcd.hpp"
#include "cgh/propagation.hpp"
#include "cgh/solvers.hpp"

namespace cgh {

enum class DenoiserKind { None, ComplexTv, Pcd };

inline std::string denoiser_name(DenoiserKind k) {
  switch (k) {
    case DenoiserKind::None: return "NONE";
    case DenoiserKind::ComplexTv: return "COMPLEX_TV";
    case DenoiserKind::Pcd: return "PCD";
  }
  return "?";
}

inline DenoiserKind parse_denoiser(const std::string& s) {
  if (s == "NONE" || s == "none") return DenoiserKind::None;
  if (s == "COMPLEX_TV" || s == "complex_tv" || s == "tv") return DenoiserKind::ComplexTv;
  if (s == "PCD" || s == "pcd") return DenoiserKind::Pcd;
  throw ConfigError("unknown denoiser '" + s + "' (expected NONE, COMPLEX_TV or PCD)");
}

struct UnfoldConfig {
  int stages = 3;
  double step = 1.0;
  double tv_weight = 0.02;
  int tv_iters = 50;
  DenoiserKind denoiser = DenoiserKind::Pcd;

  void validate() const {
    if (stages < 1 || stages > 8) throw ConfigError("stages must be in [1, 8]");
    if (!(step > 0.0)) throw ConfigError("step must be positive");
    if (denoiser == DenoiserKind::ComplexTv && (!(tv_weight > 0.0) || tv_iters < 1))
      throw ConfigError("complex TV needs tv_weight > 0 and tv_iters >= 1");
  }
};

struct UnfoldResult {
  Hologram hologram;
  ComplexField field;  // x after the last stage
};

namespace detail {

inline void check_stage_weights(const UnfoldConfig& cfg, const std::vector<PcdWeights>& w) {
  if (cfg.denoiser != DenoiserKind::Pcd) return;
  if (w.size() != std::size_t(cfg.stages))
    throw ConfigError("unfolding has " + std::to_string(cfg.stages) + " stages but " +
                      std::to_string(w.size()) + " PCD weight sets were supplied");
}

}  // namespace detail

/// x0 = init_field(y); per stage v = gradient_step(x), x = denoiser(v).
inline UnfoldResult hqs_unfold(const RealField& y, const PropagationPlan& plan,
                               const UnfoldConfig& cfg, const std::vector<PcdWeights>& weights,
                               std::uint64_t seed) {
  cfg.validate();
  detail::check_stage_weights(cfg, weights);
  if (cfg.denoiser == DenoiserKind::Pcd) check_pcd_input(y.rows(), y.cols());
  ComplexField x = init_field(y, plan, seed);
  for (int k = 0; k < cfg.stages; ++k) {
    ComplexField v = gradient_step(x, y, plan, cfg.step);
    switch (cfg.denoiser) {
      case DenoiserKind::None: x = std::move(v); break;
      case DenoiserKind::ComplexTv: x = tv_denoise_complex(v, cfg.tv_weight, cfg.tv_iters); break;
      case DenoiserKind::Pcd: x = pcd_forward(v, weights[std::size_t(k)]); break;
    }
    if (!x.all_finite()) throw NumericError("unfolding produced non-finite values at stage " + std::to_string(k));
  }
  return {extract_phase(x), std::move(x)};
}

namespace net {

/// v = x + rho * Phi^H (y u/|u| - u), u = Phi x, recorded on the tape.
inline ad::Var gradient_step(ad::Tape& t, ad::Var x, ad::Var y, ad::Var rho,
                             const PropagationPlan& plan) {
  ad::Var u = ad::propagate(t, x, plan);
  ad::Var w = ad::amplitude_residual(t, u, y);
  ad::Var d = ad::propagate(t, w, plan, true);
  return ad::axpy(t, x, rho, d);
}

/// Unfolded PCD network from a fixed x0; returns the final x.
inline ad::Var unfold(ad::Tape& t, ad::Var x0, ad::Var y, const PropagationPlan& plan,
                      const UnfoldConfig& cfg, const std::vector<PcdVars>& stages) {
  if (stages.size() != std::size_t(cfg.stages))
    throw ConfigError("stage count does not match weight sets");
  Tensor r = Tensor::real({1});
  r.re()[0] = cfg.step;
  ad::Var rho = t.constant(r);
  ad::Var x = x0;
  for (const auto& w : stages) x = pcd(t, gradient_step(t, x, y, rho, plan), w);
  return x;
}

/// mean((|Phi (x/|x|)| - y)^2): amplitude of the phase-only hologram's image.
inline ad::Var reconstruction_loss(ad::Tape& t, ad::Var x, ad::Var y, const PropagationPlan& plan) {
  ad::Var p = ad::phase_only(t, x);
  ad::Var r = ad::magnitude(t, ad::propagate(t, p, plan));
  return ad::mse(t, r, y);
}

}  // namespace net

}  // namespace cgh
