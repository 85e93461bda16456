#pragma once

// Shared evaluation protocol: solve for a hologram, quantize its phase to 8
// bits, re-propagate and score the reconstructed amplitude against the target.

#include <chrono>
#include <cstdint>
#include <string>
#include <vector>

#include "cgh/image.hpp"
#include "cgh/metrics.hpp"
#include "cgh/propagation.hpp"
#include "cgh/solvers.hpp"
#include "cgh/unfold.hpp"

namespace cgh {

enum class Method { Gs, Gd, Unfold };

struct MethodSpec {
  Method method = Method::Gs;
  int iters = 50;             // GS iterations
  UnfoldConfig unfold;        // GD uses unfold.stages with DenoiserKind::None
  const std::vector<PcdWeights>* weights = nullptr;

  std::string name() const {
    switch (method) {
      case Method::Gs: return "gs" + std::to_string(iters);
      case Method::Gd: return "gd" + std::to_string(unfold.stages);
      case Method::Unfold: return "unfold_" + denoiser_name(unfold.denoiser);
    }
    return "?";
  }
};

struct Evaluation {
  Hologram hologram;
  Image8 phase_levels;
  Image8 reconstruction;
  double psnr = 0.0;
  double ssim = 0.0;
  double wall_ms = 0.0;
};

/// |Phi exp(i phi)| for a phase-only hologram.
inline RealField reconstruct_amplitude(const Hologram& h, const PropagationPlan& plan) {
  return abs(propagate(h.field(), plan));
}

inline Hologram solve(const MethodSpec& m, const RealField& y, const PropagationPlan& plan,
                      std::uint64_t seed) {
  switch (m.method) {
    case Method::Gs: return gs_solve(y, plan, m.iters, seed).hologram;
    case Method::Gd: {
      UnfoldConfig c = m.unfold;
      c.denoiser = DenoiserKind::None;
      return hqs_unfold(y, plan, c, {}, seed).hologram;
    }
    case Method::Unfold: {
      static const std::vector<PcdWeights> none;
      return hqs_unfold(y, plan, m.unfold, m.weights ? *m.weights : none, seed).hologram;
    }
  }
  throw ConfigError("unknown method");
}

/// Quantized-phase reconstruction, scaled to the target by least squares.
inline Evaluation evaluate(const MethodSpec& m, const Image8& target, const PropagationPlan& plan,
                           std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  const RealField y = target_amplitude(target, plan.config.pitch);
  Evaluation e;
  e.hologram = solve(m, y, plan, seed);
  e.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  e.phase_levels = quantize_phase(e.hologram);
  e.reconstruction = amplitude_to_image(
      reconstruct_amplitude(dequantize_phase(e.phase_levels, plan.config.pitch), plan), &target);
  e.psnr = psnr(e.reconstruction, target);
  e.ssim = ssim(e.reconstruction, target);
  return e;
}

}  // namespace cgh
