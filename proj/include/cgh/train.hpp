#pragma once

// Training of the unfolded PCD network: amplitude-domain loss, Adam, and a
// deterministic epoch loop with a CSV metrics log.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "cgh/autodiff.hpp"
#include "cgh/dataset.hpp"
#include "cgh/evaluate.hpp"
#include "cgh/ops.hpp"
#include "cgh/pcd.hpp"
#include "cgh/unfold.hpp"

namespace cgh {

struct TrainConfig {
  double lr = 1e-4;
  int epochs = 30;
  int batch = 1;
  std::uint64_t seed = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::size_t channels = kDefaultChannels;
  std::size_t blocks = 1;

  void validate() const {
    if (!(lr >= 0.0)) throw ConfigError("learning rate must be >= 0");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch < 1) throw ConfigError("batch size must be >= 1");
    if (channels < 1 || blocks < 1) throw ConfigError("channels and blocks must be >= 1");
  }
};

/// Per-step amplitude loss and parameter gradients for one target.
struct LossAndGrad {
  double loss = 0.0;
  std::vector<std::vector<Tensor>> grads;  // [stage][tensor in for_each order]
};

inline LossAndGrad loss_and_grad(const std::vector<PcdWeights>& stages, const RealField& y,
                                 const PropagationPlan& plan, const UnfoldConfig& cfg,
                                 std::uint64_t init_seed, bool with_grad = true) {
  ad::Tape t(with_grad);
  std::vector<PcdVars> vars;
  for (const auto& w : stages) vars.push_back(bind(t, w, with_grad));
  Tensor yt = Tensor::real({1, y.rows(), y.cols()});
  std::copy(y.begin(), y.end(), yt.re().begin());
  const ad::Var yv = t.constant(std::move(yt));
  const ad::Var x0 = t.constant(field_to_tensor(init_field(y, plan, init_seed)));
  const ad::Var x = net::unfold(t, x0, yv, plan, cfg, vars);
  const ad::Var loss = net::reconstruction_loss(t, x, yv, plan);
  LossAndGrad out;
  out.loss = t.value(loss).re()[0];
  if (!std::isfinite(out.loss)) throw NumericError("training loss is not finite");
  if (!with_grad) return out;
  t.backward(loss);
  for (const auto& v : vars) {
    std::vector<Tensor> g;
    v.for_each([&](const std::string&, const ad::Var& p) { g.push_back(t.grad(p)); });
    out.grads.push_back(std::move(g));
  }
  return out;
}

/// mean((|Phi exp(i arg x_N)| - y)^2) for the unfolded network.
inline double training_loss(const std::vector<PcdWeights>& stages, const RealField& y,
                            const PropagationPlan& plan, const UnfoldConfig& cfg,
                            std::uint64_t init_seed) {
  return loss_and_grad(stages, y, plan, cfg, init_seed, false).loss;
}

/// Adam over real and imaginary components independently. Parameters are
/// rounded to float after every step so saved weights reload bit-exactly.
class Adam {
 public:
  Adam(const std::vector<PcdWeights>& params, const TrainConfig& cfg) : cfg_(cfg) {
    for (const auto& w : params) {
      std::vector<Tensor> m;
      w.for_each([&](const std::string&, const Tensor& t) { m.emplace_back(t.shape(), t.is_complex()); });
      m_.push_back(m);
      v_.push_back(std::move(m));
    }
  }

  void step(std::vector<PcdWeights>& params, const std::vector<std::vector<Tensor>>& grads) {
    ++t_;
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double c1 = 1.0 - std::pow(b1, double(t_)), c2 = 1.0 - std::pow(b2, double(t_));
    for (std::size_t s = 0; s < params.size(); ++s) {
      std::size_t k = 0;
      params[s].for_each([&](const std::string&, Tensor& p) {
        const Tensor& g = grads[s][k];
        Tensor& m = m_[s][k];
        Tensor& v = v_[s][k];
        auto update = [&](std::span<double> pp, std::span<const double> gg, std::span<double> mm,
                          std::span<double> vv) {
          for (std::size_t i = 0; i < pp.size(); ++i) {
            mm[i] = b1 * mm[i] + (1.0 - b1) * gg[i];
            vv[i] = b2 * vv[i] + (1.0 - b2) * gg[i] * gg[i];
            pp[i] -= cfg_.lr * (mm[i] / c1) / (std::sqrt(vv[i] / c2) + cfg_.eps);
          }
        };
        update(p.re(), g.re(), m.re(), v.re());
        if (p.is_complex()) update(p.im(), g.im(), m.im(), v.im());
        round_to_float(p);
        ++k;
      });
    }
  }

 private:
  TrainConfig cfg_;
  std::vector<std::vector<Tensor>> m_, v_;
  long t_ = 0;
};

struct EpochLog {
  int epoch = 0;
  long step = 0;
  double loss = 0.0;
  double val_psnr = 0.0;
  double val_ssim = 0.0;
  double wall_ms = 0.0;
};

inline constexpr const char* kTrainLogHeader = "epoch,step,loss,val_psnr,val_ssim,wall_ms";

inline void write_log_row(std::ostream& os, const EpochLog& e) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%d,%ld,%.8g,%.4f,%.6f,%.1f\n", e.epoch, e.step, e.loss, e.val_psnr,
                e.val_ssim, e.wall_ms);
  os << buf;
}

/// Seed used for x0 when scoring image `index`; shared by all methods so the
/// initialisation is never a confound.
inline std::uint64_t eval_seed(std::uint64_t seed, std::size_t index) {
  return derive_seed(seed ^ 0x5eedull, index);
}

struct ValScore {
  double psnr = 0.0, ssim = 0.0;
};

inline ValScore mean_score(const MethodSpec& m, const std::vector<Sample>& set,
                           const PropagationPlan& plan, std::uint64_t seed) {
  ValScore s;
  if (set.empty()) return s;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const Evaluation e = evaluate(m, set[i].image, plan, eval_seed(seed, i));
    s.psnr += e.psnr;
    s.ssim += e.ssim;
  }
  s.psnr /= double(set.size());
  s.ssim /= double(set.size());
  return s;
}

/// Trains one PcdWeights per stage with Adam. The visiting order of each
/// epoch is a seeded shuffle, so identical inputs give identical weights.
/// `on_epoch` receives one log row per epoch (validation skipped when
/// `val` is empty).
inline std::vector<PcdWeights> train(const std::vector<Sample>& train_set, const std::vector<Sample>& val,
                                     const PropagationPlan& plan, const TrainConfig& cfg,
                                     UnfoldConfig ucfg,
                                     const std::function<void(const EpochLog&)>& on_epoch = {},
                                     std::vector<PcdWeights> initial = {}) {
  cfg.validate();
  ucfg.denoiser = DenoiserKind::Pcd;
  ucfg.validate();
  if (train_set.empty()) throw ConfigError("training set is empty");
  for (const auto& s : train_set)
    if (s.image.rows != plan.rows() || s.image.cols != plan.cols())
      throw DimensionError("training image '" + s.id + "' does not match the optical grid");
  check_pcd_input(plan.rows(), plan.cols());

  std::vector<PcdWeights> w = std::move(initial);
  if (w.empty())
    for (int s = 0; s < ucfg.stages; ++s)
      w.push_back(init_weights(cfg.channels, cfg.blocks, derive_seed(cfg.seed, 100 + std::uint64_t(s))));
  if (w.size() != std::size_t(ucfg.stages)) throw ConfigError("initial weights do not match the stage count");

  std::vector<RealField> targets;
  for (const auto& s : train_set) targets.push_back(target_amplitude(s.image, plan.config.pitch));

  Adam opt(w, cfg);
  const auto t0 = std::chrono::steady_clock::now();
  long step = 0;
  MethodSpec spec{Method::Unfold, 0, ucfg, &w};
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(cfg.seed, 1'000'000 + std::uint64_t(epoch)));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < order.size(); b += std::size_t(cfg.batch)) {
      const std::size_t end = std::min(order.size(), b + std::size_t(cfg.batch));
      std::vector<std::vector<Tensor>> acc;
      for (std::size_t j = b; j < end; ++j) {
        const std::size_t idx = order[j];
        const std::uint64_t init = derive_seed(cfg.seed, std::uint64_t(epoch) * 100'003 + idx);
        LossAndGrad lg = loss_and_grad(w, targets[idx], plan, ucfg, init);
        epoch_loss += lg.loss;
        if (acc.empty()) {
          acc = std::move(lg.grads);
        } else {
          for (std::size_t s = 0; s < acc.size(); ++s)
            for (std::size_t k = 0; k < acc[s].size(); ++k)
              for (std::size_t i = 0; i < acc[s][k].size(); ++i) {
                acc[s][k].re()[i] += lg.grads[s][k].re()[i];
                acc[s][k].im()[i] += lg.grads[s][k].im()[i];
              }
        }
      }
      const double inv = 1.0 / double(end - b);
      for (auto& st : acc)
        for (auto& g : st) {
          for (auto& v : g.re()) v *= inv;
          for (auto& v : g.im()) v *= inv;
        }
      opt.step(w, acc);
      ++step;
    }
    EpochLog row;
    row.epoch = epoch + 1;
    row.step = step;
    row.loss = epoch_loss / double(order.size());
    if (!val.empty()) {
      const ValScore v = mean_score(spec, val, plan, cfg.seed);
      row.val_psnr = v.psnr;
      row.val_ssim = v.ssim;
    }
    row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    if (on_epoch) on_epoch(row);
  }
  return w;
}

}  // namespace cgh
