#pragma once

// Finite-difference verification of backward rules. A scalar loss is formed
// as Re<c, f(inputs)> with a fixed random weighting c; every real component of
// every differentiable input is perturbed by +-h and the central difference is
// compared with the tape gradient.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "cgh/autodiff.hpp"
#include "cgh/ops.hpp"
#include "cgh/pcd.hpp"
#include "cgh/random.hpp"
#include "cgh/unfold.hpp"

namespace cgh::ad {

using GraphFn = std::function<Var(Tape&, const std::vector<Var>&)>;

struct GradInput {
  Tensor value;
  bool differentiable = true;
};

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  /// A component is non-smooth when its one-sided differences disagree by
  /// more than this fraction of the input's largest central difference.
  double kink_fraction = 1e-4;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  std::string name;
  double max_rel_error = 0.0;
  std::string worst_input;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  bool passed = false;
};

inline GradCheckReport check_gradients(const std::string& name, std::vector<GradInput> inputs,
                                       const GraphFn& f, const GradCheckOptions& opt = {}) {
  Tensor weights;
  auto eval = [&](bool record, std::vector<Tensor>* grads) {
    Tape t(record);
    std::vector<Var> vars;
    for (const auto& in : inputs) vars.push_back(t.leaf(in.value, record && in.differentiable));
    const Var out = f(t, vars);
    if (weights.empty()) {
      const Tensor& ov = t.value(out);
      Rng rng(derive_seed(opt.seed, 77));
      weights = Tensor(ov.shape(), ov.is_complex());
      for (std::size_t i = 0; i < weights.size(); ++i) {
        weights.re()[i] = rng.normal();
        if (ov.is_complex()) weights.im()[i] = rng.normal();
      }
    }
    const Var loss = real_projection(t, out, weights);
    const double v = t.value(loss).re()[0];
    if (grads) {
      t.backward(loss);
      for (const auto& x : vars) grads->push_back(t.grad(x));
    }
    return v;
  };

  std::vector<Tensor> analytic;
  const double f0 = eval(true, &analytic);
  GradCheckReport rep;
  rep.name = name;
  for (std::size_t n = 0; n < inputs.size(); ++n) {
    if (!inputs[n].differentiable) continue;
    Tensor& x = inputs[n].value;
    const std::size_t comps = x.is_complex() ? 2 : 1;
    std::vector<double> central(x.size() * comps), gap(x.size() * comps);
    double scale = 0.0;
    for (std::size_t c = 0; c < comps; ++c)
      for (std::size_t i = 0; i < x.size(); ++i) {
        double& slot = c == 0 ? x.re()[i] : x.im()[i];
        const double keep = slot;
        slot = keep + opt.step;
        const double fp = eval(false, nullptr);
        slot = keep - opt.step;
        const double fm = eval(false, nullptr);
        slot = keep;
        const std::size_t k = c * x.size() + i;
        central[k] = (fp - fm) / (2.0 * opt.step);
        gap[k] = std::abs((fp - f0) - (f0 - fm)) / opt.step;
        scale = std::max(scale, std::abs(central[k]));
      }
    double err = 0.0;
    for (std::size_t c = 0; c < comps; ++c)
      for (std::size_t i = 0; i < x.size(); ++i) {
        const std::size_t k = c * x.size() + i;
        if (gap[k] > opt.kink_fraction * std::max(scale, 1e-12)) {
          ++rep.skipped;
          continue;
        }
        const double a = c == 0 ? analytic[n].re()[i] : analytic[n].im()[i];
        err = std::max(err, std::abs(a - central[k]));
        ++rep.checked;
      }
    const double rel = err / std::max(scale, 1e-300);
    if (scale == 0.0 && err == 0.0) continue;
    if (rel > rep.max_rel_error) {
      rep.max_rel_error = rel;
      rep.worst_input = "input " + std::to_string(n);
    }
  }
  rep.passed = rep.max_rel_error < opt.tolerance && rep.checked > 0;
  return rep;
}

// ---------------------------------------------------------------------------
// Registered ops with random small instances.

namespace detail {

inline Tensor random_input(Shape s, bool cplx_, Rng& rng, double std = 1.0) {
  Tensor t(std::move(s), cplx_);
  for (std::size_t i = 0; i < t.size(); ++i) {
    t.re()[i] = std * rng.normal();
    if (cplx_) t.im()[i] = std * rng.normal();
  }
  return t;
}

/// Every weight tensor redrawn at the given scale (so no branch is inert).
inline PcdWeights random_weights(std::size_t C, std::size_t blocks, Rng& rng, double std) {
  PcdWeights w = init_weights(C, blocks, rng.next());
  w.for_each([&](const std::string& n, Tensor& t) {
    const bool gain = n.ends_with("gamma");
    for (std::size_t i = 0; i < t.size(); ++i) {
      t.re()[i] = (gain ? 1.0 : 0.0) + std * rng.normal();
      if (t.is_complex()) t.im()[i] = std * rng.normal();
    }
  });
  return w;
}

struct Instance {
  std::vector<GradInput> inputs;
  GraphFn f;
};

inline std::vector<GradInput> weight_inputs(const PcdWeights& w) {
  std::vector<GradInput> in;
  w.for_each([&](const std::string&, const Tensor& t) { in.push_back({t, true}); });
  return in;
}

inline PcdVars vars_from(const PcdWeights& shape, const std::vector<Var>& v, std::size_t first) {
  PcdVars p;
  p.channels = shape.channels;
  p.blocks.resize(shape.blocks.size());
  std::size_t i = first;
  p.for_each([&](const std::string&, Var& x) { x = v[i++]; });
  return p;
}

inline const PropagationPlan& toy_plan(std::size_t n) {
  static std::map<std::size_t, PropagationPlan> plans;
  auto it = plans.find(n);
  if (it == plans.end()) {
    OpticalConfig c;
    c.width = n;
    c.height = n;
    c.distance = 0.2 * double(n) / 1920.0;
    it = plans.emplace(n, build_plan(c)).first;
  }
  return it->second;
}

inline Tensor positive_amplitude(std::size_t n, Rng& rng) {
  Tensor y = Tensor::real({1, n, n});
  for (auto& v : y.re()) v = 0.2 + rng.uniform();
  return y;
}

using Builder = std::function<Instance(Rng&)>;

inline const std::map<std::string, Builder>& registry() {
  static const std::map<std::string, Builder> r = {
      {"add", [](Rng& g) {
         return Instance{{{random_input({2, 3, 4}, true, g)}, {random_input({2, 3, 4}, true, g)}},
                         [](Tape& t, const std::vector<Var>& v) { return add(t, v[0], v[1]); }};
       }},
      {"axpy", [](Rng& g) {
         return Instance{{{random_input({1, 4, 4}, true, g)}, {random_input({1}, false, g)},
                          {random_input({1, 4, 4}, true, g)}},
                         [](Tape& t, const std::vector<Var>& v) { return axpy(t, v[0], v[1], v[2]); }};
       }},
      {"conv2d", [](Rng& g) {
         return Instance{{{random_input({3, 7, 6}, true, g)}, {random_input({4, 3, 3, 3}, true, g)},
                          {random_input({4}, true, g)}},
                         [](Tape& t, const std::vector<Var>& v) { return conv2d(t, v[0], v[1], v[2], {2, 1, 1}); }};
       }},
      {"conv2d_depthwise", [](Rng& g) {
         return Instance{{{random_input({4, 16, 16}, false, g)}, {random_input({4, 1, 9, 9}, false, g)}},
                         [](Tape& t, const std::vector<Var>& v) { return conv2d(t, v[0], v[1], {8, 4, 4}); }};
       }},
      {"split_relu", [](Rng& g) {
         return Instance{{{random_input({2, 4, 4}, true, g)}},
                         [](Tape& t, const std::vector<Var>& v) { return split_relu(t, v[0]); }};
       }},
      {"gelu", [](Rng& g) {
         return Instance{{{random_input({2, 4, 4}, false, g)}},
                         [](Tape& t, const std::vector<Var>& v) { return gelu(t, v[0]); }};
       }},
      {"stack_real", [](Rng& g) {
         return Instance{{{random_input({2, 3, 3}, true, g)}},
                         [](Tape& t, const std::vector<Var>& v) { return stack_real(t, v[0]); }};
       }},
      {"upsample2", [](Rng& g) {
         return Instance{{{random_input({2, 3, 4}, true, g)}},
                         [](Tape& t, const std::vector<Var>& v) { return upsample2(t, v[0]); }};
       }},
      {"complex_layer_norm", [](Rng& g) {
         return Instance{{{random_input({5, 3, 3}, true, g)}, {random_input({5}, true, g)},
                          {random_input({5}, true, g)}},
                         [](Tape& t, const std::vector<Var>& v) { return complex_layer_norm(t, v[0], v[1], v[2]); }};
       }},
      {"layer_norm", [](Rng& g) {
         return Instance{{{random_input({6, 3, 3}, false, g)}, {random_input({6}, false, g)},
                          {random_input({6}, false, g)}},
                         [](Tape& t, const std::vector<Var>& v) { return layer_norm(t, v[0], v[1], v[2]); }};
       }},
      {"deform_sample", [](Rng& g) {
         return Instance{{{random_input({3, 16, 16}, true, g)}, {random_input({2, 2, 2}, false, g, 2.0)}},
                         [](Tape& t, const std::vector<Var>& v) { return deform_sample(t, v[0], v[1]); }};
       }},
      {"relative_position_bias", [](Rng& g) {
         return Instance{{{random_input({2, 2, 2}, false, g, 2.0)}, {random_input({15, 15}, false, g)}},
                         [](Tape& t, const std::vector<Var>& v) {
                           return relative_position_bias(t, v[0], v[1], 16, 16);
                         }};
       }},
      {"attention", [](Rng& g) {
         return Instance{{{random_input({3, 4, 4}, true, g)}, {random_input({3, 2, 3}, true, g)},
                          {random_input({3, 2, 3}, true, g)}, {random_input({16, 6}, false, g)}},
                         [](Tape& t, const std::vector<Var>& v) { return attention(t, v[0], v[1], v[2], v[3]); }};
       }},
      {"propagate", [](Rng& g) {
         return Instance{{{random_input({1, 16, 16}, true, g)}},
                         [](Tape& t, const std::vector<Var>& v) { return propagate(t, v[0], toy_plan(16)); }};
       }},
      {"adjoint_propagate", [](Rng& g) {
         return Instance{{{random_input({1, 16, 16}, true, g)}},
                         [](Tape& t, const std::vector<Var>& v) { return propagate(t, v[0], toy_plan(16), true); }};
       }},
      {"amplitude_residual", [](Rng& g) {
         return Instance{{{random_input({1, 6, 6}, true, g)}, {positive_amplitude(6, g), false}},
                         [](Tape& t, const std::vector<Var>& v) { return amplitude_residual(t, v[0], v[1]); }};
       }},
      {"phase_only", [](Rng& g) {
         return Instance{{{random_input({1, 6, 6}, true, g)}},
                         [](Tape& t, const std::vector<Var>& v) { return phase_only(t, v[0]); }};
       }},
      {"magnitude", [](Rng& g) {
         return Instance{{{random_input({1, 6, 6}, true, g)}},
                         [](Tape& t, const std::vector<Var>& v) { return magnitude(t, v[0]); }};
       }},
      {"mse", [](Rng& g) {
         return Instance{{{random_input({1, 5, 5}, false, g)}, {random_input({1, 5, 5}, false, g)}},
                         [](Tape& t, const std::vector<Var>& v) { return mse(t, v[0], v[1]); }};
       }},
      {"squared_norm", [](Rng& g) {
         return Instance{{{random_input({2, 3, 3}, true, g)}},
                         [](Tape& t, const std::vector<Var>& v) { return squared_norm(t, v[0]); }};
       }},
      {"gradient_step", [](Rng& g) {
         auto y = positive_amplitude(16, g);
         Tensor rho = Tensor::real({1});
         rho.re()[0] = 0.7;
         return Instance{{{random_input({1, 16, 16}, true, g)}, {y, false}, {rho, true}},
                         [](Tape& t, const std::vector<Var>& v) {
                           return cgh::net::gradient_step(t, v[0], v[1], v[2], toy_plan(16));
                         }};
       }},
      {"cdsa", [](Rng& g) {
         // 16x16x8 feature input, every CDSA parameter differentiable.
         const PcdWeights w = random_weights(8, 1, g, 0.3);
         std::vector<GradInput> in{{random_input({8, 16, 16}, true, g)}};
         for (auto& x : weight_inputs(w)) in.push_back(std::move(x));
         return Instance{std::move(in), [w](Tape& t, const std::vector<Var>& v) {
                           const PcdVars p = vars_from(w, v, 1);
                           return cgh::net::cdsa(t, v[0], p.blocks[0]).out;
                         }};
       }},
      {"cdat", [](Rng& g) {
         const PcdWeights w = random_weights(8, 1, g, 0.3);
         std::vector<GradInput> in{{random_input({8, 16, 16}, true, g)}};
         for (auto& x : weight_inputs(w)) in.push_back(std::move(x));
         return Instance{std::move(in), [w](Tape& t, const std::vector<Var>& v) {
                           const PcdVars p = vars_from(w, v, 1);
                           return cgh::net::cdat(t, v[0], p.blocks[0]);
                         }};
       }},
      {"pcd", [](Rng& g) {
         const PcdWeights w = random_weights(4, 1, g, 0.3);
         std::vector<GradInput> in{{random_input({1, 32, 32}, true, g)}};
         for (auto& x : weight_inputs(w)) in.push_back(std::move(x));
         return Instance{std::move(in), [w](Tape& t, const std::vector<Var>& v) {
                           return cgh::net::pcd(t, v[0], vars_from(w, v, 1));
                         }};
       }},
  };
  return r;
}

}  // namespace detail

inline std::vector<std::string> registered_ops() {
  std::vector<std::string> names;
  for (const auto& [k, v] : detail::registry()) names.push_back(k);
  return names;
}

/// Gradient check of a registered op on a random instance drawn from `seed`.
inline GradCheckReport check_gradients(const std::string& op_name, std::uint64_t seed,
                                       GradCheckOptions opt = {}) {
  const auto& r = detail::registry();
  auto it = r.find(op_name);
  if (it == r.end()) throw ConfigError("no gradient check registered for op '" + op_name + "'");
  Rng rng(derive_seed(seed, 4242));
  detail::Instance inst = it->second(rng);
  opt.seed = seed;
  return check_gradients(op_name, std::move(inst.inputs), inst.f, opt);
}

/// One unfolding stage (gradient step + PCD + amplitude loss) at n x n with C
/// channels: every weight and the incoming estimate are checked.
inline GradCheckReport check_unfold_stage(std::size_t n, std::size_t C, std::uint64_t seed,
                                          GradCheckOptions opt = {}) {
  Rng g(derive_seed(seed, 9001));
  const PcdWeights w = detail::random_weights(C, 1, g, 0.2);
  const Tensor y = detail::positive_amplitude(n, g);
  std::vector<GradInput> in{{detail::random_input({1, n, n}, true, g)}, {y, false}};
  for (auto& x : detail::weight_inputs(w)) in.push_back(std::move(x));
  const PropagationPlan& plan = detail::toy_plan(n);
  opt.seed = seed;
  return check_gradients("unfold_stage", std::move(in),
                         [w, &plan](Tape& t, const std::vector<Var>& v) {
                           UnfoldConfig cfg;
                           cfg.stages = 1;
                           const Var x = cgh::net::unfold(t, v[0], v[1], plan, cfg,
                                                          {detail::vars_from(w, v, 2)});
                           return cgh::net::reconstruction_loss(t, x, v[1], plan);
                         },
                         opt);
}

}  // namespace cgh::ad
