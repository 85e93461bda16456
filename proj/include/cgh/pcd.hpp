#pragma once

// Phase-domain complex-valued denoiser: feature extraction (FEM), deformable
// attention transformer blocks (CDAT = CDSA + CFFN) and phase-image recovery
// (PIRM) with a global residual.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "cgh/autodiff.hpp"
#include "cgh/error.hpp"
#include "cgh/ops.hpp"
#include "cgh/random.hpp"
#include "cgh/tensor.hpp"

namespace cgh {

inline constexpr std::size_t kDefaultChannels = 32;
/// Key downsampling per side; the attention rate is kKeyStride^2 = 64.
inline constexpr std::size_t kKeyStride = 8;
/// Bias table is (2R-1) x (2R-1).
inline constexpr std::size_t kBiasTableRadius = 8;
/// PCD inputs must be multiples of this (x4 FEM reduction times the key stride).
inline constexpr std::size_t kPcdAlignment = 32;

template <typename T>
struct CdatParams {
  T ln1_gamma, ln1_beta;        // complex {C}
  T wq, wk, wv;                 // complex {C,C,1,1}
  T off_dw;                     // real {2C,1,9,9}, depthwise
  T off_ln_gamma, off_ln_beta;  // real {2C}
  T off_pw;                     // real {2,2C,1,1}, no bias
  T bias_table;                 // real {2R-1, 2R-1}
  T ln2_gamma, ln2_beta;        // complex {C}
  T ffn_w1, ffn_b1;             // complex {4C,C,1,1}, {4C}
  T ffn_w2, ffn_b2;             // complex {C,4C,1,1}, {C}

  template <typename Self, typename F>
  static void visit(Self& s, const std::string& prefix, F&& f) {
    f(prefix + "ln1.gamma", s.ln1_gamma);
    f(prefix + "ln1.beta", s.ln1_beta);
    f(prefix + "cdsa.wq", s.wq);
    f(prefix + "cdsa.wk", s.wk);
    f(prefix + "cdsa.wv", s.wv);
    f(prefix + "cdsa.offset.dw", s.off_dw);
    f(prefix + "cdsa.offset.ln.gamma", s.off_ln_gamma);
    f(prefix + "cdsa.offset.ln.beta", s.off_ln_beta);
    f(prefix + "cdsa.offset.pw", s.off_pw);
    f(prefix + "cdsa.bias_table", s.bias_table);
    f(prefix + "ln2.gamma", s.ln2_gamma);
    f(prefix + "ln2.beta", s.ln2_beta);
    f(prefix + "cffn.w1", s.ffn_w1);
    f(prefix + "cffn.b1", s.ffn_b1);
    f(prefix + "cffn.w2", s.ffn_w2);
    f(prefix + "cffn.b2", s.ffn_b2);
  }
};

template <typename T>
struct PcdParams {
  std::size_t channels = 0;
  T fem1, fem2;              // complex {C,1,3,3}, {C,C,3,3}
  std::vector<CdatParams<T>> blocks;
  T pirm1, pirm1_b;          // complex {C,C,3,3}, {C}
  T pirm2, pirm2_b;          // complex {1,C,3,3}, {1}

  /// Calls f(name, member) for every tensor in a fixed order.
  template <typename F>
  void for_each(F&& f) {
    visit_all(*this, "", f);
  }
  template <typename F>
  void for_each(F&& f) const {
    visit_all(*this, "", f);
  }
  template <typename F>
  void for_each(const std::string& prefix, F&& f) {
    visit_all(*this, prefix, f);
  }
  template <typename F>
  void for_each(const std::string& prefix, F&& f) const {
    visit_all(*this, prefix, f);
  }

 private:
  template <typename Self, typename F>
  static void visit_all(Self& s, const std::string& p, F& f) {
    f(p + "fem.conv1", s.fem1);
    f(p + "fem.conv2", s.fem2);
    for (std::size_t b = 0; b < s.blocks.size(); ++b)
      CdatParams<T>::visit(s.blocks[b], p + "cdat" + std::to_string(b) + ".", f);
    f(p + "pirm.conv1", s.pirm1);
    f(p + "pirm.conv1.bias", s.pirm1_b);
    f(p + "pirm.conv2", s.pirm2);
    f(p + "pirm.conv2.bias", s.pirm2_b);
  }
};

using PcdWeights = PcdParams<Tensor>;
using PcdVars = PcdParams<ad::Var>;

/// Rounds every entry to the nearest float so that a 32-bit round trip is exact.
inline void round_to_float(Tensor& t) {
  for (auto& v : t.re()) v = double(float(v));
  for (auto& v : t.im()) v = double(float(v));
}

inline void round_to_float(PcdWeights& w) {
  w.for_each([](const std::string&, Tensor& t) { round_to_float(t); });
}

namespace detail {

inline Tensor random_tensor(Shape s, bool cplx_, double std, Rng& rng) {
  Tensor t(std::move(s), cplx_);
  for (std::size_t i = 0; i < t.size(); ++i) {
    t.re()[i] = std * rng.normal();
    if (cplx_) t.im()[i] = std * rng.normal();
  }
  return t;
}

inline Tensor ones(Shape s, bool cplx_) {
  Tensor t(std::move(s), cplx_);
  std::fill(t.re().begin(), t.re().end(), 1.0);
  return t;
}

}  // namespace detail

/// Complex kernels ~ N(0, 0.02^2) per component, bias table ~ N(0, 0.01^2),
/// layer norms identity, biases and the final PIRM conv zero.
inline PcdWeights init_weights(std::size_t channels, std::size_t blocks, std::uint64_t seed) {
  if (channels < 1) throw ConfigError("PCD channel count must be >= 1");
  const std::size_t C = channels, C2 = 2 * C, T = 2 * kBiasTableRadius - 1;
  Rng rng(seed);
  constexpr double s = 0.02;
  PcdWeights w;
  w.channels = C;
  w.fem1 = detail::random_tensor({C, 1, 3, 3}, true, s, rng);
  w.fem2 = detail::random_tensor({C, C, 3, 3}, true, s, rng);
  for (std::size_t b = 0; b < blocks; ++b) {
    CdatParams<Tensor> k;
    k.ln1_gamma = detail::ones({C}, true);
    k.ln1_beta = Tensor({C});
    k.wq = detail::random_tensor({C, C, 1, 1}, true, s, rng);
    k.wk = detail::random_tensor({C, C, 1, 1}, true, s, rng);
    k.wv = detail::random_tensor({C, C, 1, 1}, true, s, rng);
    k.off_dw = detail::random_tensor({C2, 1, 9, 9}, false, s, rng);
    k.off_ln_gamma = detail::ones({C2}, false);
    k.off_ln_beta = Tensor::real({C2});
    k.off_pw = detail::random_tensor({2, C2, 1, 1}, false, s, rng);
    k.bias_table = detail::random_tensor({T, T}, false, 0.01, rng);
    k.ln2_gamma = detail::ones({C}, true);
    k.ln2_beta = Tensor({C});
    k.ffn_w1 = detail::random_tensor({4 * C, C, 1, 1}, true, s, rng);
    k.ffn_b1 = Tensor({4 * C});
    k.ffn_w2 = detail::random_tensor({C, 4 * C, 1, 1}, true, s, rng);
    k.ffn_b2 = Tensor({C});
    w.blocks.push_back(std::move(k));
  }
  w.pirm1 = detail::random_tensor({C, C, 3, 3}, true, s, rng);
  w.pirm1_b = Tensor({C});
  w.pirm2 = Tensor({1, C, 3, 3});
  w.pirm2_b = Tensor({1});
  round_to_float(w);
  return w;
}

/// Number of real scalars (a complex entry counts twice).
inline std::size_t parameter_count(const PcdWeights& w) {
  std::size_t n = 0;
  w.for_each([&](const std::string&, const Tensor& t) { n += t.size() * (t.is_complex() ? 2 : 1); });
  return n;
}

inline void validate_weights(const PcdWeights& w) {
  const std::size_t C = w.channels;
  if (C < 1) throw DimensionError("PCD weights: channel count is zero");
  const PcdWeights shape = init_weights(C, w.blocks.size(), 0);
  std::vector<std::pair<std::string, Shape>> expected;
  shape.for_each([&](const std::string& n, const Tensor& t) { expected.emplace_back(n, t.shape()); });
  std::size_t i = 0;
  w.for_each([&](const std::string& n, const Tensor& t) {
    if (t.shape() != expected[i].second)
      throw DimensionError("weight tensor '" + n + "' has shape " + detail::join_dims(t.shape()) +
                           ", expected " + detail::join_dims(expected[i].second));
    if (!t.all_finite()) throw NumericError("weight tensor '" + n + "' is not finite");
    ++i;
  });
}

/// Rejects inputs whose sides are not multiples of 32, naming the next valid size.
inline void check_pcd_input(std::size_t rows, std::size_t cols) {
  if (rows % kPcdAlignment == 0 && cols % kPcdAlignment == 0 && rows > 0 && cols > 0) return;
  auto up = [](std::size_t n) { return std::max<std::size_t>(kPcdAlignment, (n + kPcdAlignment - 1) / kPcdAlignment * kPcdAlignment); };
  throw DimensionError("PCD input " + std::to_string(rows) + "x" + std::to_string(cols) +
                       " must have sides divisible by " + std::to_string(kPcdAlignment) +
                       "; pad to " + std::to_string(up(rows)) + "x" + std::to_string(up(cols)));
}

/// Attention layout for a feature map of h x w locations.
struct AttentionGeometry {
  std::size_t rows = 0, cols = 0;
  std::size_t rate() const { return kKeyStride * kKeyStride; }
  std::size_t key_rows() const { return rows / kKeyStride; }
  std::size_t key_cols() const { return cols / kKeyStride; }
  std::size_t queries() const { return rows * cols; }
  std::size_t keys() const { return key_rows() * key_cols(); }

  static AttentionGeometry of(std::size_t rows, std::size_t cols) {
    if (rows % kKeyStride || cols % kKeyStride || rows == 0 || cols == 0)
      throw DimensionError("feature map " + std::to_string(rows) + "x" + std::to_string(cols) +
                           " is not divisible by the key stride " + std::to_string(kKeyStride));
    return {rows, cols};
  }
};

/// Creates one tape leaf per weight tensor.
inline PcdVars bind(ad::Tape& t, const PcdWeights& w, bool requires_grad) {
  PcdVars v;
  v.channels = w.channels;
  v.blocks.resize(w.blocks.size());
  std::vector<ad::Var> leaves;
  w.for_each([&](const std::string&, const Tensor& x) { leaves.push_back(t.leaf(x, requires_grad)); });
  std::size_t i = 0;
  v.for_each([&](const std::string&, ad::Var& x) { x = leaves[i++]; });
  return v;
}

// ---------------------------------------------------------------------------
// Network pieces on the tape. A non-recording tape gives plain inference.

namespace net {

using ad::Tape;
using ad::Var;

inline Var fem(Tape& t, Var v, const PcdVars& w) {
  const Tensor& x = t.value(v);
  if (x.rank() != 3 || x.dim(0) != 1) throw DimensionError("FEM input must be {1,H,W}");
  check_pcd_input(x.dim(1), x.dim(2));
  Var h = ad::conv2d(t, v, w.fem1, {2, 1, 1});
  h = ad::split_relu(t, h);
  return ad::conv2d(t, h, w.fem2, {2, 1, 1});
}

/// Offsets {2, h/8, w/8} (row, col) in feature-map pixels from queries {C,h,w}.
inline Var compute_offsets(Tape& t, Var q, const CdatParams<Var>& w) {
  Var s = ad::stack_real(t, q);
  const std::size_t c2 = t.value(s).dim(0);
  Var d = ad::conv2d(t, s, w.off_dw, {kKeyStride, 4, c2});
  d = ad::layer_norm(t, d, w.off_ln_gamma, w.off_ln_beta);
  d = ad::gelu(t, d);
  return ad::conv2d(t, d, w.off_pw, {1, 0, 1});
}

struct CdsaNodes {
  Var out, q, k, v, bias, offsets;
};

/// Deformable self-attention on a (normalised) feature map f {C,h,w}. When
/// `frozen_offsets` is given it replaces the offset network's output.
inline CdsaNodes cdsa(Tape& t, Var f, const CdatParams<Var>& w,
                      const std::optional<Tensor>& frozen_offsets = std::nullopt) {
  const Tensor& fv = t.value(f);
  const AttentionGeometry g = AttentionGeometry::of(fv.dim(1), fv.dim(2));
  CdsaNodes n;
  n.q = ad::conv2d(t, f, w.wq, {});
  if (frozen_offsets) {
    if (frozen_offsets->shape() != Shape{2, g.key_rows(), g.key_cols()})
      throw DimensionError("frozen offsets do not match the reference grid");
    n.offsets = t.constant(*frozen_offsets);
  } else {
    n.offsets = compute_offsets(t, n.q, w);
  }
  Var sampled = ad::deform_sample(t, f, n.offsets);
  n.k = ad::conv2d(t, sampled, w.wk, {});
  n.v = ad::conv2d(t, sampled, w.wv, {});
  n.bias = ad::relative_position_bias(t, n.offsets, w.bias_table, g.rows, g.cols);
  n.out = ad::attention(t, n.q, n.k, n.v, n.bias);
  return n;
}

inline Var cffn(Tape& t, Var f, const CdatParams<Var>& w) {
  Var h = ad::conv2d(t, f, w.ffn_w1, w.ffn_b1, {});
  h = ad::split_relu(t, h);
  return ad::conv2d(t, h, w.ffn_w2, w.ffn_b2, {});
}

inline Var cdat(Tape& t, Var f, const CdatParams<Var>& w) {
  Var a = cdsa(t, ad::complex_layer_norm(t, f, w.ln1_gamma, w.ln1_beta), w).out;
  Var f1 = ad::add(t, f, a);
  Var b = cffn(t, ad::complex_layer_norm(t, f1, w.ln2_gamma, w.ln2_beta), w);
  return ad::add(t, f1, b);
}

inline Var pirm(Tape& t, Var g, Var v, const PcdVars& w) {
  Var h = ad::upsample2(t, g);
  h = ad::conv2d(t, h, w.pirm1, w.pirm1_b, {1, 1, 1});
  h = ad::split_relu(t, h);
  h = ad::upsample2(t, h);
  h = ad::conv2d(t, h, w.pirm2, w.pirm2_b, {1, 1, 1});
  if (t.value(h).shape() != t.value(v).shape())
    throw DimensionError("PIRM output does not match the input field");
  return ad::add(t, v, h);
}

/// x = PIRM(CDAT...(FEM(v)), v) for v {1,H,W}.
inline Var pcd(Tape& t, Var v, const PcdVars& w) {
  Var f = fem(t, v, w);
  for (const auto& b : w.blocks) f = cdat(t, f, b);
  return pirm(t, f, v, w);
}

}  // namespace net

// ---------------------------------------------------------------------------
// Plain-value wrappers.

inline FeatureMap fem_forward(const ComplexField& v, const PcdWeights& w) {
  check_pcd_input(v.rows(), v.cols());
  ad::Tape t(false);
  const PcdVars p = bind(t, w, false);
  return t.value(net::fem(t, t.constant(field_to_tensor(v)), p));
}

inline ComplexField pcd_forward(const ComplexField& v, const PcdWeights& w) {
  check_pcd_input(v.rows(), v.cols());
  ad::Tape t(false);
  const PcdVars p = bind(t, w, false);
  return tensor_to_field(t.value(net::pcd(t, t.constant(field_to_tensor(v)), p)), v.pitch());
}

/// Single-block helpers addressed by block index.
inline Tensor compute_offsets(const FeatureMap& q, const PcdWeights& w, std::size_t block = 0) {
  ad::Tape t(false);
  const PcdVars p = bind(t, w, false);
  return t.value(net::compute_offsets(t, t.constant(q), p.blocks.at(block)));
}

inline FeatureMap deformable_downsample(const FeatureMap& f, const Tensor& offsets) {
  ad::Tape t(false);
  return t.value(ad::deform_sample(t, t.constant(f), t.constant(offsets)));
}

inline Tensor relative_position_bias(const AttentionGeometry& g, const Tensor& offsets,
                                     const Tensor& table) {
  ad::Tape t(false);
  return t.value(ad::relative_position_bias(t, t.constant(offsets), t.constant(table), g.rows, g.cols));
}

struct CdsaResult {
  FeatureMap out;
  Tensor attention;  // {N_Q, N_K}
  Tensor offsets;
};

inline CdsaResult cdsa_forward(const FeatureMap& f, const PcdWeights& w, std::size_t block = 0,
                               const std::optional<Tensor>& frozen_offsets = std::nullopt) {
  ad::Tape t(false);
  const PcdVars p = bind(t, w, false);
  const net::CdsaNodes n = net::cdsa(t, t.constant(f), p.blocks.at(block), frozen_offsets);
  return {t.value(n.out), ad::attention_weights(t.value(n.q), t.value(n.k), t.value(n.bias)),
          t.value(n.offsets)};
}

inline FeatureMap cffn_forward(const FeatureMap& f, const PcdWeights& w, std::size_t block = 0) {
  ad::Tape t(false);
  const PcdVars p = bind(t, w, false);
  return t.value(net::cffn(t, t.constant(f), p.blocks.at(block)));
}

inline FeatureMap cdat_forward(const FeatureMap& f, const PcdWeights& w, std::size_t block = 0) {
  ad::Tape t(false);
  const PcdVars p = bind(t, w, false);
  return t.value(net::cdat(t, t.constant(f), p.blocks.at(block)));
}

inline ComplexField pirm_forward(const FeatureMap& g, const ComplexField& v, const PcdWeights& w) {
  ad::Tape t(false);
  const PcdVars p = bind(t, w, false);
  return tensor_to_field(t.value(net::pirm(t, t.constant(g), t.constant(field_to_tensor(v)), p)),
                         v.pitch());
}

/// Reference global attention: every query attends to every location, no
/// bias. Rows are streamed so the N_Q x N_Q matrix is never stored.
inline FeatureMap global_attention_reference(const FeatureMap& f, const PcdWeights& w,
                                             std::size_t block = 0) {
  ad::Tape t(false);
  const PcdVars p = bind(t, w, false);
  const auto& b = p.blocks.at(block);
  ad::Var x = t.constant(f);
  const Tensor& q = t.value(ad::conv2d(t, x, b.wq, {}));
  const Tensor& k = t.value(ad::conv2d(t, x, b.wk, {}));
  const Tensor& v = t.value(ad::conv2d(t, x, b.wv, {}));
  const std::size_t C = q.dim(0), N = q.size() / C;
  const double scale = 1.0 / std::sqrt(double(C));
  FeatureMap out(f.shape());
  std::vector<double> row(N);
  for (std::size_t i = 0; i < N; ++i) {
    std::fill(row.begin(), row.end(), 0.0);
    for (std::size_t c = 0; c < C; ++c) {
      const double qr = q.re()[c * N + i], qi = q.im()[c * N + i];
      const double* kr = k.re_data() + c * N;
      const double* ki = k.im_data() + c * N;
      for (std::size_t j = 0; j < N; ++j) row[j] += qr * kr[j] + qi * ki[j];
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (auto& s : row) mx = std::max(mx, s *= scale);
    double z = 0.0;
    for (auto& s : row) z += (s = std::exp(s - mx));
    for (std::size_t c = 0; c < C; ++c) {
      double sr = 0.0, si = 0.0;
      const double* vr = v.re_data() + c * N;
      const double* vi = v.im_data() + c * N;
      for (std::size_t j = 0; j < N; ++j) {
        sr += row[j] * vr[j];
        si += row[j] * vi[j];
      }
      out.re()[c * N + i] = sr / z;
      out.im()[c * N + i] = si / z;
    }
  }
  return out;
}

}  // namespace cgh
