#pragma once

// Differentiable operations recorded on an ad::Tape. Each op computes its
// forward value eagerly and registers a backward rule that accumulates
// conjugate-cotangent gradients into its inputs.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "cgh/autodiff.hpp"
#include "cgh/error.hpp"
#include "cgh/propagation.hpp"
#include "cgh/solvers.hpp"
#include "cgh/tensor.hpp"

namespace cgh::ad {

namespace detail {

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         cgh::detail::join_dims(t.shape()));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + cgh::detail::join_dims(a.shape()) +
                         " vs " + cgh::detail::join_dims(b.shape()));
}

inline bool wants(Tape& t, std::size_t id) { return t.node_requires_grad(id); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(Tape& t, Var a, Var b) {
  const Tensor& x = t.value(a);
  const Tensor& y = t.value(b);
  detail::require_same_shape(x, y, "add");
  Tensor out(x.shape(), x.is_complex() || y.is_complex());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.re()[i] = x.re()[i] + y.re()[i];
    out.im()[i] = x.im()[i] + y.im()[i];
  }
  return t.push("add", std::move(out), {a.id, b.id}, [a, b](Tape& tp, std::size_t self) {
    const Tensor g = tp.grad_buffer(self);
    for (auto id : {a.id, b.id}) {
      if (!detail::wants(tp, id)) continue;
      Tensor& gi = tp.grad_buffer(id);
      for (std::size_t i = 0; i < g.size(); ++i) {
        gi.re()[i] += g.re()[i];
        gi.im()[i] += g.im()[i];
      }
    }
  });
}

/// x + alpha * d with a real scalar alpha ({1} tensor).
inline Var axpy(Tape& t, Var x, Var alpha, Var d) {
  const Tensor& xv = t.value(x);
  const Tensor& dv = t.value(d);
  detail::require_same_shape(xv, dv, "axpy");
  if (t.value(alpha).size() != 1) throw DimensionError("axpy: alpha must be a scalar");
  const double a = t.value(alpha).re()[0];
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.re()[i] = xv.re()[i] + a * dv.re()[i];
    out.im()[i] = xv.im()[i] + a * dv.im()[i];
  }
  return t.push("axpy", std::move(out), {x.id, alpha.id, d.id},
                [x, alpha, d](Tape& tp, std::size_t self) {
                  const Tensor& g = tp.grad_buffer(self);
                  const Tensor& dv = tp.node_value(d.id);
                  const double a = tp.node_value(alpha.id).re()[0];
                  if (detail::wants(tp, x.id)) {
                    Tensor& gx = tp.grad_buffer(x.id);
                    for (std::size_t i = 0; i < g.size(); ++i) {
                      gx.re()[i] += g.re()[i];
                      gx.im()[i] += g.im()[i];
                    }
                  }
                  if (detail::wants(tp, d.id)) {
                    Tensor& gd = tp.grad_buffer(d.id);
                    for (std::size_t i = 0; i < g.size(); ++i) {
                      gd.re()[i] += a * g.re()[i];
                      gd.im()[i] += a * g.im()[i];
                    }
                  }
                  if (detail::wants(tp, alpha.id)) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < g.size(); ++i)
                      s += g.re()[i] * dv.re()[i] + g.im()[i] * dv.im()[i];
                    tp.grad_buffer(alpha.id).re()[0] += s;
                  }
                });
}

/// ReLU applied separately to the real and imaginary parts.
inline Var split_relu(Tape& t, Var x) {
  const Tensor& xv = t.value(x);
  Tensor out(xv.shape(), xv.is_complex());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.re()[i] = std::max(xv.re()[i], 0.0);
    out.im()[i] = std::max(xv.im()[i], 0.0);
  }
  return t.push("split_relu", std::move(out), {x.id}, [x](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_buffer(self);
    const Tensor& xv = tp.node_value(x.id);
    Tensor& gx = tp.grad_buffer(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xv.re()[i] > 0.0) gx.re()[i] += g.re()[i];
      if (xv.im()[i] > 0.0) gx.im()[i] += g.im()[i];
    }
  });
}

/// Exact GELU x * Phi(x) on a real tensor.
inline Var gelu(Tape& t, Var x) {
  const Tensor& xv = t.value(x);
  Tensor out = Tensor::real(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = xv.re()[i];
    out.re()[i] = 0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2));
  }
  return t.push("gelu", std::move(out), {x.id}, [x](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_buffer(self);
    const Tensor& xv = tp.node_value(x.id);
    Tensor& gx = tp.grad_buffer(x.id);
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xv.re()[i];
      const double d = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2)) +
                       v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
      gx.re()[i] += g.re()[i] * d;
    }
  });
}

/// Complex {C,H,W} -> real {2C,H,W}: real parts, then imaginary parts.
inline Var stack_real(Tape& t, Var x) {
  const Tensor& xv = t.value(x);
  detail::require_rank(xv, 3, "stack_real");
  const std::size_t C = xv.dim(0), HW = xv.dim(1) * xv.dim(2);
  Tensor out = Tensor::real({2 * C, xv.dim(1), xv.dim(2)});
  std::copy(xv.re().begin(), xv.re().end(), out.re().begin());
  std::copy(xv.im().begin(), xv.im().end(), out.re().begin() + std::ptrdiff_t(C * HW));
  return t.push("stack_real", std::move(out), {x.id}, [x, C, HW](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_buffer(self);
    Tensor& gx = tp.grad_buffer(x.id);
    for (std::size_t i = 0; i < C * HW; ++i) {
      gx.re()[i] += g.re()[i];
      gx.im()[i] += g.re()[C * HW + i];
    }
  });
}

/// Nearest-neighbour x2 upsampling of a {C,H,W} tensor.
inline Var upsample2(Tape& t, Var x) {
  const Tensor& xv = t.value(x);
  detail::require_rank(xv, 3, "upsample2");
  const std::size_t C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
  Tensor out({C, 2 * H, 2 * W}, xv.is_complex());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t r = 0; r < 2 * H; ++r)
      for (std::size_t q = 0; q < 2 * W; ++q) {
        const std::size_t src = (c * H + r / 2) * W + q / 2;
        const std::size_t dst = (c * 2 * H + r) * 2 * W + q;
        out.re()[dst] = xv.re()[src];
        out.im()[dst] = xv.im()[src];
      }
  return t.push("upsample2", std::move(out), {x.id}, [x, C, H, W](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_buffer(self);
    Tensor& gx = tp.grad_buffer(x.id);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t r = 0; r < 2 * H; ++r)
        for (std::size_t q = 0; q < 2 * W; ++q) {
          const std::size_t src = (c * H + r / 2) * W + q / 2;
          const std::size_t dst = (c * 2 * H + r) * 2 * W + q;
          gx.re()[src] += g.re()[dst];
          gx.im()[src] += g.im()[dst];
        }
  });
}

// ---------------------------------------------------------------------------
// Convolution

struct ConvGeometry {
  std::size_t stride = 1;
  std::size_t pad = 0;
  std::size_t groups = 1;
};

namespace detail {

struct ConvDims {
  std::size_t ci, h, w, co, cig, k, ho, wo, stride, pad, groups;
};

inline ConvDims conv_dims(const Tensor& x, const Tensor& w, const ConvGeometry& g) {
  require_rank(x, 3, "conv2d input");
  require_rank(w, 4, "conv2d weight");
  ConvDims d{};
  d.ci = x.dim(0);
  d.h = x.dim(1);
  d.w = x.dim(2);
  d.co = w.dim(0);
  d.cig = w.dim(1);
  d.k = w.dim(2);
  d.stride = g.stride;
  d.pad = g.pad;
  d.groups = g.groups;
  if (w.dim(3) != d.k) throw DimensionError("conv2d: kernel must be square");
  if (g.groups < 1 || d.ci % g.groups || d.co % g.groups || d.cig * g.groups != d.ci)
    throw DimensionError("conv2d: input has " + std::to_string(d.ci) + " channels, weight " +
                         cgh::detail::join_dims(w.shape()) + " with groups=" +
                         std::to_string(g.groups));
  if (d.h + 2 * d.pad < d.k || d.w + 2 * d.pad < d.k)
    throw DimensionError("conv2d: kernel larger than padded input");
  d.ho = (d.h + 2 * d.pad - d.k) / d.stride + 1;
  d.wo = (d.w + 2 * d.pad - d.k) / d.stride + 1;
  return d;
}

// Range [lo, hi) of output indices o whose input index o*s + kk - p is in [0, n).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t n, std::size_t no,
                                                       std::size_t kk, std::size_t s,
                                                       std::size_t p) {
  const long lo_num = long(p) - long(kk);
  long lo = lo_num <= 0 ? 0 : (lo_num + long(s) - 1) / long(s);
  const long hi_num = long(n) - 1 + long(p) - long(kk);
  long hi = hi_num < 0 ? 0 : hi_num / long(s) + 1;
  lo = std::min<long>(lo, long(no));
  hi = std::clamp<long>(hi, lo, long(no));
  return {std::size_t(lo), std::size_t(hi)};
}

// Visits every (output row/col span, input row/col start) pairing of one
// kernel tap. fn(out_offset, in_offset, count, in_step) for each output row.
template <typename Fn>
inline void for_each_tap_row(const ConvDims& d, std::size_t ky, std::size_t kx, Fn&& fn) {
  const auto [oy0, oy1] = valid_range(d.h, d.ho, ky, d.stride, d.pad);
  const auto [ox0, ox1] = valid_range(d.w, d.wo, kx, d.stride, d.pad);
  if (ox1 <= ox0) return;
  for (std::size_t oy = oy0; oy < oy1; ++oy) {
    const std::size_t iy = oy * d.stride + ky - d.pad;
    const std::size_t ix0 = ox0 * d.stride + kx - d.pad;
    fn(oy * d.wo + ox0, iy * d.w + ix0, ox1 - ox0);
  }
}

inline void conv_forward(const ConvDims& d, const Tensor& x, const Tensor& w, Tensor& out) {
  const std::size_t cog = d.co / d.groups;
  const std::size_t in_plane = d.h * d.w, out_plane = d.ho * d.wo;
  const bool pointwise = d.k == 1 && d.stride == 1 && d.pad == 0;
  for (std::size_t co = 0; co < d.co; ++co) {
    const std::size_t grp = co / cog;
    double* __restrict orr = out.re_data() + co * out_plane;
    double* __restrict oi = out.im_data() + co * out_plane;
    for (std::size_t cl = 0; cl < d.cig; ++cl) {
      const std::size_t ci = grp * d.cig + cl;
      const double* __restrict xr = x.re_data() + ci * in_plane;
      const double* __restrict xi = x.im_data() + ci * in_plane;
      for (std::size_t ky = 0; ky < d.k; ++ky)
        for (std::size_t kx = 0; kx < d.k; ++kx) {
          const std::size_t widx = ((co * d.cig + cl) * d.k + ky) * d.k + kx;
          const double a = w.re()[widx], b = w.im()[widx];
          if (pointwise) {
            for (std::size_t p = 0; p < in_plane; ++p) {
              orr[p] += a * xr[p] - b * xi[p];
              oi[p] += a * xi[p] + b * xr[p];
            }
            continue;
          }
          const std::size_t s = d.stride;
          for_each_tap_row(d, ky, kx, [&](std::size_t o, std::size_t in, std::size_t n) {
            if (s == 1) {
              for (std::size_t j = 0; j < n; ++j) {
                orr[o + j] += a * xr[in + j] - b * xi[in + j];
                oi[o + j] += a * xi[in + j] + b * xr[in + j];
              }
            } else {
              for (std::size_t j = 0; j < n; ++j) {
                orr[o + j] += a * xr[in + j * s] - b * xi[in + j * s];
                oi[o + j] += a * xi[in + j * s] + b * xr[in + j * s];
              }
            }
          });
        }
    }
  }
}

inline void conv_backward(const ConvDims& d, const Tensor& x, const Tensor& w, const Tensor& g,
                          Tensor* gx, Tensor* gw) {
  const std::size_t cog = d.co / d.groups;
  const std::size_t in_plane = d.h * d.w, out_plane = d.ho * d.wo;
  const bool pointwise = d.k == 1 && d.stride == 1 && d.pad == 0;
  const std::size_t s = d.stride;
  for (std::size_t co = 0; co < d.co; ++co) {
    const std::size_t grp = co / cog;
    const double* __restrict gr = g.re_data() + co * out_plane;
    const double* __restrict gi = g.im_data() + co * out_plane;
    for (std::size_t cl = 0; cl < d.cig; ++cl) {
      const std::size_t ci = grp * d.cig + cl;
      const double* __restrict xr = x.re_data() + ci * in_plane;
      const double* __restrict xi = x.im_data() + ci * in_plane;
      double* gxr = gx ? gx->re_data() + ci * in_plane : nullptr;
      double* gxi = gx ? gx->im_data() + ci * in_plane : nullptr;
      for (std::size_t ky = 0; ky < d.k; ++ky)
        for (std::size_t kx = 0; kx < d.k; ++kx) {
          const std::size_t widx = ((co * d.cig + cl) * d.k + ky) * d.k + kx;
          const double a = w.re()[widx], b = w.im()[widx];
          double sr = 0.0, si = 0.0;
          auto row = [&](std::size_t o, std::size_t in, std::size_t n, std::size_t step) {
            if (gx) {
              for (std::size_t j = 0; j < n; ++j) {
                gxr[in + j * step] += a * gr[o + j] + b * gi[o + j];
                gxi[in + j * step] += a * gi[o + j] - b * gr[o + j];
              }
            }
            if (gw) {
              double pr = 0.0, pi = 0.0;
              for (std::size_t j = 0; j < n; ++j) {
                pr += xr[in + j * step] * gr[o + j] + xi[in + j * step] * gi[o + j];
                pi += xr[in + j * step] * gi[o + j] - xi[in + j * step] * gr[o + j];
              }
              sr += pr;
              si += pi;
            }
          };
          if (pointwise)
            row(0, 0, in_plane, 1);
          else
            for_each_tap_row(d, ky, kx, [&](std::size_t o, std::size_t in, std::size_t n) {
              if (s == 1)
                row(o, in, n, 1);
              else
                row(o, in, n, s);
            });
          if (gw) {
            gw->re()[widx] += sr;
            gw->im()[widx] += si;
          }
        }
    }
  }
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

inline bool is_pointwise(const ConvDims& d) { return d.k == 1 && d.stride == 1 && d.pad == 0; }

// Few output channels make the GEMM a GEMV over a large column buffer; the
// direct loops are faster there and for grouped kernels.
inline bool use_gemm(const ConvDims& d) { return d.groups == 1 && d.co >= 8; }

// Unfolds one plane set {Ci,H,W} into columns {Ci*k*k, Ho*Wo}.
inline void im2col(const ConvDims& d, const double* src, double* col) {
  const std::size_t P = d.ho * d.wo;
  for (std::size_t ci = 0; ci < d.ci; ++ci)
    for (std::size_t ky = 0; ky < d.k; ++ky)
      for (std::size_t kx = 0; kx < d.k; ++kx) {
        double* row = col + ((ci * d.k + ky) * d.k + kx) * P;
        std::fill(row, row + P, 0.0);
        const double* plane = src + ci * d.h * d.w;
        for_each_tap_row(d, ky, kx, [&](std::size_t o, std::size_t in, std::size_t n) {
          for (std::size_t j = 0; j < n; ++j) row[o + j] = plane[in + j * d.stride];
        });
      }
}

inline void col2im_add(const ConvDims& d, const double* col, double* dst) {
  const std::size_t P = d.ho * d.wo;
  for (std::size_t ci = 0; ci < d.ci; ++ci)
    for (std::size_t ky = 0; ky < d.k; ++ky)
      for (std::size_t kx = 0; kx < d.k; ++kx) {
        const double* row = col + ((ci * d.k + ky) * d.k + kx) * P;
        double* plane = dst + ci * d.h * d.w;
        for_each_tap_row(d, ky, kx, [&](std::size_t o, std::size_t in, std::size_t n) {
          for (std::size_t j = 0; j < n; ++j) plane[in + j * d.stride] += row[o + j];
        });
      }
}

// Dense (groups == 1) convolution as complex GEMM: out = W * cols.
inline void conv_forward_gemm(const ConvDims& d, const Tensor& x, const Tensor& w, Tensor& out) {
  const Eigen::Index K = Eigen::Index(d.ci * d.k * d.k), P = Eigen::Index(d.ho * d.wo),
                     M = Eigen::Index(d.co);
  std::vector<double> cr, ci;
  const double* xr = x.re_data();
  const double* xi = x.im_data();
  if (!is_pointwise(d)) {
    cr.resize(std::size_t(K * P));
    ci.resize(std::size_t(K * P));
    im2col(d, x.re_data(), cr.data());
    im2col(d, x.im_data(), ci.data());
    xr = cr.data();
    xi = ci.data();
  }
  ConstMap Xr(xr, K, P), Xi(xi, K, P), Wr(w.re_data(), M, K), Wi(w.im_data(), M, K);
  MutMap Or(out.re_data(), M, P), Oi(out.im_data(), M, P);
  Or.noalias() += Wr * Xr;
  if (w.is_complex() && x.is_complex()) Or.noalias() -= Wi * Xi;
  if (x.is_complex()) Oi.noalias() += Wr * Xi;
  if (w.is_complex()) Oi.noalias() += Wi * Xr;
}

inline void conv_backward_gemm(const ConvDims& d, const Tensor& x, const Tensor& w, const Tensor& g,
                               Tensor* gx, Tensor* gw) {
  const Eigen::Index K = Eigen::Index(d.ci * d.k * d.k), P = Eigen::Index(d.ho * d.wo),
                     M = Eigen::Index(d.co);
  ConstMap Gr(g.re_data(), M, P), Gi(g.im_data(), M, P);
  const bool pw = is_pointwise(d);
  if (gw) {
    std::vector<double> cr, ci;
    const double* xr = x.re_data();
    const double* xi = x.im_data();
    if (!pw) {
      cr.resize(std::size_t(K * P));
      ci.resize(std::size_t(K * P));
      im2col(d, x.re_data(), cr.data());
      im2col(d, x.im_data(), ci.data());
      xr = cr.data();
      xi = ci.data();
    }
    ConstMap Xr(xr, K, P), Xi(xi, K, P);
    MutMap Br(gw->re_data(), M, K), Bi(gw->im_data(), M, K);
    // gw = g * conj(cols)^T
    Br.noalias() += Gr * Xr.transpose();
    Br.noalias() += Gi * Xi.transpose();
    if (gw->is_complex()) {
      Bi.noalias() += Gi * Xr.transpose();
      Bi.noalias() -= Gr * Xi.transpose();
    }
  }
  if (gx) {
    ConstMap Wr(w.re_data(), M, K), Wi(w.im_data(), M, K);
    // gcols = W^H * g
    RowMat Cr = Wr.transpose() * Gr;
    Cr.noalias() += Wi.transpose() * Gi;
    RowMat Ci = Wr.transpose() * Gi;
    Ci.noalias() -= Wi.transpose() * Gr;
    if (pw) {
      MutMap(gx->re_data(), K, P) += Cr;
      MutMap(gx->im_data(), K, P) += Ci;
    } else {
      col2im_add(d, Cr.data(), gx->re_data());
      col2im_add(d, Ci.data(), gx->im_data());
    }
  }
}

}  // namespace detail

/// Complex 2-D convolution (cross-correlation) with zero padding:
/// out[co] = sum_ci w[co, ci] * x[ci] (+ bias[co]), (a+ib)(u+iv) = (au-bv) + i(av+bu).
/// x {Ci,H,W}, w {Co,Ci/groups,k,k}, bias {Co} or invalid Var.
inline Var conv2d(Tape& t, Var x, Var w, Var bias, ConvGeometry geom) {
  const Tensor& xv = t.value(x);
  const Tensor& wv = t.value(w);
  const detail::ConvDims d = detail::conv_dims(xv, wv, geom);
  const bool cplx_out = xv.is_complex() || wv.is_complex() ||
                        (bias.valid() && t.value(bias).is_complex());
  Tensor out({d.co, d.ho, d.wo}, cplx_out);
  if (detail::use_gemm(d))
    detail::conv_forward_gemm(d, xv, wv, out);
  else
    detail::conv_forward(d, xv, wv, out);
  std::vector<std::size_t> inputs{x.id, w.id};
  if (bias.valid()) {
    const Tensor& bv = t.value(bias);
    if (bv.size() != d.co) throw DimensionError("conv2d: bias size must equal output channels");
    const std::size_t plane = d.ho * d.wo;
    for (std::size_t c = 0; c < d.co; ++c)
      for (std::size_t p = 0; p < plane; ++p) {
        out.re()[c * plane + p] += bv.re()[c];
        out.im()[c * plane + p] += bv.im()[c];
      }
    inputs.push_back(bias.id);
  }
  return t.push("conv2d", std::move(out), std::move(inputs), [x, w, bias, d](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_buffer(self);
    Tensor* gx = detail::wants(tp, x.id) ? &tp.grad_buffer(x.id) : nullptr;
    Tensor* gw = detail::wants(tp, w.id) ? &tp.grad_buffer(w.id) : nullptr;
    if (detail::use_gemm(d))
      detail::conv_backward_gemm(d, tp.node_value(x.id), tp.node_value(w.id), g, gx, gw);
    else
      detail::conv_backward(d, tp.node_value(x.id), tp.node_value(w.id), g, gx, gw);
    if (bias.valid() && detail::wants(tp, bias.id)) {
      Tensor& gb = tp.grad_buffer(bias.id);
      const std::size_t plane = d.ho * d.wo;
      for (std::size_t c = 0; c < d.co; ++c)
        for (std::size_t p = 0; p < plane; ++p) {
          gb.re()[c] += g.re()[c * plane + p];
          gb.im()[c] += g.im()[c * plane + p];
        }
    }
  });
}

inline Var conv2d(Tape& t, Var x, Var w, ConvGeometry geom) { return conv2d(t, x, w, Var{}, geom); }

// ---------------------------------------------------------------------------
// Normalisation

/// Complex layer norm across channels at every location of a {C,H,W} tensor.
/// gamma, beta: complex {C}.
inline Var complex_layer_norm(Tape& t, Var x, Var gamma, Var beta, double eps = kLayerNormEps) {
  const Tensor& xv = t.value(x);
  detail::require_rank(xv, 3, "complex_layer_norm");
  const std::size_t C = xv.dim(0), HW = xv.dim(1) * xv.dim(2);
  const Tensor& gv = t.value(gamma);
  const Tensor& bv = t.value(beta);
  if (gv.size() != C || bv.size() != C)
    throw DimensionError("complex_layer_norm: affine size does not match channels");
  Tensor normed(xv.shape());
  std::vector<double> inv(HW);
  for (std::size_t p = 0; p < HW; ++p) {
    double mr = 0.0, mi = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      mr += xv.re()[c * HW + p];
      mi += xv.im()[c * HW + p];
    }
    mr /= double(C);
    mi /= double(C);
    double var = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      const double dr = xv.re()[c * HW + p] - mr, di = xv.im()[c * HW + p] - mi;
      var += dr * dr + di * di;
    }
    inv[p] = 1.0 / std::sqrt(var / double(C) + eps);
    for (std::size_t c = 0; c < C; ++c) {
      normed.re()[c * HW + p] = (xv.re()[c * HW + p] - mr) * inv[p];
      normed.im()[c * HW + p] = (xv.im()[c * HW + p] - mi) * inv[p];
    }
  }
  Tensor out(xv.shape());
  for (std::size_t c = 0; c < C; ++c) {
    const double gr = gv.re()[c], gi = gv.im()[c], br = bv.re()[c], bi = bv.im()[c];
    for (std::size_t p = 0; p < HW; ++p) {
      const double nr = normed.re()[c * HW + p], ni = normed.im()[c * HW + p];
      out.re()[c * HW + p] = gr * nr - gi * ni + br;
      out.im()[c * HW + p] = gr * ni + gi * nr + bi;
    }
  }
  auto saved = std::make_shared<std::pair<Tensor, std::vector<double>>>(std::move(normed), std::move(inv));
  return t.push("complex_layer_norm", std::move(out), {x.id, gamma.id, beta.id},
                [x, gamma, beta, C, HW, saved](Tape& tp, std::size_t self) {
                  const Tensor& g = tp.grad_buffer(self);
                  const Tensor& n = saved->first;
                  const auto& inv = saved->second;
                  const Tensor& gv = tp.node_value(gamma.id);
                  if (detail::wants(tp, gamma.id) || detail::wants(tp, beta.id)) {
                    Tensor* gg = detail::wants(tp, gamma.id) ? &tp.grad_buffer(gamma.id) : nullptr;
                    Tensor* gb = detail::wants(tp, beta.id) ? &tp.grad_buffer(beta.id) : nullptr;
                    for (std::size_t c = 0; c < C; ++c) {
                      double sgr = 0, sgi = 0, sbr = 0, sbi = 0;
                      for (std::size_t p = 0; p < HW; ++p) {
                        const std::size_t i = c * HW + p;
                        // conj(n) * g
                        sgr += n.re()[i] * g.re()[i] + n.im()[i] * g.im()[i];
                        sgi += n.re()[i] * g.im()[i] - n.im()[i] * g.re()[i];
                        sbr += g.re()[i];
                        sbi += g.im()[i];
                      }
                      if (gg) {
                        gg->re()[c] += sgr;
                        gg->im()[c] += sgi;
                      }
                      if (gb) {
                        gb->re()[c] += sbr;
                        gb->im()[c] += sbi;
                      }
                    }
                  }
                  if (!detail::wants(tp, x.id)) return;
                  Tensor& gx = tp.grad_buffer(x.id);
                  std::vector<double> gnr(C), gni(C);
                  for (std::size_t p = 0; p < HW; ++p) {
                    double a = 0.0, mr = 0.0, mi = 0.0;
                    for (std::size_t c = 0; c < C; ++c) {
                      const std::size_t i = c * HW + p;
                      // g_n = conj(gamma) * g
                      gnr[c] = gv.re()[c] * g.re()[i] + gv.im()[c] * g.im()[i];
                      gni[c] = gv.re()[c] * g.im()[i] - gv.im()[c] * g.re()[i];
                      a += gnr[c] * n.re()[i] + gni[c] * n.im()[i];
                    }
                    a /= double(C);
                    for (std::size_t c = 0; c < C; ++c) {
                      const std::size_t i = c * HW + p;
                      gnr[c] = inv[p] * (gnr[c] - a * n.re()[i]);
                      gni[c] = inv[p] * (gni[c] - a * n.im()[i]);
                      mr += gnr[c];
                      mi += gni[c];
                    }
                    mr /= double(C);
                    mi /= double(C);
                    for (std::size_t c = 0; c < C; ++c) {
                      const std::size_t i = c * HW + p;
                      gx.re()[i] += gnr[c] - mr;
                      gx.im()[i] += gni[c] - mi;
                    }
                  }
                });
}

/// Real layer norm across channels at every location of a real {C,H,W} tensor.
inline Var layer_norm(Tape& t, Var x, Var gamma, Var beta, double eps = kLayerNormEps) {
  const Tensor& xv = t.value(x);
  detail::require_rank(xv, 3, "layer_norm");
  const std::size_t C = xv.dim(0), HW = xv.dim(1) * xv.dim(2);
  const Tensor& gv = t.value(gamma);
  const Tensor& bv = t.value(beta);
  if (gv.size() != C || bv.size() != C)
    throw DimensionError("layer_norm: affine size does not match channels");
  Tensor normed = Tensor::real(xv.shape());
  std::vector<double> inv(HW);
  for (std::size_t p = 0; p < HW; ++p) {
    double m = 0.0;
    for (std::size_t c = 0; c < C; ++c) m += xv.re()[c * HW + p];
    m /= double(C);
    double var = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      const double dv = xv.re()[c * HW + p] - m;
      var += dv * dv;
    }
    inv[p] = 1.0 / std::sqrt(var / double(C) + eps);
    for (std::size_t c = 0; c < C; ++c) normed.re()[c * HW + p] = (xv.re()[c * HW + p] - m) * inv[p];
  }
  Tensor out = Tensor::real(xv.shape());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t p = 0; p < HW; ++p)
      out.re()[c * HW + p] = gv.re()[c] * normed.re()[c * HW + p] + bv.re()[c];
  auto saved = std::make_shared<std::pair<Tensor, std::vector<double>>>(std::move(normed), std::move(inv));
  return t.push("layer_norm", std::move(out), {x.id, gamma.id, beta.id},
                [x, gamma, beta, C, HW, saved](Tape& tp, std::size_t self) {
                  const Tensor& g = tp.grad_buffer(self);
                  const Tensor& n = saved->first;
                  const auto& inv = saved->second;
                  const Tensor& gv = tp.node_value(gamma.id);
                  if (detail::wants(tp, gamma.id) || detail::wants(tp, beta.id)) {
                    Tensor* gg = detail::wants(tp, gamma.id) ? &tp.grad_buffer(gamma.id) : nullptr;
                    Tensor* gb = detail::wants(tp, beta.id) ? &tp.grad_buffer(beta.id) : nullptr;
                    for (std::size_t c = 0; c < C; ++c) {
                      double sg = 0.0, sb = 0.0;
                      for (std::size_t p = 0; p < HW; ++p) {
                        sg += g.re()[c * HW + p] * n.re()[c * HW + p];
                        sb += g.re()[c * HW + p];
                      }
                      if (gg) gg->re()[c] += sg;
                      if (gb) gb->re()[c] += sb;
                    }
                  }
                  if (!detail::wants(tp, x.id)) return;
                  Tensor& gx = tp.grad_buffer(x.id);
                  std::vector<double> gn(C);
                  for (std::size_t p = 0; p < HW; ++p) {
                    double mg = 0.0, mgn = 0.0;
                    for (std::size_t c = 0; c < C; ++c) {
                      gn[c] = gv.re()[c] * g.re()[c * HW + p];
                      mg += gn[c];
                      mgn += gn[c] * n.re()[c * HW + p];
                    }
                    mg /= double(C);
                    mgn /= double(C);
                    for (std::size_t c = 0; c < C; ++c)
                      gx.re()[c * HW + p] += inv[p] * (gn[c] - mg - n.re()[c * HW + p] * mgn);
                  }
                });
}

// ---------------------------------------------------------------------------
// Deformable sampling and attention

/// Reference point of cell (i, j) for a feature map downsampled by `stride`:
/// the centre of the stride x stride cell.
inline double reference_coordinate(std::size_t i, std::size_t stride) {
  return double(i * stride) + 0.5 * double(stride - 1);
}

namespace detail {

struct KeyGeometry {
  std::size_t H, W, h, w, stride_r, stride_c;
};

inline KeyGeometry key_geometry(const Tensor& offsets, std::size_t H, std::size_t W) {
  require_rank(offsets, 3, "deformable offsets");
  if (offsets.dim(0) != 2) throw DimensionError("offsets must have 2 channels (drow, dcol)");
  KeyGeometry k{H, W, offsets.dim(1), offsets.dim(2), 0, 0};
  if (k.h == 0 || k.w == 0 || H % k.h || W % k.w)
    throw DimensionError("offset grid " + std::to_string(k.h) + "x" + std::to_string(k.w) +
                         " does not tile feature map " + std::to_string(H) + "x" + std::to_string(W));
  k.stride_r = H / k.h;
  k.stride_c = W / k.w;
  return k;
}

/// Unclamped deformed key position j = (i, jj) in feature-map pixels.
inline std::pair<double, double> key_position(const Tensor& offsets, const KeyGeometry& g,
                                              std::size_t j) {
  const std::size_t i = j / g.w, jj = j % g.w;
  return {reference_coordinate(i, g.stride_r) + offsets.re()[j],
          reference_coordinate(jj, g.stride_c) + offsets.re()[g.h * g.w + j]};
}

}  // namespace detail

/// Samples f {C,H,W} at reference + offset positions (offsets real {2,h,w}),
/// giving {C,h,w}. Positions are clamped to the map.
inline Var deform_sample(Tape& t, Var f, Var offsets) {
  const Tensor& fv = t.value(f);
  detail::require_rank(fv, 3, "deform_sample");
  const std::size_t C = fv.dim(0), H = fv.dim(1), W = fv.dim(2);
  const Tensor& ov = t.value(offsets);
  const detail::KeyGeometry kg = detail::key_geometry(ov, H, W);
  const std::size_t NK = kg.h * kg.w;
  std::vector<BilinearTap> taps(NK);
  Tensor out({C, kg.h, kg.w}, fv.is_complex());
  for (std::size_t j = 0; j < NK; ++j) {
    const auto [r, c] = detail::key_position(ov, kg, j);
    taps[j] = bilinear_tap(r, c, H, W);
    const BilinearTap& tp = taps[j];
    for (std::size_t ch = 0; ch < C; ++ch) {
      const std::size_t b = ch * H * W;
      const std::size_t i00 = b + tp.r0 * W + tp.c0, i01 = b + tp.r0 * W + tp.c1;
      const std::size_t i10 = b + tp.r1 * W + tp.c0, i11 = b + tp.r1 * W + tp.c1;
      out.re()[ch * NK + j] = tp.w00() * fv.re()[i00] + tp.w01() * fv.re()[i01] +
                              tp.w10() * fv.re()[i10] + tp.w11() * fv.re()[i11];
      out.im()[ch * NK + j] = tp.w00() * fv.im()[i00] + tp.w01() * fv.im()[i01] +
                              tp.w10() * fv.im()[i10] + tp.w11() * fv.im()[i11];
    }
  }
  return t.push("deform_sample", std::move(out), {f.id, offsets.id},
                [f, offsets, C, H, W, NK, kg, taps = std::move(taps)](Tape& tp, std::size_t self) {
                  const Tensor& g = tp.grad_buffer(self);
                  const Tensor& fv = tp.node_value(f.id);
                  Tensor* gf = detail::wants(tp, f.id) ? &tp.grad_buffer(f.id) : nullptr;
                  Tensor* go = detail::wants(tp, offsets.id) ? &tp.grad_buffer(offsets.id) : nullptr;
                  for (std::size_t j = 0; j < NK; ++j) {
                    const BilinearTap& q = taps[j];
                    double d_row = 0.0, d_col = 0.0;
                    for (std::size_t ch = 0; ch < C; ++ch) {
                      const std::size_t b = ch * H * W;
                      const std::size_t i00 = b + q.r0 * W + q.c0, i01 = b + q.r0 * W + q.c1;
                      const std::size_t i10 = b + q.r1 * W + q.c0, i11 = b + q.r1 * W + q.c1;
                      const double gr = g.re()[ch * NK + j], gi = g.im()[ch * NK + j];
                      if (gf) {
                        gf->re()[i00] += q.w00() * gr;
                        gf->im()[i00] += q.w00() * gi;
                        gf->re()[i01] += q.w01() * gr;
                        gf->im()[i01] += q.w01() * gi;
                        gf->re()[i10] += q.w10() * gr;
                        gf->im()[i10] += q.w10() * gi;
                        gf->re()[i11] += q.w11() * gr;
                        gf->im()[i11] += q.w11() * gi;
                      }
                      if (go) {
                        // d sample / d row and d col, contracted with Re(conj(g) * .)
                        const cplx v00 = fv.get(i00), v01 = fv.get(i01), v10 = fv.get(i10),
                                   v11 = fv.get(i11);
                        const cplx dr = (1.0 - q.fc) * (v10 - v00) + q.fc * (v11 - v01);
                        const cplx dc = (1.0 - q.fr) * (v01 - v00) + q.fr * (v11 - v10);
                        d_row += gr * dr.real() + gi * dr.imag();
                        d_col += gr * dc.real() + gi * dc.imag();
                      }
                    }
                    if (go) {
                      if (!q.row_clamped && q.r1 != q.r0) go->re()[j] += d_row;
                      if (!q.col_clamped && q.c1 != q.c0) go->re()[kg.h * kg.w + j] += d_col;
                    }
                  }
                });
}

/// B[i, j] = bilinear lookup into the real table T {Tr, Tc} at the
/// displacement between query location i of an H x W map and the deformed key
/// position j, normalised to [-1, 1] per axis and mapped onto the table.
inline Var relative_position_bias(Tape& t, Var offsets, Var table, std::size_t H, std::size_t W) {
  const Tensor& ov = t.value(offsets);
  const Tensor& tv = t.value(table);
  detail::require_rank(tv, 2, "relative_position_bias table");
  const detail::KeyGeometry kg = detail::key_geometry(ov, H, W);
  const std::size_t NQ = H * W, NK = kg.h * kg.w, TR = tv.dim(0), TC = tv.dim(1);
  const double sr = H > 1 ? double(TR - 1) / (2.0 * double(H - 1)) : 0.0;
  const double sc = W > 1 ? double(TC - 1) / (2.0 * double(W - 1)) : 0.0;
  struct Key {
    double r, c;
    bool free_r, free_c;
  };
  std::vector<Key> keys(NK);
  for (std::size_t j = 0; j < NK; ++j) {
    const auto [r, c] = detail::key_position(ov, kg, j);
    keys[j] = {std::clamp(r, 0.0, double(H - 1)), std::clamp(c, 0.0, double(W - 1)),
               r >= 0.0 && r <= double(H - 1), c >= 0.0 && c <= double(W - 1)};
  }
  auto table_tap = [=](std::size_t i, const Key& k) {
    const double qr = double(i / W), qc = double(i % W);
    const double tr = (qr - k.r) * sr + 0.5 * double(TR - 1);
    const double tc = (qc - k.c) * sc + 0.5 * double(TC - 1);
    return bilinear_tap(tr, tc, TR, TC);
  };
  Tensor out = Tensor::real({NQ, NK});
  for (std::size_t i = 0; i < NQ; ++i)
    for (std::size_t j = 0; j < NK; ++j) {
      const BilinearTap q = table_tap(i, keys[j]);
      out.re()[i * NK + j] = q.w00() * tv.re()[q.r0 * TC + q.c0] + q.w01() * tv.re()[q.r0 * TC + q.c1] +
                             q.w10() * tv.re()[q.r1 * TC + q.c0] + q.w11() * tv.re()[q.r1 * TC + q.c1];
    }
  return t.push("relative_position_bias", std::move(out), {offsets.id, table.id},
                [offsets, table, NQ, NK, TC, sr, sc, kg, keys = std::move(keys), table_tap](
                    Tape& tp, std::size_t self) {
                  const Tensor& g = tp.grad_buffer(self);
                  const Tensor& tv = tp.node_value(table.id);
                  Tensor* gt = detail::wants(tp, table.id) ? &tp.grad_buffer(table.id) : nullptr;
                  Tensor* go = detail::wants(tp, offsets.id) ? &tp.grad_buffer(offsets.id) : nullptr;
                  for (std::size_t i = 0; i < NQ; ++i)
                    for (std::size_t j = 0; j < NK; ++j) {
                      const double gij = g.re()[i * NK + j];
                      const BilinearTap q = table_tap(i, keys[j]);
                      if (gt) {
                        gt->re()[q.r0 * TC + q.c0] += q.w00() * gij;
                        gt->re()[q.r0 * TC + q.c1] += q.w01() * gij;
                        gt->re()[q.r1 * TC + q.c0] += q.w10() * gij;
                        gt->re()[q.r1 * TC + q.c1] += q.w11() * gij;
                      }
                      if (go) {
                        const double t00 = tv.re()[q.r0 * TC + q.c0], t01 = tv.re()[q.r0 * TC + q.c1];
                        const double t10 = tv.re()[q.r1 * TC + q.c0], t11 = tv.re()[q.r1 * TC + q.c1];
                        const double d_tr = (1.0 - q.fc) * (t10 - t00) + q.fc * (t11 - t01);
                        const double d_tc = (1.0 - q.fr) * (t01 - t00) + q.fr * (t11 - t10);
                        // table coordinate decreases as the key moves: d tr / d key_r = -sr
                        if (keys[j].free_r && !q.row_clamped && q.r1 != q.r0)
                          go->re()[j] -= gij * d_tr * sr;
                        if (keys[j].free_c && !q.col_clamped && q.c1 != q.c0)
                          go->re()[kg.h * kg.w + j] -= gij * d_tc * sc;
                      }
                    }
                });
}

/// Attention weights A = softmax_j(Re<q_i, k_j> / sqrt(C) + B_ij) for q {C,NQ...},
/// k {C,NK...}, B real {NQ,NK}. Rows of A sum to one.
inline Tensor attention_weights(const Tensor& q, const Tensor& k, const Tensor& bias) {
  const std::size_t C = q.dim(0), NQ = q.size() / C, NK = k.size() / C;
  if (k.dim(0) != C) throw DimensionError("attention: query/key channel mismatch");
  if (bias.size() != NQ * NK)
    throw DimensionError("attention: bias must be " + std::to_string(NQ) + "x" + std::to_string(NK));
  const double scale = 1.0 / std::sqrt(double(C));
  Tensor a = Tensor::real({NQ, NK});
  std::vector<double> row(NK);
  for (std::size_t i = 0; i < NQ; ++i) {
    std::fill(row.begin(), row.end(), 0.0);
    for (std::size_t c = 0; c < C; ++c) {
      const double qr = q.re()[c * NQ + i], qi = q.im()[c * NQ + i];
      for (std::size_t j = 0; j < NK; ++j)
        row[j] += qr * k.re()[c * NK + j] + qi * k.im()[c * NK + j];
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < NK; ++j) {
      row[j] = row[j] * scale + bias.re()[i * NK + j];
      mx = std::max(mx, row[j]);
    }
    double s = 0.0;
    for (std::size_t j = 0; j < NK; ++j) {
      row[j] = std::exp(row[j] - mx);
      s += row[j];
    }
    for (std::size_t j = 0; j < NK; ++j) a.re()[i * NK + j] = row[j] / s;
  }
  return a;
}

/// out_i = sum_j A_ij v_j with A from attention_weights; output has q's shape.
inline Var attention(Tape& t, Var q, Var k, Var v, Var bias) {
  const Tensor& qv = t.value(q);
  const Tensor& kv = t.value(k);
  const Tensor& vv = t.value(v);
  if (kv.shape() != vv.shape()) throw DimensionError("attention: key/value shape mismatch");
  const std::size_t C = qv.dim(0), NQ = qv.size() / C, NK = kv.size() / C;
  auto A = std::make_shared<Tensor>(attention_weights(qv, kv, t.value(bias)));
  Tensor out(qv.shape());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < NQ; ++i) {
      double sr = 0.0, si = 0.0;
      const double* arow = A->re_data() + i * NK;
      for (std::size_t j = 0; j < NK; ++j) {
        sr += arow[j] * vv.re()[c * NK + j];
        si += arow[j] * vv.im()[c * NK + j];
      }
      out.re()[c * NQ + i] = sr;
      out.im()[c * NQ + i] = si;
    }
  return t.push("attention", std::move(out), {q.id, k.id, v.id, bias.id},
                [q, k, v, bias, C, NQ, NK, A](Tape& tp, std::size_t self) {
                  const Tensor& g = tp.grad_buffer(self);
                  const Tensor& qv = tp.node_value(q.id);
                  const Tensor& kv = tp.node_value(k.id);
                  const Tensor& vv = tp.node_value(v.id);
                  const double scale = 1.0 / std::sqrt(double(C));
                  if (detail::wants(tp, v.id)) {
                    Tensor& gv = tp.grad_buffer(v.id);
                    for (std::size_t c = 0; c < C; ++c)
                      for (std::size_t i = 0; i < NQ; ++i) {
                        const double gr = g.re()[c * NQ + i], gi = g.im()[c * NQ + i];
                        const double* arow = A->re_data() + i * NK;
                        for (std::size_t j = 0; j < NK; ++j) {
                          gv.re()[c * NK + j] += arow[j] * gr;
                          gv.im()[c * NK + j] += arow[j] * gi;
                        }
                      }
                  }
                  // dL/dA then through the softmax to dL/dS.
                  std::vector<double> gs(NQ * NK, 0.0);
                  for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t i = 0; i < NQ; ++i) {
                      const double gr = g.re()[c * NQ + i], gi = g.im()[c * NQ + i];
                      for (std::size_t j = 0; j < NK; ++j)
                        gs[i * NK + j] += gr * vv.re()[c * NK + j] + gi * vv.im()[c * NK + j];
                    }
                  for (std::size_t i = 0; i < NQ; ++i) {
                    const double* arow = A->re_data() + i * NK;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < NK; ++j) dot += arow[j] * gs[i * NK + j];
                    for (std::size_t j = 0; j < NK; ++j) gs[i * NK + j] = arow[j] * (gs[i * NK + j] - dot);
                  }
                  if (detail::wants(tp, bias.id)) {
                    Tensor& gb = tp.grad_buffer(bias.id);
                    for (std::size_t i = 0; i < NQ * NK; ++i) gb.re()[i] += gs[i];
                  }
                  if (detail::wants(tp, q.id)) {
                    Tensor& gq = tp.grad_buffer(q.id);
                    for (std::size_t c = 0; c < C; ++c)
                      for (std::size_t i = 0; i < NQ; ++i) {
                        double sr = 0.0, si = 0.0;
                        for (std::size_t j = 0; j < NK; ++j) {
                          sr += gs[i * NK + j] * kv.re()[c * NK + j];
                          si += gs[i * NK + j] * kv.im()[c * NK + j];
                        }
                        gq.re()[c * NQ + i] += sr * scale;
                        gq.im()[c * NQ + i] += si * scale;
                      }
                  }
                  if (detail::wants(tp, k.id)) {
                    Tensor& gk = tp.grad_buffer(k.id);
                    for (std::size_t c = 0; c < C; ++c)
                      for (std::size_t i = 0; i < NQ; ++i) {
                        const double qr = qv.re()[c * NQ + i] * scale, qi = qv.im()[c * NQ + i] * scale;
                        for (std::size_t j = 0; j < NK; ++j) {
                          gk.re()[c * NK + j] += gs[i * NK + j] * qr;
                          gk.im()[c * NK + j] += gs[i * NK + j] * qi;
                        }
                      }
                  }
                });
}

// ---------------------------------------------------------------------------
// Optics

/// Phi x (or Phi^H x when adjoint) for a {1,H,W} tensor.
inline Var propagate(Tape& t, Var x, const PropagationPlan& plan, bool adjoint = false) {
  const Tensor& xv = t.value(x);
  if (xv.size() != plan.rows() * plan.cols())
    throw DimensionError("propagate: tensor does not match plan dimensions");
  std::vector<cplx> buf(xv.size());
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = xv.get(i);
  cgh::detail::apply_kernel(buf, plan, adjoint);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < buf.size(); ++i) out.set(i, buf[i]);
  const PropagationPlan* p = &plan;
  return t.push(adjoint ? "adjoint_propagate" : "propagate", std::move(out), {x.id},
                [x, p, adjoint](Tape& tp, std::size_t self) {
                  const Tensor& g = tp.grad_buffer(self);
                  std::vector<cplx> buf(g.size());
                  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = g.get(i);
                  cgh::detail::apply_kernel(buf, *p, !adjoint);
                  Tensor& gx = tp.grad_buffer(x.id);
                  for (std::size_t i = 0; i < buf.size(); ++i) {
                    gx.re()[i] += buf[i].real();
                    gx.im()[i] += buf[i].imag();
                  }
                });
}

/// w = y * u/|u| - u: the image-plane residual whose back-propagation is the
/// fidelity descent direction. y is a constant real tensor of u's size.
inline Var amplitude_residual(Tape& t, Var u, Var y) {
  const Tensor& uv = t.value(u);
  const Tensor& yv = t.value(y);
  if (uv.size() != yv.size()) throw DimensionError("amplitude_residual: size mismatch");
  Tensor out(uv.shape());
  for (std::size_t i = 0; i < uv.size(); ++i) {
    const cplx z = uv.get(i);
    out.set(i, yv.re()[i] * unit_phase(z) - z);
  }
  return t.push("amplitude_residual", std::move(out), {u.id, y.id}, [u, y](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_buffer(self);
    const Tensor& uv = tp.node_value(u.id);
    const Tensor& yv = tp.node_value(y.id);
    Tensor* gu = detail::wants(tp, u.id) ? &tp.grad_buffer(u.id) : nullptr;
    Tensor* gy = detail::wants(tp, y.id) ? &tp.grad_buffer(y.id) : nullptr;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const cplx z = uv.get(i), gg = g.get(i);
      const double m = std::abs(z);
      const cplx p = unit_phase(z);
      if (gy) gy->re()[i] += (std::conj(gg) * p).real();
      if (!gu) continue;
      cplx d = -gg;
      if (m >= kMagnitudeGuard) d += (yv.re()[i] / m) * (gg - p * (std::conj(gg) * p).real());
      gu->re()[i] += d.real();
      gu->im()[i] += d.imag();
    }
  });
}

/// x / |x| (1 where |x| is below the guard).
inline Var phase_only(Tape& t, Var x) {
  const Tensor& xv = t.value(x);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out.set(i, unit_phase(xv.get(i)));
  return t.push("phase_only", std::move(out), {x.id}, [x](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_buffer(self);
    const Tensor& xv = tp.node_value(x.id);
    Tensor& gx = tp.grad_buffer(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const cplx z = xv.get(i), gg = g.get(i);
      const double m = std::abs(z);
      if (m < kMagnitudeGuard) continue;
      const cplx p = z / m;
      const cplx d = (gg - p * (std::conj(gg) * p).real()) / m;
      gx.re()[i] += d.real();
      gx.im()[i] += d.imag();
    }
  });
}

/// |x| as a real tensor; the subgradient at the guard uses phase factor 1.
inline Var magnitude(Tape& t, Var x) {
  const Tensor& xv = t.value(x);
  Tensor out = Tensor::real(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out.re()[i] = std::abs(xv.get(i));
  return t.push("magnitude", std::move(out), {x.id}, [x](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_buffer(self);
    const Tensor& xv = tp.node_value(x.id);
    Tensor& gx = tp.grad_buffer(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const cplx p = unit_phase(xv.get(i));
      gx.re()[i] += g.re()[i] * p.real();
      gx.im()[i] += g.re()[i] * p.imag();
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions (scalar outputs)

/// mean((r - y)^2) over real tensors.
inline Var mse(Tape& t, Var r, Var y) {
  const Tensor& rv = t.value(r);
  const Tensor& yv = t.value(y);
  if (rv.size() != yv.size()) throw DimensionError("mse: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < rv.size(); ++i) {
    const double d = rv.re()[i] - yv.re()[i];
    s += d * d;
  }
  Tensor out = Tensor::real({1});
  out.re()[0] = s / double(rv.size());
  return t.push("mse", std::move(out), {r.id, y.id}, [r, y](Tape& tp, std::size_t self) {
    const double g = tp.grad_buffer(self).re()[0];
    const Tensor& rv = tp.node_value(r.id);
    const Tensor& yv = tp.node_value(y.id);
    const double k = 2.0 * g / double(rv.size());
    if (detail::wants(tp, r.id)) {
      Tensor& gr = tp.grad_buffer(r.id);
      for (std::size_t i = 0; i < rv.size(); ++i) gr.re()[i] += k * (rv.re()[i] - yv.re()[i]);
    }
    if (detail::wants(tp, y.id)) {
      Tensor& gy = tp.grad_buffer(y.id);
      for (std::size_t i = 0; i < rv.size(); ++i) gy.re()[i] -= k * (rv.re()[i] - yv.re()[i]);
    }
  });
}

/// sum |x|^2.
inline Var squared_norm(Tape& t, Var x) {
  const Tensor& xv = t.value(x);
  double s = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) s += xv.re()[i] * xv.re()[i] + xv.im()[i] * xv.im()[i];
  Tensor out = Tensor::real({1});
  out.re()[0] = s;
  return t.push("squared_norm", std::move(out), {x.id}, [x](Tape& tp, std::size_t self) {
    const double g = tp.grad_buffer(self).re()[0];
    const Tensor& xv = tp.node_value(x.id);
    Tensor& gx = tp.grad_buffer(x.id);
    for (std::size_t i = 0; i < xv.size(); ++i) {
      gx.re()[i] += 2.0 * g * xv.re()[i];
      gx.im()[i] += 2.0 * g * xv.im()[i];
    }
  });
}

/// Re(sum conj(c) * x) for a constant weighting c: a generic real projection
/// used to reduce tensor-valued ops to a scalar in gradient checks.
inline Var real_projection(Tape& t, Var x, Tensor weights) {
  const Tensor& xv = t.value(x);
  if (weights.size() != xv.size()) throw DimensionError("real_projection: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i)
    s += weights.re()[i] * xv.re()[i] + weights.im()[i] * xv.im()[i];
  Tensor out = Tensor::real({1});
  out.re()[0] = s;
  auto w = std::make_shared<Tensor>(std::move(weights));
  return t.push("real_projection", std::move(out), {x.id}, [x, w](Tape& tp, std::size_t self) {
    const double g = tp.grad_buffer(self).re()[0];
    Tensor& gx = tp.grad_buffer(x.id);
    for (std::size_t i = 0; i < gx.size(); ++i) {
      gx.re()[i] += g * w->re()[i];
      gx.im()[i] += g * w->im()[i];
    }
  });
}

}  // namespace cgh::ad
