#pragma once

// Reverse-mode differentiation over complex tensors.
//
// Gradient convention: for every tensor t the tape accumulates
//   grad(t) = dL/dRe(t) + i dL/dIm(t) = 2 dL/d conj(t),
// the steepest-ascent direction of the real loss L. For a holomorphic map
// y = A x this gives grad(x) = A^H grad(y). Real-valued tensors keep only the
// real part of their gradient.

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cgh/error.hpp"
#include "cgh/propagation.hpp"
#include "cgh/tensor.hpp"

namespace cgh::ad {

struct Var {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
  std::size_t id = npos;
  bool valid() const noexcept { return id != npos; }
};

class Tape;
using BackwardFn = std::function<void(Tape&, std::size_t)>;

class Tape {
 public:
  /// A non-recording tape evaluates forward values only.
  explicit Tape(bool record = true) : record_(record) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return record_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var leaf(Tensor value, bool requires_grad = false) {
    nodes_.push_back(Node{"leaf", std::move(value), {}, record_ && requires_grad, true, {}, {}});
    return Var{nodes_.size() - 1};
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  std::string_view op(Var v) const { return nodes_.at(v.id).op; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  /// Gradient accumulated by backward(); zeros when none reached this node.
  Tensor grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (!n.grad.empty()) return n.grad;
    Tensor z(n.value.shape(), n.value.is_complex());
    return z;
  }

  /// Records an op node. A backward rule is attached only when some input
  /// requires a gradient; pass an empty BackwardFn to model an op without one.
  Var push(std::string_view op, Tensor value, std::vector<std::size_t> inputs, BackwardFn fn) {
    bool rg = false;
    if (record_)
      for (auto i : inputs) rg = rg || nodes_.at(i).requires_grad;
    Node n{op, std::move(value), {}, rg, false, rg ? std::move(inputs) : std::vector<std::size_t>{},
           rg ? std::move(fn) : BackwardFn{}};
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  /// Accumulation buffer for node id (allocated on first use).
  Tensor& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor(n.value.shape(), n.value.is_complex());
    return n.grad;
  }
  const Tensor& node_value(std::size_t id) const { return nodes_[id].value; }
  bool node_requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }

  /// Seeds dL/dL = 1 and runs every backward rule in reverse recording order.
  void backward(Var loss) {
    if (!record_) throw ConfigError("backward on a non-recording tape");
    const Tensor& lv = value(loss);
    if (lv.size() != 1) throw DimensionError("backward: loss must be a scalar");
    if (lv.im()[0] != 0.0) throw ConfigError("backward: loss must be real");
    if (!nodes_[loss.id].requires_grad) return;
    grad_buffer(loss.id).re()[0] = 1.0;
    for (std::size_t k = loss.id + 1; k-- > 0;) {
      Node& n = nodes_[k];
      if (n.is_leaf || !n.requires_grad || n.grad.empty()) continue;
      if (!n.backward)
        throw ConfigError("no backward rule registered for op '" + std::string(n.op) + "'");
      n.backward(*this, k);
      for (auto in : n.inputs) {
        Node& src = nodes_[in];
        if (!src.grad.empty() && !src.value.is_complex()) src.grad.fill_zero_imag();
      }
    }
  }

 private:
  struct Node {
    std::string_view op;
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool is_leaf = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };

  bool record_;
  std::vector<Node> nodes_;
};

}  // namespace cgh::ad
