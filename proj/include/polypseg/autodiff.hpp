#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "polypseg/error.hpp"
#include "polypseg/tensor.hpp"

namespace polypseg {

using NodeId = std::size_t;

enum class BackwardMode { vanilla, guided };

template <class T>
using ReluHook = std::function<void(NodeId, const Tensor<T>&)>;

template <class T>
struct BackwardContext {
  NodeId node;
  std::span<const Tensor<T>* const> inputs;
  const Tensor<T>& output;
  const Tensor<T>& grad_output;
  // One slot per parent; nullptr where the parent does not need a gradient.
  // Rules accumulate (+=) into the slots.
  std::span<Tensor<T>* const> grad_inputs;
  BackwardMode mode;
  const ReluHook<T>* relu_hook;
};

template <class T>
using ForwardFn = std::function<Tensor<T>(std::span<const Tensor<T>* const>)>;
template <class T>
using BackwardFn = std::function<void(const BackwardContext<T>&)>;

template <class T>
struct Node {
  std::string op;
  Tensor<T> value;
  std::vector<NodeId> parents;
  ForwardFn<T> forward;  // empty for leaves
  BackwardFn<T> backward;
  bool requires_grad = false;
};

struct BackwardOptions {
  BackwardMode mode = BackwardMode::vanilla;
};

template <class T>
class Tape;

/// Lightweight handle to a node on a tape.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  NodeId id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return tape->value(id).shape(); }
};

/// Dynamic reverse-mode graph. Nodes are evaluated eagerly when recorded and
/// ids follow creation order, so ascending id is a topological order. The
/// tape is rebuilt for every forward pass.
template <class T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = false,
              std::string name = "leaf") {
    if (!value.all_finite()) {
      throw NumericError("leaf '" + name + "' holds non-finite values");
    }
    Node<T> n;
    n.op = std::move(name);
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  Var<T> record(std::string op, std::vector<NodeId> parents,
                ForwardFn<T> forward, BackwardFn<T> backward) {
    const NodeId self = nodes_.size();
    bool requires_grad = false;
    for (auto p : parents) {
      if (p >= self) {
        throw CorruptionError("node '" + op + "' references dangling parent " +
                              std::to_string(p));
      }
      requires_grad = requires_grad || nodes_[p].requires_grad;
    }
    Node<T> n;
    n.op = std::move(op);
    n.parents = std::move(parents);
    n.forward = std::move(forward);
    n.backward = std::move(backward);
    n.requires_grad = requires_grad;
    n.value = evaluate(n);
    nodes_.push_back(std::move(n));
    return {this, self};
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  const Node<T>& node(NodeId id) const { return nodes_.at(id); }

  const Tensor<T>& value(NodeId id) const { return nodes_.at(id).value; }

  /// Replaces a leaf value; dependent nodes keep their old values until
  /// forward_eval is called.
  void set_value(NodeId id, Tensor<T> v) {
    auto& n = nodes_.at(id);
    if (n.forward) throw InvalidArgument("set_value: node is not a leaf");
    if (v.shape() != n.value.shape()) {
      throw ShapeError("set_value: shape " + shape_str(v.shape()) +
                       " does not match " + shape_str(n.value.shape()));
    }
    n.value = std::move(v);
  }

  /// Re-evaluates every ancestor of `output` in ascending id order.
  const Tensor<T>& forward_eval(NodeId output) {
    if (output >= nodes_.size()) {
      throw CorruptionError("forward_eval: unknown node " +
                            std::to_string(output));
    }
    std::vector<char> needed(output + 1, 0);
    needed[output] = 1;
    for (NodeId id = output + 1; id-- > 0;) {
      if (!needed[id]) continue;
      for (auto p : nodes_[id].parents) {
        if (p >= id) {
          throw CorruptionError("node " + std::to_string(id) +
                                " references dangling parent " +
                                std::to_string(p));
        }
        needed[p] = 1;
      }
    }
    for (NodeId id = 0; id <= output; ++id) {
      if (needed[id] && nodes_[id].forward) {
        nodes_[id].value = evaluate(nodes_[id]);
      }
    }
    return nodes_[output].value;
  }

  /// Computes d(loss)/d(node) for every node that requires a gradient.
  /// Previously computed gradients are discarded.
  void backward(NodeId loss, BackwardOptions opts = {},
                const ReluHook<T>* relu_hook = nullptr) {
    if (loss >= nodes_.size()) {
      throw CorruptionError("backward: unknown node " + std::to_string(loss));
    }
    if (nodes_[loss].value.size() != 1) {
      throw InvalidArgument("backward: loss must be scalar, got shape " +
                            shape_str(nodes_[loss].value.shape()));
    }
    grads_.assign(nodes_.size(), std::nullopt);
    grads_[loss] = Tensor<T>(nodes_[loss].value.shape(), T{1});

    std::vector<const Tensor<T>*> inputs;
    std::vector<Tensor<T>*> slots;
    for (NodeId id = loss + 1; id-- > 0;) {
      auto& n = nodes_[id];
      if (!n.requires_grad || !n.backward || !grads_[id]) continue;
      inputs.clear();
      slots.clear();
      for (auto p : n.parents) {
        inputs.push_back(&nodes_[p].value);
        if (nodes_[p].requires_grad) {
          if (!grads_[p]) grads_[p] = Tensor<T>::zeros(nodes_[p].value.shape());
          slots.push_back(&*grads_[p]);
        } else {
          slots.push_back(nullptr);
        }
      }
      BackwardContext<T> ctx{id,          inputs,   n.value, *grads_[id],
                             slots,       opts.mode, relu_hook};
      n.backward(ctx);
    }
  }

  bool has_grad(NodeId id) const {
    return id < grads_.size() && grads_[id].has_value();
  }

  /// Gradient of the last backward pass; zeros for nodes off the loss path.
  Tensor<T> grad(NodeId id) const {
    if (has_grad(id)) return *grads_[id];
    return Tensor<T>::zeros(nodes_.at(id).value.shape());
  }

  void zero_grad() { grads_.clear(); }

 private:
  Tensor<T> evaluate(const Node<T>& n) const {
    std::vector<const Tensor<T>*> inputs;
    inputs.reserve(n.parents.size());
    for (auto p : n.parents) inputs.push_back(&nodes_[p].value);
    Tensor<T> out = n.forward(inputs);
    if (!out.all_finite()) {
      throw NumericError("op '" + n.op + "' produced non-finite values");
    }
    return out;
  }

  std::vector<Node<T>> nodes_;
  std::vector<std::optional<Tensor<T>>> grads_;
};

// ---------------------------------------------------------------------------
// Elementwise and reduction ops.

namespace detail {

template <class T>
void accumulate(Tensor<T>* slot, const Tensor<T>& g) {
  if (!slot) return;
  for (std::size_t i = 0; i < g.size(); ++i) (*slot)[i] += g[i];
}

template <class T>
void require_same_tape(Var<T> a, Var<T> b, const char* op) {
  if (a.tape != b.tape) {
    throw InvalidArgument(std::string(op) + ": operands live on different tapes");
  }
}

}  // namespace detail

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b, "add");
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  return a.tape->record(
      "add", {a.id, b.id},
      [](auto in) {
        Tensor<T> out = *in[0];
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += (*in[1])[i];
        return out;
      },
      [](const BackwardContext<T>& c) {
        detail::accumulate(c.grad_inputs[0], c.grad_output);
        detail::accumulate(c.grad_inputs[1], c.grad_output);
      });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b, "mul");
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  return a.tape->record(
      "mul", {a.id, b.id},
      [](auto in) {
        Tensor<T> out = *in[0];
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= (*in[1])[i];
        return out;
      },
      [](const BackwardContext<T>& c) {
        const auto& g = c.grad_output;
        if (auto* s = c.grad_inputs[0]) {
          for (std::size_t i = 0; i < g.size(); ++i) (*s)[i] += g[i] * (*c.inputs[1])[i];
        }
        if (auto* s = c.grad_inputs[1]) {
          for (std::size_t i = 0; i < g.size(); ++i) (*s)[i] += g[i] * (*c.inputs[0])[i];
        }
      });
}

template <class T>
Var<T> scale(Var<T> a, T factor) {
  return a.tape->record(
      "scale", {a.id},
      [factor](auto in) {
        Tensor<T> out = *in[0];
        for (auto& v : out.vec()) v *= factor;
        return out;
      },
      [factor](const BackwardContext<T>& c) {
        if (auto* s = c.grad_inputs[0]) {
          for (std::size_t i = 0; i < c.grad_output.size(); ++i) {
            (*s)[i] += factor * c.grad_output[i];
          }
        }
      });
}

template <class T>
Var<T> sum(Var<T> a) {
  return a.tape->record(
      "sum", {a.id},
      [](auto in) { return Tensor<T>::scalar(sum(*in[0])); },
      [](const BackwardContext<T>& c) {
        if (auto* s = c.grad_inputs[0]) {
          const T g = c.grad_output[0];
          for (auto& v : s->vec()) v += g;
        }
      });
}

/// Scalar <weights, a> with constant weights.
template <class T>
Var<T> weighted_sum(Var<T> a, Tensor<T> weights) {
  if (weights.shape() != a.shape()) {
    throw ShapeError("weighted_sum: weight shape " + shape_str(weights.shape()) +
                     " does not match " + shape_str(a.shape()));
  }
  auto w = std::make_shared<const Tensor<T>>(std::move(weights));
  return a.tape->record(
      "weighted_sum", {a.id},
      [w](auto in) { return Tensor<T>::scalar(dot(*in[0], *w)); },
      [w](const BackwardContext<T>& c) {
        if (auto* s = c.grad_inputs[0]) {
          const T g = c.grad_output[0];
          for (std::size_t i = 0; i < w->size(); ++i) (*s)[i] += g * (*w)[i];
        }
      });
}

/// ReLU. In guided mode the backward rule also drops negative upstream
/// gradients: grad_in = grad_out * [x > 0] * [grad_out > 0].
template <class T>
Var<T> relu(Var<T> a) {
  return a.tape->record(
      "relu", {a.id},
      [](auto in) {
        Tensor<T> out = *in[0];
        for (auto& v : out.vec()) v = v > T{0} ? v : T{0};
        return out;
      },
      [](const BackwardContext<T>& c) {
        const auto& x = *c.inputs[0];
        const auto& g = c.grad_output;
        Tensor<T> gin(g.shape());
        const bool guided = c.mode == BackwardMode::guided;
        for (std::size_t i = 0; i < g.size(); ++i) {
          const bool pass = x[i] > T{0} && (!guided || g[i] > T{0});
          gin[i] = pass ? g[i] : T{0};
        }
        if (c.relu_hook && *c.relu_hook) (*c.relu_hook)(c.node, gin);
        detail::accumulate(c.grad_inputs[0], gin);
      });
}

// ---------------------------------------------------------------------------
// Finite-difference oracle.

template <class T>
using ScalarGraphFn = std::function<Var<T>(Tape<T>&, Var<T>)>;

struct FdOptions {
  // Restrict the check to these flat indices; empty means every element.
  std::vector<std::size_t> indices;
};

/// Maximum over checked elements of
///   |analytic - central_difference| / max(|analytic|, |numeric|, 1e-8).
/// The graph is built once; perturbed evaluations reuse it via forward_eval,
/// so stochastic masks recorded at build time stay fixed.
template <class T>
double finite_difference_check(const ScalarGraphFn<T>& f, const Tensor<T>& x,
                               T step, const FdOptions& opts = {}) {
  if (!(step > T{0})) {
    throw InvalidArgument("finite_difference_check: step must be > 0");
  }
  Tape<T> tape;
  Var<T> xv = tape.leaf(x, true, "x");
  Var<T> out = f(tape, xv);
  if (out.value().size() != 1) {
    throw InvalidArgument("finite_difference_check: function is not scalar");
  }
  if (!out.value().all_finite()) {
    throw NumericError("finite_difference_check: non-finite function value");
  }
  tape.backward(out.id);
  const Tensor<T> analytic = tape.grad(xv.id);

  std::vector<std::size_t> idx = opts.indices;
  if (idx.empty()) {
    idx.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) idx[i] = i;
  }
  double worst = 0.0;
  Tensor<T> probe = x;
  for (auto i : idx) {
    if (i >= x.size()) throw InvalidArgument("finite_difference_check: index out of range");
    const T orig = probe[i];
    probe[i] = orig + step;
    tape.set_value(xv.id, probe);
    const double fp = static_cast<double>(tape.forward_eval(out.id)[0]);
    probe[i] = orig - step;
    tape.set_value(xv.id, probe);
    const double fm = static_cast<double>(tape.forward_eval(out.id)[0]);
    probe[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("finite_difference_check: non-finite function value");
    }
    const double numeric = (fp - fm) / (2.0 * static_cast<double>(step));
    const double a = static_cast<double>(analytic[i]);
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  tape.set_value(xv.id, x);
  tape.forward_eval(out.id);
  return worst;
}

}  // namespace polypseg
