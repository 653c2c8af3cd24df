#pragma once

// Reverse-mode differentiation over a linear tape of recorded operations.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gkd/tensor.hpp"

namespace gkd {

/// Handle to a value recorded on a Tape.
struct Var {
  std::size_t id = 0;
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&)>;

  /// A tape with `record_grad == false` keeps values only; recording is a
  /// no-op and backward() is rejected. Used for inference.
  explicit Tape(bool record_grad = true) : record_grad_(record_grad) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  bool recording() const noexcept { return record_grad_; }

  /// Piecewise-linear ops (ReLU) fold their active/inactive pattern into a
  /// running signature when tracking is on. Two evaluations with equal
  /// signatures lie on the same linear piece.
  void track_branches(bool on) noexcept { track_branches_ = on; }
  bool tracking_branches() const noexcept { return track_branches_; }
  void mix_branch(std::uint64_t h) noexcept {
    branch_signature_ = (branch_signature_ ^ h) * 0x100000001b3ULL;
  }
  std::uint64_t branch_signature() const noexcept { return branch_signature_; }

  Var constant(Tensor<T> value) { return push(std::move(value), false); }

  /// Registers a named parameter. The tensor is referenced, not copied, and
  /// must outlive the tape.
  Var parameter(const std::string& name, const Tensor<T>& value) {
    if (auto it = parameter_ids_.find(name); it != parameter_ids_.end()) return Var{it->second};
    Node node;
    node.external = &value;
    node.requires_grad = record_grad_;
    nodes_.push_back(std::move(node));
    const std::size_t id = nodes_.size() - 1;
    parameter_ids_.emplace(name, id);
    return Var{id};
  }

  /// Output of an operation; requires a gradient when any input does.
  Var result(Tensor<T> value, std::initializer_list<Var> inputs) {
    bool needs = false;
    if (record_grad_) {
      for (Var v : inputs) needs = needs || nodes_.at(v.id).requires_grad;
    }
    return push(std::move(value), needs);
  }

  Var result(Tensor<T> value, const std::vector<Var>& inputs) {
    bool needs = false;
    if (record_grad_) {
      for (Var v : inputs) needs = needs || nodes_.at(v.id).requires_grad;
    }
    return push(std::move(value), needs);
  }

  void record(Backward fn) {
    if (record_grad_) ops_.push_back(std::move(fn));
  }

  const Tensor<T>& value(Var v) const { return nodes_.at(v.id).get(); }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  /// Gradient buffer of a node, zero-initialized on first access.
  Tensor<T>& grad(Var v) {
    Node& node = nodes_.at(v.id);
    if (!node.has_grad) {
      node.grad = Tensor<T>(node.get().shape(), T{0});
      node.has_grad = true;
    }
    return node.grad;
  }
  bool has_grad(Var v) const { return nodes_.at(v.id).has_grad; }

  std::size_t operation_count() const noexcept { return ops_.size(); }

  void backward(Var loss) {
    if (!record_grad_) throw TapeError("backward on a tape that does not record gradients");
    if (consumed_) throw TapeError("tape already consumed by a previous backward pass");
    if (value(loss).size() != 1) {
      throw TapeError("backward requires a scalar loss, got shape " +
                      shape_string(value(loss).shape()));
    }
    consumed_ = true;
    grad(loss)[0] = T{1};
    for (std::size_t i = ops_.size(); i-- > 0;) {
      ops_[i](*this);
      ops_[i] = nullptr;
    }
  }

  /// Per-parameter gradients after backward. Parameters the loss does not
  /// reach get all-zero tensors.
  std::map<std::string, Tensor<T>> gradients() const {
    std::map<std::string, Tensor<T>> out;
    for (const auto& [name, id] : parameter_ids_) {
      const Node& node = nodes_[id];
      out.emplace(name, node.has_grad ? node.grad : Tensor<T>(node.get().shape(), T{0}));
    }
    return out;
  }

 private:
  struct Node {
    Tensor<T> owned;
    const Tensor<T>* external = nullptr;
    Tensor<T> grad;
    bool requires_grad = false;
    bool has_grad = false;
    const Tensor<T>& get() const { return external ? *external : owned; }
  };

  Var push(Tensor<T> value, bool requires_grad) {
    Node node;
    node.owned = std::move(value);
    node.requires_grad = requires_grad;
    nodes_.push_back(std::move(node));
    return Var{nodes_.size() - 1};
  }

  bool record_grad_;
  bool consumed_ = false;
  bool track_branches_ = false;
  std::uint64_t branch_signature_ = 0xcbf29ce484222325ULL;
  std::vector<Node> nodes_;
  std::vector<Backward> ops_;
  std::map<std::string, std::size_t> parameter_ids_;
};

namespace ops {

template <typename T>
void accumulate_into(Tensor<T>& dst, const Tensor<T>& src) {
  T* d = dst.ptr();
  const T* s = src.ptr();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

/// Elementwise a * b for equal shapes.
template <typename T>
Var mul(Tape<T>& tape, Var a, Var b) {
  const Tensor<T>& x = tape.value(a);
  const Tensor<T>& y = tape.value(b);
  require_shape(x.shape() == y.shape(), "mul: shape mismatch " + shape_string(x.shape()) +
                                            " vs " + shape_string(y.shape()));
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  Var r = tape.result(std::move(out), {a, b});
  if (tape.requires_grad(r)) {
    tape.record([a, b, r](Tape<T>& t) {
      const Tensor<T>& g = t.grad(r);
      if (t.requires_grad(a)) {
        const Tensor<T>& y = t.value(b);
        Tensor<T>& ga = t.grad(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
      }
      if (t.requires_grad(b)) {
        const Tensor<T>& x = t.value(a);
        Tensor<T>& gb = t.grad(b);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
      }
    });
  }
  return r;
}

/// Sum of all elements, as a scalar.
template <typename T>
Var sum(Tape<T>& tape, Var a) {
  const Tensor<T>& x = tape.value(a);
  T acc{0};
  for (std::size_t i = 0; i < x.size(); ++i) acc += x[i];
  Var r = tape.result(Tensor<T>::scalar(acc), {a});
  if (tape.requires_grad(r)) {
    tape.record([a, r](Tape<T>& t) {
      const T g = t.grad(r)[0];
      Tensor<T>& ga = t.grad(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
  }
  return r;
}

/// alpha * a + beta * b for equal shapes. A zero weight drops its term
/// entirely, including from the backward pass.
template <typename T>
Var weighted_sum(Tape<T>& tape, Var a, T alpha, Var b, T beta) {
  const Tensor<T>& x = tape.value(a);
  const Tensor<T>& y = tape.value(b);
  require_shape(x.shape() == y.shape(), "weighted_sum: shape mismatch");
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (alpha == T{0}) {
      out[i] = beta * y[i];
    } else if (beta == T{0}) {
      out[i] = alpha * x[i];
    } else {
      out[i] = alpha * x[i] + beta * y[i];
    }
  }
  Var r = tape.result(std::move(out), {a, b});
  if (tape.requires_grad(r)) {
    tape.record([a, b, r, alpha, beta](Tape<T>& t) {
      const Tensor<T>& g = t.grad(r);
      if (alpha != T{0} && t.requires_grad(a)) {
        Tensor<T>& ga = t.grad(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += alpha * g[i];
      }
      if (beta != T{0} && t.requires_grad(b)) {
        Tensor<T>& gb = t.grad(b);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += beta * g[i];
      }
    });
  }
  return r;
}

/// Same data, new shape.
template <typename T>
Var reshape(Tape<T>& tape, Var a, Shape shape) {
  Var r = tape.result(tape.value(a).reshaped(std::move(shape)), {a});
  if (tape.requires_grad(r)) {
    tape.record([a, r](Tape<T>& t) {
      const Tensor<T>& g = t.grad(r);
      Tensor<T>& ga = t.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }
  return r;
}

/// [N x ...] -> [N x prod(...)]
template <typename T>
Var flatten(Tape<T>& tape, Var a) {
  const Shape& s = tape.value(a).shape();
  const std::size_t n = s[0];
  return reshape(tape, a, Shape{n, tape.value(a).size() / n});
}

}  // namespace ops
}  // namespace gkd
