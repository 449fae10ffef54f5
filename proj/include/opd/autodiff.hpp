#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "opd/error.hpp"
#include "opd/net.hpp"

namespace opd {

class Tape;

/// Scalar handle into a Tape. Cheap to copy.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}
  double value() const;
  Tape* tape() const { return tape_; }
  int id() const { return id_; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Outputs of one differentiable network call, laid out like Batch.
struct NetOutput {
  Tape* tape = nullptr;
  int first = 0;
  int rows = 0;
  int cols = 0;
  Var operator()(int i, int b) const { return Var(tape, first + b * rows + i); }
};

/// Reverse-mode tape over scalar operations whose leaves are either constants
/// or outputs of batched calls to one VelocityField. Network inputs are
/// constants: gradients flow into the parameters, never into the states.
class Tape {
 public:
  explicit Tape(const VelocityField& vf) : vf_(&vf) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  const VelocityField& field() const { return *vf_; }

  Var constant(double v) { return push(v, -1, 0.0, -1, 0.0); }

  NetOutput call(const Batch& x, std::span<const double> t, std::span<const int> c) {
    Call rec;
    Batch out = vf_->forward(x, t, c, &rec.cache);
    rec.first = static_cast<int>(nodes_.size());
    rec.rows = out.rows;
    rec.cols = out.cols;
    for (double v : out.data) push(v, -1, 0.0, -1, 0.0);
    calls_.push_back(std::move(rec));
    ++forward_evals_;
    evaluated_points_ += out.cols;
    return NetOutput{this, calls_.back().first, out.rows, out.cols};
  }

  Var unary(Var a, double value, double da) { return push(value, a.id(), da, -1, 0.0); }
  Var binary(Var a, Var b, double value, double da, double db) {
    return push(value, a.id(), da, b.id(), db);
  }

  double value(int id) const { return nodes_[id].value; }

  /// Accumulates d(root)/d(params) into grad.
  void backward(Var root, std::span<double> grad) const {
    require(root.tape() == this, "root variable belongs to a different tape");
    std::vector<double> adj(nodes_.size(), 0.0);
    adj[root.id()] = 1.0;
    for (int k = root.id(); k >= 0; --k) {
      const double g = adj[k];
      if (g == 0.0) continue;
      const Node& n = nodes_[k];
      if (n.a >= 0) adj[n.a] += g * n.da;
      if (n.b >= 0) adj[n.b] += g * n.db;
    }
    for (const Call& c : calls_) {
      Batch d_out(c.rows, c.cols);
      bool any = false;
      for (std::size_t k = 0; k < d_out.data.size(); ++k) {
        d_out.data[k] = adj[c.first + k];
        any = any || d_out.data[k] != 0.0;
      }
      if (any) vf_->backward(c.cache, d_out, grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }
  long evaluated_points() const { return evaluated_points_; }

 private:
  struct Node {
    double value;
    int a;
    double da;
    int b;
    double db;
  };
  struct Call {
    ForwardCache cache;
    int first = 0;
    int rows = 0;
    int cols = 0;
  };

  Var push(double v, int a, double da, int b, double db) {
    nodes_.push_back({v, a, da, b, db});
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  const VelocityField* vf_;
  std::vector<Node> nodes_;
  std::vector<Call> calls_;
  long forward_evals_ = 0;
  long evaluated_points_ = 0;
};

inline double Var::value() const { return tape_->value(id_); }

inline Var operator+(Var a, Var b) { return a.tape()->binary(a, b, a.value() + b.value(), 1.0, 1.0); }
inline Var operator-(Var a, Var b) { return a.tape()->binary(a, b, a.value() - b.value(), 1.0, -1.0); }
inline Var operator*(Var a, Var b) {
  return a.tape()->binary(a, b, a.value() * b.value(), b.value(), a.value());
}
inline Var operator/(Var a, Var b) {
  const double bv = b.value();
  return a.tape()->binary(a, b, a.value() / bv, 1.0 / bv, -a.value() / (bv * bv));
}
inline Var operator+(Var a, double s) { return a.tape()->unary(a, a.value() + s, 1.0); }
inline Var operator+(double s, Var a) { return a + s; }
inline Var operator-(Var a, double s) { return a.tape()->unary(a, a.value() - s, 1.0); }
inline Var operator-(double s, Var a) { return a.tape()->unary(a, s - a.value(), -1.0); }
inline Var operator-(Var a) { return a.tape()->unary(a, -a.value(), -1.0); }
inline Var operator*(Var a, double s) { return a.tape()->unary(a, a.value() * s, s); }
inline Var operator*(double s, Var a) { return a * s; }
inline Var operator/(Var a, double s) { return a * (1.0 / s); }

inline Var square(Var a) { return a.tape()->unary(a, a.value() * a.value(), 2.0 * a.value()); }
inline Var exp(Var a) {
  const double e = std::exp(a.value());
  return a.tape()->unary(a, e, e);
}
inline Var log(Var a) { return a.tape()->unary(a, std::log(a.value()), 1.0 / a.value()); }

/// Picks the smaller operand; ties go to the first.
inline Var min(Var a, Var b) { return b.value() < a.value() ? b : a; }

inline Var clamp(Var a, double lo, double hi) {
  if (a.value() < lo) return a.tape()->constant(lo);
  if (a.value() > hi) return a.tape()->constant(hi);
  return a;
}

inline Var sum(std::span<const Var> xs, Tape& tape) {
  if (xs.empty()) return tape.constant(0.0);
  Var acc = xs[0];
  for (std::size_t k = 1; k < xs.size(); ++k) acc = acc + xs[k];
  return acc;
}

/// Flat gradient of a scalar loss with respect to every network parameter.
struct ParamGradient {
  double loss = 0.0;
  std::vector<double> grad;
  long evaluated_points = 0;
};

inline bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

/// Exact reverse-mode gradient of closure(tape) with respect to vf's params.
/// The closure must reach the parameters only through tape.call().
inline ParamGradient grad_scalar_loss(const VelocityField& vf,
                                      const std::function<Var(Tape&)>& loss_closure,
                                      const std::string& context = "loss") {
  Tape tape(vf);
  Var loss = loss_closure(tape);
  ParamGradient out;
  out.grad.assign(vf.n_params(), 0.0);
  if (loss.tape() == nullptr) {
    out.loss = 0.0;
    return out;
  }
  out.loss = loss.value();
  if (!std::isfinite(out.loss)) throw NumericError("non-finite " + context);
  tape.backward(loss, out.grad);
  if (!all_finite(out.grad)) throw NumericError("non-finite gradient in " + context);
  out.evaluated_points = tape.evaluated_points();
  return out;
}

}  // namespace opd
