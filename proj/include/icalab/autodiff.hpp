// autodiff.hpp - append-only scalar tape with reverse-mode gradients.
//
// Nodes are recorded in evaluation order, so a single reverse sweep over the
// array propagates adjoints.  The op set is deliberately small: elementwise
// arithmetic, exp/log/tanh/square, a fused affine node (bias + dot product)
// that keeps subnetwork layers cheap, and a fused sum.  First-order only.
#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace icalab {

enum class Op : std::uint8_t { Leaf, Add, Sub, Mul, Div, Exp, Log, Tanh, Square, Affine, Sum };

struct Node {
  Op op = Op::Leaf;
  std::uint32_t a = 0, b = 0;          // operand ids (unary/binary ops)
  std::uint32_t arg_off = 0, arg_cnt = 0;  // arena slice (affine/sum)
  double value = 0.0;
};

class Tape {
 public:
  using Id = std::uint32_t;

  Id leaf(double v);
  Id add(Id x, Id y);
  Id sub(Id x, Id y);
  Id mul(Id x, Id y);
  Id div(Id x, Id y);
  Id exp_(Id x);
  Id log_(Id x);
  Id tanh_(Id x);
  Id square(Id x);
  // bias + sum_i weights[i] * inputs[i]; weights and inputs are node ids so
  // adjoints reach parameters and activations alike.
  Id affine(Id bias, std::span<const Id> weights, std::span<const Id> inputs);
  Id sum(std::span<const Id> terms);

  double value(Id id) const { return nodes_[id].value; }
  std::size_t size() const { return nodes_.size(); }
  bool domain_error() const { return domain_error_; }

  void set_leaf(Id id, double v);
  // Re-evaluates every non-leaf node in recording order.
  void recompute();

  // Adjoints of `output` w.r.t. every node; optionally reuses a caller buffer.
  void gradient(Id output, std::vector<double>* adjoints) const;
  std::vector<double> gradient(Id output) const;

  void clear();
  void reserve(std::size_t nodes, std::size_t args);

 private:
  Id push(Node n);
  void eval(Node& n);

  std::vector<Node> nodes_;
  std::vector<Id> args_;
  bool domain_error_ = false;
};

// Convenience wrapper so expressions read naturally in tests and model code.
struct Var {
  Tape* tape = nullptr;
  Tape::Id id = 0;
  double value() const { return tape->value(id); }
};

inline Var make_var(Tape& t, double v) { return {&t, t.leaf(v)}; }
inline Var operator+(Var x, Var y) { return {x.tape, x.tape->add(x.id, y.id)}; }
inline Var operator-(Var x, Var y) { return {x.tape, x.tape->sub(x.id, y.id)}; }
inline Var operator*(Var x, Var y) { return {x.tape, x.tape->mul(x.id, y.id)}; }
inline Var operator/(Var x, Var y) { return {x.tape, x.tape->div(x.id, y.id)}; }
inline Var exp(Var x) { return {x.tape, x.tape->exp_(x.id)}; }
inline Var log(Var x) { return {x.tape, x.tape->log_(x.id)}; }
inline Var tanh(Var x) { return {x.tape, x.tape->tanh_(x.id)}; }
inline Var square(Var x) { return {x.tape, x.tape->square(x.id)}; }

// Scalar function of a point, traced on a fresh tape.
using TracedFn = std::function<Var(Tape&, std::span<const Var>)>;

// dense Jacobian of a traced vector function: one reverse sweep per output row.
using TracedVecFn = std::function<std::vector<Var>(Tape&, std::span<const Var>)>;
Eigen::MatrixXd jacobian(const TracedVecFn& fn, const Eigen::VectorXd& point);

Eigen::VectorXd gradient_at(const TracedFn& fn, const Eigen::VectorXd& point);

struct GradientCheck {
  double max_rel_err = 0.0;
  int worst_index = -1;
  bool suspect = false;  // true when the mismatch suggests a kink/nondifferentiable point
};

// Central finite differences vs reverse-mode, h scaled per coordinate.
GradientCheck gradient_check(const TracedFn& fn, const Eigen::VectorXd& point,
                             double h = 1e-5, double tol = 1e-4);

}  // namespace icalab
