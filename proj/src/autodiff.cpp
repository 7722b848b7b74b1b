#include "icalab/autodiff.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace icalab {

Tape::Id Tape::push(Node n) {
  eval(n);
  nodes_.push_back(n);
  return static_cast<Id>(nodes_.size() - 1);
}

void Tape::eval(Node& n) {
  switch (n.op) {
    case Op::Leaf:
      break;
    case Op::Add:
      n.value = nodes_[n.a].value + nodes_[n.b].value;
      break;
    case Op::Sub:
      n.value = nodes_[n.a].value - nodes_[n.b].value;
      break;
    case Op::Mul:
      n.value = nodes_[n.a].value * nodes_[n.b].value;
      break;
    case Op::Div:
      if (nodes_[n.b].value == 0.0) domain_error_ = true;
      n.value = nodes_[n.a].value / nodes_[n.b].value;
      break;
    case Op::Exp:
      n.value = std::exp(nodes_[n.a].value);
      break;
    case Op::Log:
      if (nodes_[n.a].value <= 0.0) {
        domain_error_ = true;
        n.value = std::numeric_limits<double>::quiet_NaN();
      } else {
        n.value = std::log(nodes_[n.a].value);
      }
      break;
    case Op::Tanh:
      n.value = std::tanh(nodes_[n.a].value);
      break;
    case Op::Square:
      n.value = nodes_[n.a].value * nodes_[n.a].value;
      break;
    case Op::Affine: {
      double acc = nodes_[n.a].value;  // bias
      const Id* w = args_.data() + n.arg_off;
      const Id* x = w + n.arg_cnt;
      for (std::uint32_t i = 0; i < n.arg_cnt; ++i)
        acc += nodes_[w[i]].value * nodes_[x[i]].value;
      n.value = acc;
      break;
    }
    case Op::Sum: {
      double acc = 0.0;
      const Id* xs = args_.data() + n.arg_off;
      for (std::uint32_t i = 0; i < n.arg_cnt; ++i) acc += nodes_[xs[i]].value;
      n.value = acc;
      break;
    }
  }
}

Tape::Id Tape::leaf(double v) {
  Node n;
  n.op = Op::Leaf;
  n.value = v;
  nodes_.push_back(n);
  return static_cast<Id>(nodes_.size() - 1);
}

Tape::Id Tape::add(Id x, Id y) { return push({Op::Add, x, y, 0, 0, 0.0}); }
Tape::Id Tape::sub(Id x, Id y) { return push({Op::Sub, x, y, 0, 0, 0.0}); }
Tape::Id Tape::mul(Id x, Id y) { return push({Op::Mul, x, y, 0, 0, 0.0}); }
Tape::Id Tape::div(Id x, Id y) { return push({Op::Div, x, y, 0, 0, 0.0}); }
Tape::Id Tape::exp_(Id x) { return push({Op::Exp, x, 0, 0, 0, 0.0}); }
Tape::Id Tape::log_(Id x) { return push({Op::Log, x, 0, 0, 0, 0.0}); }
Tape::Id Tape::tanh_(Id x) { return push({Op::Tanh, x, 0, 0, 0, 0.0}); }
Tape::Id Tape::square(Id x) { return push({Op::Square, x, 0, 0, 0, 0.0}); }

Tape::Id Tape::affine(Id bias, std::span<const Id> weights, std::span<const Id> inputs) {
  if (weights.size() != inputs.size())
    throw std::invalid_argument("affine: weight/input arity mismatch");
  Node n;
  n.op = Op::Affine;
  n.a = bias;
  n.arg_off = static_cast<std::uint32_t>(args_.size());
  n.arg_cnt = static_cast<std::uint32_t>(weights.size());
  args_.insert(args_.end(), weights.begin(), weights.end());
  args_.insert(args_.end(), inputs.begin(), inputs.end());
  return push(n);
}

Tape::Id Tape::sum(std::span<const Id> terms) {
  Node n;
  n.op = Op::Sum;
  n.arg_off = static_cast<std::uint32_t>(args_.size());
  n.arg_cnt = static_cast<std::uint32_t>(terms.size());
  args_.insert(args_.end(), terms.begin(), terms.end());
  return push(n);
}

void Tape::set_leaf(Id id, double v) {
  if (nodes_[id].op != Op::Leaf) throw std::invalid_argument("set_leaf: node is not a leaf");
  nodes_[id].value = v;
}

void Tape::recompute() {
  domain_error_ = false;
  for (auto& n : nodes_)
    if (n.op != Op::Leaf) eval(n);
}

void Tape::gradient(Id output, std::vector<double>* adjoints) const {
  auto& adj = *adjoints;
  adj.assign(nodes_.size(), 0.0);
  adj[output] = 1.0;
  for (std::size_t idx = nodes_.size(); idx-- > 0;) {
    const Node& n = nodes_[idx];
    const double g = adj[idx];
    if (g == 0.0) continue;
    switch (n.op) {
      case Op::Leaf:
        break;
      case Op::Add:
        adj[n.a] += g;
        adj[n.b] += g;
        break;
      case Op::Sub:
        adj[n.a] += g;
        adj[n.b] -= g;
        break;
      case Op::Mul:
        adj[n.a] += g * nodes_[n.b].value;
        adj[n.b] += g * nodes_[n.a].value;
        break;
      case Op::Div:
        adj[n.a] += g / nodes_[n.b].value;
        adj[n.b] -= g * n.value / nodes_[n.b].value;
        break;
      case Op::Exp:
        adj[n.a] += g * n.value;
        break;
      case Op::Log:
        adj[n.a] += g / nodes_[n.a].value;
        break;
      case Op::Tanh:
        adj[n.a] += g * (1.0 - n.value * n.value);
        break;
      case Op::Square:
        adj[n.a] += g * 2.0 * nodes_[n.a].value;
        break;
      case Op::Affine: {
        adj[n.a] += g;
        const Id* w = args_.data() + n.arg_off;
        const Id* x = w + n.arg_cnt;
        for (std::uint32_t i = 0; i < n.arg_cnt; ++i) {
          adj[w[i]] += g * nodes_[x[i]].value;
          adj[x[i]] += g * nodes_[w[i]].value;
        }
        break;
      }
      case Op::Sum: {
        const Id* xs = args_.data() + n.arg_off;
        for (std::uint32_t i = 0; i < n.arg_cnt; ++i) adj[xs[i]] += g;
        break;
      }
    }
  }
}

std::vector<double> Tape::gradient(Id output) const {
  std::vector<double> adj;
  gradient(output, &adj);
  return adj;
}

void Tape::clear() {
  nodes_.clear();
  args_.clear();
  domain_error_ = false;
}

void Tape::reserve(std::size_t nodes, std::size_t args) {
  nodes_.reserve(nodes);
  args_.reserve(args);
}

Eigen::VectorXd gradient_at(const TracedFn& fn, const Eigen::VectorXd& point) {
  Tape tape;
  std::vector<Var> xs(point.size());
  for (int i = 0; i < point.size(); ++i) xs[i] = make_var(tape, point(i));
  const Var out = fn(tape, xs);
  std::vector<double> adj;
  tape.gradient(out.id, &adj);
  Eigen::VectorXd g(point.size());
  for (int i = 0; i < point.size(); ++i) g(i) = adj[xs[i].id];
  return g;
}

Eigen::MatrixXd jacobian(const TracedVecFn& fn, const Eigen::VectorXd& point) {
  Tape tape;
  std::vector<Var> xs(point.size());
  for (int i = 0; i < point.size(); ++i) xs[i] = make_var(tape, point(i));
  const std::vector<Var> outs = fn(tape, xs);
  Eigen::MatrixXd jac(static_cast<int>(outs.size()), point.size());
  std::vector<double> adj;
  for (std::size_t r = 0; r < outs.size(); ++r) {
    tape.gradient(outs[r].id, &adj);
    for (int c = 0; c < point.size(); ++c) jac(static_cast<int>(r), c) = adj[xs[c].id];
  }
  return jac;
}

namespace {

double eval_scalar(const TracedFn& fn, const Eigen::VectorXd& point) {
  Tape tape;
  std::vector<Var> xs(point.size());
  for (int i = 0; i < point.size(); ++i) xs[i] = make_var(tape, point(i));
  return fn(tape, xs).value();
}

}  // namespace

GradientCheck gradient_check(const TracedFn& fn, const Eigen::VectorXd& point, double h,
                             double tol) {
  const Eigen::VectorXd g = gradient_at(fn, point);
  GradientCheck rep;
  for (int i = 0; i < point.size(); ++i) {
    const double step = h * std::max(1.0, std::abs(point(i)));
    Eigen::VectorXd hi = point, lo = point;
    hi(i) += step;
    lo(i) -= step;
    const double fd = (eval_scalar(fn, hi) - eval_scalar(fn, lo)) / (2.0 * step);
    const double rel = std::abs(g(i) - fd) / std::max({1.0, std::abs(g(i)), std::abs(fd)});
    if (rel > rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.worst_index = i;
    }
  }
  rep.suspect = rep.max_rel_err > tol;
  return rep;
}

}  // namespace icalab
