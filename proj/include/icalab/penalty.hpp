// penalty.hpp - scalar sparsity penalties (L1, SCAD, MCP) and their
// application to Jacobian matrices.  Closed forms follow Zhang (2010) for
// MCP and Fan & Li (2001) for SCAD.
#pragma once

#include <Eigen/Dense>
#include <string>

namespace icalab {

enum class PenaltyKind { L1, SCAD, MCP };

struct PenaltyConfig {
  PenaltyKind kind = PenaltyKind::MCP;
  double lambda = 0.0;
  double gamma = 2.0;  // MCP concavity, > 1
  double a = 3.7;      // SCAD knot, > 2

  void validate() const;
};

PenaltyKind penalty_kind_from_string(const std::string& s);
std::string to_string(PenaltyKind k);

double penalty_value(const PenaltyConfig& cfg, double t);

// Derivative a.e.; the subgradient at 0 is resolved to 0.
double penalty_derivative(const PenaltyConfig& cfg, double t);

// Mean of penalty_value over all entries (mean keeps lambda comparable
// across matrix shapes and batch sizes).
double jacobian_penalty(const PenaltyConfig& cfg, const Eigen::MatrixXd& J);

}  // namespace icalab
