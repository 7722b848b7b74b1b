#include "icalab/penalty.hpp"

#include <cmath>
#include <stdexcept>

namespace icalab {

void PenaltyConfig::validate() const {
  if (lambda < 0.0) throw std::invalid_argument("penalty: lambda must be >= 0");
  if (kind == PenaltyKind::MCP && gamma <= 1.0)
    throw std::invalid_argument("penalty: MCP gamma must be > 1");
  if (kind == PenaltyKind::SCAD && a <= 2.0)
    throw std::invalid_argument("penalty: SCAD a must be > 2");
}

PenaltyKind penalty_kind_from_string(const std::string& s) {
  if (s == "l1" || s == "L1") return PenaltyKind::L1;
  if (s == "scad" || s == "SCAD") return PenaltyKind::SCAD;
  if (s == "mcp" || s == "MCP") return PenaltyKind::MCP;
  throw std::invalid_argument("penalty: unknown kind '" + s + "'");
}

std::string to_string(PenaltyKind k) {
  switch (k) {
    case PenaltyKind::L1: return "l1";
    case PenaltyKind::SCAD: return "scad";
    case PenaltyKind::MCP: return "mcp";
  }
  return "?";
}

double penalty_value(const PenaltyConfig& cfg, double t) {
  cfg.validate();
  const double at = std::abs(t);
  const double l = cfg.lambda;
  switch (cfg.kind) {
    case PenaltyKind::L1:
      return l * at;
    case PenaltyKind::MCP:
      if (at <= cfg.gamma * l) return l * at - at * at / (2.0 * cfg.gamma);
      return cfg.gamma * l * l / 2.0;
    case PenaltyKind::SCAD:
      if (at <= l) return l * at;
      if (at <= cfg.a * l)
        return (2.0 * cfg.a * l * at - at * at - l * l) / (2.0 * (cfg.a - 1.0));
      return l * l * (cfg.a + 1.0) / 2.0;
  }
  return 0.0;
}

double penalty_derivative(const PenaltyConfig& cfg, double t) {
  cfg.validate();
  if (t == 0.0) return 0.0;
  const double at = std::abs(t);
  const double sg = t > 0.0 ? 1.0 : -1.0;
  const double l = cfg.lambda;
  switch (cfg.kind) {
    case PenaltyKind::L1:
      return sg * l;
    case PenaltyKind::MCP:
      if (at <= cfg.gamma * l) return sg * (l - at / cfg.gamma);
      return 0.0;
    case PenaltyKind::SCAD:
      if (at <= l) return sg * l;
      if (at <= cfg.a * l) return sg * (cfg.a * l - at) / (cfg.a - 1.0);
      return 0.0;
  }
  return 0.0;
}

double jacobian_penalty(const PenaltyConfig& cfg, const Eigen::MatrixXd& J) {
  if (!J.allFinite()) throw std::invalid_argument("jacobian_penalty: non-finite entries");
  if (J.size() == 0) throw std::invalid_argument("jacobian_penalty: empty matrix");
  double acc = 0.0;
  for (int c = 0; c < J.cols(); ++c)
    for (int r = 0; r < J.rows(); ++r) acc += penalty_value(cfg, J(r, c));
  return acc / static_cast<double>(J.size());
}

}  // namespace icalab
