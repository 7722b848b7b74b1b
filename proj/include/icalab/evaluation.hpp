// evaluation.hpp - identifiability metrics: componentwise-aligned correlations,
// optimal source assignment, MCC, and block-level subspace scores.
#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

namespace icalab {

struct AlignResult {
  Eigen::VectorXd fitted;      // regressor output, same length as inputs
  double correlation = 0.0;    // Pearson corr(fitted, truth)
  bool degenerate = false;     // constant input column; correlation forced to 0
};

enum class AlignMethod { Spline, Neural };

// Fits a 1-D regressor (default: least-squares cubic spline on 5 quantile
// knots) mapping est -> truth; the returned correlation absorbs any
// elementwise invertible transformation of the source.
AlignResult componentwise_align(const Eigen::VectorXd& truth, const Eigen::VectorXd& est,
                                AlignMethod method = AlignMethod::Spline);

// entry (i,j) = |corr| after aligning est column j to true column i.
Eigen::MatrixXd correlation_matrix(const Eigen::MatrixXd& truth, const Eigen::MatrixXd& est,
                                   AlignMethod method = AlignMethod::Spline);

// Max-total-score assignment: perm[i] = matched column of row i (rows <= cols).
std::vector<int> optimal_assignment(const Eigen::MatrixXd& score);

// Reference implementation for tests: factorial search, rows <= 8.
std::vector<int> brute_force_assignment(const Eigen::MatrixXd& score);

struct EvalReport {
  double mcc = 0.0;
  std::vector<int> permutation;       // true source i -> est column permutation[i]
  Eigen::MatrixXd correlations;       // aligned |corr| matrix
  std::vector<double> subspace_scores;  // optional, per declared block

  std::string to_json() const;
};

EvalReport mcc(const Eigen::MatrixXd& truth, const Eigen::MatrixXd& est);

// R^2 of a small feed-forward regression est->true (fwd) and true->est (bwd).
struct SubspaceScore {
  double r2_forward = 0.0;
  double r2_backward = 0.0;
  double mean() const { return 0.5 * (r2_forward + r2_backward); }
};

SubspaceScore subspace_score(const Eigen::MatrixXd& true_block,
                             const Eigen::MatrixXd& est_block, std::uint64_t seed = 0);

struct BlockAssignment {
  std::vector<int> permutation;            // true block i -> est block
  std::vector<double> scores;              // mean subspace score of the match
};

BlockAssignment block_assignment(const std::vector<Eigen::MatrixXd>& true_blocks,
                                 const std::vector<Eigen::MatrixXd>& est_blocks,
                                 std::uint64_t seed = 0);

}  // namespace icalab
