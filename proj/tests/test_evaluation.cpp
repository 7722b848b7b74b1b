#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "icalab/evaluation.hpp"
#include "icalab/rng.hpp"

using namespace icalab;

namespace {

Eigen::VectorXd randn(int n, Rng& rng) {
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v(i) = rng.normal();
  return v;
}

double assignment_total(const Eigen::MatrixXd& score, const std::vector<int>& perm) {
  double acc = 0.0;
  for (int i = 0; i < static_cast<int>(perm.size()); ++i) acc += score(i, perm[i]);
  return acc;
}

}  // namespace

TEST_CASE("assignment matches factorial search") {
  Rng rng(991);
  for (int trial = 0; trial < 60; ++trial) {
    const int n = rng.uniform_int(1, 6);
    const int m = n + rng.uniform_int(0, 2);
    Eigen::MatrixXd score(n, m);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j) score(i, j) = rng.uniform(0.0, 1.0);
    const auto fast = optimal_assignment(score);
    const auto slow = brute_force_assignment(score);
    CHECK(assignment_total(score, fast) == doctest::Approx(assignment_total(score, slow)).epsilon(1e-12));
  }
}

TEST_CASE("assignment picks the diagonal when it dominates") {
  Eigen::MatrixXd score(3, 3);
  score << 0.9, 0.1, 0.2, 0.3, 0.8, 0.1, 0.2, 0.3, 0.95;
  const auto perm = optimal_assignment(score);
  CHECK(perm == std::vector<int>{0, 1, 2});
}

TEST_CASE("alignment absorbs monotone componentwise transforms") {
  Rng rng(17);
  const Eigen::VectorXd s = randn(500, rng);

  SUBCASE("identity") {
    const auto r = componentwise_align(s, s);
    CHECK(r.correlation >= 0.999);
  }
  SUBCASE("exp link") {
    const Eigen::VectorXd est = s.array().exp();
    const auto r = componentwise_align(s, est);
    CHECK(r.correlation >= 0.99);
  }
  SUBCASE("cubic link") {
    const Eigen::VectorXd est = s.array().cube();
    const auto r = componentwise_align(s, est);
    CHECK(r.correlation >= 0.99);
  }
  SUBCASE("sign flip") {
    const Eigen::VectorXd est = -s;
    const auto r = componentwise_align(s, est);
    CHECK(std::abs(r.correlation) >= 0.999);
  }
  SUBCASE("tanh squashing") {
    const Eigen::VectorXd est = (2.0 * s.array()).tanh();
    const auto r = componentwise_align(s, est);
    CHECK(r.correlation >= 0.98);
  }
}

TEST_CASE("alignment of unrelated noise stays near zero") {
  Rng rng(18);
  const Eigen::VectorXd s = randn(2000, rng);
  const Eigen::VectorXd e = randn(2000, rng);
  const auto r = componentwise_align(s, e);
  CHECK(std::abs(r.correlation) <= 0.15);
}

TEST_CASE("constant estimate column is flagged degenerate") {
  Rng rng(19);
  const Eigen::VectorXd s = randn(100, rng);
  const Eigen::VectorXd e = Eigen::VectorXd::Constant(100, 3.5);
  const auto r = componentwise_align(s, e);
  CHECK(r.degenerate);
  CHECK(r.correlation == 0.0);
}

TEST_CASE("neural alignment handles a non-monotone link") {
  Rng rng(23);
  const Eigen::VectorXd s = randn(600, rng);
  const Eigen::VectorXd est = s;  // recover s from est where truth = est^2
  const Eigen::VectorXd truth = s.array().square();
  const auto r = componentwise_align(truth, est, AlignMethod::Neural);
  CHECK(r.correlation >= 0.95);
}

TEST_CASE("mcc recovers a permuted transformed source set") {
  Rng rng(29);
  const int N = 500;
  Eigen::MatrixXd truth(N, 3);
  for (int c = 0; c < 3; ++c) truth.col(c) = randn(N, rng);
  Eigen::MatrixXd est(N, 3);
  est.col(0) = truth.col(2).array().cube();
  est.col(1) = (-truth.col(0)).array() * 2.0 + 0.5;
  est.col(2) = truth.col(1).array().exp();
  const auto rep = mcc(truth, est);
  CHECK(rep.mcc >= 0.98);
  CHECK(rep.permutation == std::vector<int>{1, 2, 0});
}

TEST_CASE("mcc ignores extra unrelated estimate columns") {
  Rng rng(31);
  const int N = 500;
  Eigen::MatrixXd truth(N, 2);
  truth.col(0) = randn(N, rng);
  truth.col(1) = randn(N, rng);
  Eigen::MatrixXd est(N, 4);
  est.col(0) = randn(N, rng);
  est.col(1) = truth.col(1);
  est.col(2) = randn(N, rng);
  est.col(3) = truth.col(0).array().cube();
  const auto rep = mcc(truth, est);
  CHECK(rep.mcc >= 0.98);
  CHECK(rep.permutation == std::vector<int>{3, 1});
}

TEST_CASE("report serializes to json") {
  Rng rng(37);
  Eigen::MatrixXd truth(60, 2), est(60, 2);
  for (int c = 0; c < 2; ++c) {
    truth.col(c) = randn(60, rng);
    est.col(c) = truth.col(c);
  }
  const auto rep = mcc(truth, est);
  const std::string j = rep.to_json();
  CHECK(j.find("\"mcc\"") != std::string::npos);
  CHECK(j.find("\"permutation\"") != std::string::npos);
  CHECK(j.find("\"correlations\"") != std::string::npos);
}

TEST_CASE("subspace score detects shared v. disjoint information") {
  Rng rng(41);
  const int N = 600;
  Eigen::MatrixXd block(N, 2);
  block.col(0) = randn(N, rng);
  block.col(1) = randn(N, rng);

  SUBCASE("invertible linear mix scores high both ways") {
    Eigen::Matrix2d A;
    A << 1.0, 0.7, -0.4, 1.1;
    const Eigen::MatrixXd mixed = block * A.transpose();
    const auto s = subspace_score(block, mixed, 7);
    CHECK(s.r2_forward >= 0.95);
    CHECK(s.r2_backward >= 0.95);
  }
  SUBCASE("independent noise block scores low") {
    Eigen::MatrixXd noise(N, 2);
    noise.col(0) = randn(N, rng);
    noise.col(1) = randn(N, rng);
    const auto s = subspace_score(block, noise, 7);
    CHECK(s.r2_forward <= 0.2);
    CHECK(s.r2_backward <= 0.2);
  }
}

TEST_CASE("block assignment matches blocks through a shuffle") {
  Rng rng(43);
  const int N = 600;
  Eigen::MatrixXd b0(N, 2), b1(N, 1);
  b0.col(0) = randn(N, rng);
  b0.col(1) = randn(N, rng);
  b1.col(0) = randn(N, rng);

  Eigen::Matrix2d A;
  A << 0.9, -0.5, 0.6, 1.2;
  std::vector<Eigen::MatrixXd> truth{b0, b1};
  std::vector<Eigen::MatrixXd> est{b1.array().cube().matrix(), b0 * A.transpose()};
  const auto ba = block_assignment(truth, est, 11);
  CHECK(ba.permutation == std::vector<int>{1, 0});
  CHECK(ba.scores[0] >= 0.9);
  CHECK(ba.scores[1] >= 0.9);
}

TEST_CASE("block assignment rejects mismatched widths") {
  Eigen::MatrixXd a(100, 2), b(100, 1);
  a.setRandom();
  b.setRandom();
  CHECK_THROWS(block_assignment({a}, {b}, 0));
}
