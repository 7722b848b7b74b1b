#include "icalab/evaluation.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>

#include <boost/math/distributions/normal.hpp>
#include <nlohmann/json.hpp>

#include "icalab/autodiff.hpp"
#include "icalab/rng.hpp"

namespace icalab {

namespace {

double pearson(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const double ma = a.mean(), mb = b.mean();
  const Eigen::ArrayXd da = a.array() - ma, db = b.array() - mb;
  const double va = (da * da).sum(), vb = (db * db).sum();
  if (va <= 0.0 || vb <= 0.0) return 0.0;
  return (da * db).sum() / std::sqrt(va * vb);
}

double column_sd(const Eigen::VectorXd& v) {
  const Eigen::ArrayXd d = v.array() - v.mean();
  return std::sqrt((d * d).sum() / std::max<int>(1, static_cast<int>(v.size()) - 1));
}

// Small tanh network with a linear skip path, trained full-batch with Adam.
// Returns fitted values for standardized inputs/targets.
Eigen::MatrixXd fit_mlp(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y,
                        std::uint64_t seed, int iters = 250, double lr = 0.02) {
  const int N = static_cast<int>(X.rows());
  const int d = static_cast<int>(X.cols());
  const int dy = static_cast<int>(Y.cols());
  const int H = 16;

  Rng rng(splitmix64(seed ^ 0xABCD1234u));
  Tape tape;
  tape.reserve(static_cast<std::size_t>(N) * (H * 2 + dy + 4) + (H + dy) * (d + H) + 64,
               static_cast<std::size_t>(N) * (H * d + dy * (H + d)) * 2 + 64);

  std::vector<Tape::Id> params;
  auto param = [&](double v) {
    const auto id = tape.leaf(v);
    params.push_back(id);
    return id;
  };

  std::vector<std::vector<Tape::Id>> W1(H);
  std::vector<Tape::Id> b1(H);
  for (int h = 0; h < H; ++h) {
    for (int j = 0; j < d; ++j) W1[h].push_back(param(rng.normal() / std::sqrt(d)));
    b1[h] = param(0.0);
  }
  std::vector<std::vector<Tape::Id>> Wo(dy);
  std::vector<Tape::Id> bo(dy);
  for (int o = 0; o < dy; ++o) {
    for (int j = 0; j < H + d; ++j) Wo[o].push_back(param(0.0));
    bo[o] = param(0.0);
  }

  std::vector<std::vector<Tape::Id>> xin(N), preds(N);
  std::vector<Tape::Id> sq_terms;
  sq_terms.reserve(static_cast<std::size_t>(N) * dy);
  for (int s = 0; s < N; ++s) {
    xin[s].resize(d);
    for (int j = 0; j < d; ++j) xin[s][j] = tape.leaf(X(s, j));
    std::vector<Tape::Id> feat;
    feat.reserve(H + d);
    for (int h = 0; h < H; ++h)
      feat.push_back(tape.tanh_(tape.affine(b1[h], W1[h], xin[s])));
    for (int j = 0; j < d; ++j) feat.push_back(xin[s][j]);
    preds[s].resize(dy);
    for (int o = 0; o < dy; ++o) {
      const auto yhat = tape.affine(bo[o], Wo[o], feat);
      preds[s][o] = yhat;
      const auto target = tape.leaf(Y(s, o));
      sq_terms.push_back(tape.square(tape.sub(yhat, target)));
    }
  }
  const auto sse = tape.sum(sq_terms);
  const auto loss = tape.div(sse, tape.leaf(static_cast<double>(N) * dy));

  // Adam
  const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::vector<double> m(params.size(), 0.0), v(params.size(), 0.0), adj;
  for (int it = 1; it <= iters; ++it) {
    tape.gradient(loss, &adj);
    const double c1 = 1.0 - std::pow(beta1, it), c2 = 1.0 - std::pow(beta2, it);
    for (std::size_t p = 0; p < params.size(); ++p) {
      const double g = adj[params[p]];
      m[p] = beta1 * m[p] + (1 - beta1) * g;
      v[p] = beta2 * v[p] + (1 - beta2) * g * g;
      const double step = lr * (m[p] / c1) / (std::sqrt(v[p] / c2) + eps);
      tape.set_leaf(params[p], tape.value(params[p]) - step);
    }
    tape.recompute();
  }

  Eigen::MatrixXd fitted(N, dy);
  for (int s = 0; s < N; ++s)
    for (int o = 0; o < dy; ++o) fitted(s, o) = tape.value(preds[s][o]);
  return fitted;
}

// Average ranks mapped through the normal quantile function.
Eigen::VectorXd gaussianized_ranks(const Eigen::VectorXd& v) {
  const int N = static_cast<int>(v.size());
  std::vector<int> order(N);
  for (int i = 0; i < N; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](int a, int b) { return v(a) < v(b); });
  Eigen::VectorXd rank(N);
  int i = 0;
  while (i < N) {
    int j = i;
    while (j + 1 < N && v(order[j + 1]) == v(order[i])) ++j;
    const double avg = 0.5 * (i + j);
    for (int t = i; t <= j; ++t) rank(order[t]) = avg;
    i = j + 1;
  }
  const boost::math::normal_distribution<double> gauss;
  Eigen::VectorXd z(N);
  for (int t = 0; t < N; ++t) z(t) = boost::math::quantile(gauss, (rank(t) + 0.5) / N);
  return z;
}

struct ZScore {
  Eigen::MatrixXd z;
  Eigen::VectorXd mean, sd;
};

ZScore standardize(const Eigen::MatrixXd& x) {
  ZScore out;
  out.z.resizeLike(x);
  out.mean.resize(x.cols());
  out.sd.resize(x.cols());
  for (int c = 0; c < x.cols(); ++c) {
    out.mean(c) = x.col(c).mean();
    double sd = column_sd(x.col(c));
    if (sd < 1e-12) sd = 1.0;
    out.sd(c) = sd;
    out.z.col(c) = (x.col(c).array() - out.mean(c)) / sd;
  }
  return out;
}

}  // namespace

AlignResult componentwise_align(const Eigen::VectorXd& truth, const Eigen::VectorXd& est,
                                AlignMethod method) {
  if (truth.size() != est.size()) throw std::invalid_argument("align: length mismatch");
  if (truth.size() < 10) throw std::invalid_argument("align: need at least 10 samples");
  const int N = static_cast<int>(est.size());

  AlignResult out;
  if (column_sd(est) < 1e-12 || column_sd(truth) < 1e-12) {
    out.fitted = Eigen::VectorXd::Zero(N);
    out.degenerate = true;
    out.correlation = 0.0;
    return out;
  }

  if (method == AlignMethod::Neural) {
    const auto xs = standardize(est);
    const auto ys = standardize(truth);
    out.fitted = fit_mlp(xs.z, ys.z, 1234567).col(0);
    out.correlation = pearson(out.fitted, truth);
    return out;
  }

  // Gaussianized ranks make the fit invariant under strictly monotone
  // transforms of the estimate; 5 quantile knots, cubic truncated powers.
  const Eigen::VectorXd z = gaussianized_ranks(est);
  std::vector<double> sorted(z.data(), z.data() + N);
  std::sort(sorted.begin(), sorted.end());
  auto quantile = [&](double q) {
    return sorted[static_cast<std::size_t>(q * (N - 1))];
  };
  const std::array<double, 5> knots = {quantile(0.1), quantile(0.3), quantile(0.5),
                                       quantile(0.7), quantile(0.9)};

  Eigen::MatrixXd basis(N, 4 + knots.size());
  for (int i = 0; i < N; ++i) {
    const double e = z(i);
    basis(i, 0) = 1.0;
    basis(i, 1) = e;
    basis(i, 2) = e * e;
    basis(i, 3) = e * e * e;
    for (std::size_t k = 0; k < knots.size(); ++k) {
      const double p = std::max(0.0, e - knots[k]);
      basis(i, 4 + k) = p * p * p;
    }
  }
  const Eigen::VectorXd beta = basis.colPivHouseholderQr().solve(truth);
  out.fitted = basis * beta;
  out.correlation = pearson(out.fitted, truth);
  return out;
}

Eigen::MatrixXd correlation_matrix(const Eigen::MatrixXd& truth, const Eigen::MatrixXd& est,
                                   AlignMethod method) {
  if (truth.rows() != est.rows()) throw std::invalid_argument("correlation_matrix: row mismatch");
  Eigen::MatrixXd cm(truth.cols(), est.cols());
  for (int i = 0; i < truth.cols(); ++i)
    for (int j = 0; j < est.cols(); ++j)
      cm(i, j) = std::abs(componentwise_align(truth.col(i), est.col(j), method).correlation);
  return cm;
}

std::vector<int> optimal_assignment(const Eigen::MatrixXd& score) {
  const int n = static_cast<int>(score.rows());
  const int m = static_cast<int>(score.cols());
  if (n > m) throw std::invalid_argument("optimal_assignment: more rows than columns");
  // Hungarian with potentials on the negated matrix (maximization).
  constexpr double INF = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0), minv(m + 1);
  std::vector<int> p(m + 1, 0), way(m + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), INF);
    std::vector<bool> used(m + 1, false);
    do {
      used[j0] = true;
      const int i0 = p[j0];
      int j1 = -1;
      double delta = INF;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = -score(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> out(n, -1);
  for (int j = 1; j <= m; ++j)
    if (p[j] > 0) out[p[j] - 1] = j - 1;
  return out;
}

namespace {

void brute_rec(const Eigen::MatrixXd& score, int row, std::vector<int>& cur,
               std::vector<bool>& used, double acc, double* best,
               std::vector<int>* best_perm) {
  const int n = static_cast<int>(score.rows());
  const int m = static_cast<int>(score.cols());
  if (row == n) {
    if (acc > *best + 1e-15) {
      *best = acc;
      *best_perm = cur;
    }
    return;
  }
  for (int j = 0; j < m; ++j) {
    if (used[j]) continue;
    used[j] = true;
    cur[row] = j;
    brute_rec(score, row + 1, cur, used, acc + score(row, j), best, best_perm);
    used[j] = false;
  }
}

}  // namespace

std::vector<int> brute_force_assignment(const Eigen::MatrixXd& score) {
  if (score.rows() > 8) throw std::invalid_argument("brute_force_assignment: too large");
  std::vector<int> cur(score.rows(), -1), best_perm;
  std::vector<bool> used(score.cols(), false);
  double best = -std::numeric_limits<double>::infinity();
  brute_rec(score, 0, cur, used, 0.0, &best, &best_perm);
  return best_perm;
}

EvalReport mcc(const Eigen::MatrixXd& truth, const Eigen::MatrixXd& est) {
  EvalReport rep;
  rep.correlations = correlation_matrix(truth, est);
  rep.permutation = optimal_assignment(rep.correlations);
  double acc = 0.0;
  for (int i = 0; i < truth.cols(); ++i) acc += rep.correlations(i, rep.permutation[i]);
  rep.mcc = acc / truth.cols();
  return rep;
}

std::string EvalReport::to_json() const {
  nlohmann::json j;
  j["mcc"] = mcc;
  j["permutation"] = permutation;
  auto rows = nlohmann::json::array();
  for (int i = 0; i < correlations.rows(); ++i) {
    auto row = nlohmann::json::array();
    for (int c = 0; c < correlations.cols(); ++c) row.push_back(correlations(i, c));
    rows.push_back(std::move(row));
  }
  j["correlations"] = std::move(rows);
  if (!subspace_scores.empty()) j["subspace_scores"] = subspace_scores;
  return j.dump(2);
}

SubspaceScore subspace_score(const Eigen::MatrixXd& true_block, const Eigen::MatrixXd& est_block,
                             std::uint64_t seed) {
  if (true_block.rows() != est_block.rows())
    throw std::invalid_argument("subspace_score: row mismatch");
  if (true_block.rows() < 10 * std::max(true_block.cols(), est_block.cols()))
    throw std::invalid_argument("subspace_score: need N >= 10d samples");

  auto r2 = [&](const Eigen::MatrixXd& from, const Eigen::MatrixXd& to,
                std::uint64_t s) {
    const auto xs = standardize(from);
    const auto ys = standardize(to);
    const Eigen::MatrixXd fit = fit_mlp(xs.z, ys.z, s);
    const double sse = (ys.z - fit).squaredNorm();
    const double sst = ys.z.squaredNorm();
    return 1.0 - sse / sst;
  };
  SubspaceScore out;
  out.r2_forward = r2(est_block, true_block, derive_seed(seed, 1));
  out.r2_backward = r2(true_block, est_block, derive_seed(seed, 2));
  return out;
}

BlockAssignment block_assignment(const std::vector<Eigen::MatrixXd>& true_blocks,
                                 const std::vector<Eigen::MatrixXd>& est_blocks,
                                 std::uint64_t seed) {
  if (true_blocks.size() != est_blocks.size())
    throw std::invalid_argument("block_assignment: block count mismatch");
  std::vector<int> ta, tb;
  for (auto& b : true_blocks) ta.push_back(static_cast<int>(b.cols()));
  for (auto& b : est_blocks) tb.push_back(static_cast<int>(b.cols()));
  {
    auto sa = ta, sb = tb;
    std::sort(sa.begin(), sa.end());
    std::sort(sb.begin(), sb.end());
    if (sa != sb) throw std::invalid_argument("block_assignment: block sizes mismatch");
  }
  const int k = static_cast<int>(true_blocks.size());
  Eigen::MatrixXd score(k, k);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j)
      score(i, j) = ta[i] == tb[j]
                        ? subspace_score(true_blocks[i], est_blocks[j],
                                         derive_seed(seed, i * k + j))
                              .mean()
                        : -1e9;
  BlockAssignment out;
  out.permutation = optimal_assignment(score);
  for (int i = 0; i < k; ++i) out.scores.push_back(score(i, out.permutation[i]));
  return out;
}

}  // namespace icalab
