#include "icalab/support.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <bit>
#include <cmath>
#include <stdexcept>
#include <thread>

#include <nlohmann/json.hpp>

#include "icalab/rng.hpp"

namespace icalab {

SupportMatrix::SupportMatrix(int m_, int n_) : m(m_), n(n_), rows(m_, 0) {
  if (m_ <= 0 || n_ <= 0) throw std::invalid_argument("support: m and n must be positive");
  if (n_ > 64) throw std::invalid_argument("support: n > 64 unsupported");
}

SupportMatrix SupportMatrix::ones(int m, int n) {
  SupportMatrix s(m, n);
  for (auto& r : s.rows) r = s.full_mask();
  return s;
}

void SupportMatrix::set(int i, int j, bool v) {
  if (v)
    rows[i] |= std::uint64_t{1} << j;
  else
    rows[i] &= ~(std::uint64_t{1} << j);
}

std::uint64_t SupportMatrix::full_mask() const {
  return n == 64 ? ~std::uint64_t{0} : (std::uint64_t{1} << n) - 1;
}

int SupportMatrix::count() const {
  int c = 0;
  for (auto r : rows) c += std::popcount(r);
  return c;
}

SourceIntersection source_intersection(const SupportMatrix& s, int k) {
  if (k < 0 || k >= s.n) throw std::invalid_argument("source_intersection: k out of range");
  SourceIntersection out;
  out.bits = s.full_mask();
  for (int i = 0; i < s.m; ++i) {
    if (s.get(i, k)) {
      out.bits &= s.rows[i];
      out.defined = true;
    }
  }
  return out;
}

bool satisfies_ss_source(const SupportMatrix& s, int k) {
  const auto inter = source_intersection(s, k);
  return inter.defined && inter.bits == (std::uint64_t{1} << k);
}

SsReport ss_report(const SupportMatrix& s) {
  SsReport rep;
  rep.per_source.resize(s.n);
  rep.all_hold = true;
  int held = 0;
  for (int k = 0; k < s.n; ++k) {
    auto& ps = rep.per_source[k];
    const auto inter = source_intersection(s, k);
    ps.defined = inter.defined;
    ps.intersection = inter.bits;
    ps.holds = inter.defined && inter.bits == (std::uint64_t{1} << k);
    for (int i = 0; i < s.m; ++i)
      if (s.get(i, k)) ps.witness.push_back(i);
    rep.all_hold = rep.all_hold && ps.holds;
    held += ps.holds ? 1 : 0;
  }
  rep.fraction = static_cast<double>(held) / s.n;
  return rep;
}

SupportMatrix random_support(int m, int n, double p, std::uint64_t seed) {
  if (p < 0.0 || p > 1.0) throw std::invalid_argument("random_support: p outside [0,1]");
  SupportMatrix s(m, n);
  Rng rng(seed);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      if (rng.bernoulli(p)) s.rows[i] |= std::uint64_t{1} << j;
  return s;
}

void wilson_interval(double successes, double total, double* lo, double* hi) {
  constexpr double z = 1.959963984540054;  // 97.5% normal quantile
  const double phat = successes / total;
  const double z2 = z * z;
  const double denom = 1.0 + z2 / total;
  const double centre = (phat + z2 / (2.0 * total)) / denom;
  const double half =
      z * std::sqrt(phat * (1.0 - phat) / total + z2 / (4.0 * total * total)) / denom;
  *lo = successes <= 0.0 ? 0.0 : std::max(0.0, centre - half);
  *hi = successes >= total ? 1.0 : std::min(1.0, centre + half);
}

namespace {

double trial_value(int m, int n, double p, std::uint64_t seed, long t, RateVariant variant) {
  const SupportMatrix s = random_support(m, n, p, derive_seed(seed, static_cast<std::uint64_t>(t)));
  if (variant == RateVariant::AllSources) {
    for (int k = 0; k < n; ++k)
      if (!satisfies_ss_source(s, k)) return 0.0;
    return 1.0;
  }
  int held = 0;
  for (int k = 0; k < n; ++k) held += satisfies_ss_source(s, k) ? 1 : 0;
  return static_cast<double>(held) / n;
}

}  // namespace

RateEstimate ss_rate_monte_carlo(int m, int n, double p, long trials, std::uint64_t seed,
                                 RateVariant variant, int workers) {
  if (trials <= 0) throw std::invalid_argument("ss_rate_monte_carlo: trials must be positive");
  if (workers < 1) workers = 1;
  std::vector<double> partial(workers, 0.0);
  auto run = [&](int w) {
    double acc = 0.0;
    for (long t = w; t < trials; t += workers) acc += trial_value(m, n, p, seed, t, variant);
    partial[w] = acc;
  };
  if (workers == 1) {
    run(0);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w) pool.emplace_back(run, w);
    for (auto& th : pool) th.join();
  }
  double successes = 0.0;
  for (double v : partial) successes += v;  // fixed order; sums of per-trial values
  RateEstimate est;
  est.rate = successes / static_cast<double>(trials);
  est.trials = trials;
  est.seed = seed;
  // Fraction variant pools trials*n per-source indicators.
  const double total = variant == RateVariant::AllSources
                           ? static_cast<double>(trials)
                           : static_cast<double>(trials) * n;
  wilson_interval(est.rate * total, total, &est.ci_low, &est.ci_high);
  return est;
}

namespace {

template <typename Pred>
double exhaustive_rate(int m, int n, Pred pred) {
  if (m <= 0 || n <= 0) throw std::invalid_argument("exhaustive: m,n must be positive");
  if (m * n > 20) throw std::invalid_argument("exhaustive: m*n must be <= 20");
  const std::uint64_t total = std::uint64_t{1} << (m * n);
  const std::uint64_t row_mask = (std::uint64_t{1} << n) - 1;
  SupportMatrix s(m, n);
  std::uint64_t hits = 0;
  for (std::uint64_t code = 0; code < total; ++code) {
    for (int i = 0; i < m; ++i) s.rows[i] = (code >> (i * n)) & row_mask;
    if (pred(s)) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(total);
}

}  // namespace

double ss_all_rate_exhaustive(int m, int n) {
  return exhaustive_rate(m, n, [n](const SupportMatrix& s) {
    for (int k = 0; k < n; ++k)
      if (!satisfies_ss_source(s, k)) return false;
    return true;
  });
}

double ss_source_rate_exhaustive(int m, int n) {
  return exhaustive_rate(m, n, [](const SupportMatrix& s) { return satisfies_ss_source(s, 0); });
}

double ss_source_probability_analytic(int m, int n) {
  if (m <= 0 || n <= 0) throw std::invalid_argument("analytic: m,n must be positive");
  // Inclusion-exclusion over the sources that could contaminate the
  // intersection; each term subtracts the all-zero-column event so the
  // empty-intersection convention (SS fails) is respected for every n.
  long double sum = 0.0L;
  long double binom = 1.0L;  // C(n-1, s)
  const long double pow_half_m = std::pow(0.5L, static_cast<long double>(m));
  for (int s = 0; s < n; ++s) {
    if (s > 0) binom = binom * (n - s) / s;
    const long double base = 0.5L + std::pow(2.0L, -static_cast<long double>(s + 1));
    const long double term = std::pow(base, static_cast<long double>(m)) - pow_half_m;
    sum += (s % 2 == 0 ? 1.0L : -1.0L) * binom * term;
  }
  return static_cast<double>(sum);
}

int generic_rank(const SupportMatrix& s, std::uint64_t seed) {
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(s.m, s.n);
  Rng rng(seed);
  for (int i = 0; i < s.m; ++i)
    for (int j = 0; j < s.n; ++j)
      if (s.get(i, j)) a(i, j) = rng.normal();
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a);
  const auto& sv = svd.singularValues();
  if (sv.size() == 0) return 0;
  const double tol = std::max(s.m, s.n) * sv(0) * 1e-12;
  int r = 0;
  for (int i = 0; i < sv.size(); ++i)
    if (sv(i) > tol) ++r;
  return r;
}

namespace {

bool augment(const SupportMatrix& s, int row, std::vector<int>& col_owner,
             std::uint64_t& visited) {
  for (int j = 0; j < s.n; ++j) {
    if (!s.get(row, j) || ((visited >> j) & 1u)) continue;
    visited |= std::uint64_t{1} << j;
    if (col_owner[j] < 0 || augment(s, col_owner[j], col_owner, visited)) {
      col_owner[j] = row;
      return true;
    }
  }
  return false;
}

}  // namespace

int structural_rank(const SupportMatrix& s) {
  std::vector<int> col_owner(s.n, -1);
  int matched = 0;
  for (int i = 0; i < s.m; ++i) {
    std::uint64_t visited = 0;
    if (augment(s, i, col_owner, visited)) ++matched;
  }
  return matched;
}

std::string support_to_json(const SupportMatrix& s) {
  nlohmann::json j;
  j["m"] = s.m;
  j["n"] = s.n;
  auto rows = nlohmann::json::array();
  for (int i = 0; i < s.m; ++i) {
    auto row = nlohmann::json::array();
    for (int k = 0; k < s.n; ++k) row.push_back(s.get(i, k) ? 1 : 0);
    rows.push_back(std::move(row));
  }
  j["rows"] = std::move(rows);
  return j.dump();
}

SupportMatrix support_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  const int m = j.at("m").get<int>();
  const int n = j.at("n").get<int>();
  SupportMatrix s(m, n);
  const auto& rows = j.at("rows");
  if (static_cast<int>(rows.size()) != m)
    throw std::invalid_argument("support_from_json: row count mismatch");
  for (int i = 0; i < m; ++i) {
    if (static_cast<int>(rows[i].size()) != n)
      throw std::invalid_argument("support_from_json: column count mismatch");
    for (int k = 0; k < n; ++k)
      if (rows[i][k].get<int>() != 0) s.rows[i] |= std::uint64_t{1} << k;
  }
  return s;
}

}  // namespace icalab
