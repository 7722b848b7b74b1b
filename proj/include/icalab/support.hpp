// support.hpp - Jacobian support masks and the structural-sparsity predicate.
//
// A support matrix records which source coordinates each observed variable
// depends on.  Source k is "structurally sparse" (SS) when the rows that
// contain k intersect exactly in {k}; taking all such rows gives the minimal
// intersection, so that choice is canonical.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace icalab {

struct SupportMatrix {
  int m = 0;                       // observed variables (rows)
  int n = 0;                       // sources (columns), n <= 64
  std::vector<std::uint64_t> rows; // bit j of rows[i] set iff entry (i,j) is on

  SupportMatrix() = default;
  SupportMatrix(int m_, int n_);

  static SupportMatrix ones(int m, int n);

  bool get(int i, int j) const { return (rows[i] >> j) & 1u; }
  void set(int i, int j, bool v);
  std::uint64_t full_mask() const;
  int count() const;  // number of set entries

  bool operator==(const SupportMatrix& o) const = default;
};

// Minimal intersection over rows containing source k.  When no row contains
// k the intersection is undefined; `defined` is false and `bits` holds the
// full column set sentinel.
struct SourceIntersection {
  std::uint64_t bits = 0;
  bool defined = false;
};

SourceIntersection source_intersection(const SupportMatrix& s, int k);

bool satisfies_ss_source(const SupportMatrix& s, int k);

struct SsPerSource {
  bool holds = false;
  bool defined = false;            // column k non-empty
  std::uint64_t intersection = 0;
  std::vector<int> witness;        // rows containing k (maximal witness set)
};

struct SsReport {
  std::vector<SsPerSource> per_source;
  bool all_hold = false;
  double fraction = 0.0;           // share of sources satisfying SS
};

SsReport ss_report(const SupportMatrix& s);

// I.i.d. Bernoulli(p) mask.
SupportMatrix random_support(int m, int n, double p, std::uint64_t seed);

enum class RateVariant { AllSources, PerSourceFraction };

struct RateEstimate {
  double rate = 0.0;
  long trials = 0;
  double ci_low = 0.0;   // Wilson 95% bounds
  double ci_high = 0.0;
  std::uint64_t seed = 0;
};

// Wilson score interval for `successes` out of `total` at 95% confidence.
void wilson_interval(double successes, double total, double* lo, double* hi);

// Monte-Carlo SS rate over random Bernoulli(p) masks.  Trial t uses
// derive_seed(seed, t), so the estimate is independent of `workers`.
RateEstimate ss_rate_monte_carlo(int m, int n, double p, long trials,
                                 std::uint64_t seed,
                                 RateVariant variant = RateVariant::AllSources,
                                 int workers = 1);

// Exact rates by enumerating all 2^(m*n) masks; requires m*n <= 20.
double ss_all_rate_exhaustive(int m, int n);
double ss_source_rate_exhaustive(int m, int n);  // fixed source (k = 0)

// Closed-form per-source probability under Bernoulli(1/2) entries.
double ss_source_probability_analytic(int m, int n);

// Rank of a matrix with independent standard-normal entries on the support.
int generic_rank(const SupportMatrix& s, std::uint64_t seed);

// Maximum bipartite matching between rows and columns; equals the generic
// rank of the pattern and is deterministic.
int structural_rank(const SupportMatrix& s);

// JSON round-trip: {"m":..,"n":..,"rows":[[0,1,..],..]}.
std::string support_to_json(const SupportMatrix& s);
SupportMatrix support_from_json(const std::string& text);

}  // namespace icalab
