#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdint>

#include "icalab/rng.hpp"
#include "icalab/support.hpp"

using namespace icalab;

namespace {

SupportMatrix from_bits(int m, int n, std::initializer_list<std::uint64_t> rows) {
  SupportMatrix s(m, n);
  int i = 0;
  for (auto r : rows) s.rows[i++] = r;
  return s;
}

// Literal restatement of the SS predicate used as an independent oracle:
// column k non-empty and every other source j is missing from some row
// that contains k.
bool ss_source_witness_form(const SupportMatrix& s, int k) {
  bool any = false;
  for (int i = 0; i < s.m; ++i) any = any || s.get(i, k);
  if (!any) return false;
  for (int j = 0; j < s.n; ++j) {
    if (j == k) continue;
    bool excluded = false;
    for (int i = 0; i < s.m; ++i)
      if (s.get(i, k) && !s.get(i, j)) excluded = true;
    if (!excluded) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("source_intersection basics") {
  // rows: {1}, {1,2} (bit0, bit0|bit1)
  auto s = from_bits(2, 2, {0b01, 0b11});
  auto i0 = source_intersection(s, 0);
  CHECK(i0.defined);
  CHECK(i0.bits == 0b01);
  auto i1 = source_intersection(s, 1);
  CHECK(i1.defined);
  CHECK(i1.bits == 0b11);  // only row {1,2} contains source 2

  auto empty_col = from_bits(2, 2, {0b01, 0b01});
  auto i2 = source_intersection(empty_col, 1);
  CHECK_FALSE(i2.defined);
  CHECK(i2.bits == empty_col.full_mask());  // sentinel: full column set
}

TEST_CASE("satisfies_ss_source matches witness characterisation exhaustively") {
  // Equivalence of the intersection form and the row-witness form over every
  // mask with m*n <= 16.
  for (auto [m, n] : {std::pair{2, 2}, {3, 2}, {2, 3}, {4, 3}, {3, 4}, {5, 3}, {4, 4}}) {
    const std::uint64_t total = std::uint64_t{1} << (m * n);
    const std::uint64_t row_mask = (std::uint64_t{1} << n) - 1;
    SupportMatrix s(m, n);
    for (std::uint64_t code = 0; code < total; ++code) {
      for (int i = 0; i < m; ++i) s.rows[i] = (code >> (i * n)) & row_mask;
      for (int k = 0; k < n; ++k) {
        REQUIRE(satisfies_ss_source(s, k) == ss_source_witness_form(s, k));
      }
    }
  }
}

TEST_CASE("ss_report aggregates per-source results") {
  auto s = from_bits(3, 2, {0b01, 0b10, 0b11});
  auto rep = ss_report(s);
  CHECK(rep.all_hold);
  CHECK(rep.fraction == 1.0);
  CHECK(rep.per_source[0].witness == std::vector<int>{0, 2});
  CHECK(rep.per_source[1].witness == std::vector<int>{1, 2});

  auto bad = SupportMatrix::ones(3, 2);
  auto rep2 = ss_report(bad);
  CHECK_FALSE(rep2.all_hold);
  CHECK(rep2.fraction == 0.0);
}

TEST_CASE("adding rows never breaks SS (monotonicity)") {
  Rng rng(991);
  for (int trial = 0; trial < 200; ++trial) {
    const int m = rng.uniform_int(1, 5);
    const int n = rng.uniform_int(1, 5);
    auto s = random_support(m, n, 0.5, derive_seed(4242, trial));
    SupportMatrix grown(m + 2, n);
    for (int i = 0; i < m; ++i) grown.rows[i] = s.rows[i];
    for (int i = m; i < m + 2; ++i)
      grown.rows[i] = random_support(1, n, 0.5, derive_seed(777, trial * 2 + i)).rows[0];
    for (int k = 0; k < n; ++k)
      if (satisfies_ss_source(s, k)) REQUIRE(satisfies_ss_source(grown, k));
  }
}

TEST_CASE("exhaustive all-sources rate: frozen values") {
  CHECK(ss_all_rate_exhaustive(1, 1) == 0.5);
  CHECK(ss_all_rate_exhaustive(2, 2) == 0.125);  // 2 of 16 masks
  // 3x2: rows must include {1} and {2} somewhere: 18/64
  CHECK(ss_all_rate_exhaustive(3, 2) == doctest::Approx(18.0 / 64.0).epsilon(1e-15));
}

TEST_CASE("analytic per-source probability: frozen values") {
  CHECK(ss_source_probability_analytic(1, 1) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(ss_source_probability_analytic(2, 2) == doctest::Approx(7.0 / 16.0).epsilon(1e-15));
  CHECK(ss_source_probability_analytic(10, 2) ==
        doctest::Approx(ss_source_rate_exhaustive(10, 2)).epsilon(1e-12));
}

TEST_CASE("analytic equals enumeration for every m*n <= 20") {
  for (int m = 1; m <= 20; ++m) {
    for (int n = 1; m * n <= 20; ++n) {
      const double exact = ss_source_rate_exhaustive(m, n);
      const double analytic = ss_source_probability_analytic(m, n);
      REQUIRE(std::abs(exact - analytic) <= 1e-12);
    }
  }
}

TEST_CASE("random_support is deterministic and respects p") {
  auto a = random_support(6, 5, 0.5, 31337);
  auto b = random_support(6, 5, 0.5, 31337);
  CHECK(a == b);
  CHECK_FALSE(a == random_support(6, 5, 0.5, 31338));
  CHECK(random_support(4, 4, 0.0, 1).count() == 0);
  CHECK(random_support(4, 4, 1.0, 1).count() == 16);
}

TEST_CASE("monte carlo rate within Wilson CI of exhaustive truth") {
  const double truth = ss_all_rate_exhaustive(2, 2);
  auto est = ss_rate_monte_carlo(2, 2, 0.5, 100000, 2024);
  CHECK(est.ci_low <= truth);
  CHECK(truth <= est.ci_high);
  CHECK(est.rate == doctest::Approx(truth).epsilon(0.05));

  const double src_truth = ss_source_probability_analytic(3, 3);
  auto frac = ss_rate_monte_carlo(3, 3, 0.5, 50000, 99, RateVariant::PerSourceFraction);
  CHECK(frac.ci_low <= src_truth);
  CHECK(src_truth <= frac.ci_high);
}

TEST_CASE("monte carlo estimate is independent of worker count") {
  auto one = ss_rate_monte_carlo(4, 3, 0.5, 2000, 555, RateVariant::AllSources, 1);
  auto three = ss_rate_monte_carlo(4, 3, 0.5, 2000, 555, RateVariant::AllSources, 3);
  CHECK(one.rate == three.rate);
  CHECK(one.ci_low == three.ci_low);
  CHECK(one.ci_high == three.ci_high);
  auto f1 = ss_rate_monte_carlo(4, 3, 0.5, 2000, 555, RateVariant::PerSourceFraction, 1);
  auto f4 = ss_rate_monte_carlo(4, 3, 0.5, 2000, 555, RateVariant::PerSourceFraction, 4);
  CHECK(f1.rate == doctest::Approx(f4.rate).epsilon(1e-12));
}

TEST_CASE("generic rank agrees with structural rank") {
  Rng rng(17);
  for (int trial = 0; trial < 300; ++trial) {
    const int m = rng.uniform_int(1, 6);
    const int n = rng.uniform_int(1, 6);
    auto s = random_support(m, n, rng.uniform(0.2, 0.9), derive_seed(88, trial));
    REQUIRE(generic_rank(s, derive_seed(1, trial)) == structural_rank(s));
  }
  CHECK(generic_rank(SupportMatrix::ones(4, 3), 7) == 3);
  CHECK(generic_rank(SupportMatrix(3, 3), 7) == 0);
}

TEST_CASE("support JSON round-trips") {
  auto s = random_support(5, 7, 0.4, 2718);
  auto back = support_from_json(support_to_json(s));
  CHECK(s == back);
  CHECK_THROWS(support_from_json("{\"m\":2,\"n\":2,\"rows\":[[1,0]]}"));
}

TEST_CASE("wilson interval sanity") {
  double lo = 0.0, hi = 0.0;
  wilson_interval(50.0, 100.0, &lo, &hi);
  CHECK(lo == doctest::Approx(0.40383).epsilon(1e-3));
  CHECK(hi == doctest::Approx(0.59617).epsilon(1e-3));
  wilson_interval(0.0, 100.0, &lo, &hi);
  CHECK(lo == 0.0);
  CHECK(hi > 0.0);
}
