#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "icalab/flow.hpp"
#include "icalab/rng.hpp"

using namespace icalab;

namespace {

FlowModel random_model(FlowConfig cfg, std::uint64_t seed, double spread = 0.4) {
  FlowModel model(cfg);
  Rng rng(seed);
  auto p = model.flatten();
  for (auto& v : p) v = spread * rng.normal();
  model.unflatten(p);
  return model;
}

Eigen::VectorXd random_point(int m, Rng& rng) {
  Eigen::VectorXd v(m);
  for (int i = 0; i < m; ++i) v(i) = rng.normal();
  return v;
}

}  // namespace

TEST_CASE("fresh model is the identity map") {
  FlowConfig cfg;
  cfg.m = 6;
  cfg.n = 3;
  cfg.seed = 4;
  const FlowModel model(cfg);
  Rng rng(1);
  const Eigen::VectorXd z = random_point(6, rng);
  double ld = 0;
  const Eigen::VectorXd x = model.forward(z, &ld);
  CHECK(x == z);
  CHECK(ld == 0.0);
  const Eigen::MatrixXd J = model.decoder_jacobian(z, 3);
  CHECK(J.topRows(3) == Eigen::MatrixXd::Identity(3, 3));
  CHECK(J.bottomRows(3) == Eigen::MatrixXd::Zero(3, 3));
}

TEST_CASE("round trips hold on random models") {
  for (const bool vp : {false, true}) {
    FlowConfig cfg;
    cfg.m = 8;
    cfg.n = 4;
    cfg.volume_preserving = vp;
    const FlowModel model = random_model(cfg, 77 + vp);
    Rng rng(5);
    double worst = 0;
    for (int t = 0; t < 100; ++t) {
      const Eigen::VectorXd z = random_point(8, rng);
      double lf = 0, li = 0;
      const Eigen::VectorXd x = model.forward(z, &lf);
      const Eigen::VectorXd back = model.inverse(x, &li);
      worst = std::max(worst, (back - z).cwiseAbs().maxCoeff());
      CHECK(std::abs(lf + li) <= 1e-10);
      if (vp) {
        CHECK(lf == 0.0);
        CHECK(li == 0.0);
      }
    }
    CHECK(worst <= 1e-6);
  }
}

TEST_CASE("exact log-det equals the determinant of the analytic jacobian") {
  FlowConfig cfg;
  cfg.m = 6;
  cfg.n = 6;
  cfg.volume_preserving = false;
  const FlowModel model = random_model(cfg, 31);
  Rng rng(6);
  for (int t = 0; t < 20; ++t) {
    const Eigen::VectorXd z = random_point(6, rng);
    double ld = 0;
    model.forward(z, &ld);
    const Eigen::MatrixXd J = model.decoder_jacobian(z, 6);
    const double slogdet = std::log(std::abs(J.partialPivLu().determinant()));
    CHECK(ld == doctest::Approx(slogdet).epsilon(1e-8));
  }
}

TEST_CASE("volume-preserving jacobian has unit determinant") {
  FlowConfig cfg;
  cfg.m = 6;
  cfg.n = 6;
  cfg.volume_preserving = true;
  const FlowModel model = random_model(cfg, 32);
  Rng rng(7);
  const Eigen::VectorXd z = random_point(6, rng);
  const Eigen::MatrixXd J = model.decoder_jacobian(z, 6);
  CHECK(std::abs(J.partialPivLu().determinant()) == doctest::Approx(1.0).epsilon(1e-10));
}

TEST_CASE("decoder jacobian matches finite differences") {
  FlowConfig cfg;
  cfg.m = 8;
  cfg.n = 4;
  cfg.volume_preserving = true;
  const FlowModel model = random_model(cfg, 33);
  Rng rng(8);
  const Eigen::VectorXd z = random_point(8, rng);
  const Eigen::MatrixXd J = model.decoder_jacobian(z, 4);
  for (int j = 0; j < 4; ++j) {
    const double h = 1e-5 * std::max(1.0, std::abs(z(j)));
    Eigen::VectorXd zp = z, zm = z;
    zp(j) += h;
    zm(j) -= h;
    const Eigen::VectorXd col = (model.forward(zp) - model.forward(zm)) / (2 * h);
    for (int i = 0; i < 8; ++i) {
      const double rel = std::abs(J(i, j) - col(i)) /
                         std::max({1.0, std::abs(J(i, j)), std::abs(col(i))});
      CHECK(rel <= 1e-4);
    }
  }
}

TEST_CASE("linear coupling configuration has a constant jacobian") {
  FlowConfig cfg;
  cfg.m = 4;
  cfg.n = 4;
  cfg.volume_preserving = false;
  FlowModel model(cfg);
  Rng rng(9);
  for (auto& lay : model.layers()) {
    for (int i = 0; i < lay.b2.size(); ++i) lay.b2(i) = 0.3 * rng.normal();
  }
  Rng rng2(10);
  const Eigen::MatrixXd J1 = model.decoder_jacobian(random_point(4, rng2), 4);
  const Eigen::MatrixXd J2 = model.decoder_jacobian(random_point(4, rng2), 4);
  CHECK((J1 - J2).cwiseAbs().maxCoeff() <= 1e-14);
}

TEST_CASE("log likelihood closed forms") {
  SUBCASE("standard normal at the origin") {
    FlowConfig cfg;
    cfg.m = 1;
    cfg.n = 1;
    const FlowModel model(cfg);
    const ConditionalPrior prior = make_prior(1, 1, 0, 0, false);
    Eigen::VectorXd x(1);
    x << 0.0;
    CHECK(log_likelihood(model, prior, x, 0) ==
          doctest::Approx(-0.9189385332046727).epsilon(1e-12));
  }
  SUBCASE("shift by the prior mean is value-preserving") {
    FlowConfig cfg;
    cfg.m = 1;
    cfg.n = 1;
    const FlowModel model(cfg);
    ConditionalPrior prior = make_prior(1, 0, 1, 1, false);
    prior.dep_mean(0, 0) = 1.7;
    Eigen::VectorXd x(1);
    x << 1.7;
    CHECK(log_likelihood(model, prior, x, 0) ==
          doctest::Approx(-0.9189385332046727).epsilon(1e-12));
  }
}

TEST_CASE("model density integrates to one in 1-D") {
  FlowConfig cfg;
  cfg.m = 1;
  cfg.n = 1;
  cfg.volume_preserving = false;
  const FlowModel model = random_model(cfg, 55, 0.6);
  const ConditionalPrior prior = make_prior(1, 1, 0, 0, false);
  Eigen::VectorXd lo(1), hi(1);
  lo << -9.0;
  hi << 9.0;
  const double x_lo = model.forward(lo)(0);
  const double x_hi = model.forward(hi)(0);
  const int cells = 200000;
  const double step = (x_hi - x_lo) / cells;
  double integral = 0.0;
  for (int i = 0; i <= cells; ++i) {
    Eigen::VectorXd xv(1);
    xv << x_lo + i * step;
    integral += std::exp(log_likelihood(model, prior, xv, 0)) * step;
  }
  CHECK(integral == doctest::Approx(1.0).epsilon(0.01));
}

TEST_CASE("sampling matches the prior through an identity model") {
  FlowConfig cfg;
  cfg.m = 4;
  cfg.n = 2;
  const FlowModel model(cfg);  // identity
  ConditionalPrior prior = make_prior(4, 1, 1, 2, false);
  prior.dep_mean(1, 0) = 2.0;
  prior.dep_logvar(1, 0) = std::log(0.5);
  prior.noise_logvar.setConstant(std::log(1.3));

  const Eigen::MatrixXd xs = sample(model, prior, 1, 20000, 99);
  CHECK(xs.col(0).mean() == doctest::Approx(0.0).epsilon(0.05));
  CHECK(xs.col(1).mean() == doctest::Approx(2.0).epsilon(0.05));
  const auto var = [&](int c) {
    const Eigen::ArrayXd d = xs.col(c).array() - xs.col(c).mean();
    return (d * d).sum() / (xs.rows() - 1);
  };
  CHECK(var(1) == doctest::Approx(0.5).epsilon(0.05));
  CHECK(var(2) == doctest::Approx(1.3).epsilon(0.05));
  CHECK(var(3) == doctest::Approx(1.3).epsilon(0.05));

  // determinism per seed
  const Eigen::MatrixXd again = sample(model, prior, 1, 20000, 99);
  CHECK(xs == again);

  // empirical covariance determinant tracks the prior's under a VP identity
  const double det_prior = 1.0 * std::exp(prior.dep_logvar(1, 0)) * 1.3 * 1.3;
  const Eigen::MatrixXd centered = xs.rowwise() - xs.colwise().mean();
  const Eigen::MatrixXd cov = centered.transpose() * centered / (xs.rows() - 1);
  CHECK(cov.determinant() == doctest::Approx(det_prior).epsilon(0.10));
}

TEST_CASE("checkpoints round-trip exactly") {
  FlowConfig cfg;
  cfg.m = 6;
  cfg.n = 3;
  cfg.volume_preserving = true;
  const FlowModel model = random_model(cfg, 123);
  ConditionalPrior prior = make_prior(6, 2, 1, 3, true);
  Rng rng(44);
  for (int k = 0; k < 3; ++k) {
    prior.dep_mean(k, 0) = rng.normal();
    prior.dep_logvar(k, 0) = 0.3 * rng.normal();
  }
  prior.noise_logvar.setConstant(-1.25);

  const std::string path = "/tmp/icalab_test_ckpt.json";
  save_checkpoint(model, prior, path);
  FlowModel model2;
  ConditionalPrior prior2;
  load_checkpoint(path, &model2, &prior2);
  CHECK(model2.flatten() == model.flatten());
  CHECK(model2.to_json() == model.to_json());
  CHECK(prior2.to_json() == prior.to_json());
  Rng rng2(3);
  const Eigen::VectorXd z = random_point(6, rng2);
  CHECK(model2.forward(z) == model.forward(z));
  std::filesystem::remove(path);
}

TEST_CASE("shape and domain errors are rejected") {
  FlowConfig cfg;
  cfg.m = 4;
  cfg.n = 2;
  const FlowModel model(cfg);
  Eigen::VectorXd bad(3);
  bad.setZero();
  CHECK_THROWS(model.forward(bad));
  Eigen::VectorXd nan(4);
  nan.setZero();
  nan(2) = std::nan("");
  CHECK_THROWS(model.forward(nan));
  CHECK_THROWS(model.inverse(nan));

  auto p = model.flatten();
  p.pop_back();
  FlowModel copy = model;
  CHECK_THROWS(copy.unflatten(p));

  ConditionalPrior prior = make_prior(4, 2, 1, 2, false);
  Eigen::VectorXd z(4);
  z.setZero();
  CHECK_THROWS(prior.log_density(z, 5));
  CHECK_THROWS(make_prior(2, 2, 1, 2, false));
}
