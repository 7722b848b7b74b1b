#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "icalab/evaluation.hpp"
#include "icalab/rng.hpp"
#include "icalab/training.hpp"

using namespace icalab;

namespace {

FlowModel perturbed_model(FlowConfig cfg, std::uint64_t seed, double spread = 0.3) {
  FlowModel model(cfg);
  Rng rng(seed);
  auto p = model.flatten();
  for (auto& v : p) v = spread * rng.normal();
  model.unflatten(p);
  return model;
}

Eigen::MatrixXd normal_matrix(int rows, int cols, std::uint64_t seed) {
  Rng rng(seed);
  Eigen::MatrixXd out(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) out(i, j) = rng.normal();
  return out;
}

// Small linear 2 -> 2 mixing task wrapped as a Dataset.
Dataset linear_dataset(int count, std::uint64_t seed) {
  Dataset ds;
  ds.spec = default_gen_spec(GenMode::Base, 2, 2, count, seed);
  ds.sources = normal_matrix(count, 2, derive_seed(seed, 7));
  Eigen::MatrixXd A(2, 2);
  A << 1.0, 0.4, -0.3, 0.8;
  ds.x = ds.sources * A.transpose();
  ds.labels.assign(count, 0);
  return ds;
}

}  // namespace

TEST_CASE("adam basics") {
  AdamState st;
  Eigen::ArrayXd p = Eigen::ArrayXd::Constant(3, 1.5);

  SUBCASE("zero gradient leaves parameters unchanged") {
    adam_step(&p, Eigen::ArrayXd::Zero(3), &st, 0.01, 0.9, 0.999, 1e-8);
    CHECK(p(0) == 1.5);
    CHECK(p(2) == 1.5);
  }
  SUBCASE("step moves opposite the gradient sign") {
    Eigen::ArrayXd g(3);
    g << 2.0, -1.0, 0.5;
    adam_step(&p, g, &st, 0.01, 0.9, 0.999, 1e-8);
    CHECK(p(0) < 1.5);
    CHECK(p(1) > 1.5);
    CHECK(p(2) < 1.5);
  }
  SUBCASE("quadratic bowl converges") {
    Eigen::ArrayXd x = Eigen::ArrayXd::Constant(1, 3.0);
    for (int i = 0; i < 500; ++i) {
      const Eigen::ArrayXd g = 2.0 * x;
      adam_step(&x, g, &st, 0.05, 0.9, 0.999, 1e-8);
    }
    CHECK(std::abs(x(0)) < 1e-3);
  }
  SUBCASE("non-finite gradient rejected") {
    Eigen::ArrayXd g = Eigen::ArrayXd::Constant(3, std::nan(""));
    CHECK_THROWS(adam_step(&p, g, &st, 0.01, 0.9, 0.999, 1e-8));
  }
}

TEST_CASE("loss closed forms") {
  SUBCASE("standard normal data under the identity model") {
    FlowConfig fc;
    fc.m = 1;
    fc.n = 1;
    const FlowModel model(fc);
    const ConditionalPrior prior = make_prior(1, 1, 0, 0, false);
    const Eigen::MatrixXd x = normal_matrix(2000, 1, 3);
    const auto parts = loss(model, prior, x, std::vector<int>(2000, 0), PenaltyConfig{}, 32);
    CHECK(parts.penalty == 0.0);
    CHECK(parts.total == parts.nll);
    CHECK(parts.nll == doctest::Approx(0.5 * (1.0 + std::log(2.0 * M_PI))).epsilon(0.05));
  }
  SUBCASE("lambda=0 is pure NLL regardless of penalty kind") {
    FlowConfig fc;
    fc.m = 4;
    fc.n = 2;
    const FlowModel model = perturbed_model(fc, 5);
    const ConditionalPrior prior = make_prior(4, 2, 0, 0, true);
    const Eigen::MatrixXd x = normal_matrix(50, 4, 7);
    PenaltyConfig l1{PenaltyKind::L1, 0.0, 2.0, 3.7};
    PenaltyConfig mcp{PenaltyKind::MCP, 0.0, 2.0, 3.7};
    const auto a = loss(model, prior, x, std::vector<int>(50, 0), l1, 8);
    const auto b = loss(model, prior, x, std::vector<int>(50, 0), mcp, 16);
    CHECK(a.nll == b.nll);
    CHECK(a.penalty == 0.0);
    CHECK(b.penalty == 0.0);
  }
}

TEST_CASE("traced loss equals the plain evaluation") {
  for (const bool vp : {true, false}) {
    FlowConfig fc;
    fc.m = 6;
    fc.n = 3;
    fc.layers = 4;
    fc.width = 8;
    fc.volume_preserving = vp;
    const FlowModel model = perturbed_model(fc, 11 + vp);
    ConditionalPrior prior = make_prior(6, 1, 2, 3, true);
    Rng rng(21);
    for (int k = 0; k < 3; ++k)
      for (int d = 0; d < 2; ++d) {
        prior.dep_mean(k, d) = 0.5 * rng.normal();
        prior.dep_logvar(k, d) = 0.3 * rng.normal();
      }
    prior.noise_logvar.setConstant(-0.4);
    const Eigen::MatrixXd x = normal_matrix(40, 6, 31);
    std::vector<int> u(40);
    for (int i = 0; i < 40; ++i) u[i] = i % 3;

    PenaltyConfig pen{PenaltyKind::MCP, 0.05, 2.0, 3.7};
    Eigen::ArrayXd grad;
    const auto traced = loss_with_gradient(model, prior, x, u, pen, 10, &grad);
    const auto plain = loss(model, prior, x, u, pen, 10);
    CHECK(traced.nll == doctest::Approx(plain.nll).epsilon(1e-10));
    CHECK(traced.penalty == doctest::Approx(plain.penalty).epsilon(1e-10));
    CHECK(grad.size() == static_cast<Eigen::Index>(pack_parameters(model, prior).size()));
  }
}

TEST_CASE("loss gradient matches finite differences over every parameter") {
  FlowConfig fc;
  fc.m = 4;
  fc.n = 2;
  fc.layers = 3;
  fc.width = 6;
  fc.volume_preserving = true;
  ConditionalPrior prior = make_prior(4, 1, 1, 2, true);
  prior.dep_mean(0, 0) = 0.3;
  prior.dep_mean(1, 0) = -0.2;
  prior.dep_logvar(0, 0) = 0.1;
  prior.noise_logvar.setConstant(-0.3);
  const Eigen::MatrixXd x = normal_matrix(12, 4, 41);
  std::vector<int> u(12);
  for (int i = 0; i < 12; ++i) u[i] = i % 2;

  // The reported gradient holds the Jacobian evaluation points fixed, so the
  // oracle differentiates the NLL through the full path and the penalty at the
  // frozen latent images of the subsampled rows.
  const auto check_config = [&](const FlowModel& model, const PenaltyConfig& pen, int sub) {
    Eigen::ArrayXd grad;
    loss_with_gradient(model, prior, x, u, pen, sub, &grad);
    std::vector<double> params = pack_parameters(model, prior);
    PenaltyConfig off = pen;
    off.lambda = 0.0;
    std::vector<Eigen::VectorXd> zs;
    for (int p = 0; p < sub; ++p) zs.push_back(model.inverse(x.row(p).transpose()));
    const auto pen_at = [&](const FlowModel& mdl) {
      if (pen.lambda == 0.0) return 0.0;
      Eigen::MatrixXd mean_abs = Eigen::MatrixXd::Zero(fc.m, fc.n);
      for (const auto& z : zs) mean_abs += mdl.decoder_jacobian(z, fc.n).cwiseAbs();
      mean_abs /= static_cast<double>(zs.size());
      return jacobian_penalty(pen, mean_abs);
    };
    double worst = 0.0;
    for (std::size_t p = 0; p < params.size(); ++p) {
      const double h = 1e-5 * std::max(1.0, std::abs(params[p]));
      FlowModel mp = model, mm = model;
      ConditionalPrior pp = prior, pm = prior;
      auto vp_ = params, vm_ = params;
      vp_[p] += h;
      vm_[p] -= h;
      unpack_parameters(vp_, &mp, &pp);
      unpack_parameters(vm_, &mm, &pm);
      const double fd =
          (loss(mp, pp, x, u, off, sub).total - loss(mm, pm, x, u, off, sub).total +
           pen_at(mp) - pen_at(mm)) /
          (2 * h);
      const double rel = std::abs(grad[p] - fd) / std::max({1.0, std::abs(grad[p]), std::abs(fd)});
      worst = std::max(worst, rel);
    }
    CHECK(worst <= 1e-4);
  };

  SUBCASE("pure NLL at the identity initialization") {
    check_config(FlowModel(fc), PenaltyConfig{}, 4);
  }
  SUBCASE("MCP-regularized at a generic parameter point") {
    check_config(perturbed_model(fc, 43), PenaltyConfig{PenaltyKind::MCP, 0.05, 2.0, 3.7}, 4);
  }
  SUBCASE("L1-regularized at a generic parameter point") {
    check_config(perturbed_model(fc, 44), PenaltyConfig{PenaltyKind::L1, 0.03, 2.0, 3.7}, 4);
  }
}

TEST_CASE("fit runs deterministically and learns") {
  Dataset ds = linear_dataset(300, 17);
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.batch_size = 100;
  cfg.seed = 5;
  cfg.layers = 4;
  cfg.width = 8;
  cfg.jac_subsample = 4;

  const TrainResult r1 = fit(cfg, ds);
  CHECK(r1.history.loss.size() == 30);
  CHECK(r1.history.nll.front() > r1.history.nll.back());

  const TrainResult r2 = fit(cfg, ds);
  CHECK(r1.history.loss == r2.history.loss);
  CHECK(r1.model.flatten() == r2.model.flatten());
  CHECK(r1.latent_sd == r2.latent_sd);
}

TEST_CASE("lambda=0 runs are identical across penalty kinds and subsample sizes") {
  Dataset ds = linear_dataset(200, 23);
  TrainConfig base;
  base.epochs = 8;
  base.batch_size = 100;
  base.seed = 9;
  base.layers = 3;
  base.width = 6;

  TrainConfig a = base;
  a.penalty = {PenaltyKind::MCP, 0.0, 2.0, 3.7};
  a.jac_subsample = 4;
  TrainConfig b = base;
  b.penalty = {PenaltyKind::L1, 0.0, 2.0, 3.7};
  b.jac_subsample = 32;

  const TrainResult ra = fit(a, ds);
  const TrainResult rb = fit(b, ds);
  CHECK(ra.history.loss == rb.history.loss);
  CHECK(ra.model.flatten() == rb.model.flatten());
  for (std::size_t e = 0; e < ra.history.penalty.size(); ++e)
    CHECK(ra.history.penalty[e] == 0.0);
}

TEST_CASE("noise log-variances respect the floor and collapse on thin data") {
  // rank-1 data embedded in 3 coordinates: the two noise directions carry no
  // residual variance, so their learned scales head to the floor
  Rng rng(31);
  Eigen::MatrixXd x(400, 3);
  for (int i = 0; i < 400; ++i) {
    const double s = rng.normal();
    x(i, 0) = s;
    x(i, 1) = 0.5 * s;
    x(i, 2) = std::tanh(s);
  }
  Dataset ds;
  ds.spec = default_gen_spec(GenMode::Base, 1, 3, 400, 77);
  ds.sources = x.col(0);
  ds.x = x;
  ds.labels.assign(400, 0);

  TrainConfig cfg;
  cfg.epochs = 300;
  cfg.batch_size = 100;
  cfg.seed = 3;
  cfg.layers = 6;
  cfg.width = 16;

  const TrainResult r = fit(cfg, ds);
  for (int k = 0; k < r.prior.noise_logvar.size(); ++k) {
    CHECK(r.prior.noise_logvar(k) >= r.prior.logvar_floor);
    CHECK(r.prior.noise_logvar(k) < -2.0);
  }
  CHECK(r.source_order.size() == 1);
  // SD ranking separates the curve direction from the collapsed residuals
  Eigen::VectorXd sd = r.latent_sd;
  std::sort(sd.data(), sd.data() + sd.size(), std::greater<double>());
  CHECK(sd(0) > 10.0 * sd(1));
}

TEST_CASE("fixed noise scales stay at unit variance") {
  Dataset ds = linear_dataset(200, 29);
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 100;
  cfg.seed = 2;
  cfg.layers = 3;
  cfg.width = 6;
  cfg.learn_noise_scale = false;

  Dataset wide = ds;
  wide.spec = default_gen_spec(GenMode::Base, 2, 4, 200, 31);
  wide.x = Eigen::MatrixXd(200, 4);
  wide.x.leftCols(2) = ds.x;
  wide.x.col(2) = ds.x.col(0).array() * 0.7 + 0.1;
  wide.x.col(3) = ds.x.col(1).array() - ds.x.col(0).array();

  const TrainResult r = fit(cfg, wide);
  for (int k = 0; k < r.prior.noise_logvar.size(); ++k) CHECK(r.prior.noise_logvar(k) == 0.0);
}

TEST_CASE("divergent settings raise with the epoch index") {
  Dataset ds = linear_dataset(120, 41);
  ds.x *= 1e200;  // squares overflow once standardization is disabled
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 60;
  cfg.standardize = false;
  cfg.layers = 3;
  cfg.width = 6;
  CHECK_THROWS_WITH_AS(static_cast<void>(fit(cfg, ds)),
                       doctest::Contains("diverged at epoch"), std::runtime_error);
}

TEST_CASE("history serializes as csv") {
  TrainHistory h;
  h.nll = {2.0, 1.5};
  h.penalty = {0.25, 0.125};
  h.loss = {2.25, 1.625};
  const std::string csv = h.to_csv();
  CHECK(csv == "epoch,nll,penalty,loss\n1,2,0.25,2.25\n2,1.5,0.125,1.625\n");
}

TEST_CASE("config json round-trips") {
  TrainConfig cfg;
  cfg.epochs = 42;
  cfg.penalty = {PenaltyKind::SCAD, 0.01, 2.0, 3.7};
  cfg.seed = 123456789;
  cfg.warmup_epochs = 5;
  cfg.volume_preserving = false;
  const TrainConfig back = TrainConfig::from_json(cfg.to_json());
  CHECK(back.epochs == 42);
  CHECK(back.penalty.kind == PenaltyKind::SCAD);
  CHECK(back.penalty.lambda == 0.01);
  CHECK(back.seed == 123456789);
  CHECK(back.warmup_epochs == 5);
  CHECK(back.volume_preserving == false);
  CHECK_THROWS(TrainConfig::from_json("{\"epochs\": 0}"));
}

TEST_CASE("latents replay standardization") {
  Dataset ds = linear_dataset(150, 53);
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch_size = 75;
  cfg.layers = 3;
  cfg.width = 6;
  const TrainResult r = fit(cfg, ds);
  const Eigen::MatrixXd z = latents(r, ds.x);
  CHECK(z.rows() == 150);
  CHECK(z.cols() == 2);
  // must match a manual standardize + inverse on a spot row
  Eigen::VectorXd row = ds.x.row(7).transpose() - r.x_mean;
  row.array() /= r.x_scale.array();
  CHECK((z.row(7).transpose() - r.model.inverse(row)).cwiseAbs().maxCoeff() == 0.0);
}
