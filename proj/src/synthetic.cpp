#include "icalab/synthetic.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "icalab/rng.hpp"

namespace icalab {

namespace {

constexpr int kSupportRetries = 500;
constexpr int kMixingRetries = 20;
constexpr double kActiveTau = 1e-4;

SupportMatrix restrict_columns(const SupportMatrix& s, int cols) {
  SupportMatrix out;
  out.m = s.m;
  out.n = cols;
  out.rows.resize(s.rows.size());
  const std::uint64_t mask = cols >= 64 ? ~0ull : ((1ull << cols) - 1);
  for (std::size_t i = 0; i < s.rows.size(); ++i) out.rows[i] = s.rows[i] & mask;
  return out;
}

int matrix_rank(const Eigen::MatrixXd& a) {
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(a);
  if (svd.singularValues().size() == 0) return 0;
  const double tol = std::max(a.rows(), a.cols()) * svd.singularValues()(0) * 1e-12;
  int r = 0;
  for (int i = 0; i < svd.singularValues().size(); ++i)
    if (svd.singularValues()(i) > tol) ++r;
  return r;
}

Eigen::MatrixXd random_block_covariance(const std::vector<int>& groups, int n_D, Rng& rng) {
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(n_D, n_D);
  int off = 0;
  for (int size : groups) {
    Eigen::VectorXd sd(size);
    for (int i = 0; i < size; ++i) sd(i) = std::sqrt(rng.uniform(0.5, 3.0));
    // random correlation: normalized Gram matrix of random unit rows
    Eigen::MatrixXd a(size, size + 2);
    for (int i = 0; i < size; ++i)
      for (int j = 0; j < size + 2; ++j) a(i, j) = rng.normal();
    Eigen::MatrixXd corr = a * a.transpose();
    for (int i = 0; i < size; ++i) {
      const double d = std::sqrt(corr(i, i));
      corr.row(i) /= d;
      corr.col(i) /= d;
    }
    cov.block(off, off, size, size) =
        sd.asDiagonal() * corr * sd.asDiagonal();
    off += size;
  }
  return cov;
}

}  // namespace

std::string gen_mode_to_string(GenMode mode) {
  switch (mode) {
    case GenMode::UCSS: return "ucss";
    case GenMode::Mixed: return "mixed";
    case GenMode::Grouped: return "grouped";
    case GenMode::Base: return "base";
  }
  throw std::invalid_argument("unknown mode");
}

GenMode gen_mode_from_string(const std::string& s) {
  if (s == "ucss") return GenMode::UCSS;
  if (s == "mixed") return GenMode::Mixed;
  if (s == "grouped") return GenMode::Grouped;
  if (s == "base") return GenMode::Base;
  throw std::invalid_argument("unknown mode: " + s);
}

void GenSpec::validate() const {
  if (n_I < 0 || n_D < 0 || n() < 1) throw std::invalid_argument("bad source counts");
  if (support.n != n()) throw std::invalid_argument("support column count != n");
  if (support.m < n()) throw std::invalid_argument("need m >= n");
  if (sample_count < 1) throw std::invalid_argument("sample_count < 1");
  if (u_values.empty()) throw std::invalid_argument("need at least one u label");
  for (const auto& u : u_values) {
    if (u.mean.size() != n_D || u.cov.rows() != n_D || u.cov.cols() != n_D)
      throw std::invalid_argument("u label parameter shape mismatch");
  }
  if (!groups.empty()) {
    int total = 0;
    for (int g : groups) {
      if (g < 1) throw std::invalid_argument("empty group");
      total += g;
    }
    if (total != n_D) throw std::invalid_argument("groups must partition the dependent block");
  }
  switch (mode) {
    case GenMode::UCSS:
      if (n_D != 0) throw std::invalid_argument("ucss mode has no dependent sources");
      if (!ss_report(support).all_hold)
        throw std::invalid_argument("ucss support must satisfy structural sparsity");
      break;
    case GenMode::Mixed:
      if (n_D < 1) throw std::invalid_argument("mixed mode needs dependent sources");
      if (static_cast<int>(u_values.size()) < n_D + 1)
        throw std::invalid_argument("mixed mode needs >= n_D+1 u labels");
      if (n_I > 0 && !ss_report(restrict_columns(support, n_I)).all_hold)
        throw std::invalid_argument("independent block must satisfy structural sparsity");
      break;
    case GenMode::Grouped:
      if (n_D < 1 || groups.empty())
        throw std::invalid_argument("grouped mode needs a dependent partition");
      if (static_cast<int>(u_values.size()) < 2 * n_D + 1)
        throw std::invalid_argument("grouped mode needs >= 2*n_D+1 u labels");
      if (n_I > 0 && !ss_report(restrict_columns(support, n_I)).all_hold)
        throw std::invalid_argument("independent block must satisfy structural sparsity");
      break;
    case GenMode::Base:
      if (n_D != 0) throw std::invalid_argument("base mode has no dependent sources");
      break;
  }
}

GenSpec default_gen_spec(GenMode mode, int n, int m, int sample_count, std::uint64_t seed) {
  if (n < 1 || m < n) throw std::invalid_argument("need m >= n >= 1");
  GenSpec spec;
  spec.mode = mode;
  spec.sample_count = sample_count;
  spec.seed = seed;
  if (mode == GenMode::UCSS || mode == GenMode::Base) {
    spec.n_I = n;
    spec.n_D = 0;
    spec.u_values.push_back({Eigen::VectorXd(0), Eigen::MatrixXd(0, 0)});
  } else {
    if (n < 2) throw std::invalid_argument("dependent modes need n >= 2");
    spec.n_I = n / 2;
    spec.n_D = n - spec.n_I;
    if (mode == GenMode::Grouped) {
      int left = spec.n_D;
      while (left > 0) {
        const int g = std::min(2, left);
        spec.groups.push_back(g);
        left -= g;
      }
    }
    const int labels = mode == GenMode::Grouped || mode == GenMode::Mixed
                           ? 2 * spec.n_D + 1
                           : spec.n_D + 1;
    Rng rng(derive_seed(seed, 7));
    for (int k = 0; k < labels; ++k) {
      ULabel u;
      u.mean.resize(spec.n_D);
      for (int i = 0; i < spec.n_D; ++i) u.mean(i) = rng.normal();
      if (mode == GenMode::Grouped) {
        u.cov = random_block_covariance(spec.groups, spec.n_D, rng);
      } else {
        u.cov = Eigen::MatrixXd::Zero(spec.n_D, spec.n_D);
        for (int i = 0; i < spec.n_D; ++i) u.cov(i, i) = rng.uniform(0.5, 3.0);
      }
      spec.u_values.push_back(std::move(u));
    }
  }

  if (mode == GenMode::Base) {
    spec.support.m = m;
    spec.support.n = n;
    spec.support.rows.assign(m, (n >= 64 ? ~0ull : (1ull << n) - 1));
    spec.validate();
    return spec;
  }

  // Retry Bernoulli(1/2) draws until the structured part satisfies SS, no
  // observation is parentless, and the support has full column rank.
  const int structured = spec.n_I > 0 ? spec.n_I : n;
  for (int attempt = 0; attempt < kSupportRetries; ++attempt) {
    SupportMatrix cand = random_support(m, n, 0.5, derive_seed(seed, 1000 + attempt));
    if (mode != GenMode::UCSS) {
      const std::uint64_t dense =
          ((n >= 64 ? ~0ull : (1ull << n) - 1) ^ ((1ull << spec.n_I) - 1));
      for (auto& r : cand.rows) r |= dense;  // dependent sources reach everything
    }
    bool ok = true;
    for (auto r : cand.rows)
      if (r == 0) ok = false;
    if (!ok) continue;
    if (structural_rank(cand) != n) continue;
    if (!ss_report(restrict_columns(cand, structured)).all_hold) continue;
    spec.support = std::move(cand);
    spec.validate();
    return spec;
  }
  throw std::runtime_error("could not draw a support satisfying the mode assumptions");
}

Eigen::MatrixXd sample_independent_sources(int n, int count, std::uint64_t seed) {
  if (n < 1 || count < 1) throw std::invalid_argument("need n, count >= 1");
  Rng rng(seed);
  Eigen::VectorXd sd(n);
  for (int j = 0; j < n; ++j) sd(j) = std::sqrt(rng.uniform(0.5, 3.0));
  Eigen::MatrixXd out(count, n);
  for (int t = 0; t < count; ++t)
    for (int j = 0; j < n; ++j) out(t, j) = sd(j) * rng.normal();
  return out;
}

DependentSample sample_dependent_sources(const GenSpec& spec, int count, std::uint64_t seed) {
  if (spec.n_D < 1) throw std::invalid_argument("no dependent block");
  const int K = static_cast<int>(spec.u_values.size());
  std::vector<Eigen::MatrixXd> chol;
  chol.reserve(K);
  for (const auto& u : spec.u_values) {
    const Eigen::LLT<Eigen::MatrixXd> llt(u.cov);
    if (llt.info() != Eigen::Success)
      throw std::invalid_argument("u label covariance not positive definite");
    chol.push_back(llt.matrixL());
  }
  Rng rng(seed);
  DependentSample out;
  out.sources.resize(count, spec.n_D);
  out.labels.resize(count);
  Eigen::VectorXd eps(spec.n_D);
  for (int t = 0; t < count; ++t) {
    const int k = rng.uniform_int(0, K - 1);
    out.labels[t] = k;
    for (int j = 0; j < spec.n_D; ++j) eps(j) = rng.normal();
    out.sources.row(t) = (spec.u_values[k].mean + chol[k] * eps).transpose();
  }
  return out;
}

MixingNetwork::MixingNetwork(SupportMatrix support, int width, int depth, std::uint64_t seed)
    : support_(std::move(support)), width_(width), depth_(depth) {
  if (width < 1 || depth < 0) throw std::invalid_argument("bad network shape");
  Rng rng(seed);
  rows_.resize(support_.m);
  for (int i = 0; i < support_.m; ++i) {
    Row& row = rows_[i];
    for (int j = 0; j < support_.n; ++j)
      if (support_.get(i, j)) row.parents.push_back(j);
    const int p = static_cast<int>(row.parents.size());
    if (p == 0) continue;  // caught by build_structured_mixing
    for (int l = 0; l < depth; ++l) {
      const int fan_in = l == 0 ? p : width;
      Eigen::MatrixXd w(width, fan_in);
      Eigen::VectorXd b(width);
      for (int r = 0; r < width; ++r) {
        for (int c = 0; c < fan_in; ++c) w(r, c) = 1.6 * rng.normal() / std::sqrt(fan_in);
        b(r) = 0.3 * rng.normal();
      }
      row.weights.push_back(std::move(w));
      row.biases.push_back(std::move(b));
    }
    const int fan_in = depth == 0 ? p : width;
    Eigen::MatrixXd w_out(1, fan_in);
    for (int c = 0; c < fan_in; ++c) w_out(0, c) = 1.2 * rng.normal() / std::sqrt(fan_in);
    row.weights.push_back(std::move(w_out));
    Eigen::VectorXd b_out(1);
    b_out(0) = 0.3 * rng.normal();
    row.biases.push_back(std::move(b_out));
    row.skip.resize(p);
    for (int c = 0; c < p; ++c) row.skip(c) = 0.4 * rng.normal();
  }
}

Eigen::VectorXd MixingNetwork::forward(const Eigen::VectorXd& s) const {
  if (s.size() != support_.n) throw std::invalid_argument("source dimension mismatch");
  Eigen::VectorXd x(support_.m);
  for (int i = 0; i < support_.m; ++i) {
    const Row& row = rows_[i];
    const int p = static_cast<int>(row.parents.size());
    Eigen::VectorXd in(p);
    for (int c = 0; c < p; ++c) in(c) = s(row.parents[c]);
    Eigen::VectorXd h = in;
    for (int l = 0; l < depth_; ++l)
      h = (row.weights[l] * h + row.biases[l]).array().tanh().matrix();
    x(i) = (row.weights[depth_] * h)(0) + row.biases[depth_](0) + row.skip.dot(in);
  }
  return x;
}

Eigen::MatrixXd MixingNetwork::jacobian(const Eigen::VectorXd& s) const {
  if (s.size() != support_.n) throw std::invalid_argument("source dimension mismatch");
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(support_.m, support_.n);
  for (int i = 0; i < support_.m; ++i) {
    const Row& row = rows_[i];
    const int p = static_cast<int>(row.parents.size());
    Eigen::VectorXd in(p);
    for (int c = 0; c < p; ++c) in(c) = s(row.parents[c]);
    Eigen::MatrixXd d = Eigen::MatrixXd::Identity(p, p);
    Eigen::VectorXd h = in;
    for (int l = 0; l < depth_; ++l) {
      const Eigen::VectorXd pre = row.weights[l] * h + row.biases[l];
      const Eigen::VectorXd act = pre.array().tanh().matrix();
      const Eigen::VectorXd gate = (1.0 - act.array().square()).matrix();
      d = gate.asDiagonal() * row.weights[l] * d;
      h = act;
    }
    const Eigen::RowVectorXd g = row.weights[depth_] * d + row.skip.transpose();
    for (int c = 0; c < p; ++c) J(i, row.parents[c]) = g(c);
  }
  return J;
}

MixingNetwork build_structured_mixing(const SupportMatrix& support, int width, int depth,
                                      std::uint64_t seed) {
  for (const auto r : support.rows)
    if (r == 0) throw std::invalid_argument("observation with no parents");
  if (structural_rank(support) != support.n)
    throw std::invalid_argument("support is generically rank-deficient");
  Rng rng(derive_seed(seed, 17));
  Eigen::MatrixXd probes(10, support.n);
  for (int t = 0; t < probes.rows(); ++t)
    for (int j = 0; j < support.n; ++j) probes(t, j) = 1.5 * rng.normal();
  for (int attempt = 0; attempt < kMixingRetries; ++attempt) {
    MixingNetwork net(support, width, depth, derive_seed(seed, 100 + attempt));
    if (!(verify_support(net, probes, kActiveTau) == support)) continue;
    if (!verify_full_column_rank(net, probes)) continue;
    return net;
  }
  throw std::runtime_error("mixing construction retries exhausted");
}

Eigen::MatrixXd mix(const MixingNetwork& net, const Eigen::MatrixXd& sources) {
  if (sources.cols() != net.support().n) throw std::invalid_argument("source shape mismatch");
  Eigen::MatrixXd x(sources.rows(), net.support().m);
  for (int t = 0; t < sources.rows(); ++t) x.row(t) = net.forward(sources.row(t)).transpose();
  return x;
}

SupportMatrix verify_support(const MixingNetwork& net, const Eigen::MatrixXd& probe_points,
                             double tau) {
  if (probe_points.rows() < 1) throw std::invalid_argument("need at least one probe point");
  const int m = net.support().m, n = net.support().n;
  SupportMatrix out;
  out.m = m;
  out.n = n;
  out.rows.assign(m, 0);
  for (int t = 0; t < probe_points.rows(); ++t) {
    const Eigen::VectorXd s = probe_points.row(t);
    for (int j = 0; j < n; ++j) {
      const double h = 1e-4 * std::max(1.0, std::abs(s(j)));
      Eigen::VectorXd sp = s, sm = s;
      sp(j) += h;
      sm(j) -= h;
      const Eigen::VectorXd col = (net.forward(sp) - net.forward(sm)) / (2 * h);
      for (int i = 0; i < m; ++i)
        if (std::abs(col(i)) > tau) out.set(i, j, true);
    }
  }
  return out;
}

bool verify_full_column_rank(const MixingNetwork& net, const Eigen::MatrixXd& probe_points) {
  for (int t = 0; t < probe_points.rows(); ++t) {
    if (matrix_rank(net.jacobian(probe_points.row(t))) != net.support().n) return false;
  }
  return true;
}

VariabilityReport variability_audit(const GenSpec& spec, const Eigen::VectorXd& probe_point,
                                    int order) {
  if (order != 1 && order != 2) throw std::invalid_argument("order must be 1 or 2");
  if (spec.n_D < 1) throw std::invalid_argument("no dependent block to audit");
  if (probe_point.size() != spec.n_D) throw std::invalid_argument("probe dimension mismatch");
  const int K = static_cast<int>(spec.u_values.size());
  const int required = order == 1 ? spec.n_D : 2 * spec.n_D;
  if (K < required + 1) throw std::invalid_argument("too few u labels for the audit order");

  const int dim = required;
  auto derivatives = [&](const ULabel& u) {
    // Gaussian closed forms: grad log p = -Sigma^-1 (s - mu);
    // d^2/ds_i^2 log p = -(Sigma^-1)_ii.
    Eigen::VectorXd out(dim);
    const Eigen::MatrixXd prec = u.cov.llt().solve(
        Eigen::MatrixXd::Identity(spec.n_D, spec.n_D));
    const Eigen::VectorXd grad = -prec * (probe_point - u.mean);
    out.head(spec.n_D) = grad;
    if (order == 2)
      for (int i = 0; i < spec.n_D; ++i) out(spec.n_D + i) = -prec(i, i);
    return out;
  };

  const Eigen::VectorXd base = derivatives(spec.u_values[0]);
  Eigen::MatrixXd w(K - 1, dim);
  for (int k = 1; k < K; ++k) w.row(k - 1) = (derivatives(spec.u_values[k]) - base).transpose();
  VariabilityReport rep;
  rep.required = required;
  rep.rank = matrix_rank(w);
  return rep;
}

Dataset generate_dataset(const GenSpec& spec) {
  spec.validate();
  const int N = spec.sample_count;
  Dataset ds;
  ds.spec = spec;
  ds.sources.resize(N, spec.n());
  ds.labels.assign(N, 0);
  if (spec.n_I > 0)
    ds.sources.leftCols(spec.n_I) =
        sample_independent_sources(spec.n_I, N, derive_seed(spec.seed, 101));
  if (spec.n_D > 0) {
    DependentSample dep = sample_dependent_sources(spec, N, derive_seed(spec.seed, 102));
    ds.sources.rightCols(spec.n_D) = dep.sources;
    ds.labels = std::move(dep.labels);
  }
  const MixingNetwork net =
      build_structured_mixing(spec.support, 16, 2, derive_seed(spec.seed, 103));
  ds.x = mix(net, ds.sources);
  return ds;
}

std::string GenSpec::to_json() const {
  nlohmann::json j;
  j["mode"] = gen_mode_to_string(mode);
  j["n_I"] = n_I;
  j["n_D"] = n_D;
  j["groups"] = groups;
  j["sample_count"] = sample_count;
  j["seed"] = seed;
  j["support"] = nlohmann::json::parse(support_to_json(support));
  auto labels = nlohmann::json::array();
  for (const auto& u : u_values) {
    nlohmann::json lu;
    lu["mean"] = std::vector<double>(u.mean.data(), u.mean.data() + u.mean.size());
    auto cov = nlohmann::json::array();
    for (int r = 0; r < u.cov.rows(); ++r) {
      auto row = nlohmann::json::array();
      for (int c = 0; c < u.cov.cols(); ++c) row.push_back(u.cov(r, c));
      cov.push_back(std::move(row));
    }
    lu["cov"] = std::move(cov);
    labels.push_back(std::move(lu));
  }
  j["u_values"] = std::move(labels);
  return j.dump(2);
}

GenSpec GenSpec::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  GenSpec spec;
  spec.mode = gen_mode_from_string(j.at("mode").get<std::string>());
  spec.n_I = j.at("n_I").get<int>();
  spec.n_D = j.at("n_D").get<int>();
  spec.groups = j.at("groups").get<std::vector<int>>();
  spec.sample_count = j.at("sample_count").get<int>();
  spec.seed = j.at("seed").get<std::uint64_t>();
  spec.support = support_from_json(j.at("support").dump());
  for (const auto& lu : j.at("u_values")) {
    ULabel u;
    const auto mean = lu.at("mean").get<std::vector<double>>();
    u.mean = Eigen::Map<const Eigen::VectorXd>(mean.data(), mean.size());
    const auto& cov = lu.at("cov");
    u.cov.resize(cov.size(), cov.size());
    for (std::size_t r = 0; r < cov.size(); ++r) {
      const auto row = cov[r].get<std::vector<double>>();
      if (row.size() != cov.size()) throw std::invalid_argument("covariance not square");
      for (std::size_t c = 0; c < row.size(); ++c) u.cov(r, c) = row[c];
    }
    spec.u_values.push_back(std::move(u));
  }
  spec.validate();
  return spec;
}

void export_dataset(const Dataset& ds, const std::string& path) {
  const int n = ds.spec.n(), m = ds.spec.m();
  std::ofstream csv(path);
  if (!csv) throw std::runtime_error("cannot open " + path);
  for (int j = 0; j < n; ++j) csv << "s_" << (j + 1) << ",";
  csv << "u";
  for (int j = 0; j < m; ++j) csv << ",x_" << (j + 1);
  csv << "\n";
  char buf[64];
  for (int t = 0; t < ds.sources.rows(); ++t) {
    for (int j = 0; j < n; ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", ds.sources(t, j));
      csv << buf << ",";
    }
    csv << ds.labels[t];
    for (int j = 0; j < m; ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", ds.x(t, j));
      csv << "," << buf;
    }
    csv << "\n";
  }
  if (!csv) throw std::runtime_error("write failed: " + path);

  nlohmann::json meta;
  meta["spec"] = nlohmann::json::parse(ds.spec.to_json());
  meta["seed"] = ds.spec.seed;
  meta["generator_name"] = "masked_mlp_w16_d2";
  std::ofstream side(path + ".meta.json");
  if (!side) throw std::runtime_error("cannot open " + path + ".meta.json");
  side << meta.dump(2) << "\n";
}

Dataset import_dataset(const std::string& path) {
  std::ifstream side(path + ".meta.json");
  if (!side) throw std::runtime_error("missing sidecar metadata for " + path);
  nlohmann::json meta;
  side >> meta;
  Dataset ds;
  ds.spec = GenSpec::from_json(meta.at("spec").dump());
  const int n = ds.spec.n(), m = ds.spec.m();

  std::ifstream csv(path);
  if (!csv) throw std::runtime_error("cannot open " + path);
  std::string line;
  if (!std::getline(csv, line)) throw std::runtime_error("empty dataset file");
  {
    std::ostringstream expect;
    for (int j = 0; j < n; ++j) expect << "s_" << (j + 1) << ",";
    expect << "u";
    for (int j = 0; j < m; ++j) expect << ",x_" << (j + 1);
    if (line != expect.str()) throw std::runtime_error("dataset header mismatch");
  }
  std::vector<double> src, obs;
  std::vector<int> labels;
  int rows = 0;
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    int col = 0;
    while (std::getline(ss, cell, ',')) {
      if (col < n)
        src.push_back(std::stod(cell));
      else if (col == n)
        labels.push_back(std::stoi(cell));
      else
        obs.push_back(std::stod(cell));
      ++col;
    }
    if (col != n + 1 + m) throw std::runtime_error("truncated dataset row");
    ++rows;
  }
  if (rows != ds.spec.sample_count) throw std::runtime_error("row count mismatch with metadata");
  ds.sources = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                              Eigen::RowMajor>>(src.data(), rows, n);
  ds.x = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                        Eigen::RowMajor>>(obs.data(), rows, m);
  ds.labels = std::move(labels);
  for (int lab : ds.labels)
    if (lab < 0 || lab >= static_cast<int>(ds.spec.u_values.size()))
      throw std::runtime_error("label out of range");
  return ds;
}

}  // namespace icalab
