#include "icalab/flow.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "icalab/rng.hpp"

namespace icalab {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

nlohmann::json matrix_to_json(const Eigen::MatrixXd& m) {
  auto rows = nlohmann::json::array();
  for (int r = 0; r < m.rows(); ++r) {
    auto row = nlohmann::json::array();
    for (int c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Eigen::MatrixXd matrix_from_json(const nlohmann::json& j, int rows, int cols) {
  if (static_cast<int>(j.size()) != rows) throw std::invalid_argument("matrix row mismatch");
  Eigen::MatrixXd m(rows, cols);
  for (int r = 0; r < rows; ++r) {
    if (static_cast<int>(j[r].size()) != cols)
      throw std::invalid_argument("matrix column mismatch");
    for (int c = 0; c < cols; ++c) m(r, c) = j[r][c].get<double>();
  }
  return m;
}

}  // namespace

FlowModel::FlowModel(const FlowConfig& cfg) : cfg_(cfg) {
  if (cfg.m < 1 || cfg.n < 0 || cfg.n > cfg.m) throw std::invalid_argument("bad flow dims");
  if (cfg.layers < 1 || cfg.width < 1) throw std::invalid_argument("bad flow shape");
  Rng rng(derive_seed(cfg.seed, 0xF10));
  const int h = cfg.m / 2;
  layers_.resize(cfg.layers);
  for (int l = 0; l < cfg.layers; ++l) {
    CouplingLayer& lay = layers_[l];
    const bool flip = l % 2 == 1;
    lay.a_off = flip ? h : 0;
    lay.a_len = flip ? cfg.m - h : h;
    lay.b_off = flip ? 0 : h;
    lay.b_len = cfg.m - lay.a_len;
    lay.W1.resize(cfg.width, lay.a_len);
    lay.b1.resize(cfg.width);
    const double scale = lay.a_len > 0 ? 1.0 / std::sqrt(lay.a_len) : 1.0;
    for (int r = 0; r < cfg.width; ++r) {
      for (int c = 0; c < lay.a_len; ++c) lay.W1(r, c) = scale * rng.normal();
      lay.b1(r) = 0.1 * rng.normal();
    }
    lay.W2 = Eigen::MatrixXd::Zero(2 * lay.b_len, cfg.width);  // identity start
    lay.b2 = Eigen::VectorXd::Zero(2 * lay.b_len);
  }
}

Eigen::VectorXd FlowModel::forward(const Eigen::VectorXd& z, double* log_det) const {
  if (z.size() != cfg_.m) throw std::invalid_argument("flow dimension mismatch");
  if (!z.allFinite()) throw std::invalid_argument("non-finite flow input");
  Eigen::VectorXd x = z;
  double ld = 0.0;
  for (const auto& lay : layers_) {
    if (lay.b_len == 0) continue;
    const Eigen::VectorXd a = x.segment(lay.a_off, lay.a_len);
    const Eigen::VectorXd hid = (lay.W1 * a + lay.b1).array().tanh().matrix();
    const Eigen::VectorXd out = lay.W2 * hid + lay.b2;
    Eigen::ArrayXd s =
        cfg_.clamp * (out.head(lay.b_len).array() / cfg_.clamp).tanh();
    if (cfg_.volume_preserving) s -= s.mean();
    const Eigen::ArrayXd t = out.tail(lay.b_len).array();
    x.segment(lay.b_off, lay.b_len) =
        (x.segment(lay.b_off, lay.b_len).array() * s.exp() + t).matrix();
    if (!cfg_.volume_preserving) ld += s.sum();
  }
  if (log_det) *log_det = cfg_.volume_preserving ? 0.0 : ld;
  return x;
}

Eigen::VectorXd FlowModel::inverse(const Eigen::VectorXd& x, double* log_det) const {
  if (x.size() != cfg_.m) throw std::invalid_argument("flow dimension mismatch");
  if (!x.allFinite()) throw std::invalid_argument("non-finite flow input");
  Eigen::VectorXd z = x;
  double ld = 0.0;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
    const auto& lay = *it;
    if (lay.b_len == 0) continue;
    const Eigen::VectorXd a = z.segment(lay.a_off, lay.a_len);
    const Eigen::VectorXd hid = (lay.W1 * a + lay.b1).array().tanh().matrix();
    const Eigen::VectorXd out = lay.W2 * hid + lay.b2;
    Eigen::ArrayXd s =
        cfg_.clamp * (out.head(lay.b_len).array() / cfg_.clamp).tanh();
    if (cfg_.volume_preserving) s -= s.mean();
    const Eigen::ArrayXd t = out.tail(lay.b_len).array();
    z.segment(lay.b_off, lay.b_len) =
        ((z.segment(lay.b_off, lay.b_len).array() - t) * (-s).exp()).matrix();
    if (!cfg_.volume_preserving) ld -= s.sum();
  }
  if (log_det) *log_det = cfg_.volume_preserving ? 0.0 : ld;
  return z;
}

Eigen::MatrixXd FlowModel::decoder_jacobian(const Eigen::VectorXd& z, int n) const {
  if (z.size() != cfg_.m) throw std::invalid_argument("flow dimension mismatch");
  if (n < 1 || n > cfg_.m) throw std::invalid_argument("bad column count");
  Eigen::VectorXd x = z;
  Eigen::MatrixXd tan = Eigen::MatrixXd::Zero(cfg_.m, n);
  tan.topLeftCorner(n, n).setIdentity();
  for (const auto& lay : layers_) {
    if (lay.b_len == 0) continue;
    const Eigen::VectorXd a = x.segment(lay.a_off, lay.a_len);
    const Eigen::MatrixXd da = tan.middleRows(lay.a_off, lay.a_len);
    const Eigen::VectorXd pre = lay.W1 * a + lay.b1;
    const Eigen::VectorXd hid = pre.array().tanh().matrix();
    const Eigen::MatrixXd dhid =
        (1.0 - hid.array().square()).matrix().asDiagonal() * (lay.W1 * da);
    const Eigen::VectorXd out = lay.W2 * hid + lay.b2;
    const Eigen::MatrixXd dout = lay.W2 * dhid;
    const Eigen::ArrayXd raw = out.head(lay.b_len).array() / cfg_.clamp;
    Eigen::ArrayXd s = cfg_.clamp * raw.tanh();
    Eigen::MatrixXd ds =
        (1.0 - raw.tanh().square()).matrix().asDiagonal() * dout.topRows(lay.b_len);
    if (cfg_.volume_preserving) {
      s -= s.mean();
      ds.rowwise() -= ds.colwise().mean();
    }
    const Eigen::ArrayXd t = out.tail(lay.b_len).array();
    const Eigen::ArrayXd es = s.exp();
    const Eigen::VectorXd b = x.segment(lay.b_off, lay.b_len);
    const Eigen::MatrixXd db = tan.middleRows(lay.b_off, lay.b_len);
    tan.middleRows(lay.b_off, lay.b_len) =
        es.matrix().asDiagonal() * db +
        (b.array() * es).matrix().asDiagonal() * ds + dout.bottomRows(lay.b_len);
    x.segment(lay.b_off, lay.b_len) = (b.array() * es + t).matrix();
  }
  return tan;
}

std::vector<double> FlowModel::flatten() const {
  std::vector<double> out;
  out.reserve(parameter_count());
  for (const auto& lay : layers_) {
    out.insert(out.end(), lay.W1.data(), lay.W1.data() + lay.W1.size());
    out.insert(out.end(), lay.b1.data(), lay.b1.data() + lay.b1.size());
    out.insert(out.end(), lay.W2.data(), lay.W2.data() + lay.W2.size());
    out.insert(out.end(), lay.b2.data(), lay.b2.data() + lay.b2.size());
  }
  return out;
}

void FlowModel::unflatten(const std::vector<double>& values) {
  if (values.size() != parameter_count()) throw std::invalid_argument("parameter count mismatch");
  std::size_t off = 0;
  for (auto& lay : layers_) {
    std::copy(values.begin() + off, values.begin() + off + lay.W1.size(), lay.W1.data());
    off += lay.W1.size();
    std::copy(values.begin() + off, values.begin() + off + lay.b1.size(), lay.b1.data());
    off += lay.b1.size();
    std::copy(values.begin() + off, values.begin() + off + lay.W2.size(), lay.W2.data());
    off += lay.W2.size();
    std::copy(values.begin() + off, values.begin() + off + lay.b2.size(), lay.b2.data());
    off += lay.b2.size();
  }
}

std::size_t FlowModel::parameter_count() const {
  std::size_t total = 0;
  for (const auto& lay : layers_)
    total += lay.W1.size() + lay.b1.size() + lay.W2.size() + lay.b2.size();
  return total;
}

std::string FlowModel::to_json() const {
  nlohmann::json j;
  j["version"] = 1;
  j["m"] = cfg_.m;
  j["n"] = cfg_.n;
  j["layers"] = cfg_.layers;
  j["width"] = cfg_.width;
  j["clamp"] = cfg_.clamp;
  j["volume_preserving"] = cfg_.volume_preserving;
  j["seed"] = cfg_.seed;
  auto params = nlohmann::json::array();
  for (const auto& lay : layers_) {
    nlohmann::json pl;
    pl["W1"] = matrix_to_json(lay.W1);
    pl["b1"] = std::vector<double>(lay.b1.data(), lay.b1.data() + lay.b1.size());
    pl["W2"] = matrix_to_json(lay.W2);
    pl["b2"] = std::vector<double>(lay.b2.data(), lay.b2.data() + lay.b2.size());
    params.push_back(std::move(pl));
  }
  j["coupling"] = std::move(params);
  return j.dump();
}

FlowModel FlowModel::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  if (j.at("version").get<int>() != 1) throw std::invalid_argument("unknown checkpoint version");
  FlowConfig cfg;
  cfg.m = j.at("m").get<int>();
  cfg.n = j.at("n").get<int>();
  cfg.layers = j.at("layers").get<int>();
  cfg.width = j.at("width").get<int>();
  cfg.clamp = j.at("clamp").get<double>();
  cfg.volume_preserving = j.at("volume_preserving").get<bool>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  FlowModel model(cfg);
  const auto& params = j.at("coupling");
  if (static_cast<int>(params.size()) != cfg.layers)
    throw std::invalid_argument("layer count mismatch");
  for (int l = 0; l < cfg.layers; ++l) {
    auto& lay = model.layers_[l];
    lay.W1 = matrix_from_json(params[l].at("W1"), cfg.width, lay.a_len);
    const auto b1 = params[l].at("b1").get<std::vector<double>>();
    const auto b2 = params[l].at("b2").get<std::vector<double>>();
    if (static_cast<int>(b1.size()) != cfg.width ||
        static_cast<int>(b2.size()) != 2 * lay.b_len)
      throw std::invalid_argument("bias size mismatch");
    lay.b1 = Eigen::Map<const Eigen::VectorXd>(b1.data(), b1.size());
    lay.W2 = matrix_from_json(params[l].at("W2"), 2 * lay.b_len, cfg.width);
    lay.b2 = Eigen::Map<const Eigen::VectorXd>(b2.data(), b2.size());
  }
  return model;
}

int ConditionalPrior::dependent_count() const {
  int c = 0;
  for (auto r : roles)
    if (r == LatentRole::Dependent) ++c;
  return c;
}

int ConditionalPrior::noise_count() const {
  int c = 0;
  for (auto r : roles)
    if (r == LatentRole::Noise) ++c;
  return c;
}

void ConditionalPrior::validate() const {
  if (roles.empty()) throw std::invalid_argument("empty prior");
  if (dep_mean.rows() != dep_logvar.rows() || dep_mean.cols() != dep_logvar.cols())
    throw std::invalid_argument("dependent parameter shape mismatch");
  if (dep_mean.cols() != dependent_count())
    throw std::invalid_argument("dependent column mismatch");
  if (dependent_count() > 0 && dep_mean.rows() < 1)
    throw std::invalid_argument("dependent block needs u labels");
  if (noise_logvar.size() != noise_count()) throw std::invalid_argument("noise size mismatch");
}

double ConditionalPrior::log_density(const Eigen::VectorXd& z, int u) const {
  if (z.size() != m()) throw std::invalid_argument("latent dimension mismatch");
  if (dependent_count() > 0 && (u < 0 || u >= u_count()))
    throw std::invalid_argument("u label out of range");
  double acc = -0.5 * kLog2Pi * m();
  int d = 0, nz = 0;
  for (int i = 0; i < m(); ++i) {
    switch (roles[i]) {
      case LatentRole::Invariant:
        acc += -0.5 * z(i) * z(i);
        break;
      case LatentRole::Dependent: {
        const double lv = dep_logvar(u, d), mu = dep_mean(u, d);
        acc += -0.5 * (lv + (z(i) - mu) * (z(i) - mu) * std::exp(-lv));
        ++d;
        break;
      }
      case LatentRole::Noise: {
        const double lv = noise_logvar(nz);
        acc += -0.5 * (lv + z(i) * z(i) * std::exp(-lv));
        ++nz;
        break;
      }
    }
  }
  return acc;
}

Eigen::VectorXd ConditionalPrior::sample(int u, Rng& rng) const {
  Eigen::VectorXd z(m());
  int d = 0, nz = 0;
  for (int i = 0; i < m(); ++i) {
    switch (roles[i]) {
      case LatentRole::Invariant:
        z(i) = rng.normal();
        break;
      case LatentRole::Dependent:
        z(i) = dep_mean(u, d) + std::exp(0.5 * dep_logvar(u, d)) * rng.normal();
        ++d;
        break;
      case LatentRole::Noise:
        z(i) = std::exp(0.5 * noise_logvar(nz)) * rng.normal();
        ++nz;
        break;
    }
  }
  return z;
}

std::string ConditionalPrior::to_json() const {
  nlohmann::json j;
  j["version"] = 1;
  auto rl = nlohmann::json::array();
  for (auto r : roles)
    rl.push_back(r == LatentRole::Invariant ? "invariant"
                                            : (r == LatentRole::Dependent ? "dependent" : "noise"));
  j["roles"] = std::move(rl);
  j["dep_mean"] = matrix_to_json(dep_mean);
  j["dep_logvar"] = matrix_to_json(dep_logvar);
  j["noise_logvar"] =
      std::vector<double>(noise_logvar.data(), noise_logvar.data() + noise_logvar.size());
  j["learn_noise_scale"] = learn_noise_scale;
  j["logvar_floor"] = logvar_floor;
  return j.dump();
}

ConditionalPrior ConditionalPrior::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  if (j.at("version").get<int>() != 1) throw std::invalid_argument("unknown checkpoint version");
  ConditionalPrior prior;
  for (const auto& r : j.at("roles")) {
    const std::string s = r.get<std::string>();
    if (s == "invariant")
      prior.roles.push_back(LatentRole::Invariant);
    else if (s == "dependent")
      prior.roles.push_back(LatentRole::Dependent);
    else if (s == "noise")
      prior.roles.push_back(LatentRole::Noise);
    else
      throw std::invalid_argument("unknown latent role: " + s);
  }
  const int d = prior.dependent_count();
  const auto& jm = j.at("dep_mean");
  prior.dep_mean = matrix_from_json(jm, static_cast<int>(jm.size()), d);
  prior.dep_logvar = matrix_from_json(j.at("dep_logvar"), static_cast<int>(jm.size()), d);
  const auto nl = j.at("noise_logvar").get<std::vector<double>>();
  prior.noise_logvar = Eigen::Map<const Eigen::VectorXd>(nl.data(), nl.size());
  prior.learn_noise_scale = j.at("learn_noise_scale").get<bool>();
  prior.logvar_floor = j.at("logvar_floor").get<double>();
  prior.validate();
  return prior;
}

ConditionalPrior make_prior(int m, int n_I, int n_D, int u_count, bool learn_noise_scale) {
  if (m < n_I + n_D || n_I < 0 || n_D < 0) throw std::invalid_argument("bad prior layout");
  if (n_D > 0 && u_count < 1) throw std::invalid_argument("dependent block needs u labels");
  ConditionalPrior prior;
  prior.roles.assign(m, LatentRole::Noise);
  for (int i = 0; i < n_I; ++i) prior.roles[i] = LatentRole::Invariant;
  for (int i = n_I; i < n_I + n_D; ++i) prior.roles[i] = LatentRole::Dependent;
  prior.dep_mean = Eigen::MatrixXd::Zero(n_D > 0 ? u_count : 0, n_D);
  prior.dep_logvar = Eigen::MatrixXd::Zero(n_D > 0 ? u_count : 0, n_D);
  prior.noise_logvar = Eigen::VectorXd::Zero(m - n_I - n_D);
  prior.learn_noise_scale = learn_noise_scale;
  return prior;
}

double log_likelihood(const FlowModel& model, const ConditionalPrior& prior,
                      const Eigen::VectorXd& x, int u) {
  if (model.config().m != prior.m()) throw std::invalid_argument("model/prior dim mismatch");
  double ld = 0.0;
  const Eigen::VectorXd z = model.inverse(x, &ld);
  return prior.log_density(z, u) + ld;
}

Eigen::MatrixXd sample(const FlowModel& model, const ConditionalPrior& prior, int u, int count,
                       std::uint64_t seed) {
  if (model.config().m != prior.m()) throw std::invalid_argument("model/prior dim mismatch");
  Rng rng(seed);
  Eigen::MatrixXd out(count, model.config().m);
  for (int t = 0; t < count; ++t)
    out.row(t) = model.forward(prior.sample(u, rng)).transpose();
  return out;
}

void save_checkpoint(const FlowModel& model, const ConditionalPrior& prior,
                     const std::string& path) {
  nlohmann::json j;
  j["version"] = 1;
  j["model"] = nlohmann::json::parse(model.to_json());
  j["prior"] = nlohmann::json::parse(prior.to_json());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path);
  out << j.dump(2) << "\n";
  if (!out) throw std::runtime_error("write failed: " + path);
}

void load_checkpoint(const std::string& path, FlowModel* model, ConditionalPrior* prior) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  nlohmann::json j;
  in >> j;
  if (j.at("version").get<int>() != 1) throw std::invalid_argument("unknown checkpoint version");
  *model = FlowModel::from_json(j.at("model").dump());
  *prior = ConditionalPrior::from_json(j.at("prior").dump());
}

}  // namespace icalab
