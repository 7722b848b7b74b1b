// flow.hpp - invertible coupling flow over m coordinates with a conditional
// latent prior; exact log-determinants from the affine scales.
#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

namespace icalab {

class Rng;

struct FlowConfig {
  int m = 0;                      // data / latent dimension
  int n = 0;                      // declared source coordinates (first n)
  int layers = 10;
  int width = 32;                 // subnetwork hidden width
  double clamp = 2.0;             // soft bound on log-scales
  bool volume_preserving = true;  // log-scales centered within the updated half
  std::uint64_t seed = 0;
};

// One affine coupling step: the conditioning half drives scale/translate
// outputs for the updated half through a one-hidden-layer tanh subnetwork.
struct CouplingLayer {
  int a_off = 0, a_len = 0;  // conditioning half
  int b_off = 0, b_len = 0;  // updated half
  Eigen::MatrixXd W1;        // width x a_len
  Eigen::VectorXd b1;        // width
  Eigen::MatrixXd W2;        // 2*b_len x width  (rows: scales, then shifts)
  Eigen::VectorXd b2;        // 2*b_len
};

class FlowModel {
 public:
  FlowModel() = default;
  explicit FlowModel(const FlowConfig& cfg);  // near-identity initialization

  const FlowConfig& config() const { return cfg_; }
  std::vector<CouplingLayer>& layers() { return layers_; }
  const std::vector<CouplingLayer>& layers() const { return layers_; }

  // z -> x. log_det (optional) receives log|det dx/dz|; exactly 0 in
  // volume-preserving mode.
  Eigen::VectorXd forward(const Eigen::VectorXd& z, double* log_det = nullptr) const;
  // x -> z with log|det dz/dx| (the negation of the forward log-det).
  Eigen::VectorXd inverse(const Eigen::VectorXd& x, double* log_det = nullptr) const;

  // First n columns of the forward Jacobian at z (estimated mixing Jacobian
  // over source coordinates), via forward tangent propagation.
  Eigen::MatrixXd decoder_jacobian(const Eigen::VectorXd& z, int n) const;

  // Flat parameter view in a fixed layer order (training/optimizers).
  std::vector<double> flatten() const;
  void unflatten(const std::vector<double>& values);
  std::size_t parameter_count() const;

  std::string to_json() const;  // versioned checkpoint, exact round-trip
  static FlowModel from_json(const std::string& text);

 private:
  FlowConfig cfg_;
  std::vector<CouplingLayer> layers_;
};

enum class LatentRole { Invariant, Dependent, Noise };

// Latent density: invariant coordinates are standard normal; dependent
// coordinates carry per-u means/log-variances; noise coordinates are zero-mean
// with a shared-across-u log-variance (fixed at 0, or learned with a floor).
struct ConditionalPrior {
  std::vector<LatentRole> roles;     // size m
  Eigen::MatrixXd dep_mean;          // K x d_dep
  Eigen::MatrixXd dep_logvar;        // K x d_dep
  Eigen::VectorXd noise_logvar;      // d_noise
  bool learn_noise_scale = false;    // training updates noise_logvar when set
  double logvar_floor = -13.815510557964274;  // log(1e-6)

  int m() const { return static_cast<int>(roles.size()); }
  int u_count() const { return static_cast<int>(dep_mean.rows()); }
  int dependent_count() const;
  int noise_count() const;
  void validate() const;

  double log_density(const Eigen::VectorXd& z, int u) const;
  Eigen::VectorXd sample(int u, Rng& rng) const;

  std::string to_json() const;
  static ConditionalPrior from_json(const std::string& text);
};

// Roles [0,n_I) invariant, [n_I, n_I+n_D) dependent, rest noise.
ConditionalPrior make_prior(int m, int n_I, int n_D, int u_count, bool learn_noise_scale);

// log p(x|u) by change of variables through the inverse map.
double log_likelihood(const FlowModel& model, const ConditionalPrior& prior,
                      const Eigen::VectorXd& x, int u);

// count observations x = forward(z), z ~ prior(.|u); deterministic per seed.
Eigen::MatrixXd sample(const FlowModel& model, const ConditionalPrior& prior, int u, int count,
                       std::uint64_t seed);

// Model + prior bundled checkpoint.
void save_checkpoint(const FlowModel& model, const ConditionalPrior& prior,
                     const std::string& path);
void load_checkpoint(const std::string& path, FlowModel* model, ConditionalPrior* prior);

}  // namespace icalab
