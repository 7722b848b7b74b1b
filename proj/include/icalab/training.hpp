// training.hpp - regularized maximum-likelihood fitting of a coupling flow on
// a synthetic dataset: Adam over flow + prior parameters, seeded shuffling,
// per-epoch history, and a Jacobian sparsity penalty on a batch subsample.
#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "icalab/flow.hpp"
#include "icalab/penalty.hpp"
#include "icalab/synthetic.hpp"

namespace icalab {

struct TrainConfig {
  double learning_rate = 0.01;
  int batch_size = 200;
  int epochs = 300;
  PenaltyConfig penalty;
  std::uint64_t seed = 0;

  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  // Flow architecture handed to FlowModel.
  int layers = 10;
  int width = 32;
  double clamp = 2.0;
  bool volume_preserving = true;

  // Penalty cost control: per batch, |J| is averaged over this many points.
  int jac_subsample = 32;
  // Optional linear ramp of lambda over the first warmup_epochs epochs.
  int warmup_epochs = 0;
  // Learning rate is multiplied by lr_decay_factor at each listed epoch.
  std::vector<int> lr_milestones;
  double lr_decay_factor = 0.1;
  // Column-standardize x before fitting.
  bool standardize = true;
  // Noise-coordinate log-variances are trained (floored); when false they
  // stay fixed at unit variance.
  bool learn_noise_scale = true;
  // The likelihood is invariant under orthogonal rotations of the independent
  // source block, so after the main epochs the block is rotated to minimize
  // the mean absolute decoder Jacobian, alternating with short fine-tuning
  // phases that keep the penalty pointed at the rotated coordinates.
  bool rotation_polish = true;
  int polish_rounds = 2;    // fine-tune phases between rotation searches
  int polish_epochs = 50;   // epochs per fine-tune phase
  int polish_restarts = 24; // multi-start count for the rotation search
  int polish_points = 128;  // Jacobian evaluation points for the search

  void validate() const;
  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);
};

struct TrainHistory {
  std::vector<double> nll;      // per-epoch mean negative log-likelihood
  std::vector<double> penalty;  // per-epoch mean penalty value
  std::vector<double> loss;     // nll + penalty

  std::string to_csv() const;  // "epoch,nll,penalty,loss"
};

struct LossBreakdown {
  double nll = 0.0;
  double penalty = 0.0;
  double total = 0.0;
};

// Mean NLL over the batch plus the penalty of the batch-mean |decoder
// Jacobian| (first jac_subsample points; all points when the batch is
// smaller).  Plain evaluation, no gradients.
LossBreakdown loss(const FlowModel& model, const ConditionalPrior& prior,
                   const Eigen::MatrixXd& x, const std::vector<int>& u,
                   const PenaltyConfig& penalty, int jac_subsample);

// Flat parameter order: flow parameters, then dep_mean / dep_logvar
// (row-major), then noise_logvar.  Gradients align with this order.
std::vector<double> pack_parameters(const FlowModel& model, const ConditionalPrior& prior);
void unpack_parameters(const std::vector<double>& values, FlowModel* model,
                       ConditionalPrior* prior);

// Same objective as loss(), differentiated on the tape w.r.t. every packed
// parameter (prior parameters included).  The penalty term treats the
// Jacobian evaluation points as fixed: its gradient flows through the decoder
// parameters only, not through the latent images of the subsampled rows.
LossBreakdown loss_with_gradient(const FlowModel& model, const ConditionalPrior& prior,
                                 const Eigen::MatrixXd& x, const std::vector<int>& u,
                                 const PenaltyConfig& penalty, int jac_subsample,
                                 Eigen::ArrayXd* grad);

struct AdamState {
  Eigen::ArrayXd m;  // first moment
  Eigen::ArrayXd v;  // second moment
  long step = 0;
};

void adam_step(Eigen::ArrayXd* params, const Eigen::ArrayXd& grad, AdamState* state,
               double lr, double beta1, double beta2, double epsilon);

struct TrainResult {
  FlowModel model;
  ConditionalPrior prior;
  TrainHistory history;
  Eigen::VectorXd latent_sd;      // per-coordinate SD of z over the training set
  std::vector<int> source_order;  // top-n latent indices by SD, descending
  Eigen::VectorXd x_mean, x_scale;  // standardization applied to the data
  // Orthogonal map composed onto the source block by the rotation polish;
  // identity when polishing is disabled.  latents() applies it.
  Eigen::MatrixXd source_rotation;
};

// Builds the flow (m = dataset width, n = declared sources) and the
// conditional prior from dataset.spec, then runs seeded mini-batch Adam.
// Trailing samples that do not fill a batch are dropped.  Throws
// std::runtime_error with the epoch index if the loss turns non-finite.
TrainResult fit(const TrainConfig& cfg, const Dataset& ds);

// Orthogonal k x k matrix R minimizing the mean absolute entry of the stack
// {jacs[p] * R} (multi-start projected gradient descent on O(k) with polar
// retraction; the identity is always one of the starts).  All jacs must share
// one shape with k columns.
Eigen::MatrixXd sparsest_rotation(const std::vector<Eigen::MatrixXd>& jacs, int restarts,
                                  std::uint64_t seed);

// Latents for every row of x under the fitted result (standardization and
// source rotation replayed); rows align with x.
Eigen::MatrixXd latents(const TrainResult& result, const Eigen::MatrixXd& x);

}  // namespace icalab
