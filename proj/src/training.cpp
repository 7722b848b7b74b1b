#include "icalab/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "icalab/autodiff.hpp"
#include "icalab/rng.hpp"

namespace icalab {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

using Id = Tape::Id;

struct PackLayout {
  std::size_t flow = 0;
  std::size_t dep = 0;    // dep_mean entries (dep_logvar has the same count)
  std::size_t noise = 0;
  std::size_t total() const { return flow + 2 * dep + noise; }
};

PackLayout layout_of(const FlowModel& model, const ConditionalPrior& prior) {
  PackLayout lay;
  lay.flow = model.parameter_count();
  lay.dep = static_cast<std::size_t>(prior.dep_mean.size());
  lay.noise = static_cast<std::size_t>(prior.noise_logvar.size());
  return lay;
}

// Tape leaves for every packed parameter, in pack_parameters() order.
struct ParamIds {
  std::vector<Id> flat;  // all of them
  // per coupling layer, indexed like the Eigen storage (column-major)
  struct LayerIds {
    std::vector<Id> W1, b1, W2, b2;
  };
  std::vector<LayerIds> layers;
  std::vector<Id> dep_mean, dep_logvar;  // row-major K x d_dep
  std::vector<Id> noise_logvar;
};

ParamIds make_param_leaves(Tape& tape, const FlowModel& model, const ConditionalPrior& prior) {
  ParamIds ids;

  for (const auto& lay : model.layers()) {
    ParamIds::LayerIds li;
    for (Eigen::Index k = 0; k < lay.W1.size(); ++k) li.W1.push_back(tape.leaf(lay.W1.data()[k]));
    for (Eigen::Index k = 0; k < lay.b1.size(); ++k) li.b1.push_back(tape.leaf(lay.b1(k)));
    for (Eigen::Index k = 0; k < lay.W2.size(); ++k) li.W2.push_back(tape.leaf(lay.W2.data()[k]));
    for (Eigen::Index k = 0; k < lay.b2.size(); ++k) li.b2.push_back(tape.leaf(lay.b2(k)));
    ids.flat.insert(ids.flat.end(), li.W1.begin(), li.W1.end());
    ids.flat.insert(ids.flat.end(), li.b1.begin(), li.b1.end());
    ids.flat.insert(ids.flat.end(), li.W2.begin(), li.W2.end());
    ids.flat.insert(ids.flat.end(), li.b2.begin(), li.b2.end());
    ids.layers.push_back(std::move(li));
  }
  for (Eigen::Index r = 0; r < prior.dep_mean.rows(); ++r)
    for (Eigen::Index c = 0; c < prior.dep_mean.cols(); ++c)
      ids.dep_mean.push_back(tape.leaf(prior.dep_mean(r, c)));
  for (Eigen::Index r = 0; r < prior.dep_logvar.rows(); ++r)
    for (Eigen::Index c = 0; c < prior.dep_logvar.cols(); ++c)
      ids.dep_logvar.push_back(tape.leaf(prior.dep_logvar(r, c)));
  for (Eigen::Index k = 0; k < prior.noise_logvar.size(); ++k)
    ids.noise_logvar.push_back(tape.leaf(prior.noise_logvar(k)));
  ids.flat.insert(ids.flat.end(), ids.dep_mean.begin(), ids.dep_mean.end());
  ids.flat.insert(ids.flat.end(), ids.dep_logvar.begin(), ids.dep_logvar.end());
  ids.flat.insert(ids.flat.end(), ids.noise_logvar.begin(), ids.noise_logvar.end());
  return ids;
}

struct ConstIds {
  Id zero, one, half, clamp, inv_clamp, inv_batch;
  std::vector<Id> inv_blen;  // per layer (0 where unused)
};

ConstIds make_const_leaves(Tape& tape, const FlowModel& model, int batch) {
  ConstIds c;
  c.zero = tape.leaf(0.0);
  c.one = tape.leaf(1.0);
  c.half = tape.leaf(0.5);
  c.clamp = tape.leaf(model.config().clamp);
  c.inv_clamp = tape.leaf(1.0 / model.config().clamp);
  c.inv_batch = tape.leaf(1.0 / batch);
  for (const auto& lay : model.layers())
    c.inv_blen.push_back(lay.b_len > 0 ? tape.leaf(1.0 / lay.b_len) : c.zero);
  return c;
}

// One sample's coupling pass on the tape (either direction).  The per-layer
// activation nodes are kept so the Jacobian tangent pass can reuse them.
struct TracedPass {
  std::vector<Id> z;  // m running slots; after an inverse pass these hold z
  struct LayerNodes {
    std::vector<Id> hid;    // width
    std::vector<Id> th;     // b_len: tanh(raw/clamp)
    std::vector<Id> e;      // b_len: exp(scale)
    std::vector<Id> b_pre;  // b_len: the half value below the layer
  };
  std::vector<LayerNodes> per_layer;  // aligned with model.layers()
  std::vector<Id> scales;             // every (centered) scale node
};
using TracedInverse = TracedPass;

TracedInverse trace_inverse(Tape& tape, const FlowModel& model, const ParamIds& pp,
                            const ConstIds& cc, std::vector<Id> x_ids) {
  const auto& layers = model.layers();
  const bool vp = model.config().volume_preserving;
  const int width = model.config().width;
  TracedInverse out;
  out.z = std::move(x_ids);
  std::vector<Id> a_ids, hid(width), s, args;
  for (int li = static_cast<int>(layers.size()) - 1; li >= 0; --li) {
    const auto& lay = layers[li];
    if (lay.b_len == 0) continue;
    const auto& lp = pp.layers[li];
    a_ids.assign(out.z.begin() + lay.a_off, out.z.begin() + lay.a_off + lay.a_len);
    for (int w = 0; w < width; ++w) {
      args.clear();
      for (int i = 0; i < lay.a_len; ++i)
        args.push_back(lp.W1[static_cast<std::size_t>(i) * width + w]);
      hid[w] = tape.tanh_(tape.affine(lp.b1[w], args, a_ids));
    }
    const int bl = lay.b_len;
    s.resize(bl);
    for (int k = 0; k < bl; ++k) {
      args.clear();
      for (int h = 0; h < width; ++h)
        args.push_back(lp.W2[static_cast<std::size_t>(h) * (2 * bl) + k]);
      const Id rawk = tape.affine(lp.b2[k], args, hid);
      s[k] = tape.mul(cc.clamp, tape.tanh_(tape.mul(rawk, cc.inv_clamp)));
    }
    if (vp) {
      const Id mean = tape.mul(tape.sum(s), cc.inv_blen[li]);
      for (int k = 0; k < bl; ++k) s[k] = tape.sub(s[k], mean);
    }
    for (int k = 0; k < bl; ++k) {
      args.clear();
      for (int h = 0; h < width; ++h)
        args.push_back(lp.W2[static_cast<std::size_t>(h) * (2 * bl) + bl + k]);
      const Id t = tape.affine(lp.b2[bl + k], args, hid);
      out.z[lay.b_off + k] = tape.div(tape.sub(out.z[lay.b_off + k], t), tape.exp_(s[k]));
    }
    if (!vp) out.scales.insert(out.scales.end(), s.begin(), s.end());
  }
  return out;
}

// Forward pass traced from fixed z leaves: gradient stops at the Jacobian
// evaluation point and flows only through the decoder's own use of the
// parameters, so the sparsity penalty cannot push the encoder toward points
// where the Jacobian merely happens to be small.
TracedPass trace_forward(Tape& tape, const FlowModel& model, const ParamIds& pp,
                         const ConstIds& cc, const Eigen::VectorXd& z) {
  const auto& layers = model.layers();
  const bool vp = model.config().volume_preserving;
  const int width = model.config().width;
  TracedPass out;
  out.z.resize(static_cast<std::size_t>(z.size()));
  for (Eigen::Index j = 0; j < z.size(); ++j)
    out.z[static_cast<std::size_t>(j)] = tape.leaf(z(j));
  out.per_layer.resize(layers.size());
  std::vector<Id> a_ids, hid(width), s, args;
  for (std::size_t li = 0; li < layers.size(); ++li) {
    const auto& lay = layers[li];
    if (lay.b_len == 0) continue;
    const auto& lp = pp.layers[li];
    a_ids.assign(out.z.begin() + lay.a_off, out.z.begin() + lay.a_off + lay.a_len);
    for (int w = 0; w < width; ++w) {
      args.clear();
      for (int i = 0; i < lay.a_len; ++i)
        args.push_back(lp.W1[static_cast<std::size_t>(i) * width + w]);
      hid[w] = tape.tanh_(tape.affine(lp.b1[w], args, a_ids));
    }
    const int bl = lay.b_len;
    s.resize(bl);
    std::vector<Id> th(bl);
    for (int k = 0; k < bl; ++k) {
      args.clear();
      for (int h = 0; h < width; ++h)
        args.push_back(lp.W2[static_cast<std::size_t>(h) * (2 * bl) + k]);
      const Id rawk = tape.affine(lp.b2[k], args, hid);
      th[k] = tape.tanh_(tape.mul(rawk, cc.inv_clamp));
      s[k] = tape.mul(cc.clamp, th[k]);
    }
    if (vp) {
      const Id mean = tape.mul(tape.sum(s), cc.inv_blen[li]);
      for (int k = 0; k < bl; ++k) s[k] = tape.sub(s[k], mean);
    }
    std::vector<Id> e(bl), b_pre(bl);
    for (int k = 0; k < bl; ++k) {
      args.clear();
      for (int h = 0; h < width; ++h)
        args.push_back(lp.W2[static_cast<std::size_t>(h) * (2 * bl) + bl + k]);
      const Id t = tape.affine(lp.b2[bl + k], args, hid);
      e[k] = tape.exp_(s[k]);
      b_pre[k] = out.z[lay.b_off + k];
      out.z[lay.b_off + k] = tape.add(tape.mul(b_pre[k], e[k]), t);
    }
    auto& ln = out.per_layer[li];
    ln.hid = hid;
    ln.th = std::move(th);
    ln.e = std::move(e);
    ln.b_pre = std::move(b_pre);
  }
  return out;
}

// 0.5 * sum of per-coordinate terms (the 0.5*m*log(2pi) constant is excluded)
// minus the inverse log-det contribution for free-scale models.
Id trace_sample_nll(Tape& tape, const ConditionalPrior& prior, const ParamIds& pp,
                    const ConstIds& cc, const TracedInverse& inv,
                    const std::vector<Id>& onehot) {
  const int K = prior.u_count();
  const int d_dep = prior.dependent_count();
  std::vector<Id> terms;
  int d = 0, nz = 0;
  for (int j = 0; j < prior.m(); ++j) {
    switch (prior.roles[j]) {
      case LatentRole::Invariant:
        terms.push_back(tape.square(inv.z[j]));
        break;
      case LatentRole::Dependent: {
        Id mu, lv;
        if (K == 1) {
          mu = pp.dep_mean[d];
          lv = pp.dep_logvar[d];
        } else {
          std::vector<Id> mu_col(K), lv_col(K);
          for (int k = 0; k < K; ++k) {
            mu_col[k] = pp.dep_mean[static_cast<std::size_t>(k) * d_dep + d];
            lv_col[k] = pp.dep_logvar[static_cast<std::size_t>(k) * d_dep + d];
          }
          mu = tape.affine(cc.zero, onehot, mu_col);
          lv = tape.affine(cc.zero, onehot, lv_col);
        }
        const Id q = tape.div(tape.square(tape.sub(inv.z[j], mu)), tape.exp_(lv));
        terms.push_back(tape.add(q, lv));
        ++d;
        break;
      }
      case LatentRole::Noise: {
        const Id lv = pp.noise_logvar[nz];
        terms.push_back(tape.add(tape.div(tape.square(inv.z[j]), tape.exp_(lv)), lv));
        ++nz;
        break;
      }
    }
  }
  Id nll = tape.mul(cc.half, tape.sum(terms));
  if (!inv.scales.empty()) nll = tape.add(nll, tape.sum(inv.scales));
  return nll;
}

// Persistent batch graph: leaves are refreshed per step, then a single
// recompute + reverse sweep yields the loss and all parameter gradients.
struct NllGraph {
  Tape tape;
  ParamIds params;
  std::vector<Id> x;       // batch*m
  std::vector<Id> onehot;  // batch*K (empty unless a dependent block exists)
  Id loss = 0;
  double constant = 0.0;
  int batch = 0, K = 0;
};

NllGraph build_nll_graph(const FlowModel& model, const ConditionalPrior& prior, int batch) {
  NllGraph g;
  g.batch = batch;
  const int m = model.config().m;
  const bool dep = prior.dependent_count() > 0 && prior.u_count() > 1;
  g.K = dep ? prior.u_count() : 0;
  const std::size_t per_sample =
      static_cast<std::size_t>(model.config().layers) *
          (model.config().width + 8 * std::max(1, m / 2)) +
      6 * m;
  g.tape.reserve(batch * per_sample + 4096, batch * per_sample * 8);
  g.params = make_param_leaves(g.tape, model, prior);
  const ConstIds cc = make_const_leaves(g.tape, model, batch);
  for (int b = 0; b < batch; ++b)
    for (int j = 0; j < m; ++j) g.x.push_back(g.tape.leaf(0.0));
  if (dep)
    for (int b = 0; b < batch; ++b)
      for (int k = 0; k < g.K; ++k) g.onehot.push_back(g.tape.leaf(0.0));
  std::vector<Id> nlls(batch);
  for (int b = 0; b < batch; ++b) {
    std::vector<Id> x_ids(g.x.begin() + static_cast<std::size_t>(b) * m,
                          g.x.begin() + static_cast<std::size_t>(b + 1) * m);
    const TracedInverse inv = trace_inverse(g.tape, model, g.params, cc, std::move(x_ids));
    std::vector<Id> oh;
    if (dep)
      oh.assign(g.onehot.begin() + static_cast<std::size_t>(b) * g.K,
                g.onehot.begin() + static_cast<std::size_t>(b + 1) * g.K);
    nlls[b] = trace_sample_nll(g.tape, prior, g.params, cc, inv, oh);
  }
  g.loss = g.tape.mul(g.tape.sum(nlls), cc.inv_batch);
  g.constant = 0.5 * m * kLog2Pi;
  return g;
}

Id trace_penalty_of_mean(Tape& tape, const PenaltyConfig& pen, double lambda, Id t,
                         double t_value) {
  const Id lam = tape.leaf(lambda);
  switch (pen.kind) {
    case PenaltyKind::L1:
      return tape.mul(lam, t);
    case PenaltyKind::MCP:
      if (t_value <= pen.gamma * lambda) {
        const Id inv2g = tape.leaf(1.0 / (2.0 * pen.gamma));
        return tape.sub(tape.mul(lam, t), tape.mul(tape.square(t), inv2g));
      }
      return tape.leaf(pen.gamma * lambda * lambda / 2.0);
    case PenaltyKind::SCAD:
      if (t_value <= lambda) return tape.mul(lam, t);
      if (t_value <= pen.a * lambda) {
        const Id c2al = tape.leaf(2.0 * pen.a * lambda);
        const Id l2 = tape.leaf(lambda * lambda);
        const Id inv = tape.leaf(1.0 / (2.0 * (pen.a - 1.0)));
        return tape.mul(tape.sub(tape.sub(tape.mul(c2al, t), tape.square(t)), l2), inv);
      }
      return tape.leaf(lambda * lambda * (pen.a + 1.0) / 2.0);
  }
  return tape.leaf(0.0);
}

// Traces the penalty of the batch-mean |decoder Jacobian| over the latent
// images of `xsub` and accumulates d(penalty)/d(flow parameters) into grad.
// Fresh trace per call so every |.| and penalty branch is taken at current
// values; evaluation points are held fixed (see trace_forward).  When `rot`
// is given (n x n), the penalized matrix is J * rot: the tangent directions
// are its columns instead of the coordinate basis.
double trace_penalty(Tape& tape, const FlowModel& model, const Eigen::MatrixXd& xsub,
                     const PenaltyConfig& pen, double lambda, const Eigen::MatrixXd* rot,
                     Eigen::ArrayXd* grad) {
  tape.clear();
  const int m = model.config().m;
  const int n = model.config().n;
  if (rot != nullptr && (rot->rows() != n || rot->cols() != n))
    throw std::invalid_argument("trace_penalty: rotation shape mismatch");
  const int width = model.config().width;
  const bool vp = model.config().volume_preserving;
  const int S = static_cast<int>(xsub.rows());
  ParamIds pp;

  for (const auto& lay : model.layers()) {
    ParamIds::LayerIds li;
    for (Eigen::Index k = 0; k < lay.W1.size(); ++k) li.W1.push_back(tape.leaf(lay.W1.data()[k]));
    for (Eigen::Index k = 0; k < lay.b1.size(); ++k) li.b1.push_back(tape.leaf(lay.b1(k)));
    for (Eigen::Index k = 0; k < lay.W2.size(); ++k) li.W2.push_back(tape.leaf(lay.W2.data()[k]));
    for (Eigen::Index k = 0; k < lay.b2.size(); ++k) li.b2.push_back(tape.leaf(lay.b2(k)));
    pp.flat.insert(pp.flat.end(), li.W1.begin(), li.W1.end());
    pp.flat.insert(pp.flat.end(), li.b1.begin(), li.b1.end());
    pp.flat.insert(pp.flat.end(), li.W2.begin(), li.W2.end());
    pp.flat.insert(pp.flat.end(), li.b2.begin(), li.b2.end());
    pp.layers.push_back(std::move(li));
  }
  const ConstIds cc = make_const_leaves(tape, model, 1);
  const Id inv_S = tape.leaf(1.0 / S);
  const Id inv_mn = tape.leaf(1.0 / (static_cast<double>(m) * n));
  std::vector<Id> rot_ids;
  if (rot != nullptr) {
    rot_ids.assign(static_cast<std::size_t>(n) * n, cc.zero);
    for (int c = 0; c < n; ++c)
      for (int i = 0; i < n; ++i)
        if ((*rot)(i, c) != 0.0)
          rot_ids[static_cast<std::size_t>(c) * n + i] = tape.leaf((*rot)(i, c));
  }

  // per point: full Jacobian tangent over the n source columns, evaluated at
  // the fixed latent image of the subsampled rows
  std::vector<std::vector<Id>> jac(S);  // each m*n, column-major (c*m + i)
  std::vector<Id> args;
  for (int p = 0; p < S; ++p) {
    const TracedPass inv =
        trace_forward(tape, model, pp, cc, model.inverse(xsub.row(p).transpose()));
    std::vector<Id> tan(static_cast<std::size_t>(m) * n, cc.zero);
    if (rot == nullptr) {
      for (int c = 0; c < n; ++c) tan[static_cast<std::size_t>(c) * m + c] = cc.one;
    } else {
      for (int c = 0; c < n; ++c)
        for (int i = 0; i < n; ++i)
          tan[static_cast<std::size_t>(c) * m + i] = rot_ids[static_cast<std::size_t>(c) * n + i];
    }
    const auto& layers = model.layers();
    std::vector<Id> om_h(width), om_s, be, wd(width), dh(width), dsc, ds, da;
    for (std::size_t li = 0; li < layers.size(); ++li) {
      const auto& lay = layers[li];
      if (lay.b_len == 0) continue;
      const auto& lp = pp.layers[li];
      const auto& ln = inv.per_layer[li];
      const int bl = lay.b_len;
      for (int w = 0; w < width; ++w)
        om_h[w] = tape.sub(cc.one, tape.square(ln.hid[w]));
      om_s.resize(bl);
      be.resize(bl);
      for (int k = 0; k < bl; ++k) {
        om_s[k] = tape.sub(cc.one, tape.square(ln.th[k]));
        be[k] = tape.mul(ln.b_pre[k], ln.e[k]);
      }
      dsc.resize(2 * bl);
      ds.resize(bl);
      for (int c = 0; c < n; ++c) {
        da.clear();
        for (int i = 0; i < lay.a_len; ++i)
          da.push_back(tan[static_cast<std::size_t>(c) * m + lay.a_off + i]);
        for (int w = 0; w < width; ++w) {
          args.clear();
          for (int i = 0; i < lay.a_len; ++i)
            args.push_back(lp.W1[static_cast<std::size_t>(i) * width + w]);
          dh[w] = tape.mul(om_h[w], tape.affine(cc.zero, args, da));
        }
        for (int k = 0; k < 2 * bl; ++k) {
          args.clear();
          for (int h = 0; h < width; ++h)
            args.push_back(lp.W2[static_cast<std::size_t>(h) * (2 * bl) + k]);
          dsc[k] = tape.affine(cc.zero, args, dh);
        }
        for (int k = 0; k < bl; ++k) ds[k] = tape.mul(om_s[k], dsc[k]);
        if (vp) {
          const Id dm = tape.mul(tape.sum(ds), cc.inv_blen[li]);
          for (int k = 0; k < bl; ++k) ds[k] = tape.sub(ds[k], dm);
        }
        for (int k = 0; k < bl; ++k) {
          Id& slot = tan[static_cast<std::size_t>(c) * m + lay.b_off + k];
          slot = tape.add(tape.add(tape.mul(ln.e[k], slot), tape.mul(be[k], ds[k])),
                          dsc[bl + k]);
        }
      }
    }
    jac[p] = std::move(tan);
  }

  // batch-mean absolute entries, then the penalty averaged over entries
  std::vector<Id> rho;
  rho.reserve(static_cast<std::size_t>(m) * n);
  std::vector<Id> absr(S);
  for (int c = 0; c < n; ++c)
    for (int i = 0; i < m; ++i) {
      for (int p = 0; p < S; ++p) {
        const Id jid = jac[p][static_cast<std::size_t>(c) * m + i];
        absr[p] = tape.value(jid) >= 0.0 ? jid : tape.sub(cc.zero, jid);
      }
      const Id mean_abs = tape.mul(tape.sum(absr), inv_S);
      rho.push_back(trace_penalty_of_mean(tape, pen, lambda, mean_abs, tape.value(mean_abs)));
    }
  const Id out = tape.mul(tape.sum(rho), inv_mn);
  if (!std::isfinite(tape.value(out)) || tape.domain_error()) return tape.value(out);
  std::vector<double> adj;
  tape.gradient(out, &adj);
  for (std::size_t p = 0; p < pp.flat.size(); ++p) (*grad)[p] += adj[pp.flat[p]];
  return tape.value(out);
}

void set_batch_leaves(NllGraph* g, const std::vector<double>& params,
                      const Eigen::MatrixXd& xs, const std::vector<int>& labels,
                      const std::vector<int>& order, int first) {
  auto& tape = g->tape;
  for (std::size_t p = 0; p < params.size(); ++p) tape.set_leaf(g->params.flat[p], params[p]);
  const int m = static_cast<int>(xs.cols());
  for (int b = 0; b < g->batch; ++b) {
    const int row = order[first + b];
    for (int j = 0; j < m; ++j)
      tape.set_leaf(g->x[static_cast<std::size_t>(b) * m + j], xs(row, j));
    for (int k = 0; k < g->K; ++k)
      tape.set_leaf(g->onehot[static_cast<std::size_t>(b) * g->K + k],
                    labels[row] == k ? 1.0 : 0.0);
  }
}

void check_finite(double v, const char* what, int epoch, const LossBreakdown& parts) {
  if (std::isfinite(v)) return;
  std::ostringstream oss;
  oss << "training diverged at epoch " << epoch << ": " << what << " is non-finite"
      << " (nll=" << parts.nll << ", penalty=" << parts.penalty << ")";
  throw std::runtime_error(oss.str());
}

double warmup_factor(const TrainConfig& cfg, int epoch) {
  if (cfg.warmup_epochs <= 0) return 1.0;
  return std::min(1.0, static_cast<double>(epoch + 1) / cfg.warmup_epochs);
}

}  // namespace

void TrainConfig::validate() const {
  if (learning_rate <= 0) throw std::invalid_argument("train: learning_rate must be > 0");
  if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  if (epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
  if (layers < 1 || width < 1) throw std::invalid_argument("train: bad architecture");
  if (clamp <= 0) throw std::invalid_argument("train: clamp must be > 0");
  if (jac_subsample < 1) throw std::invalid_argument("train: jac_subsample must be >= 1");
  if (warmup_epochs < 0) throw std::invalid_argument("train: warmup_epochs must be >= 0");
  if (beta1 <= 0 || beta1 >= 1 || beta2 <= 0 || beta2 >= 1 || epsilon <= 0)
    throw std::invalid_argument("train: bad optimizer constants");
  for (const int e : lr_milestones)
    if (e < 1) throw std::invalid_argument("train: lr milestones must be >= 1");
  if (lr_decay_factor <= 0 || lr_decay_factor > 1)
    throw std::invalid_argument("train: lr_decay_factor must be in (0, 1]");
  if (polish_rounds < 0) throw std::invalid_argument("train: polish_rounds must be >= 0");
  if (polish_epochs < 0) throw std::invalid_argument("train: polish_epochs must be >= 0");
  if (polish_restarts < 1) throw std::invalid_argument("train: polish_restarts must be >= 1");
  if (polish_points < 1) throw std::invalid_argument("train: polish_points must be >= 1");
  penalty.validate();
}

std::string TrainConfig::to_json() const {
  nlohmann::json j;
  j["learning_rate"] = learning_rate;
  j["batch_size"] = batch_size;
  j["epochs"] = epochs;
  j["penalty"] = {{"kind", to_string(penalty.kind)},
                  {"lambda", penalty.lambda},
                  {"gamma", penalty.gamma},
                  {"a", penalty.a}};
  j["seed"] = seed;
  j["beta1"] = beta1;
  j["beta2"] = beta2;
  j["epsilon"] = epsilon;
  j["layers"] = layers;
  j["width"] = width;
  j["clamp"] = clamp;
  j["volume_preserving"] = volume_preserving;
  j["jac_subsample"] = jac_subsample;
  j["warmup_epochs"] = warmup_epochs;
  j["lr_milestones"] = lr_milestones;
  j["lr_decay_factor"] = lr_decay_factor;
  j["standardize"] = standardize;
  j["learn_noise_scale"] = learn_noise_scale;
  j["rotation_polish"] = rotation_polish;
  j["polish_rounds"] = polish_rounds;
  j["polish_epochs"] = polish_epochs;
  j["polish_restarts"] = polish_restarts;
  j["polish_points"] = polish_points;
  return j.dump(2);
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  TrainConfig cfg;
  cfg.learning_rate = j.value("learning_rate", cfg.learning_rate);
  cfg.batch_size = j.value("batch_size", cfg.batch_size);
  cfg.epochs = j.value("epochs", cfg.epochs);
  if (j.contains("penalty")) {
    const auto& p = j.at("penalty");
    cfg.penalty.kind = penalty_kind_from_string(p.value("kind", "mcp"));
    cfg.penalty.lambda = p.value("lambda", 0.0);
    cfg.penalty.gamma = p.value("gamma", cfg.penalty.gamma);
    cfg.penalty.a = p.value("a", cfg.penalty.a);
  }
  cfg.seed = j.value("seed", cfg.seed);
  cfg.beta1 = j.value("beta1", cfg.beta1);
  cfg.beta2 = j.value("beta2", cfg.beta2);
  cfg.epsilon = j.value("epsilon", cfg.epsilon);
  cfg.layers = j.value("layers", cfg.layers);
  cfg.width = j.value("width", cfg.width);
  cfg.clamp = j.value("clamp", cfg.clamp);
  cfg.volume_preserving = j.value("volume_preserving", cfg.volume_preserving);
  cfg.jac_subsample = j.value("jac_subsample", cfg.jac_subsample);
  cfg.warmup_epochs = j.value("warmup_epochs", cfg.warmup_epochs);
  cfg.lr_milestones = j.value("lr_milestones", cfg.lr_milestones);
  cfg.lr_decay_factor = j.value("lr_decay_factor", cfg.lr_decay_factor);
  cfg.standardize = j.value("standardize", cfg.standardize);
  cfg.learn_noise_scale = j.value("learn_noise_scale", cfg.learn_noise_scale);
  cfg.rotation_polish = j.value("rotation_polish", cfg.rotation_polish);
  cfg.polish_rounds = j.value("polish_rounds", cfg.polish_rounds);
  cfg.polish_epochs = j.value("polish_epochs", cfg.polish_epochs);
  cfg.polish_restarts = j.value("polish_restarts", cfg.polish_restarts);
  cfg.polish_points = j.value("polish_points", cfg.polish_points);
  cfg.validate();
  return cfg;
}

std::string TrainHistory::to_csv() const {
  std::ostringstream oss;
  oss << "epoch,nll,penalty,loss\n";
  oss.precision(12);
  for (std::size_t e = 0; e < loss.size(); ++e)
    oss << (e + 1) << ',' << nll[e] << ',' << penalty[e] << ',' << loss[e] << '\n';
  return oss.str();
}

LossBreakdown loss(const FlowModel& model, const ConditionalPrior& prior,
                   const Eigen::MatrixXd& x, const std::vector<int>& u,
                   const PenaltyConfig& penalty, int jac_subsample) {
  if (x.rows() == 0) throw std::invalid_argument("loss: empty batch");
  if (x.rows() != static_cast<Eigen::Index>(u.size()))
    throw std::invalid_argument("loss: label count mismatch");
  LossBreakdown out;
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    out.nll -= log_likelihood(model, prior, x.row(i).transpose(), u[i]);
  out.nll /= static_cast<double>(x.rows());
  if (penalty.lambda > 0.0) {
    const int S = std::min<int>(jac_subsample, static_cast<int>(x.rows()));
    Eigen::MatrixXd mean_abs =
        Eigen::MatrixXd::Zero(model.config().m, model.config().n);
    for (int p = 0; p < S; ++p) {
      const Eigen::VectorXd z = model.inverse(x.row(p).transpose());
      mean_abs += model.decoder_jacobian(z, model.config().n).cwiseAbs();
    }
    mean_abs /= static_cast<double>(S);
    out.penalty = jacobian_penalty(penalty, mean_abs);
  }
  out.total = out.nll + out.penalty;
  return out;
}

std::vector<double> pack_parameters(const FlowModel& model, const ConditionalPrior& prior) {
  std::vector<double> out = model.flatten();
  for (Eigen::Index r = 0; r < prior.dep_mean.rows(); ++r)
    for (Eigen::Index c = 0; c < prior.dep_mean.cols(); ++c) out.push_back(prior.dep_mean(r, c));
  for (Eigen::Index r = 0; r < prior.dep_logvar.rows(); ++r)
    for (Eigen::Index c = 0; c < prior.dep_logvar.cols(); ++c)
      out.push_back(prior.dep_logvar(r, c));
  for (Eigen::Index k = 0; k < prior.noise_logvar.size(); ++k)
    out.push_back(prior.noise_logvar(k));
  return out;
}

void unpack_parameters(const std::vector<double>& values, FlowModel* model,
                       ConditionalPrior* prior) {
  const PackLayout lay = layout_of(*model, *prior);
  if (values.size() != lay.total())
    throw std::invalid_argument("unpack_parameters: size mismatch");
  model->unflatten(std::vector<double>(values.begin(), values.begin() + lay.flow));
  std::size_t off = lay.flow;
  for (Eigen::Index r = 0; r < prior->dep_mean.rows(); ++r)
    for (Eigen::Index c = 0; c < prior->dep_mean.cols(); ++c) prior->dep_mean(r, c) = values[off++];
  for (Eigen::Index r = 0; r < prior->dep_logvar.rows(); ++r)
    for (Eigen::Index c = 0; c < prior->dep_logvar.cols(); ++c)
      prior->dep_logvar(r, c) = values[off++];
  for (Eigen::Index k = 0; k < prior->noise_logvar.size(); ++k)
    prior->noise_logvar(k) = values[off++];
}

LossBreakdown loss_with_gradient(const FlowModel& model, const ConditionalPrior& prior,
                                 const Eigen::MatrixXd& x, const std::vector<int>& u,
                                 const PenaltyConfig& penalty, int jac_subsample,
                                 Eigen::ArrayXd* grad) {
  if (x.rows() == 0) throw std::invalid_argument("loss: empty batch");
  const int B = static_cast<int>(x.rows());
  NllGraph g = build_nll_graph(model, prior, B);
  const std::vector<double> params = pack_parameters(model, prior);
  std::vector<int> order(B);
  std::iota(order.begin(), order.end(), 0);
  set_batch_leaves(&g, params, x, u, order, 0);
  g.tape.recompute();
  grad->setZero(static_cast<Eigen::Index>(params.size()));
  std::vector<double> adj;
  g.tape.gradient(g.loss, &adj);
  for (std::size_t p = 0; p < params.size(); ++p) (*grad)[p] = adj[g.params.flat[p]];
  LossBreakdown out;
  out.nll = g.tape.value(g.loss) + g.constant;
  if (penalty.lambda > 0.0) {
    const int S = std::min<int>(jac_subsample, B);
    Tape pen_tape;
    out.penalty =
        trace_penalty(pen_tape, model, x.topRows(S), penalty, penalty.lambda, nullptr, grad);
  }
  out.total = out.nll + out.penalty;
  return out;
}

namespace {

Eigen::MatrixXd polar_factor(const Eigen::MatrixXd& a) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullU | Eigen::ComputeFullV);
  return svd.matrixU() * svd.matrixV().transpose();
}

}  // namespace

Eigen::MatrixXd sparsest_rotation(const std::vector<Eigen::MatrixXd>& jacs, int restarts,
                                  std::uint64_t seed) {
  if (jacs.empty()) throw std::invalid_argument("sparsest_rotation: no jacobians");
  if (restarts < 1) throw std::invalid_argument("sparsest_rotation: restarts must be >= 1");
  const Eigen::Index rows = jacs[0].rows(), k = jacs[0].cols();
  for (const auto& j : jacs)
    if (j.rows() != rows || j.cols() != k)
      throw std::invalid_argument("sparsest_rotation: shape mismatch");
  const double scale = static_cast<double>(jacs.size()) * rows * k;
  const auto objective = [&](const Eigen::MatrixXd& rot) {
    double s = 0.0;
    for (const auto& j : jacs) s += (j * rot).cwiseAbs().sum();
    return s / scale;
  };
  const auto gradient = [&](const Eigen::MatrixXd& rot) {
    Eigen::MatrixXd g = Eigen::MatrixXd::Zero(k, k);
    for (const auto& j : jacs)
      g += j.transpose() *
           (j * rot).unaryExpr([](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
    return Eigen::MatrixXd(g / scale);
  };

  Rng rng(seed);
  Eigen::MatrixXd best = Eigen::MatrixXd::Identity(k, k);
  double best_val = objective(best);
  for (int start = 0; start < restarts; ++start) {
    Eigen::MatrixXd rot(k, k);
    if (start == 0) {
      rot.setIdentity();
    } else {
      for (Eigen::Index i = 0; i < k; ++i)
        for (Eigen::Index j = 0; j < k; ++j) rot(i, j) = rng.normal();
      rot = polar_factor(rot);
    }
    double cur = objective(rot);
    for (int it = 0; it < 200; ++it) {
      const Eigen::MatrixXd g = gradient(rot);
      double step = 0.5;
      Eigen::MatrixXd cand;
      double cand_val = cur;
      for (int bt = 0; bt < 12; ++bt) {
        cand = polar_factor(rot - step * g);
        cand_val = objective(cand);
        if (cand_val < cur) break;
        step *= 0.5;
      }
      if (cand_val >= cur - 1e-12) break;
      rot = cand;
      cur = cand_val;
    }
    if (cur < best_val) {
      best_val = cur;
      best = rot;
    }
  }
  return best;
}

void adam_step(Eigen::ArrayXd* params, const Eigen::ArrayXd& grad, AdamState* state,
               double lr, double beta1, double beta2, double epsilon) {
  if (params->size() != grad.size()) throw std::invalid_argument("adam: size mismatch");
  if (!grad.isFinite().all()) throw std::invalid_argument("adam: non-finite gradient");
  if (state->m.size() != params->size()) {
    state->m = Eigen::ArrayXd::Zero(params->size());
    state->v = Eigen::ArrayXd::Zero(params->size());
    state->step = 0;
  }
  state->step += 1;
  state->m = beta1 * state->m + (1.0 - beta1) * grad;
  state->v = beta2 * state->v + (1.0 - beta2) * grad.square();
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state->step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state->step));
  *params -= lr * (state->m / c1) / ((state->v / c2).sqrt() + epsilon);
}

TrainResult fit(const TrainConfig& cfg, const Dataset& ds) {
  cfg.validate();
  const int N = static_cast<int>(ds.x.rows());
  const int m = static_cast<int>(ds.x.cols());
  const int n = ds.spec.n();
  if (N == 0) throw std::invalid_argument("fit: empty dataset");
  if (m != ds.spec.m()) throw std::invalid_argument("fit: dataset width mismatch");
  if (ds.labels.size() != static_cast<std::size_t>(N))
    throw std::invalid_argument("fit: label count mismatch");

  TrainResult result;
  result.x_mean = Eigen::VectorXd::Zero(m);
  result.x_scale = Eigen::VectorXd::Ones(m);
  Eigen::MatrixXd xs = ds.x;
  if (cfg.standardize) {
    result.x_mean = xs.colwise().mean();
    xs.rowwise() -= result.x_mean.transpose();
    for (int j = 0; j < m; ++j) {
      const double sd = std::sqrt(xs.col(j).squaredNorm() / std::max(1, N - 1));
      if (sd < 1e-12) throw std::invalid_argument("fit: constant data column");
      result.x_scale(j) = sd;
      xs.col(j) /= sd;
    }
  }

  const int K = static_cast<int>(ds.spec.u_values.size());
  ConditionalPrior prior = make_prior(m, ds.spec.n_I, ds.spec.n_D,
                                      ds.spec.n_D > 0 ? K : 0, cfg.learn_noise_scale);
  FlowConfig fc;
  fc.m = m;
  fc.n = n;
  fc.layers = cfg.layers;
  fc.width = cfg.width;
  fc.clamp = cfg.clamp;
  fc.volume_preserving = cfg.volume_preserving;
  fc.seed = derive_seed(cfg.seed, 1);
  FlowModel model(fc);
  FlowModel scratch = model;  // penalty traces read current values from here

  const PackLayout lay = layout_of(model, prior);
  std::vector<double> params = pack_parameters(model, prior);
  Eigen::ArrayXd mask = Eigen::ArrayXd::Ones(static_cast<Eigen::Index>(lay.total()));
  if (!cfg.learn_noise_scale)
    mask.tail(static_cast<Eigen::Index>(lay.noise)).setZero();

  const int B = std::min(cfg.batch_size, N);
  const int n_batches = std::max(1, N / B);
  NllGraph graph = build_nll_graph(model, prior, B);
  Tape pen_tape;

  std::vector<int> order(N);
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle_rng(derive_seed(cfg.seed, 2));

  Eigen::ArrayXd pvec = Eigen::Map<const Eigen::ArrayXd>(params.data(), params.size());
  Eigen::ArrayXd grad(pvec.size());
  std::vector<double> adj;
  AdamState state;
  std::vector<double> flow_now(lay.flow);

  double lr = cfg.learning_rate;
  const auto run_epoch = [&](int epoch, double lambda_eff, const Eigen::MatrixXd* rot) {
    shuffle_rng.shuffle(order);
    double en = 0.0, ep = 0.0;
    for (int b = 0; b < n_batches; ++b) {
      std::copy(pvec.data(), pvec.data() + pvec.size(), params.begin());
      set_batch_leaves(&graph, params, xs, ds.labels, order, b * B);
      graph.tape.recompute();
      LossBreakdown parts;
      parts.nll = graph.tape.value(graph.loss) + graph.constant;
      check_finite(parts.nll, "nll", epoch, parts);
      graph.tape.gradient(graph.loss, &adj);
      for (std::size_t p = 0; p < params.size(); ++p) grad[p] = adj[graph.params.flat[p]];
      if (lambda_eff > 0.0) {
        const int S = std::min(cfg.jac_subsample, B);
        Eigen::MatrixXd xsub(S, m);
        for (int p = 0; p < S; ++p) xsub.row(p) = xs.row(order[b * B + p]);
        std::copy(params.begin(), params.begin() + lay.flow, flow_now.begin());
        scratch.unflatten(flow_now);
        parts.penalty =
            trace_penalty(pen_tape, scratch, xsub, cfg.penalty, lambda_eff, rot, &grad);
        check_finite(parts.penalty, "penalty", epoch, parts);
      }
      grad *= mask;
      if (!grad.isFinite().all()) {
        std::ostringstream oss;
        oss << "training diverged at epoch " << epoch << ": non-finite gradient";
        throw std::runtime_error(oss.str());
      }
      adam_step(&pvec, grad, &state, lr, cfg.beta1, cfg.beta2, cfg.epsilon);
      if (lay.dep > 0) {
        auto seg = pvec.segment(static_cast<Eigen::Index>(lay.flow + lay.dep),
                                static_cast<Eigen::Index>(lay.dep));
        seg = seg.max(prior.logvar_floor);
      }
      if (lay.noise > 0 && cfg.learn_noise_scale) {
        auto seg = pvec.tail(static_cast<Eigen::Index>(lay.noise));
        seg = seg.max(prior.logvar_floor);
      }
      en += parts.nll;
      ep += parts.penalty;
    }
    result.history.nll.push_back(en / n_batches);
    result.history.penalty.push_back(ep / n_batches);
    result.history.loss.push_back((en + ep) / n_batches);
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const int e : cfg.lr_milestones)
      if (e == epoch) lr *= cfg.lr_decay_factor;
    run_epoch(epoch, cfg.penalty.lambda * warmup_factor(cfg, epoch), nullptr);
  }

  // Rotating the independent source block leaves the likelihood unchanged, so
  // descending the penalty over that manifold and fine-tuning in the rotated
  // coordinates is coordinate descent on the same objective.
  Eigen::MatrixXd rotation = Eigen::MatrixXd::Identity(n, n);
  const int n_ind = ds.spec.n_I;
  if (cfg.rotation_polish && cfg.penalty.lambda > 0.0 && n_ind >= 2 && cfg.polish_rounds > 0) {
    const int P = std::min(cfg.polish_points, N);
    const int stride = std::max(1, N / P);
    std::vector<Eigen::MatrixXd> jacs(P);
    for (int round = 0; round <= cfg.polish_rounds; ++round) {
      std::copy(pvec.data(), pvec.data() + pvec.size(), params.begin());
      std::copy(params.begin(), params.begin() + lay.flow, flow_now.begin());
      scratch.unflatten(flow_now);
      for (int p = 0; p < P; ++p) {
        const Eigen::VectorXd zp = scratch.inverse(xs.row(p * stride).transpose());
        jacs[p] = scratch.decoder_jacobian(zp, n).leftCols(n_ind) *
                  rotation.topLeftCorner(n_ind, n_ind);
      }
      rotation.topLeftCorner(n_ind, n_ind) =
          rotation.topLeftCorner(n_ind, n_ind) *
          sparsest_rotation(jacs, cfg.polish_restarts, derive_seed(cfg.seed, 40 + round));
      if (round == cfg.polish_rounds) break;
      for (int e = 0; e < cfg.polish_epochs; ++e)
        run_epoch(cfg.epochs + round * cfg.polish_epochs + e, cfg.penalty.lambda, &rotation);
    }
  }
  result.source_rotation = rotation;

  std::copy(pvec.data(), pvec.data() + pvec.size(), params.begin());
  unpack_parameters(params, &model, &prior);
  result.model = std::move(model);
  result.prior = std::move(prior);

  Eigen::MatrixXd z(N, m);
  for (int i = 0; i < N; ++i) z.row(i) = result.model.inverse(xs.row(i).transpose()).transpose();
  z.leftCols(n) = Eigen::MatrixXd(z.leftCols(n) * rotation);
  result.latent_sd.resize(m);
  for (int j = 0; j < m; ++j) {
    const double mu = z.col(j).mean();
    result.latent_sd(j) =
        std::sqrt((z.col(j).array() - mu).square().sum() / std::max(1, N - 1));
  }
  std::vector<int> idx(m);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](int a, int b) { return result.latent_sd(a) > result.latent_sd(b); });
  result.source_order.assign(idx.begin(), idx.begin() + n);
  return result;
}

Eigen::MatrixXd latents(const TrainResult& result, const Eigen::MatrixXd& x) {
  const int m = result.model.config().m;
  if (x.cols() != m) throw std::invalid_argument("latents: width mismatch");
  Eigen::MatrixXd z(x.rows(), m);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    Eigen::VectorXd row = x.row(i).transpose() - result.x_mean;
    row.array() /= result.x_scale.array();
    z.row(i) = result.model.inverse(row).transpose();
  }
  const Eigen::Index k = result.source_rotation.rows();
  if (k > 0) z.leftCols(k) = Eigen::MatrixXd(z.leftCols(k) * result.source_rotation);
  return z;
}

}  // namespace icalab
