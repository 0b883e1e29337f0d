#pragma once

// Action representation learning.
//
// Observations are encoded one by one (coarse encoder), linked into a
// thresholded-correlation graph, refined by two graph-convolution layers,
// and pooled per action into a diagonal Gaussian. Training combines a
// hierarchical VAE reconstruction bound with an observation classifier and a
// graph contrastive term.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "aglo/checkpoint.hpp"
#include "aglo/common.hpp"
#include "aglo/envsim.hpp"
#include "aglo/nn.hpp"
#include "aglo/tape.hpp"

namespace aglo::repr {

using ad::Mat;
using ad::ParamStore;
using ad::Tape;
using ad::Var;

enum class ModelKind { aglo, hvae, vae };

inline std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::aglo: return "aglo";
    case ModelKind::hvae: return "hvae";
    case ModelKind::vae: return "vae";
  }
  return "aglo";
}

inline ModelKind model_kind_from_string(const std::string& s) {
  if (s == "aglo") return ModelKind::aglo;
  if (s == "hvae") return ModelKind::hvae;
  if (s == "vae") return ModelKind::vae;
  fail(ErrorKind::invalid_argument, "unknown model '" + s + "' (expected aglo, hvae or vae)");
}

struct ReprConfig {
  int embed_dim = 128;
  int coarse_width = 128;
  int classifier_hidden = 128;
  int latent_dim = 16;
  int hvae_hidden = 128;
  int prior_hidden = 64;
  double epsilon = 0.95;
  double kappa = 0.5;
  int num_negatives = 5;
  double lambda_ce = 1e-3;
  double lambda_cont = 1e-1;
  int epochs = 500;
  int batch_actions = 32;
  double lr = 1e-3;
  int mc_samples = 1;
  bool exclude_same_action_negatives = false;
  double variance_floor = 1e-6;
  ModelKind model = ModelKind::aglo;
  bool use_ce = true;
  bool use_cont = true;

  bool uses_graph() const { return model == ModelKind::aglo; }
  bool ce_active() const { return model == ModelKind::aglo && use_ce && lambda_ce > 0.0; }
  bool cont_active() const { return model == ModelKind::aglo && use_cont && lambda_cont > 0.0; }
};

/// Added to centered squared norms when correlating refined rows, so an
/// all-zero ReLU output yields similarity 0 instead of 0/0.
inline constexpr double kRefinedPearsonStabilizer = 1e-10;

inline constexpr double kProbabilityFloor = 1e-12;

// ---------------------------------------------------------------------------
// Model

struct ReprModel {
  ReprConfig config;
  int horizon = 20;
  int num_classes = 2;
  ParamStore params;

  nn::Mlp coarse_state;    // per-state map, 4 -> w -> w
  nn::Dense coarse_proj;   // w -> d after temporal mean
  nn::Dense gcn1, gcn2;    // d -> d, d -> d
  nn::Mlp classifier;      // d -> hidden -> classes
  nn::Dense pool_mean, pool_var;
  nn::Mlp encoder;         // [o, c] -> hidden -> 2*latent
  nn::Mlp prior;           // c -> hidden -> 2*latent
  nn::Mlp decoder;         // [z, c] -> hidden -> H*4

  ReprModel() = default;

  ReprModel(const ReprConfig& cfg, int num_classes_, int horizon_, std::uint64_t seed)
      : config(cfg), horizon(horizon_), num_classes(num_classes_) {
    require(num_classes >= 1 && horizon >= 1, ErrorKind::invalid_argument, "bad model shape");
    Rng rng = make_rng(seed, 0xae9);
    const Eigen::Index d = cfg.embed_dim, w = cfg.coarse_width;
    const Eigen::Index obs_flat = static_cast<Eigen::Index>(horizon) * static_cast<Eigen::Index>(env::kStateDim);
    coarse_state = nn::add_mlp(params, "coarse.state", {static_cast<Eigen::Index>(env::kStateDim), w, w}, rng,
                               nn::Activation::tanh, nn::Activation::tanh);
    coarse_proj = nn::add_dense(params, "coarse.proj", w, d, rng);
    gcn1 = nn::add_dense(params, "gcn.0", d, d, rng);
    gcn2 = nn::add_dense(params, "gcn.1", d, d, rng);
    classifier = nn::add_mlp(params, "classifier", {d, cfg.classifier_hidden, num_classes}, rng, nn::Activation::relu,
                             nn::Activation::none);
    pool_mean = nn::add_dense(params, "pool.mean", d, d, rng);
    pool_var = nn::add_dense(params, "pool.var", d, d, rng);
    const Eigen::Index z = cfg.latent_dim;
    if (cfg.model == ModelKind::vae) {
      decoder = nn::add_mlp(params, "decoder", {d, cfg.hvae_hidden, obs_flat}, rng, nn::Activation::tanh,
                            nn::Activation::none);
    } else {
      encoder = nn::add_mlp(params, "encoder", {obs_flat + d, cfg.hvae_hidden, 2 * z}, rng, nn::Activation::tanh,
                            nn::Activation::none);
      prior = nn::add_mlp(params, "prior", {d, cfg.prior_hidden, 2 * z}, rng, nn::Activation::tanh,
                          nn::Activation::none);
      decoder = nn::add_mlp(params, "decoder", {z + d, cfg.hvae_hidden, obs_flat}, rng, nn::Activation::tanh,
                            nn::Activation::none);
    }
  }
};

// ---------------------------------------------------------------------------
// Coarse encoder

/// Encodes N observations stacked as (N*H x 4) rows into (N x d): per-state
/// two-layer map, temporal mean over each block of H rows, linear projection.
inline Var encode_coarse(Tape& tape, ReprModel& m, Var stacked_states) {
  require(stacked_states.cols() == static_cast<Eigen::Index>(env::kStateDim) &&
              stacked_states.rows() % m.horizon == 0,
          ErrorKind::invalid_argument, "observations must be stacked (N*H x 4)");
  Var h = nn::apply(tape, m.params, m.coarse_state, stacked_states);
  Var pooled = ad::segment_mean(h, m.horizon);
  return nn::apply(tape, m.params, m.coarse_proj, pooled);
}

/// Coarse embedding of a single (H x 4) observation.
inline Eigen::VectorXd encode_coarse(ReprModel& m, const Mat& observation) {
  require(observation.rows() == m.horizon && observation.cols() == static_cast<Eigen::Index>(env::kStateDim),
          ErrorKind::invalid_argument,
          "observation shape (" + std::to_string(observation.rows()) + " x " + std::to_string(observation.cols()) +
              ") does not match (" + std::to_string(m.horizon) + " x 4)");
  Tape tape;
  Var c = encode_coarse(tape, m, tape.constant(observation));
  return c.value().row(0).transpose();
}

// ---------------------------------------------------------------------------
// Observation graph

inline double pearson(const Eigen::Ref<const ad::RowVec>& a, const Eigen::Ref<const ad::RowVec>& b) {
  const ad::RowVec ac = a.array() - a.mean();
  const ad::RowVec bc = b.array() - b.mean();
  return ac.dot(bc) / std::sqrt(ac.squaredNorm() * bc.squaredNorm());
}

struct ObservationGraph {
  Mat adjacency;              // |V| x |V|, symmetric, zero diagonal
  Mat similarity;             // full Pearson matrix of the node features
  Mat labels_onehot;          // |V| x K
  std::vector<int> labels;    // class of each node
  std::vector<int> action_of; // batch position of each node's action
  double epsilon = 0.95;

  Eigen::Index num_nodes() const { return adjacency.rows(); }

  std::vector<int> neighbors(int u) const {
    std::vector<int> out;
    for (Eigen::Index v = 0; v < adjacency.cols(); ++v)
      if (adjacency(u, v) > 0.0) out.push_back(static_cast<int>(v));
    return out;
  }
};

/// Thresholded Pearson graph over node features. `action_of` defaults to the
/// labels when omitted.
inline ObservationGraph build_graph(const Mat& features, const std::vector<int>& labels, int num_classes,
                                   double epsilon, std::vector<int> action_of = {}) {
  const Eigen::Index n = features.rows();
  require(n >= 1, ErrorKind::invalid_argument, "graph needs at least one node");
  require(static_cast<Eigen::Index>(labels.size()) == n, ErrorKind::invalid_argument, "one label per node required");
  for (Eigen::Index u = 0; u < n; ++u) {
    const double mean = features.row(u).mean();
    if ((features.row(u).array() - mean).square().sum() <= 0.0)
      fail(ErrorKind::degenerate_feature, "node " + std::to_string(u) + " has a constant feature vector");
  }
  ObservationGraph g;
  g.epsilon = epsilon;
  g.labels = labels;
  g.action_of = action_of.empty() ? labels : std::move(action_of);
  g.adjacency = Mat::Zero(n, n);
  g.similarity = Mat::Identity(n, n);
  Mat centered = features.colwise() - features.rowwise().mean();
  Eigen::VectorXd norms = centered.rowwise().norm();
  for (Eigen::Index u = 0; u < n; ++u) {
    for (Eigen::Index v = u + 1; v < n; ++v) {
      const double s = centered.row(u).dot(centered.row(v)) / (norms(u) * norms(v));
      g.similarity(u, v) = g.similarity(v, u) = s;
      if (s > epsilon) g.adjacency(u, v) = g.adjacency(v, u) = std::min(s, 1.0);
    }
  }
  g.labels_onehot = Mat::Zero(n, num_classes);
  for (Eigen::Index u = 0; u < n; ++u) {
    require(labels[static_cast<std::size_t>(u)] >= 0 && labels[static_cast<std::size_t>(u)] < num_classes,
            ErrorKind::invalid_argument, "label out of range");
    g.labels_onehot(u, labels[static_cast<std::size_t>(u)]) = 1.0;
  }
  return g;
}

/// D^-1/2 (A + I) D^-1/2.
inline Mat normalized_adjacency(const ObservationGraph& g) {
  Mat a = g.adjacency + Mat::Identity(g.num_nodes(), g.num_nodes());
  const Eigen::VectorXd inv_sqrt = a.rowwise().sum().array().rsqrt();
  return inv_sqrt.asDiagonal() * a * inv_sqrt.asDiagonal();
}

// ---------------------------------------------------------------------------
// Refined encoder and classifier

/// Two graph-convolution layers, each followed by ReLU. The graph is a
/// constant of the computation (no gradient flows into the adjacency).
inline Var refine(Tape& tape, ReprModel& m, Var coarse, const ObservationGraph& g) {
  require(coarse.rows() == g.num_nodes(), ErrorKind::invalid_argument, "graph/feature row mismatch");
  Var a_hat = tape.constant(normalized_adjacency(g));
  Var h = ad::relu(nn::apply(tape, m.params, m.gcn1, ad::matmul(a_hat, coarse)));
  return ad::relu(nn::apply(tape, m.params, m.gcn2, ad::matmul(a_hat, h)));
}

/// Classifier logits: ReLU hidden layer, linear output; consumers apply softmax.
inline Var classifier_logits(Tape& tape, ReprModel& m, Var refined) {
  return nn::apply(tape, m.params, m.classifier, refined);
}

inline Mat softmax_rows(const Mat& logits) {
  Mat p(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double mx = logits.row(r).maxCoeff();
    p.row(r) = (logits.row(r).array() - mx).exp();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

inline Mat classify_observations(ReprModel& m, const Mat& refined) {
  Tape tape;
  return softmax_rows(classifier_logits(tape, m, tape.constant(refined)).value());
}

/// Mean cross-entropy of probability rows against labels. Probabilities below
/// 1e-12 are floored; `floored` (if given) receives the number of such rows.
inline double ce_loss(const Mat& probs, const std::vector<int>& labels, int* floored = nullptr) {
  require(static_cast<Eigen::Index>(labels.size()) == probs.rows() && probs.rows() > 0, ErrorKind::invalid_argument,
          "one label per row required");
  double total = 0.0;
  int clamped = 0;
  for (Eigen::Index u = 0; u < probs.rows(); ++u) {
    double p = probs(u, labels[static_cast<std::size_t>(u)]);
    if (p < kProbabilityFloor) {
      p = kProbabilityFloor;
      ++clamped;
    }
    total -= std::log(p);
  }
  if (floored) *floored = clamped;
  return total / static_cast<double>(probs.rows());
}

/// Differentiable cross-entropy from logits; entries whose log-probability
/// falls below log(1e-12) are floored (and carry no gradient).
inline Var ce_loss(Var logits, const std::vector<int>& labels) {
  Tape& tape = *logits.tape;
  Var logp = ad::log_softmax_rows(logits);
  std::vector<std::pair<int, int>> at;
  for (std::size_t u = 0; u < labels.size(); ++u) at.emplace_back(static_cast<int>(u), labels[u]);
  Var picked = ad::pick(logp, at);
  Var floored = ad::clip(picked, std::log(kProbabilityFloor), 0.0);
  (void)tape;
  return ad::scale(ad::sum(floored), -1.0 / static_cast<double>(labels.size()));
}

// ---------------------------------------------------------------------------
// Contrastive objective

/// Per-node InfoNCE terms from a (|V| x (1 + K')) similarity matrix whose
/// first column holds the positive: sum_u [logsumexp(S_u / kappa) - S_u0 / kappa].
inline Var contrastive_from_similarities(Var sims, double kappa) {
  Var scaled = ad::scale(sims, 1.0 / kappa);
  Var lse = ad::row_logsumexp(scaled);
  return ad::sum(ad::sub(lse, ad::slice_cols(scaled, 0, 1)));
}

struct ContrastiveSample {
  std::vector<int> positive;               // per node
  std::vector<std::vector<int>> negatives; // per node, K' each
};

/// Positives from each node's neighborhood (fallback: the most similar node
/// of the same action); K' negatives without replacement from the nodes not
/// connected to u (u itself excluded).
inline ContrastiveSample sample_contrastive(const ObservationGraph& g, int num_negatives, std::uint64_t seed,
                                            bool exclude_same_action = false) {
  require(num_negatives >= 1, ErrorKind::invalid_argument, "num_negatives must be >= 1");
  Rng rng = make_rng(seed, 0xc0);
  const int n = static_cast<int>(g.num_nodes());
  ContrastiveSample s;
  s.positive.resize(static_cast<std::size_t>(n));
  s.negatives.resize(static_cast<std::size_t>(n));
  for (int u = 0; u < n; ++u) {
    const std::vector<int> nb = g.neighbors(u);
    if (!nb.empty()) {
      s.positive[static_cast<std::size_t>(u)] = nb[uniform_index(rng, nb.size())];
    } else {
      int best = -1;
      double best_sim = -2.0;
      for (int v = 0; v < n; ++v) {
        if (v == u || g.action_of[static_cast<std::size_t>(v)] != g.action_of[static_cast<std::size_t>(u)]) continue;
        if (g.similarity(u, v) > best_sim) {
          best_sim = g.similarity(u, v);
          best = v;
        }
      }
      if (best < 0) fail(ErrorKind::sampling_error, "node " + std::to_string(u) + " has no neighbor and no same-action fallback");
      s.positive[static_cast<std::size_t>(u)] = best;
    }
    std::vector<int> pool;
    for (int v = 0; v < n; ++v) {
      if (v == u || g.adjacency(u, v) > 0.0) continue;
      if (exclude_same_action && g.action_of[static_cast<std::size_t>(v)] == g.action_of[static_cast<std::size_t>(u)])
        continue;
      pool.push_back(v);
    }
    if (static_cast<int>(pool.size()) < num_negatives)
      fail(ErrorKind::sampling_error, "node " + std::to_string(u) + " has " + std::to_string(pool.size()) +
                                          " non-neighbors, fewer than K'=" + std::to_string(num_negatives));
    for (int k = 0; k < num_negatives; ++k) {
      const std::size_t j = static_cast<std::size_t>(k) + uniform_index(rng, pool.size() - static_cast<std::size_t>(k));
      std::swap(pool[static_cast<std::size_t>(k)], pool[j]);
    }
    s.negatives[static_cast<std::size_t>(u)].assign(pool.begin(), pool.begin() + num_negatives);
  }
  return s;
}

inline Var contrastive_loss(Var refined, const ContrastiveSample& sample, double kappa) {
  const int n = static_cast<int>(sample.positive.size());
  const int k = static_cast<int>(sample.negatives.empty() ? 0 : sample.negatives[0].size());
  std::vector<std::pair<int, int>> pairs;
  pairs.reserve(static_cast<std::size_t>(n * (k + 1)));
  for (int u = 0; u < n; ++u) {
    pairs.emplace_back(u, sample.positive[static_cast<std::size_t>(u)]);
    for (int v : sample.negatives[static_cast<std::size_t>(u)]) pairs.emplace_back(u, v);
  }
  Var sims = ad::pearson_pairs(refined, std::move(pairs), kRefinedPearsonStabilizer);
  return contrastive_from_similarities(ad::reshape(sims, n, k + 1), kappa);
}

inline Var contrastive_loss(Var refined, const ObservationGraph& g, double kappa, int num_negatives,
                            std::uint64_t sampling_seed, bool exclude_same_action = false) {
  return contrastive_loss(refined, sample_contrastive(g, num_negatives, sampling_seed, exclude_same_action), kappa);
}

// ---------------------------------------------------------------------------
// Pooling and the hierarchical VAE bound

struct ActionEmbeddingDist {
  Eigen::VectorXd mean;
  Eigen::VectorXd variance;

  friend bool operator==(const ActionEmbeddingDist&, const ActionEmbeddingDist&) = default;
};

struct PooledVars {
  Var mean;      // K x d
  Var variance;  // K x d
};

inline Var positive_variance(Var raw, double floor) { return ad::add_scalar(ad::softplus(raw), floor); }

/// Mean-pools each consecutive block of `group` rows, then applies the mean
/// and variance heads.
inline PooledVars pool_actions(Tape& tape, ReprModel& m, Var rows, Eigen::Index group) {
  Var pooled = ad::segment_mean(rows, group);
  return PooledVars{nn::apply(tape, m.params, m.pool_mean, pooled),
                    positive_variance(nn::apply(tape, m.params, m.pool_var, pooled), m.config.variance_floor)};
}

inline ActionEmbeddingDist pool_action(ReprModel& m, const Mat& refined_rows) {
  require(refined_rows.rows() >= 1, ErrorKind::invalid_argument, "pooling needs at least one row");
  Tape tape;
  PooledVars p = pool_actions(tape, m, tape.constant(refined_rows), refined_rows.rows());
  return {p.mean.value().row(0).transpose(), p.variance.value().row(0).transpose()};
}

/// KL(N(mu_q, var_q) || N(mu_p, var_p)) summed over all entries.
inline Var gaussian_kl(Var mu_q, Var var_q, Var mu_p, Var var_p) {
  // 0.5 * [log var_p - log var_q + (var_q + (mu_q - mu_p)^2) / var_p - 1]
  Var diff = ad::sub(mu_q, mu_p);
  Var ratio = ad::div(ad::add(var_q, ad::square(diff)), var_p);
  Var logs = ad::sub(ad::log(var_p), ad::log(var_q));
  return ad::scale(ad::sum(ad::add_scalar(ad::add(logs, ratio), -1.0)), 0.5);
}

/// KL against the standard normal, summed.
inline Var standard_normal_kl(Var mu, Var var) {
  Var terms = ad::sub(ad::add(ad::square(mu), var), ad::log(var));
  return ad::scale(ad::sum(ad::add_scalar(terms, -1.0)), 0.5);
}

inline double gaussian_kl(double mu_q, double var_q, double mu_p, double var_p) {
  return 0.5 * (std::log(var_p) - std::log(var_q) + (var_q + (mu_q - mu_p) * (mu_q - mu_p)) / var_p - 1.0);
}

inline Mat gaussian_noise(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  Mat e(rows, cols);
  for (Eigen::Index i = 0; i < e.size(); ++i) e.data()[i] = standard_normal(rng);
  return e;
}

struct ElboTerms {
  Var negative_elbo;
  double log_likelihood = 0.0;
  double kl_latent = 0.0;
  double kl_action = 0.0;
};

/// Negative ELBO of a batch whose node rows are grouped by action (`group`
/// observations each). One reparameterized sample of c per action and of z
/// per observation; unit-variance Gaussian decoder; standard-normal p(c).
inline ElboTerms hvae_elbo(Tape& tape, ReprModel& m, Var flat_obs, const PooledVars& pooled, Eigen::Index group,
                           std::uint64_t mc_seed) {
  Rng rng = make_rng(mc_seed, 0xe1b0);
  const Eigen::Index k = pooled.mean.rows();
  const Eigen::Index d = pooled.mean.cols();
  const Eigen::Index dim = flat_obs.cols();
  require(flat_obs.rows() == k * group, ErrorKind::invalid_argument, "observation rows must be grouped by action");
  const double log_2pi = std::log(2.0 * M_PI);

  Var c_hat = ad::add(pooled.mean, ad::mul(ad::sqrt(pooled.variance), tape.constant(gaussian_noise(rng, k, d))));
  std::vector<int> owner(static_cast<std::size_t>(k * group));
  for (Eigen::Index i = 0; i < k * group; ++i) owner[static_cast<std::size_t>(i)] = static_cast<int>(i / group);
  Var c_node = ad::gather_rows(c_hat, owner);

  const Eigen::Index zd = m.config.latent_dim;
  Var q = nn::apply(tape, m.params, m.encoder, ad::concat_cols(flat_obs, c_node));
  Var q_mean = ad::slice_cols(q, 0, zd);
  Var q_var = positive_variance(ad::slice_cols(q, zd, zd), m.config.variance_floor);
  Var p = nn::apply(tape, m.params, m.prior, c_node);
  Var p_mean = ad::slice_cols(p, 0, zd);
  Var p_var = positive_variance(ad::slice_cols(p, zd, zd), m.config.variance_floor);
  Var z = ad::add(q_mean, ad::mul(ad::sqrt(q_var), tape.constant(gaussian_noise(rng, k * group, zd))));
  Var recon = nn::apply(tape, m.params, m.decoder, ad::concat_cols(z, c_node));

  Var sq = ad::sum(ad::square(ad::sub(flat_obs, recon)));
  Var loglik = ad::add_scalar(ad::scale(sq, -0.5), -0.5 * static_cast<double>(k * group * dim) * log_2pi);
  Var kl_z = gaussian_kl(q_mean, q_var, p_mean, p_var);
  Var kl_c = standard_normal_kl(pooled.mean, pooled.variance);
  ElboTerms t{ad::add(ad::sub(kl_z, loglik), kl_c), loglik.scalar(), kl_z.scalar(), kl_c.scalar()};
  if (!std::isfinite(t.negative_elbo.scalar()))
    fail(ErrorKind::numeric_error, "non-finite ELBO: loglik=" + std::to_string(t.log_likelihood) +
                                       " kl_latent=" + std::to_string(t.kl_latent) +
                                       " kl_action=" + std::to_string(t.kl_action));
  return t;
}

/// Non-hierarchical baseline: each observation gets its own Gaussian code
/// from its coarse embedding and is reconstructed from one sample of it.
inline ElboTerms vae_elbo(Tape& tape, ReprModel& m, Var flat_obs, const PooledVars& per_obs, std::uint64_t mc_seed) {
  Rng rng = make_rng(mc_seed, 0xe1b0);
  const Eigen::Index n = per_obs.mean.rows(), d = per_obs.mean.cols();
  Var c = ad::add(per_obs.mean, ad::mul(ad::sqrt(per_obs.variance), tape.constant(gaussian_noise(rng, n, d))));
  Var recon = nn::apply(tape, m.params, m.decoder, c);
  Var sq = ad::sum(ad::square(ad::sub(flat_obs, recon)));
  Var loglik =
      ad::add_scalar(ad::scale(sq, -0.5), -0.5 * static_cast<double>(n * flat_obs.cols()) * std::log(2.0 * M_PI));
  Var kl_c = standard_normal_kl(per_obs.mean, per_obs.variance);
  ElboTerms t{ad::sub(kl_c, loglik), loglik.scalar(), 0.0, kl_c.scalar()};
  if (!std::isfinite(t.negative_elbo.scalar()))
    fail(ErrorKind::numeric_error, "non-finite ELBO: loglik=" + std::to_string(t.log_likelihood) +
                                       " kl_action=" + std::to_string(t.kl_action));
  return t;
}

// ---------------------------------------------------------------------------
// Batches and the overall objective

/// K actions x n observations, node rows grouped by action.
struct ReprBatch {
  Mat stacked;               // (K*n*H) x 4
  Mat flat;                  // (K*n) x (H*4)
  std::vector<int> labels;   // class per node
  std::vector<int> action_of;
  std::vector<int> action_ids;
  int per_action = 0;

  int num_actions() const { return static_cast<int>(action_ids.size()); }
  int num_nodes() const { return static_cast<int>(labels.size()); }
};

/// Builds a batch from dataset positions; `class_of` maps a position to its
/// classifier label (identity when empty).
inline ReprBatch make_batch(const env::ObservationDataset& ds, const std::vector<int>& positions,
                            const std::vector<int>& class_of = {}) {
  const int n = static_cast<int>(ds.manifest.n_obs);
  const int h = static_cast<int>(ds.manifest.horizon);
  const int sd = static_cast<int>(ds.manifest.state_dim);
  ReprBatch b;
  b.per_action = n;
  const Eigen::Index nodes = static_cast<Eigen::Index>(positions.size()) * n;
  b.stacked.resize(nodes * h, sd);
  b.flat.resize(nodes, static_cast<Eigen::Index>(h) * sd);
  Eigen::Index node = 0;
  for (std::size_t a = 0; a < positions.size(); ++a) {
    const int pos = positions[a];
    b.action_ids.push_back(ds.manifest.action_ids.at(static_cast<std::size_t>(pos)));
    for (int j = 0; j < n; ++j, ++node) {
      Mat o = ds.observation(static_cast<std::size_t>(pos), static_cast<std::size_t>(j));
      b.stacked.middleRows(node * h, h) = o;
      b.flat.row(node) = Eigen::Map<const ad::RowVec>(o.data(), o.size());
      b.labels.push_back(class_of.empty() ? pos : class_of.at(static_cast<std::size_t>(pos)));
      b.action_of.push_back(static_cast<int>(a));
    }
  }
  return b;
}

struct LossWeights {
  double ce = 1e-3;
  double cont = 1e-1;
};

struct LossBreakdown {
  double total = 0.0;
  double reconst = 0.0;
  double ce = 0.0;
  double cont = 0.0;
};

struct ForwardPass {
  Var total;
  LossBreakdown breakdown;
  std::optional<ObservationGraph> graph;
  PooledVars pooled;
  Var refined;
  Var logits;
  bool has_logits = false;
};

struct LossSeeds {
  std::uint64_t sampling = 0;
  std::uint64_t mc = 0;
};

/// L = L_reconst + w_ce * L_ce + w_cont * L_cont over one batch. The graph is
/// built from the (detached) coarse features unless `fixed_graph` is given.
inline ForwardPass total_loss(Tape& tape, ReprModel& m, const ReprBatch& batch, LossWeights weights, LossSeeds seeds,
                              const ObservationGraph* fixed_graph = nullptr) {
  require(weights.ce >= 0.0 && weights.cont >= 0.0, ErrorKind::invalid_argument, "loss weights must be non-negative");
  const ReprConfig& cfg = m.config;
  ForwardPass fp;
  Var coarse = encode_coarse(tape, m, tape.constant(batch.stacked));
  Var flat = tape.constant(batch.flat);
  ElboTerms elbo;
  if (cfg.model == ModelKind::vae) {
    PooledVars per_obs{nn::apply(tape, m.params, m.pool_mean, coarse),
                       positive_variance(nn::apply(tape, m.params, m.pool_var, coarse), cfg.variance_floor)};
    elbo = vae_elbo(tape, m, flat, per_obs, seeds.mc);
    fp.pooled = PooledVars{ad::segment_mean(per_obs.mean, batch.per_action),
                           ad::segment_mean(per_obs.variance, batch.per_action)};
    fp.refined = coarse;
  } else {
    if (cfg.uses_graph()) {
      fp.graph = fixed_graph ? *fixed_graph
                             : build_graph(coarse.value(), batch.labels, m.num_classes, cfg.epsilon, batch.action_of);
      fp.refined = refine(tape, m, coarse, *fp.graph);
    } else {
      fp.refined = coarse;
    }
    fp.pooled = pool_actions(tape, m, fp.refined, batch.per_action);
    elbo = hvae_elbo(tape, m, flat, fp.pooled, batch.per_action, seeds.mc);
  }
  Var total = elbo.negative_elbo;
  fp.breakdown.reconst = elbo.negative_elbo.scalar();
  if (cfg.uses_graph() && weights.ce > 0.0) {
    fp.logits = classifier_logits(tape, m, fp.refined);
    fp.has_logits = true;
    Var ce = ce_loss(fp.logits, batch.labels);
    fp.breakdown.ce = ce.scalar();
    total = ad::add(total, ad::scale(ce, weights.ce));
  }
  if (cfg.uses_graph() && weights.cont > 0.0) {
    Var cont = contrastive_loss(fp.refined, *fp.graph, cfg.kappa, cfg.num_negatives, seeds.sampling,
                                cfg.exclude_same_action_negatives);
    fp.breakdown.cont = cont.scalar();
    total = ad::add(total, ad::scale(cont, weights.cont));
  }
  fp.total = total;
  fp.breakdown.total = total.scalar();
  return fp;
}

inline LossWeights active_weights(const ReprConfig& cfg) {
  return LossWeights{cfg.ce_active() ? cfg.lambda_ce : 0.0, cfg.cont_active() ? cfg.lambda_cont : 0.0};
}

// ---------------------------------------------------------------------------
// Training

struct LossRow {
  int epoch = 0;
  LossBreakdown loss;
};

struct ReprTrainOptions {
  std::uint64_t seed = 0;
  std::optional<std::filesystem::path> checkpoint_path;
  int checkpoint_every = 0;  // epochs; 0 writes only the final checkpoint
  nlohmann::json config_echo = nlohmann::json::object();
  std::function<void(const LossRow&)> on_epoch;
};

struct ReprTrainResult {
  ReprModel model;
  nn::AdamOptimizer optimizer;
  std::vector<LossRow> history;
  std::vector<int> trained_action_ids;
};

inline Checkpoint make_repr_checkpoint(const ReprModel& m, const nn::AdamOptimizer* opt, std::uint64_t seed,
                                       const nlohmann::json& config_echo) {
  Checkpoint c;
  c.kind = "repr";
  c.config = config_echo;
  c.config["model_shape"] = {{"num_classes", m.num_classes}, {"horizon", m.horizon}};
  c.seed = seed;
  c.put_params("param/", m.params);
  if (opt) c.put_optimizer("opt/", *opt);
  return c;
}

inline std::string csv_header() { return "epoch,total,reconst,ce,cont\n"; }

inline std::string loss_history_csv(const std::vector<LossRow>& rows) {
  std::string out = csv_header();
  char buf[256];
  for (const LossRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g\n", r.epoch, r.loss.total, r.loss.reconst, r.loss.ce,
                  r.loss.cont);
    out += buf;
  }
  return out;
}

/// Minimizes the overall loss with RAdam over shuffled batches of
/// `batch_actions` actions; one class per training action.
inline ReprTrainResult train_repr(const env::ObservationDataset& ds, const ReprConfig& cfg,
                                  const ReprTrainOptions& opts) {
  const int num = static_cast<int>(ds.num_actions());
  require(num >= 2, ErrorKind::invalid_argument, "representation training needs at least 2 actions");
  require(cfg.epochs >= 0 && cfg.batch_actions >= 1, ErrorKind::invalid_argument, "epochs/batch must be positive");
  ReprTrainResult res;
  res.model = ReprModel(cfg, num, static_cast<int>(ds.manifest.horizon), opts.seed);
  res.optimizer = nn::AdamOptimizer(res.model.params, {cfg.lr, 0.9, 0.999, 1e-8, true, false});
  res.trained_action_ids = ds.manifest.action_ids;
  const LossWeights weights = active_weights(cfg);
  Rng order_rng = make_rng(opts.seed, 0x0bde);
  std::vector<int> positions(static_cast<std::size_t>(num));
  std::iota(positions.begin(), positions.end(), 0);

  auto save = [&]() -> std::string {
    if (!opts.checkpoint_path) return "<none>";
    make_repr_checkpoint(res.model, &res.optimizer, opts.seed, opts.config_echo).save(*opts.checkpoint_path);
    return opts.checkpoint_path->string();
  };
  std::string last_good = "<none>";
  std::uint64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(positions.begin(), positions.end(), order_rng);
    LossRow row;
    row.epoch = epoch;
    int batches = 0;
    for (std::size_t start = 0; start < positions.size(); start += static_cast<std::size_t>(cfg.batch_actions)) {
      const std::size_t end = std::min(positions.size(), start + static_cast<std::size_t>(cfg.batch_actions));
      std::vector<int> chunk(positions.begin() + static_cast<long>(start), positions.begin() + static_cast<long>(end));
      std::sort(chunk.begin(), chunk.end());
      const ReprBatch batch = make_batch(ds, chunk);
      Tape tape;
      res.model.params.zero_grad();
      ForwardPass fp;
      try {
        fp = total_loss(tape, res.model, batch, weights,
                        LossSeeds{derive_seed(opts.seed, 0x5a00000 + step), derive_seed(opts.seed, 0x3c00000 + step)});
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::numeric_error) throw;
        const std::string msg = e.what();
        fail(ErrorKind::numeric_error, msg.substr(msg.find(": ") + 2) + " at epoch " + std::to_string(epoch) +
                                           "; last good checkpoint: " + last_good);
      }
      if (!std::isfinite(fp.breakdown.total))
        fail(ErrorKind::numeric_error,
             "non-finite loss at epoch " + std::to_string(epoch) + "; last good checkpoint: " + last_good);
      tape.backward(fp.total);
      res.optimizer.step(res.model.params);
      row.loss.total += fp.breakdown.total;
      row.loss.reconst += fp.breakdown.reconst;
      row.loss.ce += fp.breakdown.ce;
      row.loss.cont += fp.breakdown.cont;
      ++batches;
      ++step;
    }
    const double inv = 1.0 / std::max(batches, 1);
    row.loss.total *= inv;
    row.loss.reconst *= inv;
    row.loss.ce *= inv;
    row.loss.cont *= inv;
    res.history.push_back(row);
    if (opts.on_epoch) opts.on_epoch(row);
    if (opts.checkpoint_every > 0 && (epoch + 1) % opts.checkpoint_every == 0) last_good = save();
  }
  save();
  return res;
}

// ---------------------------------------------------------------------------
// Inference

struct InferenceResult {
  std::map<int, ActionEmbeddingDist> embeddings;
  Mat refined;
  std::vector<int> action_of;
};

/// Pure forward pass over every action of `ds` as one batch:
/// coarse -> graph -> refine -> pool. No parameter is touched.
inline InferenceResult infer_embeddings(const ReprModel& model, const env::ObservationDataset& ds) {
  require(static_cast<int>(ds.manifest.horizon) == model.horizon, ErrorKind::config_mismatch,
          "dataset horizon " + std::to_string(ds.manifest.horizon) + " differs from trained horizon " +
              std::to_string(model.horizon));
  require(ds.manifest.state_dim == env::kStateDim, ErrorKind::config_mismatch, "dataset state_dim differs from 4");
  require(ds.num_actions() >= 1, ErrorKind::invalid_argument, "nothing to infer");
  ReprModel& m = const_cast<ReprModel&>(model);  // forward passes only read parameters
  std::vector<int> positions(ds.num_actions());
  std::iota(positions.begin(), positions.end(), 0);
  const ReprBatch batch = make_batch(ds, positions, std::vector<int>(ds.num_actions(), 0));
  Tape tape;
  Var coarse = encode_coarse(tape, m, tape.constant(batch.stacked));
  PooledVars pooled;
  InferenceResult out;
  if (m.config.model == ModelKind::vae) {
    Var mu = nn::apply(tape, m.params, m.pool_mean, coarse);
    Var var = positive_variance(nn::apply(tape, m.params, m.pool_var, coarse), m.config.variance_floor);
    pooled = PooledVars{ad::segment_mean(mu, batch.per_action), ad::segment_mean(var, batch.per_action)};
    out.refined = coarse.value();
  } else {
    Var refined = coarse;
    if (m.config.uses_graph()) {
      const ObservationGraph g = build_graph(coarse.value(), batch.action_of, batch.num_actions(), m.config.epsilon);
      refined = refine(tape, m, coarse, g);
    }
    pooled = pool_actions(tape, m, refined, batch.per_action);
    out.refined = refined.value();
  }
  out.action_of = batch.action_of;
  for (int a = 0; a < batch.num_actions(); ++a)
    out.embeddings[batch.action_ids[static_cast<std::size_t>(a)]] =
        ActionEmbeddingDist{pooled.mean.value().row(a).transpose(), pooled.variance.value().row(a).transpose()};
  return out;
}

/// Fraction of observations whose classifier argmax matches their class.
/// `ds` holds observations of training actions; classes follow `class_ids`
/// (the training action list).
inline double classifier_accuracy(const ReprModel& model, const env::ObservationDataset& ds,
                                  const std::vector<int>& class_ids) {
  const InferenceResult inf = infer_embeddings(model, ds);
  const Mat probs = classify_observations(const_cast<ReprModel&>(model), inf.refined);
  int correct = 0;
  for (Eigen::Index u = 0; u < probs.rows(); ++u) {
    const int id = ds.manifest.action_ids[static_cast<std::size_t>(inf.action_of[static_cast<std::size_t>(u)])];
    const auto it = std::find(class_ids.begin(), class_ids.end(), id);
    require(it != class_ids.end(), ErrorKind::invalid_argument, "action " + std::to_string(id) + " has no class");
    Eigen::Index best = 0;
    probs.row(u).maxCoeff(&best);
    if (best == it - class_ids.begin()) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(probs.rows());
}

inline ReprModel load_repr_model(const Checkpoint& c, const ReprConfig& cfg) {
  require(c.kind == "repr", ErrorKind::format_error, "checkpoint kind is '" + c.kind + "', expected 'repr'");
  const auto& shape = c.config.at("model_shape");
  ReprModel m(cfg, shape.at("num_classes").get<int>(), shape.at("horizon").get<int>(), c.seed);
  c.get_params("param/", m.params);
  return m;
}

}  // namespace aglo::repr
