#pragma once

// Policy learning over action embeddings. Each action in an episode gets two
// representations, a sample of its own embedding and a synthetic one mixed
// with a random partner; the policy scores both with a shared utility network
// and sums their exponentiated utilities. Trained with clipped-ratio policy
// gradients (PPO) and an entropy bonus.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "aglo/checkpoint.hpp"
#include "aglo/common.hpp"
#include "aglo/envsim.hpp"
#include "aglo/nn.hpp"
#include "aglo/reprlearn.hpp"
#include "aglo/tape.hpp"

namespace aglo::policy {

using ad::Mat;
using ad::ParamStore;
using ad::Tape;
using ad::Var;
using repr::ActionEmbeddingDist;

// ---------------------------------------------------------------------------
// Gaussian mixup

/// Moment-matched Gaussian of the lambda-weighted mixture of two diagonal
/// Gaussians.
inline ActionEmbeddingDist mixup_gaussian(const ActionEmbeddingDist& i, const ActionEmbeddingDist& j, double lambda) {
  require(lambda >= 0.0 && lambda <= 1.0, ErrorKind::invalid_argument,
          "mixing coefficient " + std::to_string(lambda) + " outside [0, 1]");
  require(i.mean.size() == j.mean.size() && i.variance.size() == j.variance.size(), ErrorKind::invalid_argument,
          "embedding sizes differ");
  require(i.variance.minCoeff() > 0.0 && j.variance.minCoeff() > 0.0, ErrorKind::invalid_argument,
          "variances must be positive");
  const double mu = 1.0 - lambda;
  ActionEmbeddingDist out;
  out.mean = lambda * i.mean + mu * j.mean;
  out.variance = lambda * i.variance + mu * j.variance + (lambda * mu) * (i.mean - j.mean).cwiseAbs2();
  return out;
}

inline Eigen::VectorXd sample_embedding(const ActionEmbeddingDist& d, Rng& rng) {
  Eigen::VectorXd c(d.mean.size());
  for (Eigen::Index k = 0; k < c.size(); ++k) c(k) = d.mean(k) + std::sqrt(d.variance(k)) * standard_normal(rng);
  return c;
}

/// Two representations per action. `partner[i]` is -1 (and lambda 1) when the
/// synthetic slot duplicates the original.
struct AugmentedActionSet {
  Mat original;   // K x d
  Mat synthetic;  // K x d
  std::vector<int> partner;
  std::vector<double> lambda;

  int size() const { return static_cast<int>(original.rows()); }

  /// 2K x d with rows (original_0, synthetic_0, original_1, ...).
  Mat interleaved() const {
    Mat out(2 * original.rows(), original.cols());
    for (Eigen::Index i = 0; i < original.rows(); ++i) {
      out.row(2 * i) = original.row(i);
      out.row(2 * i + 1) = synthetic.row(i);
    }
    return out;
  }
};

/// Samples c_i ~ N(mu_i, var_i) for every action and, for each i, a partner
/// j != i uniformly among the others, lambda ~ Beta(alpha, alpha), and a
/// synthetic embedding from the mixed Gaussian.
inline AugmentedActionSet augment_action_set(const std::vector<ActionEmbeddingDist>& dists, double alpha,
                                             std::uint64_t seed) {
  const int k = static_cast<int>(dists.size());
  require(k >= 2, ErrorKind::invalid_argument, "augmentation needs at least 2 actions (no partner exists)");
  require(alpha > 0.0, ErrorKind::invalid_argument, "Beta parameter must be positive");
  Rng rng = make_rng(seed, 0x3a1);
  const Eigen::Index d = dists[0].mean.size();
  AugmentedActionSet s;
  s.original.resize(k, d);
  s.synthetic.resize(k, d);
  for (int i = 0; i < k; ++i) {
    s.original.row(i) = sample_embedding(dists[static_cast<std::size_t>(i)], rng).transpose();
    int j = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(k - 1)));
    if (j >= i) ++j;
    const double lambda = beta_sample(rng, alpha, alpha);
    s.partner.push_back(j);
    s.lambda.push_back(lambda);
    const ActionEmbeddingDist mixed =
        mixup_gaussian(dists[static_cast<std::size_t>(i)], dists[static_cast<std::size_t>(j)], lambda);
    s.synthetic.row(i) = sample_embedding(mixed, rng).transpose();
  }
  return s;
}

/// Without augmentation: one sample per action, duplicated into both slots.
inline AugmentedActionSet duplicate_action_set(const std::vector<ActionEmbeddingDist>& dists, std::uint64_t seed) {
  require(!dists.empty(), ErrorKind::invalid_argument, "empty action set");
  Rng rng = make_rng(seed, 0x3a1);
  const Eigen::Index k = static_cast<Eigen::Index>(dists.size());
  AugmentedActionSet s;
  s.original.resize(k, dists[0].mean.size());
  for (Eigen::Index i = 0; i < k; ++i)
    s.original.row(i) = sample_embedding(dists[static_cast<std::size_t>(i)], rng).transpose();
  s.synthetic = s.original;
  s.partner.assign(dists.size(), -1);
  s.lambda.assign(dists.size(), 1.0);
  return s;
}

/// Evaluation without augmentation: both slots hold the mean embedding.
inline AugmentedActionSet mean_action_set(const std::vector<ActionEmbeddingDist>& dists) {
  require(!dists.empty(), ErrorKind::invalid_argument, "empty action set");
  const Eigen::Index k = static_cast<Eigen::Index>(dists.size());
  AugmentedActionSet s;
  s.original.resize(k, dists[0].mean.size());
  for (Eigen::Index i = 0; i < k; ++i) s.original.row(i) = dists[static_cast<std::size_t>(i)].mean.transpose();
  s.synthetic = s.original;
  s.partner.assign(dists.size(), -1);
  s.lambda.assign(dists.size(), 1.0);
  return s;
}

// ---------------------------------------------------------------------------
// Action distribution

/// pi_i proportional to exp(u_i) + exp(u_i,syn), from a K x 2 utility matrix,
/// with the global maximum subtracted first.
inline Eigen::VectorXd policy_distribution(const Mat& utilities) {
  require(utilities.cols() == 2 && utilities.rows() >= 1, ErrorKind::invalid_argument,
          "expected K x 2 utilities (original, synthetic)");
  if (!utilities.allFinite()) fail(ErrorKind::numeric_error, "non-finite utility");
  const double m = utilities.maxCoeff();
  Eigen::VectorXd p = (utilities.array() - m).exp().rowwise().sum();
  return p / p.sum();
}

inline double entropy(const Eigen::VectorXd& p) {
  double h = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i)
    if (p(i) > 0.0) h -= p(i) * std::log(p(i));
  return h;
}

// ---------------------------------------------------------------------------
// Model

struct PolicyConfig {
  int hidden = 64;
  int utility_hidden = 64;
  double alpha = 0.4;
  double entropy_coef = 5e-3;
  double gamma = 0.99;
  double gae_lambda = 0.95;
  double clip = 0.2;
  double value_coef = 0.5;
  int update_epochs = 4;
  int batch_steps = 3072;
  int minibatches = 4;
  double lr = 1e-3;
  double max_grad_norm = 0.5;
  long total_steps = 100000;
  double init_log_std = -1.6;  // placement std ~0.2 arena units
  bool use_augmentation = true;
};

inline void validate(const PolicyConfig& c) {
  require(c.entropy_coef >= 0.0, ErrorKind::invalid_argument, "entropy coefficient must be >= 0");
  require(c.gamma > 0.0 && c.gamma <= 1.0, ErrorKind::invalid_argument, "gamma must be in (0, 1]");
  require(c.gae_lambda >= 0.0 && c.gae_lambda <= 1.0, ErrorKind::invalid_argument, "GAE lambda must be in [0, 1]");
  require(c.clip > 0.0, ErrorKind::invalid_argument, "clip ratio must be positive");
  require(c.alpha > 0.0, ErrorKind::invalid_argument, "Beta parameter must be positive");
  require(c.hidden >= 1 && c.utility_hidden >= 1, ErrorKind::invalid_argument, "widths must be positive");
  require(c.update_epochs >= 1 && c.batch_steps >= 1 && c.minibatches >= 1, ErrorKind::invalid_argument,
          "update schedule must be positive");
}

struct PolicyModel {
  PolicyConfig config;
  int feature_dim = 0;
  int embed_dim = 0;
  ParamStore params;

  nn::Mlp encoder;          // f_omega: features -> hidden -> hidden
  nn::Dense utility_state;  // hidden -> utility_hidden
  nn::Dense utility_embed;  // d -> utility_hidden
  nn::Dense utility_out;    // utility_hidden -> 1
  nn::Dense placement;      // hidden -> 2, offset by the arena center
  nn::Dense value;          // hidden -> 1

  PolicyModel() = default;

  PolicyModel(const PolicyConfig& cfg, int feature_dim_, int embed_dim_, std::uint64_t seed)
      : config(cfg), feature_dim(feature_dim_), embed_dim(embed_dim_) {
    validate(cfg);
    require(feature_dim >= 1 && embed_dim >= 1, ErrorKind::invalid_argument, "bad policy shape");
    Rng rng = make_rng(seed, 0x9011);
    encoder = nn::add_mlp(params, "encoder", {feature_dim, cfg.hidden, cfg.hidden}, rng, nn::Activation::tanh,
                          nn::Activation::tanh);
    utility_state = nn::add_dense(params, "utility.state", cfg.hidden, cfg.utility_hidden, rng);
    utility_embed = nn::add_dense(params, "utility.embed", embed_dim, cfg.utility_hidden, rng);
    utility_out = nn::add_dense(params, "utility.out", cfg.utility_hidden, 1, rng);
    placement = nn::add_dense(params, "placement.mean", cfg.hidden, 2, rng, 0.1);
    params.add("placement.log_std", Mat::Constant(1, 2, cfg.init_log_std));
    value = nn::add_dense(params, "value", cfg.hidden, 1, rng);
  }
};

/// B states, each with its own block of 2K interleaved embeddings.
struct PolicyInput {
  Mat features;                  // B x F
  Mat embeddings;                // M x d, blocks of 2K rows
  std::vector<int> block_start;  // per state, first row of its block
  int num_actions = 0;           // K
};

struct PolicyForward {
  Var log_probs;       // B x K
  Var utilities;       // (B*K) x 2
  Var placement_mean;  // B x 2
  Var log_std;         // B x 2 (broadcast)
  Var value;           // B x 1
};

inline PolicyForward forward(Tape& tape, PolicyModel& m, const PolicyInput& in) {
  const Eigen::Index b = in.features.rows();
  const int k = in.num_actions;
  require(k >= 1 && static_cast<Eigen::Index>(in.block_start.size()) == b, ErrorKind::invalid_argument,
          "one embedding block per state required");
  Var h = nn::apply(tape, m.params, m.encoder, tape.constant(in.features));
  Var qh = nn::apply(tape, m.params, m.utility_state, h);
  Var pe = nn::apply(tape, m.params, m.utility_embed, tape.constant(in.embeddings));
  std::vector<int> state_rows, embed_rows;
  state_rows.reserve(static_cast<std::size_t>(b * 2 * k));
  embed_rows.reserve(static_cast<std::size_t>(b * 2 * k));
  for (Eigen::Index s = 0; s < b; ++s)
    for (int r = 0; r < 2 * k; ++r) {
      state_rows.push_back(static_cast<int>(s));
      embed_rows.push_back(in.block_start[static_cast<std::size_t>(s)] + r);
    }
  Var pre = ad::add(ad::gather_rows(qh, std::move(state_rows)), ad::gather_rows(pe, std::move(embed_rows)));
  Var u = nn::apply(tape, m.params, m.utility_out, ad::tanh(pre));
  PolicyForward f;
  f.utilities = ad::reshape(u, b * k, 2);
  Var logits = ad::reshape(ad::row_logsumexp(f.utilities), b, k);
  f.log_probs = ad::log_softmax_rows(logits);
  f.placement_mean = ad::add_scalar(nn::apply(tape, m.params, m.placement, h), 0.5);
  f.log_std = ad::gather_rows(tape.param(m.params, "placement.log_std"), std::vector<int>(static_cast<std::size_t>(b), 0));
  f.value = nn::apply(tape, m.params, m.value, h);
  return f;
}

/// Log-density of the (pre-clamp) diagonal Gaussian, one row per state.
inline Var placement_log_prob(Var mean, Var log_std, const Mat& x) {
  Tape& tape = *mean.tape;
  Var z = ad::mul(ad::sub(tape.constant(x), mean), ad::exp(ad::scale(log_std, -1.0)));
  Var terms = ad::add(ad::scale(ad::square(z), -0.5), ad::add_scalar(ad::scale(log_std, -1.0), -0.5 * std::log(2.0 * M_PI)));
  return ad::row_sum(terms);
}

inline double placement_log_prob(const Eigen::Vector2d& mean, const Eigen::Vector2d& log_std, const Eigen::Vector2d& x) {
  double lp = 0.0;
  for (int i = 0; i < 2; ++i) {
    const double z = (x(i) - mean(i)) / std::exp(log_std(i));
    lp += -0.5 * z * z - log_std(i) - 0.5 * std::log(2.0 * M_PI);
  }
  return lp;
}

struct PlacementDistribution {
  Eigen::Vector2d mean;
  Eigen::Vector2d log_std;

  /// Returns the raw Gaussian draw; clamp with `clamp_to_arena`.
  Eigen::Vector2d sample(Rng& rng) const {
    return {mean(0) + std::exp(log_std(0)) * standard_normal(rng), mean(1) + std::exp(log_std(1)) * standard_normal(rng)};
  }
  double log_prob(const Eigen::Vector2d& x) const { return placement_log_prob(mean, log_std, x); }
};

inline env::Vec2 clamp_to_arena(const Eigen::Vector2d& x) {
  return {std::clamp(x(0), 0.0, 1.0), std::clamp(x(1), 0.0, 1.0)};
}

enum class ActMode { sample, greedy };

struct Decision {
  int action = 0;
  Eigen::Vector2d raw_placement = Eigen::Vector2d::Constant(0.5);
  env::Vec2 placement{0.5, 0.5};
  double log_prob = 0.0;  // discrete + placement (if used)
  double value = 0.0;
  Eigen::VectorXd probs;
  PlacementDistribution placement_dist;
};

/// One forward pass for a single state.
inline Decision act(PolicyModel& m, const std::vector<double>& features, const AugmentedActionSet& set, ActMode mode,
                    Rng* rng, bool use_placement = true) {
  require(static_cast<int>(features.size()) == m.feature_dim, ErrorKind::invalid_argument, "feature size mismatch");
  require(set.original.cols() == m.embed_dim, ErrorKind::invalid_argument,
          "embedding size " + std::to_string(set.original.cols()) + " differs from policy's " +
              std::to_string(m.embed_dim));
  PolicyInput in;
  in.features = Eigen::Map<const ad::RowVec>(features.data(), static_cast<Eigen::Index>(features.size()));
  in.embeddings = set.interleaved();
  in.block_start = {0};
  in.num_actions = set.size();
  Tape tape;
  const PolicyForward f = forward(tape, m, in);
  Decision d;
  d.probs = policy_distribution(f.utilities.value());
  d.placement_dist.mean = f.placement_mean.value().row(0).transpose();
  d.placement_dist.log_std = f.log_std.value().row(0).transpose();
  d.value = f.value.scalar();
  if (mode == ActMode::greedy) {
    d.probs.maxCoeff(&d.action);
    d.raw_placement = d.placement_dist.mean;
  } else {
    require(rng != nullptr, ErrorKind::invalid_argument, "sampling needs an rng");
    const double u = uniform01(*rng);
    double acc = 0.0;
    d.action = static_cast<int>(d.probs.size()) - 1;
    for (Eigen::Index i = 0; i < d.probs.size(); ++i) {
      acc += d.probs(i);
      if (u < acc) {
        d.action = static_cast<int>(i);
        break;
      }
    }
    d.raw_placement = d.placement_dist.sample(*rng);
  }
  d.placement = clamp_to_arena(d.raw_placement);
  d.log_prob = f.log_probs.value()(0, d.action);
  if (use_placement) d.log_prob += d.placement_dist.log_prob(d.raw_placement);
  return d;
}

// ---------------------------------------------------------------------------
// Environments seen by the trainer

struct StepOutcome {
  double reward = 0.0;
  bool done = false;
};

class Environment {
 public:
  virtual ~Environment() = default;
  virtual int feature_dim() const = 0;
  /// Starts an episode and returns the ids of its action set, in slot order.
  virtual std::vector<int> reset(std::uint64_t episode_seed) = 0;
  virtual std::vector<double> features() const = 0;
  virtual StepOutcome step(int slot, env::Vec2 placement) = 0;
  virtual bool target_hit() const { return false; }
  virtual bool goal_hit() const { return false; }
  virtual bool uses_placement() const { return true; }
};

/// The tool-placement task over a pool of actions; each episode draws K
/// distinct actions from the pool in random slot order.
class ToolTaskEnv : public Environment {
 public:
  ToolTaskEnv(std::vector<env::ToolSpec> pool, int k, env::EnvConfig cfg = {})
      : pool_(std::move(pool)), k_(k), cfg_(cfg) {
    require(k_ >= 1, ErrorKind::invalid_argument, "K must be >= 1");
    require(static_cast<int>(pool_.size()) >= k_, ErrorKind::invalid_argument,
            "action pool of " + std::to_string(pool_.size()) + " is smaller than K=" + std::to_string(k_));
  }

  int feature_dim() const override { return static_cast<int>(env::kFeatureDim); }

  std::vector<int> reset(std::uint64_t episode_seed) override {
    Rng rng = make_rng(episode_seed, 0xa5e7);
    std::vector<std::size_t> idx(pool_.size());
    std::iota(idx.begin(), idx.end(), 0);
    for (int i = 0; i < k_; ++i) {
      const std::size_t j = static_cast<std::size_t>(i) + uniform_index(rng, idx.size() - static_cast<std::size_t>(i));
      std::swap(idx[static_cast<std::size_t>(i)], idx[j]);
    }
    std::vector<env::ToolSpec> chosen;
    std::vector<int> ids;
    for (int i = 0; i < k_; ++i) {
      chosen.push_back(pool_[idx[static_cast<std::size_t>(i)]]);
      ids.push_back(chosen.back().tool_id);
    }
    state_ = env::env_reset(chosen, derive_seed(episode_seed, 1), cfg_);
    return ids;
  }

  std::vector<double> features() const override { return env::agent_features(state_); }

  StepOutcome step(int slot, env::Vec2 placement) override {
    env::StepResult r = env::env_step(state_, env::EnvAction{slot, placement, false}, cfg_);
    state_ = std::move(r.state);
    return {r.reward, r.done};
  }

  bool target_hit() const override { return state_.target_hit; }
  bool goal_hit() const override { return state_.goal_hit; }
  const env::EnvState& state() const { return state_; }

 private:
  std::vector<env::ToolSpec> pool_;
  int k_;
  env::EnvConfig cfg_;
  env::EnvState state_;
};

/// One-step two-action bandit: choosing action id `best` pays 1, the other 0.
/// Slot order is shuffled per episode so the policy must read the embeddings.
class BanditEnv : public Environment {
 public:
  explicit BanditEnv(int best = 0) : best_(best) {}
  int feature_dim() const override { return 1; }
  std::vector<int> reset(std::uint64_t episode_seed) override {
    Rng rng = make_rng(episode_seed, 0xba);
    ids_ = uniform01(rng) < 0.5 ? std::vector<int>{0, 1} : std::vector<int>{1, 0};
    done_ = false;
    return ids_;
  }
  std::vector<double> features() const override { return {1.0}; }
  StepOutcome step(int slot, env::Vec2) override {
    if (done_) fail(ErrorKind::illegal_transition, "step called on a finished episode");
    done_ = true;
    return {ids_.at(static_cast<std::size_t>(slot)) == best_ ? 1.0 : 0.0, true};
  }
  bool uses_placement() const override { return false; }

 private:
  int best_;
  std::vector<int> ids_{0, 1};
  bool done_ = false;
};

inline std::vector<ActionEmbeddingDist> lookup(const std::map<int, ActionEmbeddingDist>& embeddings,
                                               const std::vector<int>& ids) {
  std::vector<ActionEmbeddingDist> out;
  out.reserve(ids.size());
  for (int id : ids) {
    auto it = embeddings.find(id);
    if (it == embeddings.end()) fail(ErrorKind::invalid_argument, "no embedding for action " + std::to_string(id));
    out.push_back(it->second);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Clipped surrogate

struct Minibatch {
  PolicyInput input;
  std::vector<int> actions;
  Mat placements;  // B x 2, pre-clamp draws
  Mat old_log_probs;
  Mat advantages;
  Mat returns;
  bool use_placement = true;
};

struct SurrogateTerms {
  Var loss;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double clip_fraction = 0.0;
};

/// -E[min(r A, clip(r) A)] + c_v E[(V - R)^2] - beta E[H(pi)], with the
/// entropy taken over the discrete action distribution.
inline SurrogateTerms surrogate(Tape& tape, PolicyModel& m, const Minibatch& mb) {
  const PolicyConfig& cfg = m.config;
  const Eigen::Index b = mb.input.features.rows();
  const PolicyForward f = forward(tape, m, mb.input);
  std::vector<std::pair<int, int>> at;
  for (Eigen::Index s = 0; s < b; ++s) at.emplace_back(static_cast<int>(s), mb.actions[static_cast<std::size_t>(s)]);
  Var logp = ad::pick(f.log_probs, std::move(at));
  if (mb.use_placement) logp = ad::add(logp, placement_log_prob(f.placement_mean, f.log_std, mb.placements));
  Var ratio = ad::exp(ad::sub(logp, tape.constant(mb.old_log_probs)));
  Var adv = tape.constant(mb.advantages);
  Var unclipped = ad::mul(ratio, adv);
  Var clipped = ad::mul(ad::clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip), adv);
  Var policy_loss = ad::scale(ad::mean(ad::min(unclipped, clipped)), -1.0);
  Var value_loss = ad::mean(ad::square(ad::sub(f.value, tape.constant(mb.returns))));
  Var ent = ad::scale(ad::sum(ad::mul(ad::exp(f.log_probs), f.log_probs)), -1.0 / static_cast<double>(b));
  SurrogateTerms t;
  t.loss = ad::sub(ad::add(policy_loss, ad::scale(value_loss, cfg.value_coef)), ad::scale(ent, cfg.entropy_coef));
  t.policy_loss = policy_loss.scalar();
  t.value_loss = value_loss.scalar();
  t.entropy = ent.scalar();
  const Mat& r = ratio.value();
  t.clip_fraction = static_cast<double>(((r.array() - 1.0).abs() > cfg.clip).count()) / static_cast<double>(b);
  return t;
}

// ---------------------------------------------------------------------------
// Rollouts and training

struct RolloutStep {
  std::vector<double> features;
  int episode = 0;
  int action = 0;
  Eigen::Vector2d raw_placement;
  double log_prob = 0.0;
  double value = 0.0;
  double reward = 0.0;
  bool done = false;
  double entropy = 0.0;
  double advantage = 0.0;
  double ret = 0.0;
};

struct RolloutBuffer {
  std::vector<Mat> episode_embeddings;  // 2K x d per episode
  std::vector<RolloutStep> steps;
  std::vector<double> episode_returns;  // discounted
  std::vector<bool> episode_target_hit;
  std::vector<bool> episode_goal_hit;
  int num_actions = 0;

  /// Generalized advantage estimation, episode by episode; the value after
  /// the last step of an episode is 0 (episodes always run to completion).
  void compute_advantages(double gamma, double lambda) {
    double next_value = 0.0, next_adv = 0.0;
    for (std::size_t i = steps.size(); i-- > 0;) {
      RolloutStep& s = steps[i];
      if (s.done) {
        next_value = 0.0;
        next_adv = 0.0;
      }
      const double delta = s.reward + gamma * next_value - s.value;
      s.advantage = delta + gamma * lambda * next_adv;
      s.ret = s.advantage + s.value;
      next_value = s.value;
      next_adv = s.advantage;
    }
  }
};

inline Minibatch make_minibatch(const RolloutBuffer& buf, const std::vector<std::size_t>& idx, bool use_placement,
                                const std::vector<double>& advantages) {
  Minibatch mb;
  mb.use_placement = use_placement;
  const Eigen::Index b = static_cast<Eigen::Index>(idx.size());
  const int k = buf.num_actions;
  const int fdim = static_cast<int>(buf.steps.at(idx.at(0)).features.size());
  mb.input.features.resize(b, fdim);
  mb.input.num_actions = k;
  mb.placements.resize(b, 2);
  mb.old_log_probs.resize(b, 1);
  mb.advantages.resize(b, 1);
  mb.returns.resize(b, 1);
  std::map<int, int> block;  // episode -> block index in this minibatch
  for (std::size_t i : idx) block.emplace(buf.steps[i].episode, 0);
  int next = 0;
  for (auto& [ep, blk] : block) blk = next++;
  const Eigen::Index rows_per = 2 * k;
  const Eigen::Index d = buf.episode_embeddings.at(0).cols();
  mb.input.embeddings.resize(next * rows_per, d);
  for (const auto& [ep, blk] : block)
    mb.input.embeddings.middleRows(blk * rows_per, rows_per) = buf.episode_embeddings[static_cast<std::size_t>(ep)];
  for (Eigen::Index r = 0; r < b; ++r) {
    const RolloutStep& s = buf.steps[idx[static_cast<std::size_t>(r)]];
    for (int c = 0; c < fdim; ++c) mb.input.features(r, c) = s.features[static_cast<std::size_t>(c)];
    mb.input.block_start.push_back(static_cast<int>(block.at(s.episode) * rows_per));
    mb.actions.push_back(s.action);
    mb.placements.row(r) = s.raw_placement.transpose();
    mb.old_log_probs(r, 0) = s.log_prob;
    mb.advantages(r, 0) = advantages[idx[static_cast<std::size_t>(r)]];
    mb.returns(r, 0) = s.ret;
  }
  return mb;
}

/// Per-episode representation set used while training.
inline AugmentedActionSet training_action_set(const std::vector<ActionEmbeddingDist>& dists, const PolicyConfig& cfg,
                                              std::uint64_t seed) {
  return cfg.use_augmentation ? augment_action_set(dists, cfg.alpha, seed) : duplicate_action_set(dists, seed);
}

/// Runs whole episodes until at least `min_steps` transitions are stored.
inline RolloutBuffer collect_rollouts(PolicyModel& m, Environment& env,
                                      const std::map<int, ActionEmbeddingDist>& embeddings, long min_steps,
                                      std::uint64_t seed, long& episode_counter) {
  RolloutBuffer buf;
  const PolicyConfig& cfg = m.config;
  while (static_cast<long>(buf.steps.size()) < min_steps) {
    const std::uint64_t ep_seed = derive_seed(seed, 0xe900000000ULL + static_cast<std::uint64_t>(episode_counter++));
    const std::vector<int> ids = env.reset(ep_seed);
    const AugmentedActionSet set = training_action_set(lookup(embeddings, ids), cfg, derive_seed(ep_seed, 2));
    buf.num_actions = set.size();
    const int episode = static_cast<int>(buf.episode_embeddings.size());
    buf.episode_embeddings.push_back(set.interleaved());
    Rng rng = make_rng(ep_seed, 3);
    double ret = 0.0, discount = 1.0;
    for (bool done = false; !done;) {
      RolloutStep s;
      s.features = env.features();
      const Decision d = act(m, s.features, set, ActMode::sample, &rng, env.uses_placement());
      const StepOutcome o = env.step(d.action, d.placement);
      s.episode = episode;
      s.action = d.action;
      s.raw_placement = d.raw_placement;
      s.log_prob = d.log_prob;
      s.value = d.value;
      s.reward = o.reward;
      s.done = o.done;
      s.entropy = entropy(d.probs);
      buf.steps.push_back(std::move(s));
      ret += discount * o.reward;
      discount *= cfg.gamma;
      done = o.done;
    }
    buf.episode_returns.push_back(ret);
    buf.episode_target_hit.push_back(env.target_hit());
    buf.episode_goal_hit.push_back(env.goal_hit());
  }
  return buf;
}

struct UpdateLog {
  long env_steps = 0;
  int episodes = 0;
  double mean_return = 0.0;
  double target_hit_rate = 0.0;
  double goal_hit_rate = 0.0;
  double entropy = 0.0;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double clip_fraction = 0.0;
};

struct PolicyTrainOptions {
  std::uint64_t seed = 0;
  std::optional<std::filesystem::path> checkpoint_path;
  nlohmann::json config_echo = nlohmann::json::object();
  /// Called before the first update, every `probe_every` updates and at the end.
  std::function<void(long env_steps, PolicyModel&)> probe;
  int probe_every = 5;
  std::function<void(const UpdateLog&)> on_update;
};

struct PolicyTrainResult {
  PolicyModel model;
  nn::AdamOptimizer optimizer;
  std::vector<UpdateLog> updates;
  long env_steps = 0;
};

inline Checkpoint make_policy_checkpoint(const PolicyModel& m, const nn::AdamOptimizer* opt, std::uint64_t seed,
                                         const nlohmann::json& config_echo) {
  Checkpoint c;
  c.kind = "policy";
  c.config = config_echo;
  c.config["model_shape"] = {{"feature_dim", m.feature_dim}, {"embed_dim", m.embed_dim}};
  c.seed = seed;
  c.put_params("param/", m.params);
  if (opt) c.put_optimizer("opt/", *opt);
  return c;
}

inline PolicyModel load_policy_model(const Checkpoint& c, const PolicyConfig& cfg) {
  require(c.kind == "policy", ErrorKind::format_error, "checkpoint kind is '" + c.kind + "', expected 'policy'");
  const auto& shape = c.config.at("model_shape");
  PolicyModel m(cfg, shape.at("feature_dim").get<int>(), shape.at("embed_dim").get<int>(), c.seed);
  c.get_params("param/", m.params);
  return m;
}

/// Alternates on-policy rollout collection and clipped-surrogate updates
/// until `total_steps` environment steps have been taken.
inline PolicyTrainResult train_policy(Environment& env, const std::map<int, ActionEmbeddingDist>& embeddings,
                                      const PolicyConfig& cfg, const PolicyTrainOptions& opts) {
  validate(cfg);
  require(embeddings.size() >= 2, ErrorKind::invalid_argument, "policy training needs at least 2 seen actions");
  const int d = static_cast<int>(embeddings.begin()->second.mean.size());
  PolicyTrainResult res;
  res.model = PolicyModel(cfg, env.feature_dim(), d, opts.seed);
  res.optimizer = nn::AdamOptimizer(res.model.params, {cfg.lr, 0.9, 0.999, 1e-8, false});
  const bool use_placement = env.uses_placement();
  long episodes = 0;
  int update = 0;
  auto probe = [&]() {
    if (opts.probe) opts.probe(res.env_steps, res.model);
  };
  probe();
  while (res.env_steps < cfg.total_steps) {
    RolloutBuffer buf = collect_rollouts(res.model, env, embeddings, cfg.batch_steps, opts.seed, episodes);
    buf.compute_advantages(cfg.gamma, cfg.gae_lambda);
    res.env_steps += static_cast<long>(buf.steps.size());

    std::vector<double> adv(buf.steps.size());
    double mean = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < adv.size(); ++i) mean += buf.steps[i].advantage;
    mean /= static_cast<double>(adv.size());
    for (const RolloutStep& s : buf.steps) sq += (s.advantage - mean) * (s.advantage - mean);
    const double sd = std::sqrt(sq / static_cast<double>(adv.size()));
    for (std::size_t i = 0; i < adv.size(); ++i) adv[i] = (buf.steps[i].advantage - mean) / (sd + 1e-8);

    UpdateLog log;
    log.env_steps = res.env_steps;
    log.episodes = static_cast<int>(buf.episode_returns.size());
    for (std::size_t e = 0; e < buf.episode_returns.size(); ++e) {
      log.mean_return += buf.episode_returns[e];
      log.target_hit_rate += buf.episode_target_hit[e] ? 1.0 : 0.0;
      log.goal_hit_rate += buf.episode_goal_hit[e] ? 1.0 : 0.0;
    }
    log.mean_return /= log.episodes;
    log.target_hit_rate /= log.episodes;
    log.goal_hit_rate /= log.episodes;
    for (const RolloutStep& s : buf.steps) log.entropy += s.entropy;
    log.entropy /= static_cast<double>(buf.steps.size());

    const ParamStore last_good = res.model.params;
    Rng shuffle_rng = make_rng(opts.seed, 0x5f00000 + static_cast<std::uint64_t>(update));
    std::vector<std::size_t> order(buf.steps.size());
    std::iota(order.begin(), order.end(), 0);
    int minibatch_count = 0;
    for (int epoch = 0; epoch < cfg.update_epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), shuffle_rng);
      const std::size_t per = (order.size() + static_cast<std::size_t>(cfg.minibatches) - 1) /
                              static_cast<std::size_t>(cfg.minibatches);
      for (std::size_t start = 0; start < order.size(); start += per) {
        std::vector<std::size_t> idx(order.begin() + static_cast<long>(start),
                                     order.begin() + static_cast<long>(std::min(order.size(), start + per)));
        const Minibatch mb = make_minibatch(buf, idx, use_placement, adv);
        Tape tape;
        res.model.params.zero_grad();
        const SurrogateTerms t = surrogate(tape, res.model, mb);
        tape.backward(t.loss);
        const double gnorm = nn::clip_grad_norm(res.model.params, cfg.max_grad_norm);
        if (!std::isfinite(t.loss.scalar()) || !std::isfinite(gnorm)) {
          std::string where = "<none>";
          if (opts.checkpoint_path) {
            PolicyModel good = res.model;
            good.params = last_good;
            make_policy_checkpoint(good, nullptr, opts.seed, opts.config_echo).save(*opts.checkpoint_path);
            where = opts.checkpoint_path->string();
          }
          fail(ErrorKind::numeric_error, "non-finite policy update at env step " + std::to_string(res.env_steps) +
                                             "; last good checkpoint: " + where);
        }
        res.optimizer.step(res.model.params);
        log.policy_loss += t.policy_loss;
        log.value_loss += t.value_loss;
        log.clip_fraction += t.clip_fraction;
        ++minibatch_count;
      }
    }
    log.policy_loss /= minibatch_count;
    log.value_loss /= minibatch_count;
    log.clip_fraction /= minibatch_count;
    res.updates.push_back(log);
    if (opts.on_update) opts.on_update(log);
    ++update;
    if (opts.probe && opts.probe_every > 0 && update % opts.probe_every == 0 && res.env_steps < cfg.total_steps)
      probe();
  }
  probe();
  if (opts.checkpoint_path)
    make_policy_checkpoint(res.model, &res.optimizer, opts.seed, opts.config_echo).save(*opts.checkpoint_path);
  return res;
}

}  // namespace aglo::policy
