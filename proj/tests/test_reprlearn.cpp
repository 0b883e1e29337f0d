#include <gtest/gtest.h>

#include <filesystem>
#include <limits>
#include <numeric>
#include <set>

#include "aglo/reprlearn.hpp"
#include "repr_fixtures.hpp"

namespace {

using namespace aglo;
using namespace aglo::repr;
using aglo::testing::random_batch;
using aglo::testing::tiny_repr_config;
namespace fs = std::filesystem;

Mat random_mat(Rng& rng, Eigen::Index r, Eigen::Index c) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = standard_normal(rng);
  return m;
}

ad::RowVec row(std::initializer_list<double> v) {
  ad::RowVec r(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) r(i++) = x;
  return r;
}

Mat rows(std::initializer_list<ad::RowVec> rs) {
  Mat m(static_cast<Eigen::Index>(rs.size()), rs.begin()->size());
  Eigen::Index i = 0;
  for (const auto& r : rs) m.row(i++) = r;
  return m;
}

// ---------------------------------------------------------------------------
// Coarse encoder

TEST(CoarseEncoder, DeterministicWithDefaultWidth) {
  ReprModel m(ReprConfig{}, 4, 20, 1);
  Rng rng(2);
  const Mat obs = random_mat(rng, 20, 4);
  const Eigen::VectorXd a = encode_coarse(m, obs);
  EXPECT_EQ(a.size(), 128);
  EXPECT_TRUE(a == encode_coarse(m, obs));
}

TEST(CoarseEncoder, TimeReversalLeavesEmbeddingUnchanged) {
  ReprModel m(tiny_repr_config(), 3, 6, 4);
  Rng rng(5);
  const Mat obs = random_mat(rng, 6, 4);
  const Mat reversed = obs.colwise().reverse();
  EXPECT_LE((encode_coarse(m, obs) - encode_coarse(m, reversed)).cwiseAbs().maxCoeff(), 1e-12);
  const Mat constant = Mat::Constant(6, 4, 0.3);
  EXPECT_TRUE(encode_coarse(m, constant) == encode_coarse(m, Mat(constant.colwise().reverse())));
}

TEST(CoarseEncoder, RejectsWrongShape) {
  ReprModel m(tiny_repr_config(), 3, 6, 4);
  try {
    encode_coarse(m, Mat::Zero(5, 4));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::invalid_argument);
  }
}

// ---------------------------------------------------------------------------
// Graph

TEST(Graph, HandExamples) {
  const ObservationGraph same = build_graph(rows({row({1, 2, 3}), row({2, 4, 6})}), {0, 1}, 2, 0.95);
  EXPECT_NEAR(same.adjacency(0, 1), 1.0, 1e-12);
  const ObservationGraph anti = build_graph(rows({row({1, 2, 3}), row({3, 2, 1})}), {0, 1}, 2, 0.95);
  EXPECT_EQ(anti.adjacency(0, 1), 0.0);
  const ObservationGraph near = build_graph(rows({row({1, 2, 3}), row({1, 2, 4})}), {0, 1}, 2, 0.95);
  const double oracle = 3.0 / (std::sqrt(2.0) * std::sqrt(42.0 / 9.0));
  EXPECT_NEAR(near.adjacency(0, 1), oracle, 1e-6);
  EXPECT_NEAR(near.adjacency(1, 0), oracle, 1e-6);
  EXPECT_NEAR(oracle, 0.982, 5e-4);
}

TEST(Graph, ConstantFeatureIsDegenerate) {
  try {
    build_graph(rows({row({1, 2, 3}), row({5, 5, 5})}), {0, 1}, 2, 0.95);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::degenerate_feature);
    EXPECT_NE(std::string(e.what()).find("node 1"), std::string::npos);
  }
}

TEST(Graph, LawsHoldOnRandomBatches) {
  Rng rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    const Eigen::Index n = 2 + static_cast<Eigen::Index>(uniform_index(rng, 12));
    // Low-rank features so that some pairs clear the threshold.
    const Mat f = random_mat(rng, n, 2) * random_mat(rng, 2, 8) + 0.2 * random_mat(rng, n, 8);
    const double eps = uniform(rng, 0.0, 0.99);
    std::vector<int> labels(static_cast<std::size_t>(n), 0);
    const ObservationGraph g = build_graph(f, labels, 1, eps);
    EXPECT_TRUE(g.adjacency == g.adjacency.transpose());
    for (Eigen::Index u = 0; u < n; ++u) {
      EXPECT_EQ(g.adjacency(u, u), 0.0);
      for (Eigen::Index v = 0; v < n; ++v) {
        const double w = g.adjacency(u, v);
        if (w != 0.0) {
          EXPECT_GT(w, eps);
          EXPECT_LE(w, 1.0);
        }
      }
    }
    std::vector<int> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Mat fp(n, 8);
    for (Eigen::Index u = 0; u < n; ++u) fp.row(u) = f.row(perm[static_cast<std::size_t>(u)]);
    const ObservationGraph gp = build_graph(fp, labels, 1, eps);
    for (Eigen::Index u = 0; u < n; ++u)
      for (Eigen::Index v = 0; v < n; ++v)
        EXPECT_NEAR(gp.adjacency(u, v),
                    g.adjacency(perm[static_cast<std::size_t>(u)], perm[static_cast<std::size_t>(v)]), 1e-12);
  }
}

// ---------------------------------------------------------------------------
// Refinement

Mat refine_value(ReprModel& m, const Mat& c, const ObservationGraph& g) {
  Tape t;
  return refine(t, m, t.constant(c), g).value();
}

TEST(Refine, EmptyGraphIsPerNodeMap) {
  ReprModel m(tiny_repr_config(), 3, 4, 1);
  Rng rng(3);
  const Mat c = random_mat(rng, 5, 8);
  const ObservationGraph g = build_graph(c, {0, 0, 1, 1, 2}, 3, 1.0);
  ASSERT_EQ(g.adjacency.sum(), 0.0);
  auto relu = [](const Mat& x) { return Mat(x.cwiseMax(0.0)); };
  const Mat& w1 = m.params.at("gcn.0.w").value;
  const Mat& b1 = m.params.at("gcn.0.b").value;
  const Mat& w2 = m.params.at("gcn.1.w").value;
  const Mat& b2 = m.params.at("gcn.1.b").value;
  const Mat h = relu((c * w1.transpose()).rowwise() + b1.row(0));
  const Mat expected = relu((h * w2.transpose()).rowwise() + b2.row(0));
  EXPECT_LE((refine_value(m, c, g) - expected).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Refine, PermutationEquivariant) {
  ReprModel m(tiny_repr_config(), 3, 4, 2);
  Rng rng(4);
  const Mat c = random_mat(rng, 6, 2) * random_mat(rng, 2, 8) + 0.1 * random_mat(rng, 6, 8);
  const std::vector<int> labels{0, 0, 1, 1, 2, 2};
  const ObservationGraph g = build_graph(c, labels, 3, 0.3);
  const std::vector<int> perm{3, 5, 0, 1, 4, 2};
  Mat cp(6, 8);
  std::vector<int> lp(6);
  for (int u = 0; u < 6; ++u) {
    cp.row(u) = c.row(perm[static_cast<std::size_t>(u)]);
    lp[static_cast<std::size_t>(u)] = labels[static_cast<std::size_t>(perm[static_cast<std::size_t>(u)])];
  }
  const Mat r = refine_value(m, c, g);
  const Mat rp = refine_value(m, cp, build_graph(cp, lp, 3, 0.3));
  for (int u = 0; u < 6; ++u)
    EXPECT_LE((rp.row(u) - r.row(perm[static_cast<std::size_t>(u)])).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Refine, TwinNodesGetIdenticalRows) {
  ReprModel m(tiny_repr_config(), 3, 4, 2);
  Rng rng(6);
  Mat c = random_mat(rng, 4, 8);
  c.row(3) = c.row(1);
  const ObservationGraph g = build_graph(c, {0, 1, 2, 1}, 3, 0.5);
  const Mat r = refine_value(m, c, g);
  EXPECT_LE((r.row(1) - r.row(3)).cwiseAbs().maxCoeff(), 1e-12);
}

// ---------------------------------------------------------------------------
// Contrastive

double contrastive_value(const Mat& sims, double kappa) {
  Tape t;
  return contrastive_from_similarities(t.constant(sims), kappa).scalar();
}

TEST(Contrastive, ClosedForms) {
  EXPECT_NEAR(contrastive_value(rows({row({0.3, 0.3})}), 0.5), std::log(2.0), 1e-12);
  const double oracle = -std::log(std::exp(2.0) / (std::exp(2.0) + std::exp(-2.0)));
  EXPECT_NEAR(contrastive_value(rows({row({1.0, -1.0})}), 0.5), oracle, 1e-12);
  EXPECT_NEAR(oracle, 0.01815, 1e-5);
  // Per-node terms add up.
  EXPECT_NEAR(contrastive_value(rows({row({0.3, 0.3}), row({1.0, -1.0})}), 0.5), std::log(2.0) + oracle, 1e-12);
}

TEST(Contrastive, DefaultsMatchFullScaleValues) {
  const ReprConfig cfg;
  EXPECT_EQ(cfg.kappa, 0.5);
  EXPECT_EQ(cfg.num_negatives, 5);
  EXPECT_EQ(cfg.epsilon, 0.95);
  EXPECT_EQ(cfg.lambda_ce, 1e-3);
  EXPECT_EQ(cfg.lambda_cont, 1e-1);
  EXPECT_EQ(cfg.embed_dim, 128);
  EXPECT_EQ(cfg.lr, 1e-3);
}

TEST(Contrastive, HigherPositiveSimilarityLowersTheTerm) {
  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    Mat s = rows({row({uniform(rng, -1, 0.9), uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1)})});
    const double before = contrastive_value(s, 0.5);
    s(0, 0) += uniform(rng, 1e-3, 0.1);
    EXPECT_LT(contrastive_value(s, 0.5), before);
  }
}

TEST(Contrastive, SamplingRespectsNeighborhoods) {
  Rng rng(10);
  const Mat f = random_mat(rng, 12, 2) * random_mat(rng, 2, 8) + 0.3 * random_mat(rng, 12, 8);
  std::vector<int> labels;
  for (int i = 0; i < 12; ++i) labels.push_back(i / 3);
  const ObservationGraph g = build_graph(f, labels, 4, 0.6);
  const ContrastiveSample s = sample_contrastive(g, 3, 42);
  for (int u = 0; u < 12; ++u) {
    const int p = s.positive[static_cast<std::size_t>(u)];
    EXPECT_NE(p, u);
    const auto nb = g.neighbors(u);
    if (!nb.empty()) {
      EXPECT_GT(g.adjacency(u, p), 0.0);
    } else {
      EXPECT_EQ(g.action_of[static_cast<std::size_t>(p)], g.action_of[static_cast<std::size_t>(u)]);
    }
    std::set<int> seen;
    for (int v : s.negatives[static_cast<std::size_t>(u)]) {
      EXPECT_NE(v, u);
      EXPECT_EQ(g.adjacency(u, v), 0.0);
      EXPECT_TRUE(seen.insert(v).second);
    }
    EXPECT_EQ(seen.size(), 3u);
  }
  const ContrastiveSample again = sample_contrastive(g, 3, 42);
  EXPECT_EQ(again.positive, s.positive);
  EXPECT_EQ(again.negatives, s.negatives);
}

TEST(Contrastive, TooFewNonNeighborsIsSamplingError) {
  const ObservationGraph g = build_graph(rows({row({1, 2, 3}), row({1, 2, 4}), row({3, 1, 2})}), {0, 0, 1}, 2, 0.95);
  try {
    sample_contrastive(g, 2, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::sampling_error);
  }
}

TEST(Contrastive, IsolatedNodeWithoutSameActionPartnerIsSamplingError) {
  const ObservationGraph g = build_graph(rows({row({1, 2, 3}), row({3, 2, 1}), row({2, 3, 1})}), {0, 1, 2}, 3, 0.95);
  EXPECT_THROW(sample_contrastive(g, 1, 1), Error);
}

// ---------------------------------------------------------------------------
// Classifier and cross-entropy

TEST(Classifier, RowsAreDistributions) {
  ReprModel m(tiny_repr_config(), 5, 4, 3);
  Rng rng(11);
  const Mat p = classify_observations(m, random_mat(rng, 7, 8).cwiseMax(0.0));
  for (Eigen::Index u = 0; u < p.rows(); ++u) EXPECT_NEAR(p.row(u).sum(), 1.0, 1e-9);
}

TEST(Classifier, ZeroFinalLayerGivesUniformRows) {
  ReprModel m(tiny_repr_config(), 4, 4, 3);
  m.params.at("classifier.1.w").value.setZero();
  m.params.at("classifier.1.b").value.setZero();
  Rng rng(12);
  const Mat p = classify_observations(m, random_mat(rng, 3, 8));
  EXPECT_LE((p.array() - 0.25).abs().maxCoeff(), 1e-15);
}

TEST(Classifier, SoftmaxShiftInvariant) {
  Rng rng(13);
  const Mat logits = random_mat(rng, 4, 5);
  const Mat shifted = logits.array() + 17.0;
  EXPECT_LE((softmax_rows(logits) - softmax_rows(shifted)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(CrossEntropy, ClosedForms) {
  EXPECT_EQ(ce_loss(Mat::Identity(3, 3), {0, 1, 2}), 0.0);
  EXPECT_NEAR(ce_loss(Mat::Constant(2, 4, 0.25), {1, 3}), std::log(4.0), 1e-12);
  Rng rng(14);
  const Mat p = softmax_rows(random_mat(rng, 3, 4));
  Mat doubled(6, 4);
  doubled << p, p;
  EXPECT_NEAR(ce_loss(p, {0, 2, 3}), ce_loss(doubled, {0, 2, 3, 0, 2, 3}), 1e-12);
  EXPECT_GE(ce_loss(p, {0, 2, 3}), 0.0);
}

TEST(CrossEntropy, ZeroProbabilityIsFlooredAndCounted) {
  Mat p = Mat::Identity(2, 2);
  int floored = 0;
  const double loss = ce_loss(p, {1, 1}, &floored);
  EXPECT_EQ(floored, 1);
  EXPECT_NEAR(loss, -std::log(1e-12) / 2.0, 1e-9);
}

TEST(CrossEntropy, LogitVersionMatchesProbabilityVersion) {
  Rng rng(15);
  const Mat logits = random_mat(rng, 5, 3);
  Tape t;
  const std::vector<int> labels{0, 1, 2, 2, 1};
  EXPECT_NEAR(ce_loss(t.constant(logits), labels).scalar(), ce_loss(softmax_rows(logits), labels), 1e-12);
}

// ---------------------------------------------------------------------------
// Pooling and KL

TEST(Pooling, PermutationInvariantAndPositive) {
  ReprModel m(tiny_repr_config(), 3, 4, 5);
  Rng rng(16);
  const Mat r = random_mat(rng, 5, 8);
  const Mat shuffled = r(std::vector<int>{4, 2, 0, 3, 1}, Eigen::placeholders::all);
  const ActionEmbeddingDist a = pool_action(m, r);
  const ActionEmbeddingDist b = pool_action(m, shuffled);
  EXPECT_LE((a.mean - b.mean).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LE((a.variance - b.variance).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_GT(a.variance.minCoeff(), 0.0);
  EXPECT_EQ(pool_action(m, r), a);
}

TEST(Pooling, DuplicatedSingleRow) {
  ReprModel m(tiny_repr_config(), 3, 4, 5);
  Rng rng(17);
  const Mat r = random_mat(rng, 1, 8);
  const ActionEmbeddingDist one = pool_action(m, r);
  const ActionEmbeddingDist many = pool_action(m, r.replicate(4, 1));
  EXPECT_LE((one.mean - many.mean).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LE((one.variance - many.variance).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_THROW(pool_action(m, Mat(0, 8)), Error);
}

TEST(Kl, ClosedForms) {
  EXPECT_EQ(gaussian_kl(0.0, 1.0, 0.0, 1.0), 0.0);
  EXPECT_NEAR(gaussian_kl(1.0, 1.0, 0.0, 1.0), 0.5, 1e-15);
  Tape t;
  Var mu = t.constant(Mat::Constant(1, 1, 1.0));
  Var var = t.constant(Mat::Constant(1, 1, 1.0));
  EXPECT_NEAR(standard_normal_kl(mu, var).scalar(), 0.5, 1e-15);
}

TEST(Kl, MatchesMonteCarloEstimate) {
  Rng rng(18);
  for (int trial = 0; trial < 5; ++trial) {
    const double mq = uniform(rng, -1, 1), vq = uniform(rng, 0.2, 2), mp = uniform(rng, -1, 1),
                 vp = uniform(rng, 0.2, 2);
    // E_q[log q(x) - log p(x)] estimated from 1e6 samples of q.
    const int n = 1000000;
    double sum = 0.0, sum_sq = 0.0;
    for (int i = 0; i < n; ++i) {
      const double x = mq + std::sqrt(vq) * standard_normal(rng);
      const double lq = -0.5 * (std::log(2 * M_PI * vq) + (x - mq) * (x - mq) / vq);
      const double lp = -0.5 * (std::log(2 * M_PI * vp) + (x - mp) * (x - mp) / vp);
      sum += lq - lp;
      sum_sq += (lq - lp) * (lq - lp);
    }
    const double mean = sum / n;
    const double se = std::sqrt((sum_sq / n - mean * mean) / n);
    EXPECT_LE(std::abs(mean - gaussian_kl(mq, vq, mp, vp)), 3.0 * se + 1e-12);
  }
}

TEST(Elbo, KlTermsNonNegativeForRandomParameters) {
  Rng rng(19);
  for (int trial = 0; trial < 20; ++trial) {
    ReprModel m(tiny_repr_config(), 3, 4, static_cast<std::uint64_t>(trial));
    const ReprBatch b = random_batch(rng);
    Tape t;
    Var coarse = encode_coarse(t, m, t.constant(b.stacked));
    const PooledVars p = pool_actions(t, m, coarse, b.per_action);
    const ElboTerms e = hvae_elbo(t, m, t.constant(b.flat), p, b.per_action, static_cast<std::uint64_t>(trial));
    EXPECT_GE(e.kl_latent, 0.0);
    EXPECT_GE(e.kl_action, 0.0);
    EXPECT_NEAR(e.negative_elbo.scalar(), e.kl_latent + e.kl_action - e.log_likelihood, 1e-9);
  }
}

TEST(Elbo, NonFiniteInputIsNumericError) {
  ReprModel m(tiny_repr_config(), 3, 4, 1);
  Rng rng(20);
  ReprBatch b = random_batch(rng);
  b.flat(0, 0) = std::numeric_limits<double>::quiet_NaN();
  Tape t;
  Var coarse = encode_coarse(t, m, t.constant(b.stacked));
  const PooledVars p = pool_actions(t, m, coarse, b.per_action);
  try {
    hvae_elbo(t, m, t.constant(b.flat), p, b.per_action, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::numeric_error);
    EXPECT_NE(std::string(e.what()).find("kl_latent"), std::string::npos);
  }
}

// ---------------------------------------------------------------------------
// Overall loss

TEST(TotalLoss, ZeroWeightsGiveReconstructionOnly) {
  aglo::testing::GradientInstance g = aglo::testing::gradient_instance(3);
  Tape t1, t2;
  const ForwardPass full = total_loss(t1, g.model, g.batch, {0.0, 0.0}, {1, 2}, &g.graph);
  EXPECT_EQ(full.breakdown.total, full.breakdown.reconst);
  const ForwardPass weighted = total_loss(t2, g.model, g.batch, {0.3, 0.6}, {1, 2}, &g.graph);
  EXPECT_EQ(weighted.breakdown.reconst, full.breakdown.reconst);
  EXPECT_NEAR(weighted.breakdown.total,
              weighted.breakdown.reconst + 0.3 * weighted.breakdown.ce + 0.6 * weighted.breakdown.cont, 1e-10);
  Tape t3;
  EXPECT_THROW(total_loss(t3, g.model, g.batch, {-1.0, 0.0}, {1, 2}, &g.graph), Error);
}

TEST(Gradients, MatchFiniteDifferencesOnTenInstances) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const aglo::testing::ReprGradientErrors e = aglo::testing::repr_gradient_errors(seed);
    EXPECT_LE(e.cont, 1e-4) << "seed " << seed;
    EXPECT_LE(e.ce, 1e-4) << "seed " << seed;
    EXPECT_LE(e.reconst, 1e-4) << "seed " << seed;
    EXPECT_LE(e.total, 1e-4) << "seed " << seed;
  }
}

TEST(Gradients, BaselineModelsMatchFiniteDifferences) {
  for (ModelKind kind : {ModelKind::hvae, ModelKind::vae}) {
    ReprConfig cfg = tiny_repr_config();
    cfg.model = kind;
    ReprModel m(cfg, 3, 4, 7);
    Rng rng(21);
    const ReprBatch b = random_batch(rng);
    auto loss = [&](Tape& t) { return total_loss(t, m, b, active_weights(cfg), {3, 4}).total; };
    EXPECT_LE(aglo::testing::gradient_error(m.params, loss), 1e-4) << to_string(kind);
  }
}

// ---------------------------------------------------------------------------
// Training, checkpoints, inference

env::ObservationDataset toy_dataset(int actions = 4, int n = 3, int horizon = 8) {
  return env::build_dataset(env::sample_action_universe(actions, 1), n, horizon, 1, 2);
}

ReprConfig toy_config() {
  ReprConfig cfg = tiny_repr_config();
  cfg.epsilon = 0.9;
  cfg.num_negatives = 2;
  cfg.batch_actions = 4;
  cfg.epochs = 100;
  return cfg;
}

TEST(Training, DeterministicAndDecreasing) {
  const env::ObservationDataset ds = toy_dataset();
  const ReprConfig cfg = toy_config();
  const ReprTrainResult a = train_repr(ds, cfg, {.seed = 5});
  const ReprTrainResult b = train_repr(ds, cfg, {.seed = 5});
  ASSERT_EQ(a.history.size(), 100u);
  for (std::size_t i = 0; i < a.history.size(); ++i) EXPECT_EQ(a.history[i].loss.total, b.history[i].loss.total);
  // Per-epoch losses are sampled; compare ten-epoch windows.
  auto window = [&](std::size_t from) {
    double s = 0;
    for (std::size_t i = from; i < from + 10; ++i) s += a.history[i].loss.total;
    return s / 10;
  };
  EXPECT_LT(window(90), window(0));
  EXPECT_TRUE(a.model.params == b.model.params);
}

TEST(Training, LossHistoryCsvColumns) {
  const std::string csv = loss_history_csv({LossRow{0, {1.0, 0.5, 0.25, 0.125}}});
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,total,reconst,ce,cont");
  EXPECT_NE(csv.find("0,1,0.5,0.25,0.125"), std::string::npos);
}

TEST(Training, NeedsTwoActions) {
  EXPECT_THROW(train_repr(env::subset(toy_dataset(), std::vector<int>{0}), toy_config(), {}), Error);
}

TEST(Training, DivergenceReportsLastGoodCheckpoint) {
  env::ObservationDataset ds = toy_dataset();
  ds.arrays[1][5] = std::numeric_limits<float>::infinity();
  try {
    train_repr(ds, toy_config(), {.seed = 1});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::numeric_error);
    EXPECT_NE(std::string(e.what()).find("last good checkpoint"), std::string::npos);
  }
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const env::ObservationDataset ds = toy_dataset();
  ReprConfig cfg = toy_config();
  cfg.epochs = 3;
  const fs::path dir = fs::temp_directory_path() / "aglo_repr_ckpt";
  fs::create_directories(dir);
  ReprTrainOptions opts;
  opts.seed = 4;
  opts.checkpoint_path = dir / "a.ckpt";
  opts.config_echo = {{"epochs", 3}};
  train_repr(ds, cfg, opts);
  const Checkpoint loaded = Checkpoint::load(dir / "a.ckpt");
  loaded.save(dir / "b.ckpt");
  EXPECT_EQ(io::read_file(dir / "a.ckpt"), io::read_file(dir / "b.ckpt"));
  EXPECT_EQ(loaded.seed, 4u);
  EXPECT_EQ(loaded.config.at("epochs"), 3);

  ReprModel m = load_repr_model(loaded, cfg);
  nn::AdamOptimizer opt(m.params, {cfg.lr, 0.9, 0.999, 1e-8, true});
  loaded.get_optimizer("opt/", opt);
  make_repr_checkpoint(m, &opt, loaded.seed, opts.config_echo).save(dir / "c.ckpt");
  EXPECT_EQ(io::read_file(dir / "a.ckpt"), io::read_file(dir / "c.ckpt"));
}

TEST(Checkpoint, TruncatedFileIsFormatError) {
  Checkpoint c;
  c.kind = "repr";
  c.tensors["x"] = Mat::Ones(2, 2);
  const std::string bytes = c.serialize();
  try {
    Checkpoint::deserialize(bytes.substr(0, bytes.size() - 3), "mem");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::format_error);
  }
}

TEST(Inference, ReproducesTrainingTimePooling) {
  const env::ObservationDataset ds = toy_dataset();
  ReprConfig cfg = toy_config();
  cfg.epochs = 5;
  ReprTrainResult r = train_repr(ds, cfg, {.seed = 2});
  const ReprModel before = r.model;
  const InferenceResult inf = infer_embeddings(r.model, ds);
  EXPECT_TRUE(before.params == r.model.params);

  const ReprBatch batch = make_batch(ds, {0, 1, 2, 3});
  Tape t;
  const ForwardPass fp = total_loss(t, r.model, batch, {0.0, 0.0}, {0, 0});
  for (int a = 0; a < 4; ++a) {
    const ActionEmbeddingDist& e = inf.embeddings.at(ds.manifest.action_ids[static_cast<std::size_t>(a)]);
    EXPECT_TRUE(e.mean == fp.pooled.mean.value().row(a).transpose());
    EXPECT_TRUE(e.variance == fp.pooled.variance.value().row(a).transpose());
  }
}

TEST(Inference, SingleUnseenActionAndHorizonMismatch) {
  const env::ObservationDataset ds = toy_dataset();
  ReprConfig cfg = toy_config();
  cfg.epochs = 1;
  const ReprTrainResult r = train_repr(ds, cfg, {.seed = 2});
  const auto unseen = env::build_dataset(env::sample_action_universe(9, 3), 3, 8, 3, 2);
  const auto one = env::subset(unseen, std::vector<int>{7});
  const InferenceResult inf = infer_embeddings(r.model, one);
  EXPECT_EQ(inf.embeddings.size(), 1u);
  EXPECT_EQ(inf.refined.rows(), 3);
  EXPECT_TRUE(inf.embeddings.at(7).mean.allFinite());
  try {
    infer_embeddings(r.model, toy_dataset(4, 3, 9));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::config_mismatch);
  }
}

}  // namespace
