#include <gtest/gtest.h>

#include <set>

#include "aglo/evalsuite.hpp"

namespace aglo {
namespace {

using eval::ActionSplit;

std::vector<int> iota_ids(int n) {
  std::vector<int> v(static_cast<std::size_t>(n));
  std::iota(v.begin(), v.end(), 0);
  return v;
}

void expect_partition(const ActionSplit& s, const std::vector<int>& universe) {
  std::multiset<int> all;
  for (const auto* v : {&s.train, &s.val, &s.test}) all.insert(v->begin(), v->end());
  EXPECT_EQ(all, std::multiset<int>(universe.begin(), universe.end()));
}

TEST(Split, SixteenActionsGiveEightFourFour) {
  const ActionSplit s = eval::split_actions(iota_ids(16), {0.5, 0.25, 0.25}, 3);
  EXPECT_EQ(s.train.size(), 8u);
  EXPECT_EQ(s.val.size(), 4u);
  EXPECT_EQ(s.test.size(), 4u);
  const ActionSplit desk = eval::split_actions(iota_ids(32), {0.5, 0.25, 0.25}, 3);
  EXPECT_EQ(desk.train.size(), 16u);
  EXPECT_EQ(desk.test.size(), 8u);
}

TEST(Split, RemainderGoesToTrainFirst) {
  const ActionSplit s = eval::split_actions(iota_ids(7), {0.5, 0.25, 0.25}, 0);
  EXPECT_EQ(s.train.size(), 4u);
  EXPECT_EQ(s.val.size(), 2u);
  EXPECT_EQ(s.test.size(), 1u);
}

TEST(Split, DeterministicAndSeedSensitive) {
  EXPECT_EQ(eval::split_actions(iota_ids(32), {0.5, 0.25, 0.25}, 11),
            eval::split_actions(iota_ids(32), {0.5, 0.25, 0.25}, 11));
  EXPECT_NE(eval::split_actions(iota_ids(32), {0.5, 0.25, 0.25}, 11).train,
            eval::split_actions(iota_ids(32), {0.5, 0.25, 0.25}, 12).train);
}

TEST(Split, InputOrderDoesNotMatter) {
  std::vector<int> rev = iota_ids(20);
  std::reverse(rev.begin(), rev.end());
  EXPECT_EQ(eval::split_actions(rev, {0.5, 0.25, 0.25}, 5), eval::split_actions(iota_ids(20), {0.5, 0.25, 0.25}, 5));
}

TEST(Split, PartitionLawForManySeedsAndSizes) {
  for (int n = 4; n <= 40; n += 3)
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const std::vector<int> u = iota_ids(n);
      expect_partition(eval::split_actions(u, {0.5, 0.25, 0.25}, seed), u);
      expect_partition(eval::split_actions(u, {0.6, 0.4, 0.0}, seed), u);
    }
}

TEST(Split, Errors) {
  const auto expect_kind = [](auto&& fn, ErrorKind kind) {
    try {
      fn();
      ADD_FAILURE() << "no throw";
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), kind);
    }
  };
  expect_kind([] { eval::split_actions(iota_ids(8), {0.5, 0.25, 0.2}, 0); }, ErrorKind::invalid_argument);
  expect_kind([] { eval::split_actions(iota_ids(3), {0.5, 0.25, 0.25}, 0); }, ErrorKind::invalid_argument);
  expect_kind([] { eval::split_actions(iota_ids(8), {1.25, -0.25, 0.0}, 0); }, ErrorKind::invalid_argument);
  // Within the 1e-9 tolerance is accepted.
  EXPECT_NO_THROW(eval::split_actions(iota_ids(8), {0.5 + 5e-10, 0.25, 0.25}, 0));
}

TEST(Split, JsonRoundTrip) {
  const ActionSplit s = eval::split_actions(iota_ids(12), {0.5, 0.25, 0.25}, 9);
  EXPECT_EQ(eval::split_from_json(eval::to_json(s)), s);
}

TEST(Leakage, AuditFlagsHeldOutIds) {
  EXPECT_NO_THROW(eval::audit_ids({0, 1, 2}, {3, 4}, "dataset"));
  try {
    eval::audit_ids({0, 4, 2}, {3, 4}, "dataset");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::leakage_error);
    EXPECT_NE(std::string(e.what()).find("action 4"), std::string::npos);
  }
}

TEST(Returns, HandExample) {
  EXPECT_DOUBLE_EQ(eval::discounted_return({1.0, 1.0, 1.0}, 0.5), 1.75);
  EXPECT_EQ(eval::discounted_return({}, 0.99), 0.0);
  EXPECT_EQ(eval::discounted_return({2.5}, 0.0), 2.5);
}

TEST(Returns, AgreesWithNestedForm) {
  Rng rng = make_rng(1, 0);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> r(1 + uniform_index(rng, 30));
    for (double& x : r) x = uniform(rng, -1.0, 5.0);
    double nested = 0.0;
    for (auto it = r.rbegin(); it != r.rend(); ++it) nested = *it + 0.99 * nested;
    EXPECT_NEAR(eval::discounted_return(r, 0.99), nested, 1e-12);
  }
}

TEST(Summary, PopulationStd) {
  const eval::Summary s = eval::summarize({1.0, 3.0});
  EXPECT_DOUBLE_EQ(s.mean, 2.0);
  EXPECT_DOUBLE_EQ(s.std, 1.0);
  EXPECT_EQ(eval::summarize({4.0}).std, 0.0);
}

// A random policy over a small universe, enough to exercise the protocol.
struct EvalFixture {
  std::vector<env::ToolSpec> tools = env::sample_action_universe(12, 4);
  ActionSplit split = eval::split_actions(iota_ids(12), {0.5, 0.25, 0.25}, 2);
  std::map<int, repr::ActionEmbeddingDist> embeddings;
  policy::PolicyModel model;
  eval::EvalSettings settings;

  EvalFixture() : model(small_config(), static_cast<int>(env::kFeatureDim), 6, 17) {
    Rng rng = make_rng(8, 0);
    for (const env::ToolSpec& t : tools) {
      repr::ActionEmbeddingDist d;
      d.mean = Eigen::VectorXd::NullaryExpr(6, [&] { return standard_normal(rng); });
      d.variance = Eigen::VectorXd::NullaryExpr(6, [&] { return uniform(rng, 0.01, 0.2); });
      embeddings[t.tool_id] = d;
    }
    settings.episodes = 10;
    settings.runs = 2;
    settings.k = 3;
    settings.seed = 21;
  }

  static policy::PolicyConfig small_config() {
    policy::PolicyConfig c;
    c.hidden = 8;
    c.utility_hidden = 8;
    return c;
  }

  std::vector<env::ToolSpec> tools_of(const std::vector<int>& ids) const {
    std::vector<env::ToolSpec> out;
    for (int id : ids) out.push_back(tools[static_cast<std::size_t>(id)]);
    return out;
  }

  std::map<int, repr::ActionEmbeddingDist> embeddings_of(const std::vector<int>& ids) const {
    std::map<int, repr::ActionEmbeddingDist> out;
    for (int id : ids) out[id] = embeddings.at(id);
    return out;
  }

  eval::MetricReport run(const std::string& split_name) {
    const std::vector<int>& ids = split.by_name(split_name);
    return eval::evaluate(model, tools_of(ids), embeddings_of(ids), settings, split_name);
  }
};

TEST(Evaluate, ShapeAndSplitDiscipline) {
  EvalFixture f;
  const eval::MetricReport r = f.run("test");
  ASSERT_EQ(r.episodes.size(), 20u);
  ASSERT_EQ(r.runs.size(), 2u);
  const std::set<int> test(f.split.test.begin(), f.split.test.end());
  for (const eval::EpisodeResult& e : r.episodes) {
    EXPECT_EQ(e.action_ids.size(), 3u);
    for (int id : e.action_ids) EXPECT_TRUE(test.count(id));
    for (int id : e.chosen_ids) EXPECT_TRUE(test.count(id));
    EXPECT_EQ(e.rewards.size(), e.chosen_ids.size());
    EXPECT_LE(e.rewards.size(), static_cast<std::size_t>(f.settings.env.horizon));
  }
  for (const eval::RunAggregate& a : r.runs) {
    EXPECT_GE(a.target_hit_pct, 0.0);
    EXPECT_LE(a.target_hit_pct, 100.0);
    EXPECT_GE(a.goal_hit_pct, 0.0);
    EXPECT_LE(a.goal_hit_pct, 100.0);
  }
}

TEST(Evaluate, ValAndTestUseDisjointActions) {
  EvalFixture f;
  f.settings.k = 2;
  std::set<int> val_ids, test_ids;
  for (const auto& e : f.run("val").episodes) val_ids.insert(e.action_ids.begin(), e.action_ids.end());
  for (const auto& e : f.run("test").episodes) test_ids.insert(e.action_ids.begin(), e.action_ids.end());
  for (int id : val_ids) EXPECT_FALSE(test_ids.count(id));
}

TEST(Evaluate, SplitSmallerThanKIsRejected) {
  EvalFixture f;
  f.settings.k = 4;
  try {
    f.run("test");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::invalid_argument);
  }
}

TEST(Evaluate, SameSeedsSerializeIdentically) {
  EvalFixture a, b;
  EXPECT_EQ(eval::to_json(a.run("test")).dump(), eval::to_json(b.run("test")).dump());
  EvalFixture c;
  c.settings.seed = 22;
  EXPECT_NE(eval::to_json(a.run("test")).dump(), eval::to_json(c.run("test")).dump());
}

TEST(Evaluate, AggregatesRecomputeExactly) {
  EvalFixture f;
  const eval::MetricReport r = f.run("train");
  // Independent recomputation straight from the per-episode records.
  for (std::size_t run = 0; run < r.runs.size(); ++run) {
    double th = 0, gh = 0, rw = 0;
    int n = 0;
    for (const auto& e : r.episodes)
      if (e.run == static_cast<int>(run)) {
        th += e.target_hit ? 1.0 : 0.0;
        gh += e.goal_hit ? 1.0 : 0.0;
        rw += e.discounted_return;
        ++n;
      }
    EXPECT_EQ(r.runs[run].target_hit_pct, th * (100.0 / n));
    EXPECT_EQ(r.runs[run].goal_hit_pct, gh * (100.0 / n));
    EXPECT_EQ(r.runs[run].mean_reward, rw / n);
  }
  const double m = (r.runs[0].mean_reward + r.runs[1].mean_reward) / 2.0;
  EXPECT_EQ(r.reward.mean, m);
}

TEST(Evaluate, ReturnsMatchFoldOverRecords) {
  EvalFixture f;
  const eval::MetricReport r = f.run("train");
  for (const auto& e : r.episodes) {
    double fold = 0.0, g = 1.0;
    for (double x : e.rewards) {
      fold += g * x;
      g *= r.gamma;
    }
    EXPECT_EQ(e.discounted_return, fold);
  }
}

TEST(Evaluate, RewardsReplayThroughTheEnvironment) {
  EvalFixture f;
  const eval::MetricReport r = f.run("train");
  policy::ToolTaskEnv task(f.tools_of(f.split.train), f.settings.k, f.settings.env);
  for (const auto& e : r.episodes) {
    EXPECT_EQ(task.reset(e.seed), e.action_ids);
    // Greedy play is deterministic, so a replay reproduces the rewards.
    eval::EpisodeRollout ro = eval::play_episode(f.model, task, f.embeddings_of(f.split.train), e.seed, f.settings);
    EXPECT_EQ(ro.result.rewards, e.rewards);
    ASSERT_EQ(ro.record.steps.size(), e.rewards.size());
    for (std::size_t t = 0; t < e.rewards.size(); ++t) EXPECT_EQ(ro.record.steps[t].reward, e.rewards[t]);
  }
}

TEST(Evaluate, JsonRoundTripAndSchemaVersion) {
  EvalFixture f;
  const eval::MetricReport r = f.run("test");
  const nlohmann::json j = eval::to_json(r);
  EXPECT_EQ(j.at("schema_version"), eval::kMetricSchemaVersion);
  EXPECT_EQ(eval::to_json(eval::report_from_json(j)).dump(), j.dump());
  nlohmann::json bad = j;
  bad["schema_version"] = 9;
  try {
    eval::report_from_json(bad);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::schema_error);
  }
}

TEST(Probe, PureAndSplitDisciplined) {
  EvalFixture f;
  const eval::ProbeSet probes = eval::make_probe_set(6, 4);
  auto probe = [&] {
    return eval::learning_probe(f.model, probes, f.tools_of(f.split.train), f.embeddings_of(f.split.train),
                                f.tools_of(f.split.test), f.embeddings_of(f.split.test), f.settings, 0);
  };
  const auto a = probe(), b = probe();
  EXPECT_EQ(eval::curves_csv({a[0], a[1]}), eval::curves_csv({b[0], b[1]}));
  EXPECT_EQ(a[0].split, "train");
  EXPECT_EQ(a[1].split, "test");
  EXPECT_GT(a[0].entropy, 0.0);
  EXPECT_LE(a[0].entropy, std::log(3.0) + 1e-12);
  // Test episodes never see train actions: embeddings for train ids are absent.
  EXPECT_THROW(eval::probe_split(f.model, f.tools_of(f.split.test), f.embeddings_of(f.split.train), probes.test_seeds,
                                 f.settings, 0, "test"),
               std::exception);
}

TEST(Probe, SeedsAreFixedAndDistinct) {
  const eval::ProbeSet p = eval::make_probe_set(200, 1);
  EXPECT_EQ(p.train_seeds.size(), 200u);
  EXPECT_EQ(p.test_seeds.size(), 200u);
  std::set<std::uint64_t> all(p.train_seeds.begin(), p.train_seeds.end());
  all.insert(p.test_seeds.begin(), p.test_seeds.end());
  EXPECT_EQ(all.size(), 400u);
  EXPECT_EQ(eval::make_probe_set(200, 1).test_seeds, p.test_seeds);
}

TEST(Curves, CsvRoundTripAndErrors) {
  std::vector<eval::CurvePoint> pts = {{0, -0.5, 0.25, 0.0, 1.9, "train"}, {0, -0.75, 0.125, 0.0, 2.0, "test"},
                                       {3072, 0.3, 0.5, 0.125, 1.5, "train"}};
  const std::string csv = eval::curves_csv(pts);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "env_steps,mean_return,target_hit_rate,goal_hit_rate,entropy,split");
  const auto back = eval::parse_curves_csv(csv, "x");
  ASSERT_EQ(back.size(), 3u);
  EXPECT_EQ(back[2].env_steps, 3072);
  EXPECT_EQ(back[1].mean_return, -0.75);
  EXPECT_EQ(eval::curves_csv(back), csv);
  for (const std::string& bad : {std::string(""), std::string(eval::kCurveHeader) + "\n",
                                std::string("a,b\n1,2\n"), std::string(eval::kCurveHeader) + "\n1,2,3\n"}) {
    try {
      eval::parse_curves_csv(bad, "curves.csv");
      ADD_FAILURE() << bad;
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::schema_error);
    }
  }
}

TEST(Ablation, SixRowFlagMatrix) {
  const auto v = eval::ablation_variants();
  ASSERT_EQ(v.size(), 6u);
  const std::vector<std::array<bool, 3>> flags = {{true, true, true},  {true, true, false}, {false, true, true},
                                                  {true, false, true}, {false, true, false}, {true, false, false}};
  std::set<std::string> names;
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(v[i].use_ce, flags[i][0]);
    EXPECT_EQ(v[i].use_cont, flags[i][1]);
    EXPECT_EQ(v[i].use_aug, flags[i][2]);
    EXPECT_EQ(v[i].model, repr::ModelKind::aglo);
    names.insert(v[i].name);
  }
  EXPECT_EQ(names.size(), 6u);
  const eval::Variant h = eval::hvae_baseline();
  EXPECT_FALSE(h.use_ce || h.use_cont || h.use_aug);
  EXPECT_EQ(h.model, repr::ModelKind::hvae);
  EXPECT_EQ(eval::vae_baseline().model, repr::ModelKind::vae);
}

TEST(Ablation, CsvMirrorsTableLayout) {
  std::vector<eval::AblationRow> rows;
  for (const eval::Variant& v : eval::ablation_variants()) {
    eval::AblationRow row{v, {}};
    for (double x : {1.0, 3.0}) {
      eval::MetricReport m;
      m.target_hit = {10 * x, 0};
      m.goal_hit = {x, 0};
      m.reward = {-x, 0};
      row.reports.push_back(m);
    }
    rows.push_back(row);
  }
  const std::string csv = eval::ablation_csv(rows);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 7);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), eval::kAblationHeader);
  EXPECT_NE(csv.find("ce+cont+aug,1,1,1,20.000000,10.000000,2.000000,1.000000,-2.000000,1.000000"),
            std::string::npos);
}

}  // namespace
}  // namespace aglo
