#pragma once

// Seen/unseen splits, zero-shot evaluation, learning-curve probes and the
// ablation table.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "aglo/common.hpp"
#include "aglo/envsim.hpp"
#include "aglo/policylearn.hpp"
#include "aglo/reprlearn.hpp"

namespace aglo::eval {

using repr::ActionEmbeddingDist;

// ---------------------------------------------------------------------------
// Splits

struct ActionSplit {
  std::vector<int> train;
  std::vector<int> val;
  std::vector<int> test;
  std::uint64_t seed = 0;

  friend bool operator==(const ActionSplit&, const ActionSplit&) = default;

  const std::vector<int>& by_name(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    fail(ErrorKind::invalid_argument, "unknown split '" + name + "' (expected train, val or test)");
  }
};

/// Seeded shuffle, then sizes floor(p * N) with the remainder handed out one
/// by one in train, val, test order.
inline ActionSplit split_actions(std::vector<int> universe, std::array<double, 3> proportions, std::uint64_t seed) {
  require(universe.size() >= 4, ErrorKind::invalid_argument, "universe must hold at least 4 actions");
  for (double p : proportions) require(p >= 0.0, ErrorKind::invalid_argument, "proportions must be non-negative");
  const double total = proportions[0] + proportions[1] + proportions[2];
  require(std::abs(total - 1.0) <= 1e-9, ErrorKind::invalid_argument,
          "split proportions sum to " + std::to_string(total) + ", expected 1");
  Rng rng = make_rng(seed, 0x5b1);
  std::sort(universe.begin(), universe.end());
  std::shuffle(universe.begin(), universe.end(), rng);
  const std::size_t n = universe.size();
  std::array<std::size_t, 3> sizes{};
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    sizes[i] = static_cast<std::size_t>(std::floor(proportions[i] * static_cast<double>(n) + 1e-9));
    assigned += sizes[i];
  }
  for (std::size_t i = 0; assigned < n; i = (i + 1) % 3)
    if (proportions[i] > 0.0) {
      ++sizes[i];
      ++assigned;
    }
  ActionSplit s;
  s.seed = seed;
  auto it = universe.begin();
  s.train.assign(it, it + static_cast<long>(sizes[0]));
  it += static_cast<long>(sizes[0]);
  s.val.assign(it, it + static_cast<long>(sizes[1]));
  it += static_cast<long>(sizes[1]);
  s.test.assign(it, universe.end());
  for (auto* v : {&s.train, &s.val, &s.test}) std::sort(v->begin(), v->end());
  return s;
}

inline nlohmann::json to_json(const ActionSplit& s) {
  return {{"train", s.train}, {"val", s.val}, {"test", s.test}, {"seed", s.seed}};
}

inline ActionSplit split_from_json(const nlohmann::json& j) {
  try {
    ActionSplit s;
    s.train = j.at("train").get<std::vector<int>>();
    s.val = j.at("val").get<std::vector<int>>();
    s.test = j.at("test").get<std::vector<int>>();
    s.seed = j.at("seed").get<std::uint64_t>();
    return s;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format_error, std::string("split file: ") + e.what());
  }
}

/// Throws leakage-error if any id in `seen` belongs to `forbidden`.
inline void audit_ids(const std::vector<int>& seen, const std::vector<int>& forbidden, const std::string& where) {
  const std::set<int> bad(forbidden.begin(), forbidden.end());
  for (int id : seen)
    if (bad.count(id))
      fail(ErrorKind::leakage_error, where + " contains action " + std::to_string(id) + " from the held-out split");
}

// ---------------------------------------------------------------------------
// Returns and metric reports

/// Sum of gamma^t r_t, accumulated front to back.
inline double discounted_return(const std::vector<double>& rewards, double gamma) {
  double total = 0.0, weight = 1.0;
  for (double r : rewards) {
    total += weight * r;
    weight *= gamma;
  }
  return total;
}

struct EpisodeResult {
  int run = 0;
  int episode = 0;
  std::uint64_t seed = 0;
  std::vector<int> action_ids;
  std::vector<int> chosen_ids;
  std::vector<double> rewards;
  bool target_hit = false;
  bool goal_hit = false;
  double discounted_return = 0.0;
};

struct RunAggregate {
  double target_hit_pct = 0.0;
  double goal_hit_pct = 0.0;
  double mean_reward = 0.0;
};

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation across runs
};

inline Summary summarize(const std::vector<double>& xs) {
  Summary s;
  if (xs.empty()) return s;
  for (double x : xs) s.mean += x;
  s.mean /= static_cast<double>(xs.size());
  double sq = 0.0;
  for (double x : xs) sq += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(sq / static_cast<double>(xs.size()));
  return s;
}

inline constexpr int kMetricSchemaVersion = 1;

struct MetricReport {
  std::string split;
  double gamma = 0.99;
  nlohmann::json config = nlohmann::json::object();
  std::vector<EpisodeResult> episodes;
  std::vector<RunAggregate> runs;
  Summary target_hit, goal_hit, reward;
};

/// Aggregates per run and across runs from the per-episode records.
inline void aggregate(MetricReport& r) {
  int num_runs = 0;
  for (const EpisodeResult& e : r.episodes) num_runs = std::max(num_runs, e.run + 1);
  r.runs.assign(static_cast<std::size_t>(num_runs), RunAggregate{});
  std::vector<int> counts(static_cast<std::size_t>(num_runs), 0);
  for (const EpisodeResult& e : r.episodes) {
    RunAggregate& a = r.runs[static_cast<std::size_t>(e.run)];
    a.target_hit_pct += e.target_hit ? 1.0 : 0.0;
    a.goal_hit_pct += e.goal_hit ? 1.0 : 0.0;
    a.mean_reward += e.discounted_return;
    ++counts[static_cast<std::size_t>(e.run)];
  }
  std::vector<double> th, gh, rw;
  for (std::size_t i = 0; i < r.runs.size(); ++i) {
    const double n = std::max(counts[i], 1);
    r.runs[i].target_hit_pct *= 100.0 / n;
    r.runs[i].goal_hit_pct *= 100.0 / n;
    r.runs[i].mean_reward /= n;
    th.push_back(r.runs[i].target_hit_pct);
    gh.push_back(r.runs[i].goal_hit_pct);
    rw.push_back(r.runs[i].mean_reward);
  }
  r.target_hit = summarize(th);
  r.goal_hit = summarize(gh);
  r.reward = summarize(rw);
}

inline nlohmann::json to_json(const MetricReport& r) {
  nlohmann::json eps = nlohmann::json::array();
  for (const EpisodeResult& e : r.episodes)
    eps.push_back({{"run", e.run},
                   {"episode", e.episode},
                   {"seed", e.seed},
                   {"action_ids", e.action_ids},
                   {"chosen_ids", e.chosen_ids},
                   {"rewards", e.rewards},
                   {"target_hit", e.target_hit},
                   {"goal_hit", e.goal_hit},
                   {"discounted_return", e.discounted_return}});
  nlohmann::json runs = nlohmann::json::array();
  for (const RunAggregate& a : r.runs)
    runs.push_back({{"target_hit_pct", a.target_hit_pct}, {"goal_hit_pct", a.goal_hit_pct}, {"mean_reward", a.mean_reward}});
  auto summary = [](const Summary& s) { return nlohmann::json{{"mean", s.mean}, {"std", s.std}}; };
  return {{"schema_version", kMetricSchemaVersion},
          {"split", r.split},
          {"gamma", r.gamma},
          {"config", r.config},
          {"episodes", eps},
          {"runs", runs},
          {"aggregate",
           {{"target_hit_pct", summary(r.target_hit)},
            {"goal_hit_pct", summary(r.goal_hit)},
            {"reward", summary(r.reward)}}}};
}

inline MetricReport report_from_json(const nlohmann::json& j) {
  try {
    const int version = j.at("schema_version").get<int>();
    if (version != kMetricSchemaVersion)
      fail(ErrorKind::schema_error, "metric report schema expected " + std::to_string(kMetricSchemaVersion) +
                                        ", found " + std::to_string(version));
    MetricReport r;
    r.split = j.at("split").get<std::string>();
    r.gamma = j.at("gamma").get<double>();
    r.config = j.at("config");
    for (const auto& e : j.at("episodes")) {
      EpisodeResult x;
      x.run = e.at("run").get<int>();
      x.episode = e.at("episode").get<int>();
      x.seed = e.at("seed").get<std::uint64_t>();
      x.action_ids = e.at("action_ids").get<std::vector<int>>();
      x.chosen_ids = e.at("chosen_ids").get<std::vector<int>>();
      x.rewards = e.at("rewards").get<std::vector<double>>();
      x.target_hit = e.at("target_hit").get<bool>();
      x.goal_hit = e.at("goal_hit").get<bool>();
      x.discounted_return = e.at("discounted_return").get<double>();
      r.episodes.push_back(std::move(x));
    }
    aggregate(r);
    return r;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::schema_error, std::string("metric report: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Rollouts under a fixed policy

struct EvalSettings {
  int episodes = 200;
  int runs = 3;
  int k = 8;
  bool greedy = true;
  bool eval_augmentation = false;
  double alpha = 0.4;
  double gamma = 0.99;
  std::uint64_t seed = 0;
  env::EnvConfig env{};
};

inline std::uint64_t episode_seed(std::uint64_t seed, int run, int episode) {
  return derive_seed(seed, 0xe7a1000000ULL + static_cast<std::uint64_t>(run) * 1000000ULL +
                               static_cast<std::uint64_t>(episode));
}

struct EpisodeRollout {
  EpisodeResult result;
  env::EpisodeRecord record;
  double mean_entropy = 0.0;
};

/// Plays one episode of `task` with the policy and records every transition.
inline EpisodeRollout play_episode(policy::PolicyModel& m, policy::ToolTaskEnv& task,
                                   const std::map<int, ActionEmbeddingDist>& embeddings, std::uint64_t seed,
                                   const EvalSettings& s) {
  EpisodeRollout out;
  const std::vector<int> ids = task.reset(seed);
  const std::vector<ActionEmbeddingDist> dists = policy::lookup(embeddings, ids);
  const policy::AugmentedActionSet set = s.eval_augmentation
                                             ? policy::augment_action_set(dists, s.alpha, derive_seed(seed, 2))
                                             : policy::mean_action_set(dists);
  Rng rng = make_rng(seed, 3);
  out.result.seed = seed;
  out.result.action_ids = ids;
  out.record.action_ids = ids;
  double entropy = 0.0;
  for (bool done = false; !done;) {
    env::Transition t;
    t.state = task.features();
    const policy::Decision d =
        policy::act(m, t.state, set, s.greedy ? policy::ActMode::greedy : policy::ActMode::sample, &rng);
    const policy::StepOutcome o = task.step(d.action, d.placement);
    t.action = env::EnvAction{d.action, d.placement, false};
    t.reward = o.reward;
    t.next_state = task.features();
    out.record.steps.push_back(std::move(t));
    out.result.rewards.push_back(o.reward);
    out.result.chosen_ids.push_back(ids[static_cast<std::size_t>(d.action)]);
    entropy += policy::entropy(d.probs);
    done = o.done;
  }
  out.result.target_hit = out.record.target_hit = task.target_hit();
  out.result.goal_hit = out.record.goal_hit = task.goal_hit();
  out.result.discounted_return = out.record.discounted_return = discounted_return(out.result.rewards, s.gamma);
  out.mean_entropy = entropy / static_cast<double>(out.result.rewards.size());
  return out;
}

/// Zero-shot evaluation: every episode samples K actions of the split, whose
/// embeddings were inferred from their observations.
inline MetricReport evaluate(policy::PolicyModel& m, const std::vector<env::ToolSpec>& split_tools,
                             const std::map<int, ActionEmbeddingDist>& embeddings, const EvalSettings& s,
                             const std::string& split_name = "test") {
  require(static_cast<int>(split_tools.size()) >= s.k, ErrorKind::invalid_argument,
          split_name + " split holds " + std::to_string(split_tools.size()) + " actions, fewer than K=" +
              std::to_string(s.k));
  require(s.episodes >= 1 && s.runs >= 1, ErrorKind::invalid_argument, "episodes and runs must be >= 1");
  policy::ToolTaskEnv task(split_tools, s.k, s.env);
  MetricReport r;
  r.split = split_name;
  r.gamma = s.gamma;
  for (int run = 0; run < s.runs; ++run)
    for (int e = 0; e < s.episodes; ++e) {
      EpisodeRollout ro = play_episode(m, task, embeddings, episode_seed(s.seed, run, e), s);
      ro.result.run = run;
      ro.result.episode = e;
      r.episodes.push_back(std::move(ro.result));
    }
  aggregate(r);
  return r;
}

// ---------------------------------------------------------------------------
// Learning-curve probes

struct CurvePoint {
  long env_steps = 0;
  double mean_return = 0.0;
  double target_hit_rate = 0.0;
  double goal_hit_rate = 0.0;
  double entropy = 0.0;
  std::string split;
};

/// Fixed train and test episode sets, drawn once at experiment start.
struct ProbeSet {
  std::vector<std::uint64_t> train_seeds;
  std::vector<std::uint64_t> test_seeds;
};

inline ProbeSet make_probe_set(int episodes, std::uint64_t seed) {
  ProbeSet p;
  for (int i = 0; i < episodes; ++i) {
    p.train_seeds.push_back(derive_seed(seed, 0x9e0000 + static_cast<std::uint64_t>(i)));
    p.test_seeds.push_back(derive_seed(seed, 0x9f0000 + static_cast<std::uint64_t>(i)));
  }
  return p;
}

inline CurvePoint probe_split(policy::PolicyModel& m, const std::vector<env::ToolSpec>& tools,
                              const std::map<int, ActionEmbeddingDist>& embeddings,
                              const std::vector<std::uint64_t>& seeds, const EvalSettings& s, long env_steps,
                              const std::string& split) {
  policy::ToolTaskEnv task(tools, s.k, s.env);
  CurvePoint c;
  c.env_steps = env_steps;
  c.split = split;
  for (std::uint64_t seed : seeds) {
    const EpisodeRollout ro = play_episode(m, task, embeddings, seed, s);
    c.mean_return += ro.result.discounted_return;
    c.target_hit_rate += ro.result.target_hit ? 1.0 : 0.0;
    c.goal_hit_rate += ro.result.goal_hit ? 1.0 : 0.0;
    c.entropy += ro.mean_entropy;
  }
  const double n = static_cast<double>(std::max<std::size_t>(seeds.size(), 1));
  c.mean_return /= n;
  c.target_hit_rate /= n;
  c.goal_hit_rate /= n;
  c.entropy /= n;
  return c;
}

/// One train row (seen actions) and one test row (unseen actions).
inline std::array<CurvePoint, 2> learning_probe(policy::PolicyModel& m, const ProbeSet& probes,
                                                const std::vector<env::ToolSpec>& train_tools,
                                                const std::map<int, ActionEmbeddingDist>& train_embeddings,
                                                const std::vector<env::ToolSpec>& test_tools,
                                                const std::map<int, ActionEmbeddingDist>& test_embeddings,
                                                const EvalSettings& s, long env_steps) {
  return {probe_split(m, train_tools, train_embeddings, probes.train_seeds, s, env_steps, "train"),
          probe_split(m, test_tools, test_embeddings, probes.test_seeds, s, env_steps, "test")};
}

inline const char* kCurveHeader = "env_steps,mean_return,target_hit_rate,goal_hit_rate,entropy,split";

inline std::string curves_csv(const std::vector<CurvePoint>& points) {
  std::string out = std::string(kCurveHeader) + "\n";
  char buf[256];
  for (const CurvePoint& c : points) {
    std::snprintf(buf, sizeof buf, "%ld,%.17g,%.17g,%.17g,%.17g,%s\n", c.env_steps, c.mean_return, c.target_hit_rate,
                  c.goal_hit_rate, c.entropy, c.split.c_str());
    out += buf;
  }
  return out;
}

inline std::vector<CurvePoint> parse_curves_csv(const std::string& text, const std::string& context) {
  std::vector<CurvePoint> out;
  std::size_t pos = 0;
  auto next_line = [&](std::string& line) {
    if (pos >= text.size()) return false;
    const std::size_t end = text.find('\n', pos);
    line = text.substr(pos, end == std::string::npos ? std::string::npos : end - pos);
    pos = end == std::string::npos ? text.size() : end + 1;
    return true;
  };
  std::string line;
  if (!next_line(line) || line != kCurveHeader)
    fail(ErrorKind::schema_error, context + ": expected header '" + kCurveHeader + "'");
  int row = 1;
  while (next_line(line)) {
    ++row;
    if (line.empty()) continue;
    CurvePoint c;
    char split[32] = {0};
    if (std::sscanf(line.c_str(), "%ld,%lf,%lf,%lf,%lf,%31s", &c.env_steps, &c.mean_return, &c.target_hit_rate,
                    &c.goal_hit_rate, &c.entropy, split) != 6)
      fail(ErrorKind::schema_error, context + ": malformed row " + std::to_string(row));
    c.split = split;
    if (c.split != "train" && c.split != "test")
      fail(ErrorKind::schema_error, context + ": row " + std::to_string(row) + " has split '" + c.split + "'");
    out.push_back(c);
  }
  if (out.empty()) fail(ErrorKind::schema_error, context + ": no curve rows");
  return out;
}

// ---------------------------------------------------------------------------
// Ablation matrix

struct Variant {
  std::string name;
  bool use_ce = true;
  bool use_cont = true;
  bool use_aug = true;
  repr::ModelKind model = repr::ModelKind::aglo;
};

/// The six flag rows of the ablation table, all on the graph-refined model.
inline std::vector<Variant> ablation_variants() {
  return {{"ce+cont+aug", true, true, true, repr::ModelKind::aglo},
          {"ce+cont", true, true, false, repr::ModelKind::aglo},
          {"cont+aug", false, true, true, repr::ModelKind::aglo},
          {"ce+aug", true, false, true, repr::ModelKind::aglo},
          {"cont", false, true, false, repr::ModelKind::aglo},
          {"ce", true, false, false, repr::ModelKind::aglo}};
}

inline Variant hvae_baseline() { return {"hvae", false, false, false, repr::ModelKind::hvae}; }
inline Variant vae_baseline() { return {"vae", false, false, false, repr::ModelKind::vae}; }

struct AblationRow {
  Variant variant;
  std::vector<MetricReport> reports;  // one per seed
};

inline const char* kAblationHeader =
    "variant,use_ce,use_cont,use_aug,target_hit_mean,target_hit_std,goal_hit_mean,goal_hit_std,reward_mean,reward_std";

/// Mean and std across seeds of each seed's run-averaged metrics.
inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = std::string(kAblationHeader) + "\n";
  char buf[512];
  for (const AblationRow& r : rows) {
    std::vector<double> th, gh, rw;
    for (const MetricReport& m : r.reports) {
      th.push_back(m.target_hit.mean);
      gh.push_back(m.goal_hit.mean);
      rw.push_back(m.reward.mean);
    }
    const Summary a = summarize(th), b = summarize(gh), c = summarize(rw);
    std::snprintf(buf, sizeof buf, "%s,%d,%d,%d,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", r.variant.name.c_str(),
                  r.variant.use_ce ? 1 : 0, r.variant.use_cont ? 1 : 0, r.variant.use_aug ? 1 : 0, a.mean, a.std,
                  b.mean, b.std, c.mean, c.std);
    out += buf;
  }
  return out;
}

}  // namespace aglo::eval
