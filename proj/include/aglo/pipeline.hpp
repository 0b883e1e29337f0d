#pragma once

// Stage functions shared by the command-line tool and the acceptance suite:
// universe and split, observation datasets, representation training,
// embedding export, policy training with probes, evaluation, variants.

#include <chrono>
#include <filesystem>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "aglo/binary_io.hpp"
#include "aglo/checkpoint.hpp"
#include "aglo/config.hpp"
#include "aglo/envsim.hpp"
#include "aglo/evalsuite.hpp"
#include "aglo/policylearn.hpp"
#include "aglo/reprlearn.hpp"

namespace aglo::pipeline {

namespace fs = std::filesystem;
using config::ExperimentConfig;
using config::Stage;
using EmbeddingMap = std::map<int, repr::ActionEmbeddingDist>;

inline constexpr const char* kCodeVersion = "aglo 0.1.0";

// ---------------------------------------------------------------------------
// Universe, split, datasets

struct Universe {
  std::vector<env::ToolSpec> tools;  // indexed by tool_id
  eval::ActionSplit split;

  std::vector<env::ToolSpec> tools_of(const std::vector<int>& ids) const {
    std::vector<env::ToolSpec> out;
    for (int id : ids) out.push_back(tools.at(static_cast<std::size_t>(id)));
    return out;
  }
};

inline Universe make_universe(const ExperimentConfig& c) {
  Universe u;
  u.tools = env::sample_action_universe(c.integer32("env.num_actions"), c.seed("universe"));
  std::vector<int> ids;
  for (const env::ToolSpec& t : u.tools) ids.push_back(t.tool_id);
  u.split = eval::split_actions(ids, config::split_proportions(c), c.seed("split"));
  return u;
}

struct DataSets {
  env::ObservationDataset train, val, test;
  env::ObservationDataset heldout;  // further observations of the train actions
};

inline env::ObservationDataset observations_for(const ExperimentConfig& c, const Universe& u,
                                                const std::vector<int>& ids, int n, int first_ic) {
  const std::vector<env::ToolSpec> tools = u.tools_of(ids);
  return env::build_dataset(tools, n, c.integer32("env.obs_horizon"), c.seed("universe"), c.seed("dataset"), first_ic);
}

inline DataSets make_datasets(const ExperimentConfig& c, const Universe& u) {
  const int n = c.integer32("env.obs_per_action");
  DataSets d;
  d.train = observations_for(c, u, u.split.train, n, 0);
  d.val = observations_for(c, u, u.split.val, n, 0);
  d.test = observations_for(c, u, u.split.test, n, 0);
  const int m = c.integer32("env.heldout_obs_per_action");
  if (m > 0) d.heldout = observations_for(c, u, u.split.train, m, n);
  return d;
}

/// Raises leakage-error unless `ds` holds train-split actions only.
inline void audit_training_dataset(const env::ObservationDataset& ds, const eval::ActionSplit& split,
                                   const std::string& where) {
  std::vector<int> held_out = split.test;
  held_out.insert(held_out.end(), split.val.begin(), split.val.end());
  eval::audit_ids(ds.manifest.action_ids, held_out, where);
}

// ---------------------------------------------------------------------------
// Representation stage

inline nlohmann::json stage_echo(const ExperimentConfig& c, Stage stage) {
  nlohmann::json j = c.to_json(stage);
  j["stage_hash"] = c.hash(stage);
  return j;
}

struct ReprStage {
  repr::ReprTrainResult trained;
  double heldout_accuracy = std::numeric_limits<double>::quiet_NaN();
  double chance = 0.0;
};

inline ReprStage run_repr(const ExperimentConfig& c, const env::ObservationDataset& train, const eval::ActionSplit& split,
                          const env::ObservationDataset* heldout = nullptr,
                          const std::optional<fs::path>& checkpoint = std::nullopt,
                          std::function<void(const repr::LossRow&)> on_epoch = {}) {
  audit_training_dataset(train, split, "representation training dataset");
  repr::ReprTrainOptions o;
  o.seed = c.seed("repr");
  o.checkpoint_path = checkpoint;
  o.config_echo = stage_echo(c, Stage::repr);
  o.config_echo["trained_action_ids"] = train.manifest.action_ids;
  o.on_epoch = std::move(on_epoch);
  ReprStage s{repr::train_repr(train, config::repr_config(c), o)};
  const int batch = std::min<int>(c.integer32("repr.batch_actions"), static_cast<int>(train.num_actions()));
  s.chance = 1.0 / batch;
  if (heldout && heldout->num_actions() > 0 && s.trained.model.config.model == repr::ModelKind::aglo)
    s.heldout_accuracy = repr::classifier_accuracy(s.trained.model, *heldout, s.trained.trained_action_ids);
  return s;
}

/// Checks that a stored stage hash matches the active config.
inline void check_stage_hash(const nlohmann::json& echo, const ExperimentConfig& c, Stage stage,
                             const std::string& what) {
  const std::string expected = c.hash(stage);
  const std::string found = echo.value("stage_hash", std::string("<missing>"));
  if (found != expected)
    fail(ErrorKind::config_mismatch, what + " was produced under config hash " + found +
                                         " but the active config hashes to " + expected);
}

inline repr::ReprModel load_repr(const fs::path& path, const ExperimentConfig& c) {
  const Checkpoint ckpt = Checkpoint::load(path);
  check_stage_hash(ckpt.config, c, Stage::repr, "representation checkpoint " + path.string());
  return repr::load_repr_model(ckpt, config::repr_config(c));
}

inline EmbeddingMap embed(const repr::ReprModel& m, const env::ObservationDataset& ds) {
  return repr::infer_embeddings(m, ds).embeddings;
}

inline nlohmann::json embeddings_json(const EmbeddingMap& e) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [id, d] : e) {
    std::vector<double> mu(d.mean.data(), d.mean.data() + d.mean.size());
    std::vector<double> var(d.variance.data(), d.variance.data() + d.variance.size());
    j[std::to_string(id)] = {{"mean", mu}, {"variance", var}};
  }
  return j;
}

// ---------------------------------------------------------------------------
// Policy stage

/// Forwards to a task and records every action id it hands out.
class RecordingEnv : public policy::Environment {
 public:
  explicit RecordingEnv(policy::Environment& inner) : inner_(inner) {}
  int feature_dim() const override { return inner_.feature_dim(); }
  std::vector<int> reset(std::uint64_t seed) override {
    std::vector<int> ids = inner_.reset(seed);
    seen_.insert(ids.begin(), ids.end());
    return ids;
  }
  std::vector<double> features() const override { return inner_.features(); }
  policy::StepOutcome step(int slot, env::Vec2 p) override { return inner_.step(slot, p); }
  bool target_hit() const override { return inner_.target_hit(); }
  bool goal_hit() const override { return inner_.goal_hit(); }
  bool uses_placement() const override { return inner_.uses_placement(); }
  std::vector<int> seen() const { return {seen_.begin(), seen_.end()}; }

 private:
  policy::Environment& inner_;
  std::set<int> seen_;
};

struct PolicyStage {
  policy::PolicyTrainResult trained;
  std::vector<eval::CurvePoint> curves;
  std::vector<int> rollout_action_ids;
};

inline PolicyStage run_policy(const ExperimentConfig& c, const Universe& u, const EmbeddingMap& train_embeddings,
                              const EmbeddingMap& test_embeddings,
                              const std::optional<fs::path>& checkpoint = std::nullopt,
                              std::function<void(const policy::UpdateLog&)> on_update = {}) {
  const int k = c.integer32("env.k");
  require(static_cast<int>(u.split.train.size()) >= k, ErrorKind::invalid_argument,
          "train split holds " + std::to_string(u.split.train.size()) + " actions, fewer than env.k=" +
              std::to_string(k));
  for (const auto& [id, _] : train_embeddings)
    eval::audit_ids({id}, u.split.test, "policy training embeddings");
  const eval::EvalSettings probe_settings = config::eval_settings(c);
  const std::vector<env::ToolSpec> train_tools = u.tools_of(u.split.train);
  const std::vector<env::ToolSpec> test_tools = u.tools_of(u.split.test);
  const bool probe_test = static_cast<int>(test_tools.size()) >= k && !test_embeddings.empty();
  const eval::ProbeSet probes = eval::make_probe_set(c.integer32("eval.probe_episodes"), derive_seed(c.seed("policy"), 0x9b));

  PolicyStage s;
  policy::ToolTaskEnv task(train_tools, k, config::env_config(c));
  RecordingEnv recording(task);
  policy::PolicyTrainOptions o;
  o.seed = c.seed("policy");
  o.checkpoint_path = checkpoint;
  o.config_echo = stage_echo(c, Stage::policy);
  o.config_echo["train_action_ids"] = u.split.train;
  o.probe_every = c.integer32("policy.probe_every");
  o.on_update = std::move(on_update);
  o.probe = [&](long steps, policy::PolicyModel& m) {
    s.curves.push_back(eval::probe_split(m, train_tools, train_embeddings, probes.train_seeds, probe_settings, steps,
                                         "train"));
    if (probe_test)
      s.curves.push_back(eval::probe_split(m, test_tools, test_embeddings, probes.test_seeds, probe_settings, steps,
                                           "test"));
  };
  s.trained = policy::train_policy(recording, train_embeddings, config::policy_config(c), o);
  s.rollout_action_ids = recording.seen();
  eval::audit_ids(s.rollout_action_ids, u.split.test, "policy rollouts");
  return s;
}

inline policy::PolicyModel load_policy(const fs::path& path, const ExperimentConfig& c) {
  const Checkpoint ckpt = Checkpoint::load(path);
  check_stage_hash(ckpt.config, c, Stage::policy, "policy checkpoint " + path.string());
  return policy::load_policy_model(ckpt, config::policy_config(c));
}

inline std::string updates_csv(const std::vector<policy::UpdateLog>& logs) {
  std::string out = "env_steps,episodes,mean_return,target_hit_rate,goal_hit_rate,entropy,policy_loss,value_loss,clip_fraction\n";
  char buf[512];
  for (const policy::UpdateLog& l : logs) {
    std::snprintf(buf, sizeof buf, "%ld,%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", l.env_steps, l.episodes,
                  l.mean_return, l.target_hit_rate, l.goal_hit_rate, l.entropy, l.policy_loss, l.value_loss,
                  l.clip_fraction);
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

inline eval::MetricReport run_eval(const ExperimentConfig& c, policy::PolicyModel& m, const Universe& u,
                                   const EmbeddingMap& embeddings, const std::string& split_name) {
  eval::MetricReport r =
      eval::evaluate(m, u.tools_of(u.split.by_name(split_name)), embeddings, config::eval_settings(c), split_name);
  r.config = stage_echo(c, Stage::eval);
  return r;
}

// ---------------------------------------------------------------------------
// Variants

/// The base config with a variant's flags and the seeds of run `seed_index`.
/// Repr, policy and eval seeds move with the index; the universe, datasets
/// and split stay shared.
inline ExperimentConfig variant_config(ExperimentConfig c, const eval::Variant& v, int seed_index) {
  c.set("repr.model", repr::to_string(v.model), "variant " + v.name);
  c.set("repr.use_ce", v.use_ce ? "true" : "false", "variant " + v.name);
  c.set("repr.use_cont", v.use_cont ? "true" : "false", "variant " + v.name);
  c.set("policy.use_augmentation", v.use_aug ? "true" : "false", "variant " + v.name);
  for (const char* s : {"repr", "policy", "eval"})
    c.set(std::string("seeds.") + s, std::to_string(c.seed(s) + 1000 * static_cast<std::uint64_t>(seed_index)),
          "variant seed");
  return c;
}

struct VariantRun {
  eval::MetricReport report;
  double heldout_accuracy = std::numeric_limits<double>::quiet_NaN();
  double chance = 0.0;
  std::string repr_checkpoint;    // serialized bytes
  std::string policy_checkpoint;  // serialized bytes
  std::vector<eval::CurvePoint> curves;
  double seconds = 0.0;
};

/// Full in-memory train and evaluate cycle on the test split.
inline VariantRun run_variant(const ExperimentConfig& c, const Universe& u, const DataSets& d) {
  const auto t0 = std::chrono::steady_clock::now();
  VariantRun out;
  ReprStage rs = run_repr(c, d.train, u.split, &d.heldout);
  out.heldout_accuracy = rs.heldout_accuracy;
  out.chance = rs.chance;
  nlohmann::json repr_echo = stage_echo(c, Stage::repr);
  repr_echo["trained_action_ids"] = d.train.manifest.action_ids;
  out.repr_checkpoint =
      repr::make_repr_checkpoint(rs.trained.model, &rs.trained.optimizer, c.seed("repr"), repr_echo).serialize();
  const EmbeddingMap train_e = embed(rs.trained.model, d.train);
  const EmbeddingMap test_e = embed(rs.trained.model, d.test);
  PolicyStage ps = run_policy(c, u, train_e, test_e);
  nlohmann::json policy_echo = stage_echo(c, Stage::policy);
  policy_echo["train_action_ids"] = u.split.train;
  out.policy_checkpoint =
      policy::make_policy_checkpoint(ps.trained.model, &ps.trained.optimizer, c.seed("policy"), policy_echo)
          .serialize();
  out.curves = ps.curves;
  out.report = run_eval(c, ps.trained.model, u, test_e, "test");
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

// ---------------------------------------------------------------------------
// Run manifests

struct RunManifest {
  std::string stage;
  std::string config_hash;
  nlohmann::json config;
  std::map<std::string, std::string> artifacts;  // name -> path
  std::map<std::string, std::string> digests;    // name -> FNV-1a of the bytes
  std::map<std::string, double> seconds;
  nlohmann::json extra = nlohmann::json::object();

  nlohmann::json to_json() const {
    return {{"stage", stage},         {"config_hash", config_hash}, {"config", config},
            {"code_version", kCodeVersion}, {"artifacts", artifacts},     {"digests", digests},
            {"seconds", seconds},     {"extra", extra}};
  }

  void add_artifact(const std::string& name, const fs::path& path) {
    artifacts[name] = path.string();
    if (fs::is_regular_file(path)) digests[name] = hex64(fnv1a(io::read_file(path)));
  }

  void write(const fs::path& dir) const { io::write_file_atomic(dir / "run_manifest.json", to_json().dump(2) + "\n"); }
};

inline RunManifest make_manifest(const std::string& stage, const ExperimentConfig& c, Stage s) {
  RunManifest m;
  m.stage = stage;
  m.config_hash = c.hash(s);
  m.config = c.to_json(s);
  return m;
}

inline nlohmann::json read_json(const fs::path& path) {
  if (!fs::exists(path)) fail(ErrorKind::io_error, "missing artifact " + path.string());
  try {
    return nlohmann::json::parse(io::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format_error, path.string() + ": " + e.what());
  }
}

}  // namespace aglo::pipeline
