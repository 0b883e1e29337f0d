#pragma once

// Experiment configuration: a flat, sectioned key=value file with a fixed
// schema. Every key has a default; unknown keys are errors. Values resolve
// in order defaults < file < AGLO_<SECTION>_<KEY> environment < --set.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "aglo/common.hpp"
#include "aglo/envsim.hpp"
#include "aglo/evalsuite.hpp"
#include "aglo/policylearn.hpp"
#include "aglo/reprlearn.hpp"

namespace aglo::config {

enum class KeyType { integer, real, boolean, text };

/// Pipeline stage a key first influences; a stage hash covers its own keys
/// and those of every earlier stage.
enum class Stage { data = 0, repr = 1, policy = 2, eval = 3 };

struct KeyDef {
  std::string section;
  std::string key;
  KeyType type;
  std::string default_value;
  Stage stage;
  std::string doc;

  std::string name() const { return section + "." + key; }
};

inline const std::vector<KeyDef>& schema() {
  using K = KeyType;
  using S = Stage;
  static const std::vector<KeyDef> keys = {
      {"env", "num_actions", K::integer, "32", S::data, "size of the action universe"},
      {"env", "obs_per_action", K::integer, "5", S::data, "observations n per action"},
      {"env", "obs_horizon", K::integer, "20", S::data, "states H per observation"},
      {"env", "heldout_obs_per_action", K::integer, "5", S::data,
       "extra observations per seen action, used only to score the classifier"},
      {"env", "k", K::integer, "8", S::policy, "actions K sampled per episode"},
      {"env", "horizon", K::integer, "15", S::policy, "episode length T"},
      {"env", "substeps", K::integer, "10", S::policy, "physics steps per env step"},
      {"env", "dt", K::real, "0.05", S::policy, "physics step"},
      {"env", "gravity", K::real, "1.0", S::policy, "downward acceleration"},
      {"env", "ball_radius", K::real, "0.03", S::policy, "ball radius"},
      {"env", "goal_radius", K::real, "0.08", S::policy, "goal region radius"},
      {"env", "reward_target_hit", K::real, "1.0", S::policy, "bonus when the target is first struck"},
      {"env", "reward_goal_hit", K::real, "5.0", S::policy, "bonus when the target reaches the goal"},
      {"env", "step_penalty", K::real, "0.01", S::policy, "cost per step"},
      {"env", "obstacle", K::boolean, "false", S::policy, "add the obstacle segment"},

      {"repr", "model", K::text, "aglo", S::repr, "aglo | hvae | vae"},
      {"repr", "embed_dim", K::integer, "128", S::repr, "embedding size d"},
      {"repr", "coarse_width", K::integer, "128", S::repr, "per-state encoder width"},
      {"repr", "classifier_hidden", K::integer, "128", S::repr, "classifier hidden width"},
      {"repr", "latent_dim", K::integer, "16", S::repr, "observation latent size"},
      {"repr", "hvae_hidden", K::integer, "128", S::repr, "encoder/decoder hidden width"},
      {"repr", "prior_hidden", K::integer, "64", S::repr, "conditional prior hidden width"},
      {"repr", "epsilon", K::real, "0.999", S::repr, "graph threshold (0.95 in the full-scale profile)"},
      {"repr", "kappa", K::real, "0.5", S::repr, "contrastive temperature"},
      {"repr", "num_negatives", K::integer, "5", S::repr, "negatives K' per node"},
      {"repr", "lambda_ce", K::real, "0.001", S::repr, "classification loss weight"},
      {"repr", "lambda_cont", K::real, "0.1", S::repr, "contrastive loss weight"},
      {"repr", "use_ce", K::boolean, "true", S::repr, "enable the classification loss"},
      {"repr", "use_cont", K::boolean, "true", S::repr, "enable the contrastive loss"},
      {"repr", "exclude_same_action_negatives", K::boolean, "false", S::repr,
       "drop same-action nodes from the negative pool"},
      {"repr", "epochs", K::integer, "2000", S::repr, "training epochs"},
      {"repr", "batch_actions", K::integer, "32", S::repr, "actions per batch"},
      {"repr", "lr", K::real, "0.001", S::repr, "learning rate"},
      {"repr", "mc_samples", K::integer, "1", S::repr, "Monte-Carlo samples per expectation"},

      {"policy", "hidden", K::integer, "64", S::policy, "state encoder width"},
      {"policy", "utility_hidden", K::integer, "64", S::policy, "utility function width"},
      {"policy", "alpha", K::real, "0.4", S::policy, "Beta(alpha, alpha) mixing rate"},
      {"policy", "entropy_coef", K::real, "0.005", S::policy, "entropy bonus beta"},
      {"policy", "gamma", K::real, "0.99", S::policy, "discount"},
      {"policy", "gae_lambda", K::real, "0.95", S::policy, "GAE lambda"},
      {"policy", "clip", K::real, "0.2", S::policy, "PPO clip ratio"},
      {"policy", "value_coef", K::real, "0.5", S::policy, "value loss weight"},
      {"policy", "update_epochs", K::integer, "10", S::policy, "PPO epochs per batch"},
      {"policy", "batch_steps", K::integer, "1024", S::policy, "env steps per update (3072 in the full-scale profile)"},
      {"policy", "minibatches", K::integer, "8", S::policy, "minibatches per PPO epoch"},
      {"policy", "lr", K::real, "0.001", S::policy, "learning rate"},
      {"policy", "max_grad_norm", K::real, "0.5", S::policy, "gradient clip"},
      {"policy", "total_steps", K::integer, "150000", S::policy, "env steps of training"},
      {"policy", "init_log_std", K::real, "-1.6", S::policy, "initial placement log std"},
      {"policy", "use_augmentation", K::boolean, "true", S::policy, "Gaussian mixup action sets"},
      {"policy", "workers", K::integer, "1", S::policy, "rollout workers (this build runs one)"},
      {"policy", "probe_every", K::integer, "15", S::policy, "updates between learning-curve probes"},

      {"eval", "train_fraction", K::real, "0.5", S::data, "share of seen actions"},
      {"eval", "val_fraction", K::real, "0.25", S::data, "share of validation actions"},
      {"eval", "test_fraction", K::real, "0.25", S::data, "share of unseen actions"},
      {"eval", "probe_episodes", K::integer, "200", S::policy, "fixed episodes per probe split"},
      {"eval", "episodes", K::integer, "200", S::eval, "episodes per evaluation run"},
      {"eval", "runs", K::integer, "3", S::eval, "evaluation runs"},
      {"eval", "greedy", K::boolean, "true", S::eval, "argmax actions during evaluation"},
      {"eval", "augmentation", K::boolean, "false", S::eval, "mixup action sets during evaluation"},

      {"seeds", "universe", K::integer, "0", S::data, "action universe"},
      {"seeds", "dataset", K::integer, "1", S::data, "observation launches"},
      {"seeds", "split", K::integer, "2", S::data, "train/val/test split"},
      {"seeds", "repr", K::integer, "3", S::repr, "representation training"},
      {"seeds", "policy", K::integer, "4", S::policy, "policy training"},
      {"seeds", "eval", K::integer, "5", S::eval, "evaluation episodes"},
  };
  return keys;
}

inline const KeyDef* find_key(const std::string& name) {
  for (const KeyDef& k : schema())
    if (k.name() == name) return &k;
  return nullptr;
}

inline std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

/// Checks `value` against the key type and returns its canonical spelling.
inline std::string canonical(const KeyDef& k, const std::string& raw, const std::string& origin) {
  const std::string value = trim(raw);
  auto bad = [&](const std::string& what) -> std::string {
    fail(ErrorKind::invalid_argument, origin + ": " + k.name() + " = '" + value + "' is not " + what);
  };
  switch (k.type) {
    case KeyType::integer: {
      char* end = nullptr;
      errno = 0;
      const long long v = std::strtoll(value.c_str(), &end, 10);
      if (value.empty() || *end != '\0' || errno) return bad("an integer");
      return std::to_string(v);
    }
    case KeyType::real: {
      char* end = nullptr;
      const double v = std::strtod(value.c_str(), &end);
      if (value.empty() || *end != '\0' || !std::isfinite(v)) return bad("a finite number");
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.17g", v);
      return buf;
    }
    case KeyType::boolean: {
      std::string l = value;
      std::transform(l.begin(), l.end(), l.begin(), [](unsigned char c) { return std::tolower(c); });
      if (l == "true" || l == "1" || l == "yes" || l == "on") return "true";
      if (l == "false" || l == "0" || l == "no" || l == "off") return "false";
      return bad("a boolean");
    }
    case KeyType::text:
      if (value.empty()) return bad("a non-empty string");
      return value;
  }
  return value;
}

class ExperimentConfig {
 public:
  ExperimentConfig() {
    for (const KeyDef& k : schema()) values_[k.name()] = canonical(k, k.default_value, "default");
  }

  void set(const std::string& name, const std::string& value, const std::string& origin = "--set") {
    const KeyDef* k = find_key(name);
    if (!k) fail(ErrorKind::invalid_argument, origin + ": unknown config key '" + name + "'");
    values_[name] = canonical(*k, value, origin);
  }

  const std::string& raw(const std::string& name) const {
    const auto it = values_.find(name);
    if (it == values_.end()) fail(ErrorKind::invalid_argument, "unknown config key '" + name + "'");
    return it->second;
  }

  long long integer(const std::string& name) const { return std::stoll(raw(name)); }
  int integer32(const std::string& name) const { return static_cast<int>(integer(name)); }
  std::uint64_t seed(const std::string& name) const { return static_cast<std::uint64_t>(integer("seeds." + name)); }
  double real(const std::string& name) const { return std::strtod(raw(name).c_str(), nullptr); }
  bool flag(const std::string& name) const { return raw(name) == "true"; }

  /// Canonical `section.key=value` lines for keys up to `stage`, schema order.
  std::string canonical_text(Stage stage = Stage::eval) const {
    std::string out;
    for (const KeyDef& k : schema())
      if (static_cast<int>(k.stage) <= static_cast<int>(stage)) out += k.name() + "=" + values_.at(k.name()) + "\n";
    return out;
  }

  /// 64-bit FNV-1a of the canonical text of a stage, as 16 hex digits.
  std::string hash(Stage stage = Stage::eval) const { return hex64(fnv1a(canonical_text(stage))); }

  /// Resolved values by section, limited to keys up to `stage`.
  nlohmann::json to_json(Stage stage = Stage::eval) const {
    nlohmann::json j = nlohmann::json::object();
    for (const KeyDef& k : schema()) {
      if (static_cast<int>(k.stage) > static_cast<int>(stage)) continue;
      const std::string& v = values_.at(k.name());
      nlohmann::json& slot = j[k.section][k.key];
      switch (k.type) {
        case KeyType::integer: slot = std::stoll(v); break;
        case KeyType::real: slot = std::strtod(v.c_str(), nullptr); break;
        case KeyType::boolean: slot = v == "true"; break;
        case KeyType::text: slot = v; break;
      }
    }
    return j;
  }

  std::string to_ini() const {
    std::string out, section;
    for (const KeyDef& k : schema()) {
      if (k.section != section) {
        out += (section.empty() ? "" : "\n") + std::string("[") + k.section + "]\n";
        section = k.section;
      }
      out += k.key + " = " + values_.at(k.name()) + "\n";
    }
    return out;
  }

 private:
  std::map<std::string, std::string> values_;
};

/// Applies `[section]` / `key = value` text; '#' and ';' start comments.
inline void apply_ini(ExperimentConfig& cfg, const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find_first_of("#;");
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno);
    if (line.front() == '[') {
      if (line.back() != ']') fail(ErrorKind::invalid_argument, where + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) fail(ErrorKind::invalid_argument, where + ": expected key = value");
    if (section.empty()) fail(ErrorKind::invalid_argument, where + ": key outside of a [section]");
    cfg.set(section + "." + trim(line.substr(0, eq)), line.substr(eq + 1), where);
  }
}

inline void apply_ini_file(ExperimentConfig& cfg, const std::string& path) {
  std::ifstream f(path);
  if (!f) fail(ErrorKind::io_error, "cannot read config file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  apply_ini(cfg, ss.str(), path);
}

/// Environment variable name for a key, e.g. AGLO_REPR_EPOCHS.
inline std::string env_var_name(const KeyDef& k) {
  std::string s = "AGLO_" + k.section + "_" + k.key;
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::toupper(c); });
  return s;
}

inline void apply_environment(ExperimentConfig& cfg) {
  for (const KeyDef& k : schema())
    if (const char* v = std::getenv(env_var_name(k).c_str())) cfg.set(k.name(), v, env_var_name(k));
}

/// Applies `section.key=value` overrides.
inline void apply_overrides(ExperimentConfig& cfg, const std::vector<std::string>& overrides) {
  for (const std::string& o : overrides) {
    const std::size_t eq = o.find('=');
    if (eq == std::string::npos) fail(ErrorKind::invalid_argument, "--set expects section.key=value, got '" + o + "'");
    cfg.set(trim(o.substr(0, eq)), o.substr(eq + 1), "--set " + o);
  }
}

/// Schema listing for --help: every key with default and meaning.
inline std::string schema_help() {
  std::string out = "Config keys (file section [s] key k, env AGLO_S_K, or --set s.k=v):\n";
  for (const KeyDef& k : schema()) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "  %-38s %-10s %s\n", k.name().c_str(), k.default_value.c_str(), k.doc.c_str());
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Typed views

inline env::EnvConfig env_config(const ExperimentConfig& c) {
  env::EnvConfig e;
  e.horizon = c.integer32("env.horizon");
  e.substeps = c.integer32("env.substeps");
  e.dt = c.real("env.dt");
  e.gravity = c.real("env.gravity");
  e.ball_radius = c.real("env.ball_radius");
  e.goal_radius = c.real("env.goal_radius");
  e.reward_target_hit = c.real("env.reward_target_hit");
  e.reward_goal_hit = c.real("env.reward_goal_hit");
  e.step_penalty = c.real("env.step_penalty");
  e.obstacle = c.flag("env.obstacle");
  return e;
}

inline repr::ModelKind parse_model(const std::string& s) {
  if (s == "aglo") return repr::ModelKind::aglo;
  if (s == "hvae") return repr::ModelKind::hvae;
  if (s == "vae") return repr::ModelKind::vae;
  fail(ErrorKind::invalid_argument, "repr.model = '" + s + "' (expected aglo, hvae or vae)");
}

/// With both graph losses off the graph has nothing to train it, so the
/// model reduces to the HVAE baseline.
inline repr::ReprConfig repr_config(const ExperimentConfig& c) {
  repr::ReprConfig r;
  r.model = parse_model(c.raw("repr.model"));
  r.embed_dim = c.integer32("repr.embed_dim");
  r.coarse_width = c.integer32("repr.coarse_width");
  r.classifier_hidden = c.integer32("repr.classifier_hidden");
  r.latent_dim = c.integer32("repr.latent_dim");
  r.hvae_hidden = c.integer32("repr.hvae_hidden");
  r.prior_hidden = c.integer32("repr.prior_hidden");
  r.epsilon = c.real("repr.epsilon");
  r.kappa = c.real("repr.kappa");
  r.num_negatives = c.integer32("repr.num_negatives");
  r.lambda_ce = c.real("repr.lambda_ce");
  r.lambda_cont = c.real("repr.lambda_cont");
  r.use_ce = c.flag("repr.use_ce");
  r.use_cont = c.flag("repr.use_cont");
  r.exclude_same_action_negatives = c.flag("repr.exclude_same_action_negatives");
  r.epochs = c.integer32("repr.epochs");
  r.batch_actions = c.integer32("repr.batch_actions");
  r.lr = c.real("repr.lr");
  r.mc_samples = c.integer32("repr.mc_samples");
  if (r.model == repr::ModelKind::aglo && !r.ce_active() && !r.cont_active()) r.model = repr::ModelKind::hvae;
  return r;
}

inline policy::PolicyConfig policy_config(const ExperimentConfig& c) {
  policy::PolicyConfig p;
  p.hidden = c.integer32("policy.hidden");
  p.utility_hidden = c.integer32("policy.utility_hidden");
  p.alpha = c.real("policy.alpha");
  p.entropy_coef = c.real("policy.entropy_coef");
  p.gamma = c.real("policy.gamma");
  p.gae_lambda = c.real("policy.gae_lambda");
  p.clip = c.real("policy.clip");
  p.value_coef = c.real("policy.value_coef");
  p.update_epochs = c.integer32("policy.update_epochs");
  p.batch_steps = c.integer32("policy.batch_steps");
  p.minibatches = c.integer32("policy.minibatches");
  p.lr = c.real("policy.lr");
  p.max_grad_norm = c.real("policy.max_grad_norm");
  p.total_steps = static_cast<long>(c.integer("policy.total_steps"));
  p.init_log_std = c.real("policy.init_log_std");
  p.use_augmentation = c.flag("policy.use_augmentation");
  return p;
}

inline eval::EvalSettings eval_settings(const ExperimentConfig& c) {
  eval::EvalSettings s;
  s.episodes = c.integer32("eval.episodes");
  s.runs = c.integer32("eval.runs");
  s.k = c.integer32("env.k");
  s.greedy = c.flag("eval.greedy");
  s.eval_augmentation = c.flag("eval.augmentation");
  s.alpha = c.real("policy.alpha");
  s.gamma = c.real("policy.gamma");
  s.seed = c.seed("eval");
  s.env = env_config(c);
  return s;
}

inline std::array<double, 3> split_proportions(const ExperimentConfig& c) {
  return {c.real("eval.train_fraction"), c.real("eval.val_fraction"), c.real("eval.test_fraction")};
}

/// Cross-field checks beyond per-key types.
inline void validate(const ExperimentConfig& c) {
  auto req = [](bool ok, const std::string& msg) { require(ok, ErrorKind::invalid_argument, "config: " + msg); };
  req(c.integer("env.num_actions") >= 4, "env.num_actions must be >= 4");
  req(c.integer("env.obs_per_action") >= 1, "env.obs_per_action must be >= 1");
  req(c.integer("env.obs_horizon") >= 1, "env.obs_horizon must be >= 1");
  req(c.integer("env.heldout_obs_per_action") >= 0, "env.heldout_obs_per_action must be >= 0");
  req(c.integer("env.k") >= 1, "env.k must be >= 1");
  req(c.integer("env.horizon") >= 1 && c.integer("env.substeps") >= 1, "env.horizon and env.substeps must be >= 1");
  req(c.real("env.dt") > 0.0, "env.dt must be positive");
  req(c.integer("repr.embed_dim") >= 2, "repr.embed_dim must be >= 2");
  req(c.real("repr.epsilon") >= -1.0 && c.real("repr.epsilon") <= 1.0, "repr.epsilon must lie in [-1, 1]");
  req(c.real("repr.kappa") > 0.0, "repr.kappa must be positive");
  req(c.real("repr.lambda_ce") >= 0.0 && c.real("repr.lambda_cont") >= 0.0, "loss weights must be >= 0");
  req(c.integer("repr.epochs") >= 0 && c.integer("repr.batch_actions") >= 2, "repr epochs/batch out of range");
  req(c.integer("repr.mc_samples") == 1, "repr.mc_samples supports only 1");
  req(c.integer("policy.workers") == 1, "policy.workers supports only 1 in this build");
  req(c.integer("policy.total_steps") >= 1, "policy.total_steps must be >= 1");
  req(c.integer("policy.probe_every") >= 1, "policy.probe_every must be >= 1");
  req(c.integer("eval.episodes") >= 1 && c.integer("eval.runs") >= 1, "eval episodes/runs must be >= 1");
  req(c.integer("eval.probe_episodes") >= 1, "eval.probe_episodes must be >= 1");
  for (const char* s : {"universe", "dataset", "split", "repr", "policy", "eval"})
    req(c.integer(std::string("seeds.") + s) >= 0, std::string("seeds.") + s + " must be >= 0");
  parse_model(c.raw("repr.model"));
  policy::validate(policy_config(c));
  const auto p = split_proportions(c);
  req(std::abs(p[0] + p[1] + p[2] - 1.0) <= 1e-9, "split fractions must sum to 1");
}

/// Defaults, then file (if any), environment and overrides; validated.
inline ExperimentConfig resolve(const std::string& path, const std::vector<std::string>& overrides,
                                bool use_environment = true) {
  ExperimentConfig c;
  if (!path.empty()) apply_ini_file(c, path);
  if (use_environment) apply_environment(c);
  apply_overrides(c, overrides);
  validate(c);
  return c;
}

}  // namespace aglo::config
