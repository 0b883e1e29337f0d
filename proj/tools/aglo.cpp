// aglo: observation generation, representation and policy training,
// zero-shot evaluation, ablations and curve plots.
//
// Exit codes: 0 success, 1 I/O or format failure, 2 invalid config or
// arguments, 3 leakage or consistency error, 4 numeric divergence.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "aglo/pipeline.hpp"
#include "aglo/plot.hpp"

namespace fs = std::filesystem;
using namespace aglo;
using config::ExperimentConfig;
using config::Stage;
using pipeline::RunManifest;

namespace {

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::invalid_argument: return 2;
    case ErrorKind::leakage_error:
    case ErrorKind::config_mismatch:
    case ErrorKind::schema_error: return 3;
    case ErrorKind::numeric_error: return 4;
    default: return 1;
  }
}

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  bool force = false;

  ExperimentConfig resolve() const { return config::resolve(config_path, overrides); }
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "experiment config file");
  cmd->add_option("--set", c.overrides, "override a key: section.key=value (repeatable)");
  cmd->add_flag("--force", c.force, "overwrite existing outputs");
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// Refuses a non-empty output directory unless forced; with --force only the
/// named artifacts are removed.
void prepare_out(const fs::path& out, bool force, const std::vector<std::string>& artifacts) {
  if (fs::exists(out) && !fs::is_directory(out)) fail(ErrorKind::io_error, out.string() + " exists and is not a directory");
  if (fs::exists(out) && !fs::is_empty(out)) {
    if (!force) fail(ErrorKind::io_error, out.string() + " is not empty (use --force to overwrite)");
    for (const std::string& a : artifacts) fs::remove_all(out / a);
  }
  fs::create_directories(out);
}

void write_text(const fs::path& path, const std::string& text) { io::write_file_atomic(path, text); }

/// Dataset manifest fields must agree with the active config.
void check_dataset(const env::ObservationDataset& ds, const ExperimentConfig& c, const std::string& where) {
  const auto& m = ds.manifest;
  auto mismatch = [&](const std::string& field, const std::string& found, const std::string& expected) {
    fail(ErrorKind::config_mismatch, where + ": " + field + " is " + found + " but the config expects " + expected);
  };
  if (static_cast<long long>(m.horizon) != c.integer("env.obs_horizon"))
    mismatch("horizon", std::to_string(m.horizon), c.raw("env.obs_horizon"));
  if (m.universe_seed != c.seed("universe"))
    mismatch("universe_seed", std::to_string(m.universe_seed), c.raw("seeds.universe"));
  if (m.dataset_seed != c.seed("dataset"))
    mismatch("dataset_seed", std::to_string(m.dataset_seed), c.raw("seeds.dataset"));
}

fs::path data_root_from(const std::optional<std::string>& explicit_root, const fs::path& repr_dir) {
  if (explicit_root) return *explicit_root;
  const nlohmann::json m = pipeline::read_json(repr_dir / "run_manifest.json");
  return m.at("extra").at("data_root").get<std::string>();
}

// ---------------------------------------------------------------------------

int cmd_gen_obs(const Common& common, const std::string& out_dir, std::optional<int> obs_per_action,
                std::optional<long long> seed) {
  ExperimentConfig c = common.resolve();
  if (obs_per_action) {
    if (*obs_per_action < 1) fail(ErrorKind::invalid_argument, "--obs-per-action must be >= 1");
    c.set("env.obs_per_action", std::to_string(*obs_per_action), "--obs-per-action");
  }
  if (seed) {
    if (*seed < 0) fail(ErrorKind::invalid_argument, "--seed must be >= 0");
    c.set("seeds.dataset", std::to_string(*seed), "--seed");
  }
  config::validate(c);
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path out = out_dir;
  prepare_out(out, common.force, {"train", "val", "test", "heldout", "split.json", "config.ini", "run_manifest.json"});
  const pipeline::Universe u = pipeline::make_universe(c);
  const pipeline::DataSets d = pipeline::make_datasets(c, u);
  RunManifest man = pipeline::make_manifest("gen-obs", c, Stage::data);
  for (const auto& [name, ds] : {std::pair<std::string, const env::ObservationDataset*>{"train", &d.train},
                                 {"val", &d.val},
                                 {"test", &d.test},
                                 {"heldout", &d.heldout}}) {
    if (ds->num_actions() == 0) continue;
    env::save_dataset(*ds, out / name);
    man.add_artifact(name + "/manifest.json", out / name / "manifest.json");
  }
  nlohmann::json split = eval::to_json(u.split);
  split["config_hash"] = c.hash(Stage::data);
  write_text(out / "split.json", split.dump(2) + "\n");
  write_text(out / "config.ini", c.to_ini());
  man.add_artifact("split", out / "split.json");
  man.seconds["gen-obs"] = seconds_since(t0);
  man.write(out);
  std::printf("gen-obs: %zu actions (%zu train / %zu val / %zu test), n=%lld, H=%lld -> %s\n", u.tools.size(),
              u.split.train.size(), u.split.val.size(), u.split.test.size(), c.integer("env.obs_per_action"),
              c.integer("env.obs_horizon"), out.string().c_str());
  return 0;
}

int cmd_train_repr(const Common& common, const std::string& dataset_dir, const std::string& out_dir,
                   std::optional<std::string> heldout_dir) {
  const ExperimentConfig c = common.resolve();
  const auto t0 = std::chrono::steady_clock::now();
  const env::ObservationDataset ds = env::load_dataset(dataset_dir);
  check_dataset(ds, c, dataset_dir);
  const pipeline::Universe u = pipeline::make_universe(c);
  pipeline::audit_training_dataset(ds, u.split, "dataset " + dataset_dir);
  const fs::path data_root = fs::absolute(dataset_dir).parent_path();
  if (!heldout_dir && fs::exists(data_root / "heldout" / "manifest.json")) heldout_dir = (data_root / "heldout").string();
  std::optional<env::ObservationDataset> heldout;
  if (heldout_dir) {
    heldout = env::load_dataset(*heldout_dir);
    pipeline::audit_training_dataset(*heldout, u.split, "held-out dataset " + *heldout_dir);
  }
  const fs::path out = out_dir;
  prepare_out(out, common.force, {"repr.ckpt", "loss.csv", "embeddings_train.json", "run_manifest.json"});
  const int epochs = c.integer32("repr.epochs");
  pipeline::ReprStage rs = pipeline::run_repr(c, ds, u.split, heldout ? &*heldout : nullptr, out / "repr.ckpt",
                                              [&](const repr::LossRow& r) {
                                                if ((r.epoch + 1) % std::max(1, epochs / 10) == 0)
                                                  std::fprintf(stderr, "  epoch %d/%d loss %.4f\n", r.epoch + 1, epochs,
                                                               r.loss.total);
                                              });
  write_text(out / "loss.csv", repr::loss_history_csv(rs.trained.history));
  write_text(out / "embeddings_train.json",
             pipeline::embeddings_json(pipeline::embed(rs.trained.model, ds)).dump() + "\n");
  RunManifest man = pipeline::make_manifest("train-repr", c, Stage::repr);
  man.add_artifact("checkpoint", out / "repr.ckpt");
  man.add_artifact("loss", out / "loss.csv");
  man.add_artifact("embeddings_train", out / "embeddings_train.json");
  man.extra["data_root"] = data_root.string();
  man.extra["dataset"] = fs::absolute(dataset_dir).string();
  man.extra["trained_action_ids"] = rs.trained.trained_action_ids;
  man.extra["model"] = repr::to_string(rs.trained.model.config.model);
  if (!std::isnan(rs.heldout_accuracy)) {
    man.extra["heldout_accuracy"] = rs.heldout_accuracy;
    man.extra["chance"] = rs.chance;
  }
  man.seconds["train-repr"] = seconds_since(t0);
  man.write(out);
  std::printf("train-repr: %s model, %d epochs, final loss %.4f", repr::to_string(rs.trained.model.config.model).c_str(),
              epochs, rs.trained.history.empty() ? 0.0 : rs.trained.history.back().loss.total);
  if (!std::isnan(rs.heldout_accuracy))
    std::printf(", held-out classifier accuracy %.3f (chance %.3f)", rs.heldout_accuracy, rs.chance);
  std::printf(" -> %s\n", out.string().c_str());
  return 0;
}

struct LoadedRepr {
  repr::ReprModel model;
  pipeline::Universe universe;
  env::ObservationDataset train, val, test;
  fs::path data_root;
};

LoadedRepr load_repr_stage(const ExperimentConfig& c, const fs::path& repr_dir, const std::optional<std::string>& data) {
  LoadedRepr r;
  r.model = pipeline::load_repr(repr_dir / "repr.ckpt", c);
  r.universe = pipeline::make_universe(c);
  r.data_root = data_root_from(data, repr_dir);
  r.train = env::load_dataset(r.data_root / "train");
  check_dataset(r.train, c, (r.data_root / "train").string());
  pipeline::audit_training_dataset(r.train, r.universe.split, "dataset " + (r.data_root / "train").string());
  for (auto [name, ds] : {std::pair<const char*, env::ObservationDataset*>{"val", &r.val}, {"test", &r.test}})
    if (fs::exists(r.data_root / name / "manifest.json")) {
      *ds = env::load_dataset(r.data_root / name);
      check_dataset(*ds, c, (r.data_root / name).string());
    }
  return r;
}

int cmd_train_policy(const Common& common, const std::string& repr_dir, const std::string& out_dir,
                     const std::optional<std::string>& data) {
  const ExperimentConfig c = common.resolve();
  const auto t0 = std::chrono::steady_clock::now();
  const LoadedRepr r = load_repr_stage(c, repr_dir, data);
  const pipeline::EmbeddingMap train_e = pipeline::embed(r.model, r.train);
  pipeline::EmbeddingMap test_e;
  if (r.test.num_actions() > 0) test_e = pipeline::embed(r.model, r.test);
  const fs::path out = out_dir;
  prepare_out(out, common.force, {"policy.ckpt", "curves.csv", "updates.csv", "run_manifest.json"});
  const long total = c.integer("policy.total_steps");
  pipeline::PolicyStage ps =
      pipeline::run_policy(c, r.universe, train_e, test_e, out / "policy.ckpt", [&](const policy::UpdateLog& l) {
        std::fprintf(stderr, "  steps %ld/%ld return %.3f target %.2f goal %.2f\n", l.env_steps, total, l.mean_return,
                     l.target_hit_rate, l.goal_hit_rate);
      });
  write_text(out / "curves.csv", eval::curves_csv(ps.curves));
  write_text(out / "updates.csv", pipeline::updates_csv(ps.trained.updates));
  RunManifest man = pipeline::make_manifest("train-policy", c, Stage::policy);
  man.add_artifact("checkpoint", out / "policy.ckpt");
  man.add_artifact("curves", out / "curves.csv");
  man.add_artifact("updates", out / "updates.csv");
  man.extra["data_root"] = r.data_root.string();
  man.extra["repr_dir"] = fs::absolute(repr_dir).string();
  man.extra["rollout_action_ids"] = ps.rollout_action_ids;
  man.extra["env_steps"] = ps.trained.env_steps;
  man.seconds["train-policy"] = seconds_since(t0);
  man.write(out);
  std::printf("train-policy: %ld env steps, %zu curve rows -> %s\n", ps.trained.env_steps, ps.curves.size(),
              out.string().c_str());
  return 0;
}

int cmd_evaluate(const Common& common, const std::string& repr_dir, const std::string& policy_dir,
                 const std::string& split, const std::optional<std::string>& data, std::optional<std::string> out_file) {
  const ExperimentConfig c = common.resolve();
  if (split != "test" && split != "val") fail(ErrorKind::invalid_argument, "--split must be test or val");
  const auto t0 = std::chrono::steady_clock::now();
  const LoadedRepr r = load_repr_stage(c, repr_dir, data);
  policy::PolicyModel pm = pipeline::load_policy(fs::path(policy_dir) / "policy.ckpt", c);
  const env::ObservationDataset& ds = split == "test" ? r.test : r.val;
  if (ds.num_actions() == 0) fail(ErrorKind::io_error, "missing artifact " + (r.data_root / split).string());
  eval::audit_ids(ds.manifest.action_ids, r.universe.split.train, split + " dataset");
  const eval::MetricReport rep = pipeline::run_eval(c, pm, r.universe, pipeline::embed(r.model, ds), split);
  const fs::path out = out_file ? fs::path(*out_file) : fs::path(policy_dir) / ("report_" + split + ".json");
  if (fs::exists(out) && !common.force) fail(ErrorKind::io_error, out.string() + " exists (use --force to overwrite)");
  io::write_file_atomic(out, eval::to_json(rep).dump() + "\n");
  std::printf("evaluate (%s, %d runs x %d episodes): target hit %.2f%% (%.2f)  goal hit %.2f%% (%.2f)  reward %.4f (%.4f)\n",
              split.c_str(), c.integer32("eval.runs"), c.integer32("eval.episodes"), rep.target_hit.mean,
              rep.target_hit.std, rep.goal_hit.mean, rep.goal_hit.std, rep.reward.mean, rep.reward.std);
  std::fprintf(stderr, "  %.1f s -> %s\n", seconds_since(t0), out.string().c_str());
  return 0;
}

int cmd_ablate(const Common& common, const std::string& out_dir, int seeds, bool baselines) {
  const ExperimentConfig base = common.resolve();
  if (seeds < 1) fail(ErrorKind::invalid_argument, "--seeds must be >= 1");
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path out = out_dir;
  std::vector<eval::Variant> variants = eval::ablation_variants();
  if (baselines) {
    variants.push_back(eval::hvae_baseline());
    variants.push_back(eval::vae_baseline());
  }
  std::vector<std::string> artifacts = {"ablation.csv", "run_manifest.json"};
  for (const eval::Variant& v : variants) artifacts.push_back(v.name);
  prepare_out(out, common.force, artifacts);
  const pipeline::Universe u = pipeline::make_universe(base);
  const pipeline::DataSets d = pipeline::make_datasets(base, u);
  RunManifest man = pipeline::make_manifest("ablate", base, Stage::eval);
  std::vector<eval::AblationRow> rows;
  for (const eval::Variant& v : variants) {
    eval::AblationRow row{v, {}};
    for (int s = 0; s < seeds; ++s) {
      const ExperimentConfig c = pipeline::variant_config(base, v, s);
      const pipeline::VariantRun run = pipeline::run_variant(c, u, d);
      const fs::path dir = out / v.name / ("seed" + std::to_string(s));
      io::write_file_atomic(dir / "repr.ckpt", run.repr_checkpoint);
      io::write_file_atomic(dir / "policy.ckpt", run.policy_checkpoint);
      io::write_file_atomic(dir / "curves.csv", eval::curves_csv(run.curves));
      io::write_file_atomic(dir / "report.json", eval::to_json(run.report).dump() + "\n");
      man.seconds[v.name + "/seed" + std::to_string(s)] = run.seconds;
      std::printf("ablate: %-12s seed %d  target %.2f%%  goal %.2f%%  reward %.4f  (%.0f s)\n", v.name.c_str(), s,
                  run.report.target_hit.mean, run.report.goal_hit.mean, run.report.reward.mean, run.seconds);
      std::fflush(stdout);
      row.reports.push_back(run.report);
    }
    rows.push_back(std::move(row));
  }
  write_text(out / "ablation.csv", eval::ablation_csv(rows));
  man.add_artifact("ablation", out / "ablation.csv");
  man.seconds["ablate"] = seconds_since(t0);
  man.write(out);
  std::printf("ablate: %zu variants x %d seeds -> %s\n", variants.size(), seeds, (out / "ablation.csv").string().c_str());
  return 0;
}

int cmd_plot(const std::vector<std::string>& curves, const std::string& out_dir, const std::string& budget, bool force) {
  if (curves.empty()) fail(ErrorKind::invalid_argument, "--curves needs at least one LABEL=PATH");
  std::vector<plot::CurveRun> runs;
  for (const std::string& spec : curves) {
    const std::size_t eq = spec.find('=');
    const std::string label = eq == std::string::npos ? fs::path(spec).parent_path().filename().string() : spec.substr(0, eq);
    const std::string path = eq == std::string::npos ? spec : spec.substr(eq + 1);
    if (!fs::exists(path)) fail(ErrorKind::io_error, "missing curves file " + path);
    runs.push_back({label.empty() ? path : label, eval::parse_curves_csv(io::read_file(path), path)});
  }
  const fs::path out = out_dir;
  const std::string suffix = budget.empty() ? "" : "_n" + budget;
  const fs::path th = out / ("target_hit" + suffix + ".svg"), rw = out / ("reward" + suffix + ".svg");
  if (!force && (fs::exists(th) || fs::exists(rw)))
    fail(ErrorKind::io_error, out.string() + " already holds plots (use --force to overwrite)");
  const std::string a = plot::render(runs, plot::Metric::target_hit);
  const std::string b = plot::render(runs, plot::Metric::reward);
  io::write_file_atomic(th, a);
  io::write_file_atomic(rw, b);
  std::printf("plot: %zu runs -> %s, %s\n", runs.size(), th.string().c_str(), rw.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  aglo::tune_allocator();
  CLI::App app{"aglo: zero-shot action generalization with limited observations"};
  app.require_subcommand(1);
  app.footer(config::schema_help());
  app.set_version_flag("--version", pipeline::kCodeVersion);

  Common common;

  auto* gen = app.add_subcommand("gen-obs", "generate observation datasets for the action universe");
  add_common(gen, common);
  std::string gen_out;
  std::optional<int> obs_per_action;
  std::optional<long long> gen_seed;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--obs-per-action", obs_per_action, "observations per action (env.obs_per_action)");
  gen->add_option("--seed", gen_seed, "dataset seed (seeds.dataset)");

  auto* trepr = app.add_subcommand("train-repr", "train the action representation model on seen actions");
  add_common(trepr, common);
  std::string repr_dataset, repr_out;
  std::optional<std::string> heldout;
  trepr->add_option("--dataset", repr_dataset, "train-split dataset directory")->required();
  trepr->add_option("--out", repr_out, "output directory")->required();
  trepr->add_option("--heldout", heldout, "held-out observations of the seen actions (default: sibling 'heldout')");

  auto* tpol = app.add_subcommand("train-policy", "train the policy on seen actions");
  add_common(tpol, common);
  std::string pol_repr, pol_out;
  std::optional<std::string> pol_data;
  tpol->add_option("--repr", pol_repr, "train-repr output directory")->required();
  tpol->add_option("--out", pol_out, "output directory")->required();
  tpol->add_option("--data", pol_data, "gen-obs output directory (default: recorded by train-repr)");

  auto* ev = app.add_subcommand("evaluate", "zero-shot evaluation on unseen actions");
  add_common(ev, common);
  std::string ev_repr, ev_policy, ev_split = "test";
  std::optional<std::string> ev_data, ev_out;
  ev->add_option("--repr", ev_repr, "train-repr output directory")->required();
  ev->add_option("--policy", ev_policy, "train-policy output directory")->required();
  ev->add_option("--split", ev_split, "test or val")->check(CLI::IsMember({"test", "val"}));
  ev->add_option("--data", ev_data, "gen-obs output directory (default: recorded by train-repr)");
  ev->add_option("--out", ev_out, "report path (default: <policy>/report_<split>.json)");

  auto* abl = app.add_subcommand("ablate", "run the ablation matrix and write ablation.csv");
  add_common(abl, common);
  std::string abl_out;
  int abl_seeds = 3;
  bool abl_baselines = false;
  abl->add_option("--out", abl_out, "output directory")->required();
  abl->add_option("--seeds", abl_seeds, "seeds per variant");
  abl->add_flag("--with-baselines", abl_baselines, "also run the HVAE and VAE baselines");

  auto* plt = app.add_subcommand("plot", "plot learning curves as SVG");
  std::vector<std::string> plot_curves;
  std::string plot_out, plot_budget;
  bool plot_force = false;
  plt->add_option("--curves", plot_curves, "LABEL=curves.csv (repeatable; equal labels are averaged)")->required();
  plt->add_option("--out", plot_out, "output directory")->required();
  plt->add_option("--budget", plot_budget, "observation budget tag for file names");
  plt->add_flag("--force", plot_force, "overwrite existing plots");

  for (CLI::App* sub : {gen, trepr, tpol, ev, abl}) sub->footer(config::schema_help());

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*gen) return cmd_gen_obs(common, gen_out, obs_per_action, gen_seed);
    if (*trepr) return cmd_train_repr(common, repr_dataset, repr_out, heldout);
    if (*tpol) return cmd_train_policy(common, pol_repr, pol_out, pol_data);
    if (*ev) return cmd_evaluate(common, ev_repr, ev_policy, ev_split, ev_data, ev_out);
    if (*abl) return cmd_ablate(common, abl_out, abl_seeds, abl_baselines);
    if (*plt) return cmd_plot(plot_curves, plot_out, plot_budget, plot_force);
  } catch (const Error& e) {
    std::fprintf(stderr, "aglo: %s\n", e.what());
    return exit_code(e.kind());
  } catch (const fs::filesystem_error& e) {
    std::fprintf(stderr, "aglo: io-error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "aglo: %s\n", e.what());
    return 1;
  }
  return 2;
}
