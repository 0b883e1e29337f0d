// Config resolution and the aglo command line, driven as a subprocess.

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <limits>
#include <map>
#include <sstream>
#include <string>

#include "aglo/config.hpp"
#include "aglo/envsim.hpp"
#include "aglo/binary_io.hpp"

namespace fs = std::filesystem;
using namespace aglo;

namespace {

const std::string kCli = AGLO_CLI_PATH;

struct Outcome {
  int code;
  std::string out;
};

// Runs the CLI with a clean AGLO_* environment; stderr is folded into out.
Outcome run(const std::string& args, const std::string& env = "") {
  std::string cmd = "env";
  for (const config::KeyDef& k : config::schema()) cmd += " -u " + config::env_var_name(k);
  cmd += " " + env + " " + kCli + " " + args + " 2>&1";
  FILE* p = popen(cmd.c_str(), "r");
  std::string out;
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof buf, p)) out.append(buf, n);
  const int status = pclose(p);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

const char* kTiny = R"([env]
num_actions = 16
k = 4
[repr]
epochs = 6
embed_dim = 8
coarse_width = 16
classifier_hidden = 16
hvae_hidden = 16
prior_hidden = 8
latent_dim = 4
[policy]
total_steps = 1024
batch_steps = 512
hidden = 16
utility_hidden = 16
probe_every = 1
[eval]
probe_episodes = 4
episodes = 6
runs = 2
)";

fs::path scratch(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("aglo_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  io::write_file_atomic(d / "tiny.ini", kTiny);
  return d;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

std::string cfg(const fs::path& d) { return " --config " + q(d / "tiny.ini"); }

// gen-obs, train-repr, train-policy, evaluate in `d`.
void full_cycle(const fs::path& d) {
  ASSERT_EQ(run("gen-obs" + cfg(d) + " --out " + q(d / "data")).code, 0);
  ASSERT_EQ(run("train-repr" + cfg(d) + " --dataset " + q(d / "data/train") + " --out " + q(d / "repr")).code, 0);
  ASSERT_EQ(run("train-policy" + cfg(d) + " --repr " + q(d / "repr") + " --out " + q(d / "pol")).code, 0);
  const Outcome e = run("evaluate" + cfg(d) + " --repr " + q(d / "repr") + " --policy " + q(d / "pol"));
  ASSERT_EQ(e.code, 0) << e.out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config resolution

TEST(Config, DefaultsCoverSchemaAndValidate) {
  const config::ExperimentConfig c;
  for (const config::KeyDef& k : config::schema()) EXPECT_NO_THROW(c.raw(k.name())) << k.name();
  EXPECT_NO_THROW(config::validate(c));
}

TEST(Config, UnknownKeyIsRejected) {
  config::ExperimentConfig c;
  EXPECT_THROW(config::apply_ini(c, "[repr]\nepoch = 3\n", "t.ini"), Error);
  EXPECT_THROW(config::apply_ini(c, "[nosuch]\nepochs = 3\n", "t.ini"), Error);
  EXPECT_THROW(config::apply_overrides(c, {"repr.nope=1"}), Error);
  try {
    config::apply_ini(c, "[repr]\nepochs = 3\nbogus = 1\n", "t.ini");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::invalid_argument);
    EXPECT_NE(std::string(e.what()).find("t.ini:3"), std::string::npos) << e.what();
  }
}

TEST(Config, TypesAreChecked) {
  config::ExperimentConfig c;
  EXPECT_THROW(config::apply_overrides(c, {"repr.epochs=ten"}), Error);
  EXPECT_THROW(config::apply_overrides(c, {"repr.lr=nan"}), Error);
  EXPECT_THROW(config::apply_overrides(c, {"eval.greedy=maybe"}), Error);
  EXPECT_THROW(config::apply_overrides(c, {"repr.epochs"}), Error);
  EXPECT_THROW(config::apply_ini(c, "epochs = 3\n", "t.ini"), Error);
}

TEST(Config, PrecedenceFileEnvSet) {
  const fs::path d = scratch("precedence");
  io::write_file_atomic(d / "p.ini", "[repr]\nepochs = 11\nlr = 0.01\n[seeds]\nrepr = 9\n");
  ::setenv("AGLO_REPR_EPOCHS", "22", 1);
  const config::ExperimentConfig c = config::resolve((d / "p.ini").string(), {"seeds.repr=7"});
  ::unsetenv("AGLO_REPR_EPOCHS");
  EXPECT_EQ(c.integer("repr.epochs"), 22);
  EXPECT_DOUBLE_EQ(c.real("repr.lr"), 0.01);
  EXPECT_EQ(c.seed("repr"), 7u);
  const config::ExperimentConfig no_env = config::resolve((d / "p.ini").string(), {}, false);
  EXPECT_EQ(no_env.integer("repr.epochs"), 11);
}

TEST(Config, HashIsCanonicalAndStageScoped) {
  config::ExperimentConfig a, b;
  a.set("repr.lr", "0.001");
  b.set("repr.lr", "1e-3");
  EXPECT_EQ(a.hash(config::Stage::eval), b.hash(config::Stage::eval));
  b.set("policy.lr", "0.002");
  EXPECT_EQ(a.hash(config::Stage::repr), b.hash(config::Stage::repr));
  EXPECT_NE(a.hash(config::Stage::policy), b.hash(config::Stage::policy));
  b.set("env.obs_horizon", "10");
  EXPECT_NE(a.hash(config::Stage::data), b.hash(config::Stage::data));
}

TEST(Config, IniRoundTrip) {
  config::ExperimentConfig a;
  a.set("repr.epsilon", "0.95");
  a.set("eval.greedy", "off");
  config::ExperimentConfig b;
  config::apply_ini(b, a.to_ini(), "roundtrip");
  EXPECT_EQ(a.canonical_text(), b.canonical_text());
}

TEST(Config, CrossFieldValidation) {
  config::ExperimentConfig c;
  c.set("eval.val_fraction", "0.3");
  EXPECT_THROW(config::validate(c), Error);
  config::ExperimentConfig w;
  w.set("policy.workers", "4");
  EXPECT_THROW(config::validate(w), Error);
  config::ExperimentConfig m;
  m.set("repr.model", "transformer");
  EXPECT_THROW(config::validate(m), Error);
}

TEST(Config, AglowithoutGraphLossesIsHvae) {
  config::ExperimentConfig c;
  c.set("repr.use_ce", "false");
  c.set("repr.use_cont", "false");
  EXPECT_EQ(config::repr_config(c).model, repr::ModelKind::hvae);
}

// ---------------------------------------------------------------------------
// Command line

TEST(Cli, HelpListsEveryConfigKeyAndDefault) {
  const Outcome h = run("--help");
  ASSERT_EQ(h.code, 0);
  std::map<std::string, std::string> listed;
  std::istringstream in(h.out);
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string name, def;
    if (ls >> name >> def && name.find('.') != std::string::npos) listed[name] = def;
  }
  for (const config::KeyDef& k : config::schema()) {
    ASSERT_TRUE(listed.count(k.name())) << k.name() << " missing from --help";
    EXPECT_EQ(listed[k.name()], k.default_value) << k.name();
  }
  for (const char* sub : {"gen-obs", "train-repr", "train-policy", "evaluate", "ablate", "plot"})
    EXPECT_NE(h.out.find(sub), std::string::npos) << sub;
  const Outcome sub = run("train-repr --help");
  EXPECT_EQ(sub.code, 0);
  EXPECT_NE(sub.out.find("repr.epsilon"), std::string::npos);
}

TEST(Cli, ExitCodesForBadInvocations) {
  const fs::path d = scratch("codes");
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
  EXPECT_EQ(run("gen-obs").code, 2);
  EXPECT_EQ(run("gen-obs --out " + q(d / "x") + " --set repr.nope=1").code, 2);
  EXPECT_EQ(run("gen-obs --out " + q(d / "x") + " --set eval.val_fraction=0.9").code, 2);
  EXPECT_EQ(run("gen-obs --out " + q(d / "x"), "AGLO_REPR_EPOCHS=many").code, 2);
  EXPECT_EQ(run("gen-obs --out " + q(d / "x") + " --config " + q(d / "absent.ini")).code, 1);
  EXPECT_EQ(run("train-repr --dataset " + q(d / "absent") + " --out " + q(d / "r")).code, 1);
  EXPECT_EQ(run("plot --curves a=" + q(d / "absent.csv") + " --out " + q(d)).code, 1);
}

TEST(Cli, RefusesNonEmptyOutputWithoutForce) {
  const fs::path d = scratch("force");
  ASSERT_EQ(run("gen-obs" + cfg(d) + " --out " + q(d / "data")).code, 0);
  EXPECT_EQ(run("gen-obs" + cfg(d) + " --out " + q(d / "data")).code, 1);
  EXPECT_EQ(run("gen-obs" + cfg(d) + " --out " + q(d / "data") + " --force").code, 0);
}

TEST(Cli, LeakageInjectionExitsThree) {
  const fs::path d = scratch("leak");
  ASSERT_EQ(run("gen-obs" + cfg(d) + " --out " + q(d / "data")).code, 0);
  // Seen actions plus one unseen action.
  env::ObservationDataset train = env::load_dataset(d / "data/train");
  const env::ObservationDataset test = env::load_dataset(d / "data/test");
  train.manifest.action_ids.push_back(test.manifest.action_ids.front());
  if (!test.manifest.latent.empty()) train.manifest.latent.push_back(test.manifest.latent.front());
  train.arrays.push_back(test.arrays.front());
  env::save_dataset(train, d / "leaky");
  const Outcome o = run("train-repr" + cfg(d) + " --dataset " + q(d / "leaky") + " --out " + q(d / "repr"));
  EXPECT_EQ(o.code, 3) << o.out;
  EXPECT_NE(o.out.find("held-out split"), std::string::npos) << o.out;
  EXPECT_FALSE(fs::exists(d / "repr" / "repr.ckpt"));
  EXPECT_EQ(run("train-repr" + cfg(d) + " --dataset " + q(d / "data/test") + " --out " + q(d / "repr2")).code, 3);
}

TEST(Cli, ConfigMismatchExitsThree) {
  const fs::path d = scratch("mismatch");
  ASSERT_EQ(run("gen-obs" + cfg(d) + " --out " + q(d / "data")).code, 0);
  EXPECT_EQ(run("train-repr" + cfg(d) + " --set seeds.dataset=9 --dataset " + q(d / "data/train") + " --out " +
                q(d / "r0"))
                .code,
            3);
  ASSERT_EQ(run("train-repr" + cfg(d) + " --dataset " + q(d / "data/train") + " --out " + q(d / "repr")).code, 0);
  const Outcome o =
      run("train-policy" + cfg(d) + " --set repr.embed_dim=12 --repr " + q(d / "repr") + " --out " + q(d / "pol"));
  EXPECT_EQ(o.code, 3) << o.out;
}

TEST(Cli, DivergenceExitsFour) {
  const fs::path d = scratch("diverge");
  ASSERT_EQ(run("gen-obs" + cfg(d) + " --out " + q(d / "data")).code, 0);
  env::ObservationDataset train = env::load_dataset(d / "data/train");
  train.arrays[0][3] = std::numeric_limits<float>::infinity();
  env::save_dataset(train, d / "bad");
  const Outcome o = run("train-repr" + cfg(d) + " --dataset " + q(d / "bad") + " --out " + q(d / "repr"));
  EXPECT_EQ(o.code, 4) << o.out;
}

TEST(Cli, RerunsAreByteIdentical) {
  const fs::path a = scratch("idem_a"), b = scratch("idem_b");
  full_cycle(a);
  full_cycle(b);
  // Every artifact except run manifests (timings and absolute paths).
  int compared = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file() || e.path().filename() == "run_manifest.json") continue;
    const fs::path rel = fs::relative(e.path(), a);
    ASSERT_TRUE(fs::exists(b / rel)) << rel;
    EXPECT_EQ(io::read_file(e.path()), io::read_file(b / rel)) << rel;
    ++compared;
  }
  EXPECT_GE(compared, 15);
  for (const char* f : {"repr/repr.ckpt", "pol/policy.ckpt", "pol/report_test.json", "data/split.json"})
    EXPECT_TRUE(fs::exists(a / f)) << f;
}

TEST(Cli, EvaluateValAndPlot) {
  const fs::path d = scratch("eval");
  full_cycle(d);
  const Outcome v = run("evaluate" + cfg(d) + " --split val --repr " + q(d / "repr") + " --policy " + q(d / "pol"));
  EXPECT_EQ(v.code, 0) << v.out;
  EXPECT_NE(v.out.find("target hit"), std::string::npos);
  EXPECT_TRUE(fs::exists(d / "pol/report_val.json"));
  EXPECT_EQ(run("evaluate" + cfg(d) + " --split train --repr " + q(d / "repr") + " --policy " + q(d / "pol")).code, 2);

  const std::string curves = " --curves aglo=" + q(d / "pol/curves.csv") + " --curves aglo=" + q(d / "pol/curves.csv");
  ASSERT_EQ(run("plot" + curves + " --budget 5 --out " + q(d / "p1")).code, 0);
  ASSERT_EQ(run("plot" + curves + " --budget 5 --out " + q(d / "p2")).code, 0);
  for (const char* f : {"target_hit_n5.svg", "reward_n5.svg"})
    EXPECT_EQ(io::read_file(d / "p1" / f), io::read_file(d / "p2" / f)) << f;
  EXPECT_EQ(run("plot" + curves + " --budget 5 --out " + q(d / "p1")).code, 1);

  io::write_file_atomic(d / "empty.csv", "");
  EXPECT_EQ(run("plot --curves x=" + q(d / "empty.csv") + " --out " + q(d / "p3")).code, 3);
  io::write_file_atomic(d / "bad.csv", "steps,return\n1,2\n");
  EXPECT_EQ(run("plot --curves x=" + q(d / "bad.csv") + " --out " + q(d / "p3")).code, 3);
}

TEST(Cli, AblateWritesSixVariantRows) {
  const fs::path d = scratch("ablate");
  const Outcome o = run("ablate" + cfg(d) + " --seeds 1 --out " + q(d / "abl"));
  ASSERT_EQ(o.code, 0) << o.out;
  const std::string csv = io::read_file(d / "abl/ablation.csv");
  int lines = 0;
  for (char ch : csv) lines += ch == '\n';
  EXPECT_EQ(lines, 7);
  EXPECT_EQ(csv.rfind("variant,use_ce,use_cont,use_aug,", 0), 0u);
  EXPECT_TRUE(fs::exists(d / "abl/ce+cont+aug/seed0/report.json"));
}
