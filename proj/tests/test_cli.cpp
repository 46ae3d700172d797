#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "lpdo/cli.hpp"
#include "lpdo/synthetic.hpp"

using namespace lpdo;
namespace fs = std::filesystem;

namespace {

class Workspace {
 public:
  explicit Workspace(const std::string& name)
      : root_(fs::temp_directory_path() / ("lpdo_cli_" + name)) {
    fs::remove_all(root_);
    fs::create_directories(root_);
    MotifCorpusSpec spec;
    spec.users = 40;
    spec.items = 15;
    std::ofstream log(root_ / "toy.tsv");
    write_motif_corpus(spec, log);
  }
  ~Workspace() { fs::remove_all(root_); }

  const fs::path& root() const { return root_; }

  Config config() const {
    Config c;
    c.set("dataset.path", (root_ / "toy.tsv").string());
    c.set("run.root", (root_ / "runs").string());
    c.set("traj.k", "2");
    c.set("traj.n_max", "6");
    c.set("model.d", "8");
    c.set("model.blocks", "1");
    c.set("model.heads", "2");
    c.set("diffusion.steps", "10");
    c.set("train.lr", "0.01");
    c.set("train.batch_size", "16");
    c.set("train.max_epochs", "2");
    c.set("eval.topk", "1,5");
    c.set("infer.steps", "1,2");
    return c;
  }

  std::string write_config(const Config& c) const {
    const auto p = (root_ / "exp.cfg").string();
    std::ofstream(p) << c.canonical();
    return p;
  }

 private:
  fs::path root_;
};

int run_binary(const std::string& args) {
  const std::string cmd = std::string(LPDO_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::size_t count_lines(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  std::string line;
  while (std::getline(in, line)) n += !line.empty();
  return n;
}

}  // namespace

TEST(Config, ParsesFileAndOverrides) {
  std::istringstream in("# experiment\ntraj.k = 3\nloss.gamma=0.8  # listwise\n\n");
  Config c = Config::parse(in);
  EXPECT_EQ(c.count("traj.k"), 3u);
  EXPECT_DOUBLE_EQ(c.real("loss.gamma"), 0.8);
  EXPECT_EQ(c.count("model.d"), 128u);
  c.apply_override("traj.k=4");
  EXPECT_EQ(c.count("traj.k"), 4u);
  EXPECT_EQ(c.counts("eval.topk"), (std::vector<std::size_t>{5, 10, 20, 50, 100}));
  EXPECT_THROW(c.set("no.such.key", "1"), ConfigError);
  EXPECT_THROW(c.apply_override("traj.k"), ConfigError);
  c.set("traj.k", "-1");
  EXPECT_THROW(c.count("traj.k"), ConfigError);
  std::istringstream bad("traj.k 3\n");
  EXPECT_THROW(Config::parse(bad), ParseError);
}

TEST(Config, HashIgnoresLocationsAndEvaluationKeys) {
  Config a, b;
  b.set("run.root", "/elsewhere");
  b.set("infer.steps", "1,5,25,50");
  b.set("train.max_epochs", "7");
  EXPECT_EQ(a.hash(), b.hash());
  b.set("loss.gamma", "0.3");
  EXPECT_NE(a.hash(), b.hash());
}

TEST(Config, BuildersValidate) {
  Config c;
  c.set("model.heads", "3");
  EXPECT_THROW(denoiser_config_from(c, 10), ConfigError);
  Config d;
  d.set("train.patience", "0");
  EXPECT_THROW(train_config_from(d), ConfigError);
  Config e;
  e.set("diffusion.beta_end", "2");
  EXPECT_THROW(schedule_from(e), ConfigError);
}

TEST(Cli, ExitCodeMapping) {
  using namespace lpdo::cli;
  EXPECT_EQ(exit_code_for(ConfigError("x")), kUsage);
  EXPECT_EQ(exit_code_for(IoError("x")), kInputError);
  EXPECT_EQ(exit_code_for(ParseError("x", 1)), kInputError);
  EXPECT_EQ(exit_code_for(EmptyCorpusError("x")), kInputError);
  EXPECT_EQ(exit_code_for(EmptySplitError("x")), kEmptySplit);
  EXPECT_EQ(exit_code_for(NumericError("x")), kNumericAbort);
  EXPECT_EQ(exit_code_for(TrainingError("x")), kNumericAbort);
  EXPECT_EQ(exit_code_for(CheckpointMismatchError("x")), kVocabMismatch);
}

TEST(Cli, PrepareIsDeterministic) {
  Workspace ws("prepare");
  const auto cfg = ws.config();
  std::ostringstream out;
  const auto stats = cli::cmd_prepare(cfg, out);
  EXPECT_EQ(stats.sequences_before, 40u);
  EXPECT_NE(out.str().find("sequences (after)"), std::string::npos);
  const auto dir = cli::data_dir(cfg);
  const auto first = cli::read_file(dir / "splits.jsonl");
  EXPECT_EQ(count_lines(dir / "splits.jsonl"), 3 * stats.sequences_after);
  std::ostringstream again;
  cli::cmd_prepare(cfg, again);
  EXPECT_EQ(cli::read_file(dir / "splits.jsonl"), first);
  EXPECT_TRUE(fs::exists(dir / "id_map.tsv"));
  EXPECT_TRUE(fs::exists(dir / "stats.json"));
}

TEST(Cli, TrainResumeEvaluateReport) {
  Workspace ws("pipeline");
  auto cfg = ws.config();
  std::ostringstream sink;
  cli::cmd_prepare(cfg, sink);
  const auto outcome = cli::cmd_train(cfg, false, sink);
  EXPECT_EQ(outcome.epochs, 2u);
  for (const char* f : {"best.ckpt", "last.ckpt", "manifest.json", "config.txt", "train_log.jsonl",
                        "metrics.jsonl", "loss_curve.csv"})
    EXPECT_TRUE(fs::exists(outcome.run_dir / f)) << f;
  EXPECT_EQ(count_lines(outcome.run_dir / "train_log.jsonl"), 2u);

  cfg.set("train.max_epochs", "3");
  const auto resumed = cli::cmd_train(cfg, true, sink);
  EXPECT_EQ(resumed.run_dir, outcome.run_dir);
  EXPECT_EQ(resumed.epochs, 3u);
  std::ifstream log(outcome.run_dir / "train_log.jsonl");
  std::string line;
  std::vector<std::size_t> epochs;
  while (std::getline(log, line)) epochs.push_back(nlohmann::json::parse(line).at("epoch").get<std::size_t>());
  EXPECT_EQ(epochs, (std::vector<std::size_t>{1, 2, 3}));

  const auto reports = cli::cmd_evaluate(cfg, outcome.run_dir / "best.ckpt", sink);
  ASSERT_EQ(reports.size(), 2u);
  EXPECT_EQ(reports[0].n_steps, 1u);
  EXPECT_EQ(reports[1].n_steps, 2u);
  EXPECT_EQ(reports[0].ks, (std::vector<std::size_t>{1, 5}));
  const auto again = cli::cmd_evaluate(cfg, outcome.run_dir / "best.ckpt", sink);
  EXPECT_EQ(again[0].seq_match, reports[0].seq_match);
  EXPECT_DOUBLE_EQ(again[1].ppl, reports[1].ppl);

  std::ostringstream table;
  EXPECT_EQ(cli::cmd_report(cli::run_root(cfg), table), 4u);
  EXPECT_TRUE(fs::exists(cli::run_root(cfg) / "summary.csv"));
}

TEST(Cli, AblationRecordedInManifest) {
  Workspace ws("ablation");
  auto cfg = ws.config();
  cfg.set("train.no_listpref", "true");
  cfg.set("train.max_epochs", "1");
  std::ostringstream sink;
  cli::cmd_prepare(cfg, sink);
  const auto outcome = cli::cmd_train(cfg, false, sink);
  const auto manifest = nlohmann::json::parse(cli::read_file(outcome.run_dir / "manifest.json"));
  EXPECT_EQ(manifest.at("ablation"), "w/o-L_ListPref");
}

TEST(Cli, GammaSweepMakesOneRunPerValue) {
  Workspace ws("sweep");
  auto cfg = ws.config();
  cfg.set("train.max_epochs", "1");
  std::ostringstream sink;
  cli::cmd_prepare(cfg, sink);
  const auto axis = cli::parse_grid("loss.gamma=0,0.3,0.8");
  EXPECT_EQ(axis.values.size(), 3u);
  const auto runs = cli::cmd_sweep(cfg, {axis}, 2, false, sink);
  ASSERT_EQ(runs.size(), 3u);
  EXPECT_NE(runs[0].run_dir, runs[1].run_dir);
  EXPECT_NE(runs[1].run_dir, runs[2].run_dir);
  std::size_t dirs = 0;
  for (const auto& e : fs::directory_iterator(cli::run_root(cfg)))
    dirs += e.path().filename().string().rfind("run-", 0) == 0;
  EXPECT_EQ(dirs, 3u);
  EXPECT_THROW(cli::parse_grid("loss.gamma"), ConfigError);
}

TEST(Cli, BinaryExitCodes) {
  Workspace ws("binary");
  auto cfg = ws.config();
  cfg.set("train.max_epochs", "1");
  const auto path = ws.write_config(cfg);
  EXPECT_EQ(run_binary("prepare --config " + path), 0);
  EXPECT_EQ(run_binary("prepare --config " + path + " --set traj.k=40"), 3);
  EXPECT_EQ(run_binary("prepare --config " + path + " --set dataset.path=/no/such/file"), 2);
  EXPECT_EQ(run_binary("prepare --config " + path + " --set bogus.key=1"), 1);
  EXPECT_EQ(run_binary("frobnicate"), 1);
  EXPECT_EQ(run_binary("--help"), 0);
  EXPECT_EQ(run_binary("train --config " + path), 0);
  const auto ckpt = (cli::run_dir(cfg) / "best.ckpt").string();
  EXPECT_EQ(run_binary("evaluate --config " + path + " --checkpoint " + ckpt + " --steps 1"), 0);

  // Rebuild the data from a log whose raw item ids differ: the checkpoint
  // no longer matches the vocabulary.
  {
    std::ifstream in(ws.root() / "toy.tsv");
    std::ofstream out(ws.root() / "renamed.tsv");
    std::string user, item, ts;
    while (in >> user >> item >> ts) out << user << "\tz" << item << '\t' << ts << '\n';
  }
  const std::string other = " --set dataset.path=" + (ws.root() / "renamed.tsv").string() +
                            " --set data.dir=" + (ws.root() / "other").string();
  EXPECT_EQ(run_binary("prepare --config " + path + other), 0);
  EXPECT_EQ(run_binary("evaluate --config " + path + other + " --checkpoint " + ckpt), 5);
  EXPECT_EQ(run_binary("evaluate --config " + path + " --checkpoint " + path), 2);
}
