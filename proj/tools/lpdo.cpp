// lpdo: experiment harness for listwise preference diffusion on user
// behaviour trajectories.
//
//   lpdo prepare  --config exp.cfg
//   lpdo train    --config exp.cfg [--resume]
//   lpdo evaluate --config exp.cfg --checkpoint runs/run-XXXX/best.ckpt
//   lpdo sweep    --config exp.cfg --grid loss.gamma=0,0.3,0.8 [--workers 2]
//   lpdo report   [--run-root runs]
//
// Any config key can be overridden with --set key=value.

#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "lpdo/cli.hpp"

namespace {

lpdo::Config load_config(const std::string& path, const std::vector<std::string>& overrides) {
  lpdo::Config cfg = path.empty() ? lpdo::Config() : lpdo::Config::load(path);
  for (const auto& o : overrides) cfg.apply_override(o);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Listwise preference diffusion for trajectory prediction"};
  app.set_version_flag("--version", lpdo::cli::kVersion);
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("-c,--config", config_path, "Config file (key = value lines)");
    cmd->add_option("-s,--set", overrides, "Override a config key: key=value")->allow_extra_args(false);
  };

  auto* prepare = app.add_subcommand("prepare", "Build id map, splits and dataset statistics");
  add_common(prepare);

  bool resume = false;
  auto* train = app.add_subcommand("train", "Train a model on prepared splits");
  add_common(train);
  train->add_flag("--resume", resume, "Continue from the run's last checkpoint");

  std::string checkpoint;
  auto* evaluate = app.add_subcommand("evaluate", "Evaluate a checkpoint");
  add_common(evaluate);
  evaluate->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  std::string steps_list, topk_list, split;
  evaluate->add_option("--steps", steps_list, "Inference step counts, e.g. 1,5,25,50");
  evaluate->add_option("--topk", topk_list, "K values, e.g. 5,10,20");
  evaluate->add_option("--split", split, "train, valid or test");

  std::vector<std::string> grid;
  std::size_t workers = 1;
  bool sweep_eval = false;
  auto* sweep = app.add_subcommand("sweep", "Train every point of a config grid");
  add_common(sweep);
  sweep->add_option("--grid", grid, "key=v1,v2,... (repeatable)")->required();
  sweep->add_option("--workers", workers, "Concurrent runs")->check(CLI::PositiveNumber);
  sweep->add_flag("--evaluate", sweep_eval, "Evaluate each run's best checkpoint");

  std::string report_root;
  auto* report = app.add_subcommand("report", "Summarise evaluated runs");
  add_common(report);
  report->add_option("--run-root", report_root, "Directory holding run-* folders");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : lpdo::cli::kUsage;
  }

  try {
    lpdo::Config cfg = load_config(config_path, overrides);
    if (*prepare) {
      lpdo::cli::cmd_prepare(cfg, std::cout);
    } else if (*train) {
      lpdo::cli::cmd_train(cfg, resume, std::cout);
    } else if (*evaluate) {
      if (!steps_list.empty()) cfg.set("infer.steps", steps_list);
      if (!topk_list.empty()) cfg.set("eval.topk", topk_list);
      if (!split.empty()) cfg.set("eval.split", split);
      lpdo::cli::cmd_evaluate(cfg, checkpoint, std::cout);
    } else if (*sweep) {
      std::vector<lpdo::cli::GridAxis> axes;
      for (const auto& g : grid) axes.push_back(lpdo::cli::parse_grid(g));
      lpdo::cli::cmd_sweep(cfg, axes, workers, sweep_eval, std::cout);
    } else if (*report) {
      const auto root = report_root.empty() ? lpdo::cli::run_root(cfg) : std::filesystem::path(report_root);
      if (lpdo::cli::cmd_report(root, std::cout) == 0) std::cout << "no evaluated runs found\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "lpdo: " << e.what() << '\n';
    return lpdo::cli::exit_code_for(e);
  }
  return 0;
}
