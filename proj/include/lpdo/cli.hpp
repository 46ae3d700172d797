#pragma once

// Command implementations behind the `lpdo` executable. Each command
// returns a process exit code; library errors are mapped by exit_code_for().

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "lpdo/checkpoint.hpp"
#include "lpdo/config.hpp"
#include "lpdo/dataset.hpp"
#include "lpdo/metrics.hpp"
#include "lpdo/sampler.hpp"
#include "lpdo/trainer.hpp"

namespace lpdo::cli {

inline constexpr const char* kVersion = "0.1.0";

enum ExitCode : int {
  kOk = 0,
  kUsage = 1,           // bad arguments or configuration
  kInputError = 2,      // unreadable or malformed input
  kEmptySplit = 3,      // no user passes the length filter
  kNumericAbort = 4,    // non-finite loss or failed training
  kVocabMismatch = 5,   // checkpoint trained on another vocabulary
};

inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const EmptySplitError*>(&e)) return kEmptySplit;
  if (dynamic_cast<const CheckpointMismatchError*>(&e)) return kVocabMismatch;
  if (dynamic_cast<const NumericError*>(&e) || dynamic_cast<const TrainingError*>(&e))
    return kNumericAbort;
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const ParseError*>(&e) ||
      dynamic_cast<const EmptyCorpusError*>(&e))
    return kInputError;
  return kUsage;
}

namespace fs = std::filesystem;

inline fs::path run_root(const Config& cfg) {
  if (!cfg.str("run.root").empty()) return cfg.str("run.root");
  if (const char* env = std::getenv("LPDO_RUN_ROOT"); env && *env) return env;
  return "runs";
}

inline fs::path data_dir(const Config& cfg) {
  if (!cfg.str("data.dir").empty()) return cfg.str("data.dir");
  return run_root(cfg) / "data";
}

inline fs::path run_dir(const Config& cfg) { return run_root(cfg) / ("run-" + cfg.hash()); }

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read '" + p.string() + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write '" + p.string() + "'");
  out << text;
}

// Prepared dataset as laid down by `prepare`.
struct PreparedData {
  std::vector<std::string> item_raw_ids;
  std::vector<TrajectoryExample> examples;
  std::string vocab_hash;
  std::string data_hash;

  std::vector<TrajectoryExample> split(Split s) const { return select_split(examples, s); }
};

inline PreparedData load_prepared(const Config& cfg) {
  const fs::path dir = data_dir(cfg);
  PreparedData d;
  {
    std::ifstream in(dir / "id_map.tsv");
    if (!in) throw IoError("no prepared data in '" + dir.string() + "' (run `lpdo prepare` first)");
    d.item_raw_ids = read_id_map(in);
  }
  const std::string manifest = read_file(dir / "splits.jsonl");
  std::istringstream in(manifest);
  d.examples = read_manifest(in, cfg.count("traj.n_max"));
  for (const auto& ex : d.examples)
    if (ex.target.size() != cfg.count("traj.k"))
      throw ConfigError("prepared data has trajectory length " + std::to_string(ex.target.size()) +
                        " but traj.k = " + cfg.str("traj.k"));
  d.vocab_hash = vocabulary_hash(d.item_raw_ids);
  d.data_hash = hex64(fnv1a(manifest));
  return d;
}

inline nlohmann::ordered_json stats_to_json(const SplitStats& s) {
  nlohmann::ordered_json j;
  j["trajectory_length"] = s.k;
  j["n_max"] = s.n_max;
  j["valid_if_length_greater_than"] = s.min_length_exclusive;
  j["sequences_before"] = s.sequences_before;
  j["sequences_after"] = s.sequences_after;
  j["items"] = s.items;
  j["actions"] = s.actions;
  j["average_length"] = s.average_length;
  return j;
}

// prepare: raw log -> id map, split manifest and dataset statistics.
inline SplitStats cmd_prepare(const Config& cfg, std::ostream& out) {
  if (cfg.str("dataset.path").empty()) throw ConfigError("dataset.path is not set");
  const auto corpus = load_interactions(cfg.str("dataset.path"), load_options_from(cfg));
  SplitStats stats;
  const auto examples =
      filter_and_split(corpus, cfg.count("traj.k"), cfg.count("traj.n_max"), &stats);
  const fs::path dir = data_dir(cfg);
  fs::create_directories(dir);
  {
    std::ostringstream os;
    write_id_map(corpus, os);
    write_file(dir / "id_map.tsv", os.str());
  }
  {
    std::ostringstream os;
    write_manifest(examples, os);
    write_file(dir / "splits.jsonl", os.str());
  }
  write_file(dir / "stats.json", stats_to_json(stats).dump(2) + "\n");
  out << "dataset            " << cfg.str("dataset.path") << '\n'
      << "trajectory length  " << stats.k << '\n'
      << "sequences (before) " << stats.sequences_before << '\n'
      << "sequences (after)  " << stats.sequences_after << '\n'
      << "items              " << stats.items << '\n'
      << "actions            " << stats.actions << '\n'
      << "average length     " << stats.average_length << '\n'
      << "written to         " << dir.string() << '\n';
  return stats;
}

struct TrainOutcome {
  fs::path run_dir;
  std::size_t epochs = 0;
  double best_metric = 0.0;
  std::size_t best_epoch = 0;
};

inline nlohmann::ordered_json run_manifest(const Config& cfg, const PreparedData& data,
                                           const TrainConfig& tc, const NoiseSchedule& sched,
                                           const Denoiser& model) {
  nlohmann::ordered_json j;
  j["code_version"] = kVersion;
  j["config_hash"] = cfg.hash();
  j["data_hash"] = data.data_hash;
  j["vocab_hash"] = data.vocab_hash;
  j["ablation"] = tc.ablation_label();
  j["selection_metric"] = "valid SeqNDCG@" + std::to_string(tc.select_k);
  j["optimizer"] = {{"name", "adam"},
                    {"learning_rate", tc.learning_rate},
                    {"beta1", tc.adam.beta1},
                    {"beta2", tc.adam.beta2},
                    {"eps", tc.adam.eps}};
  j["schedule"] = {{"T", sched.steps()},
                   {"beta_start", sched.beta(1)},
                   {"beta_end", sched.beta(sched.steps())},
                   {"inference_steps", cfg.str("infer.steps")}};
  j["model"] = denoiser_config_to_json(model.config());
  j["parameter_count"] = model.parameter_count();
  nlohmann::ordered_json c;
  for (const auto& [key, def] : config_defaults()) c[key] = cfg.str(key);
  j["config"] = c;
  return j;
}

// train: fits a model on the prepared splits; everything lands in the run
// directory named by the config hash.
inline TrainOutcome cmd_train(const Config& cfg, bool resume, std::ostream& out) {
  const PreparedData data = load_prepared(cfg);
  const auto train = data.split(Split::train);
  const auto valid = data.split(Split::valid);
  if (valid.empty()) throw ArgumentError("validation split is empty");
  const TrainConfig tc = train_config_from(cfg);
  const NoiseSchedule sched = schedule_from(cfg);
  Denoiser model(denoiser_config_from(cfg, data.item_raw_ids.size()));

  const fs::path dir = run_dir(cfg);
  fs::create_directories(dir);
  const fs::path last = dir / "last.ckpt", best = dir / "best.ckpt";
  Trainer trainer(model, sched, tc);
  bool resumed = false;
  if (resume && fs::exists(last)) {
    const auto ckpt = read_checkpoint(last.string());
    if (ckpt.vocab_hash != data.vocab_hash)
      throw CheckpointMismatchError("resume checkpoint was trained on vocabulary " +
                                    ckpt.vocab_hash + ", data has " + data.vocab_hash);
    Denoiser loaded = load_model(ckpt, data.vocab_hash);
    restore(model, snapshot(loaded));
    restore_trainer(trainer, model, ckpt);
    trainer.last_good_checkpoint = last.string();
    resumed = true;
    out << "resuming from epoch " << trainer.state().epoch << '\n';
  }
  write_file(dir / "config.txt", cfg.canonical());
  write_file(dir / "manifest.json", run_manifest(cfg, data, tc, sched, model).dump(2) + "\n");

  const auto mode = resumed ? std::ios::app : std::ios::trunc;
  std::ofstream step_log(dir / "metrics.jsonl", mode);
  std::ofstream epoch_log(dir / "train_log.jsonl", mode);
  std::ofstream curve(dir / "loss_curve.csv", mode);
  if (!resumed) curve << "epoch,L_simple,L_listpref,L_reg,L_total,valid_metric\n";

  FitCallbacks cb;
  cb.on_step = [&](const StepRecord& r) {
    nlohmann::ordered_json j;
    j["step"] = r.step;
    j["L_simple"] = r.loss.simple;
    j["L_listpref"] = r.loss.list_pref;
    j["L_reg"] = r.loss.reg;
    j["L_total"] = r.loss.total;
    step_log << j.dump() << '\n';
  };
  cb.on_epoch = [&](const EpochRecord& r, const TrainerState& st) {
    nlohmann::ordered_json j;
    j["epoch"] = r.epoch;
    j["steps"] = r.steps;
    j["L_simple"] = r.mean.simple;
    j["L_listpref"] = r.mean.list_pref;
    j["L_reg"] = r.mean.reg;
    j["L_total"] = r.mean.total;
    if (r.valid_metric) j["valid_seq_ndcg"] = *r.valid_metric;
    if (r.valid_report) j["valid"] = report_to_json(*r.valid_report);
    j["improved"] = r.improved;
    j["best_epoch"] = st.best_epoch;
    epoch_log << j.dump() << '\n';
    epoch_log.flush();
    curve << r.epoch << ',' << r.mean.simple << ',' << r.mean.list_pref << ',' << r.mean.reg << ','
          << r.mean.total << ',' << (r.valid_metric ? std::to_string(*r.valid_metric) : "") << '\n';
    save_checkpoint(last.string(), model, data.vocab_hash, &trainer);
    trainer.last_good_checkpoint = last.string();
    out << "epoch " << r.epoch << "  L_total " << r.mean.total;
    if (r.valid_metric) out << "  valid SeqNDCG@" << trainer.config().select_k << ' ' << *r.valid_metric;
    out << (r.improved ? "  *" : "") << '\n';
  };
  trainer.fit(train, valid, cb);
  save_checkpoint(best.string(), model, data.vocab_hash);
  out << "best epoch " << trainer.state().best_epoch << "  valid metric "
      << trainer.state().best_metric << "\nrun directory " << dir.string() << '\n';
  return {dir, trainer.state().epoch, trainer.state().best_metric, trainer.state().best_epoch};
}

// evaluate: one report per inference step count, each at every K.
inline std::vector<EvalReport> cmd_evaluate(const Config& cfg, const fs::path& checkpoint,
                                            std::ostream& out) {
  const PreparedData data = load_prepared(cfg);
  const auto ckpt = read_checkpoint(checkpoint.string());
  const Denoiser model = load_model(ckpt, data.vocab_hash);
  const NoiseSchedule sched = schedule_from(cfg);
  const Split split = parse_split(cfg.str("eval.split"));
  const auto examples = data.split(split);
  if (examples.empty()) throw ArgumentError("split '" + cfg.str("eval.split") + "' is empty");
  auto ks = cfg.counts("eval.topk");
  for (auto K : ks)
    if (K < 1 || K > model.config().vocab_size)
      throw ConfigError("eval.topk entry " + std::to_string(K) + " outside [1, " +
                        std::to_string(model.config().vocab_size) + "]");

  const fs::path dir = checkpoint.parent_path().empty() ? fs::path(".") : checkpoint.parent_path();
  const std::string tag = std::string(split_name(split));
  std::ofstream records(dir / ("eval-" + tag + ".jsonl"));
  std::ofstream table(dir / ("eval-" + tag + ".txt"));
  std::vector<EvalReport> reports;
  for (std::size_t n_steps : cfg.counts("infer.steps")) {
    SamplerOptions opts;
    opts.n_steps = n_steps;
    opts.topk = *std::max_element(ks.begin(), ks.end());
    opts.seed = cfg.count("eval.seed");
    opts.batch_size = cfg.count("eval.batch_size");
    opts.exclude_previous = cfg.flag("infer.exclude_previous");
    const auto run = batch_predict(model, sched, examples, opts, true);
    std::vector<std::size_t> ranks;
    std::vector<int> targets;
    for (const auto& rec : run.records)
      for (std::size_t j = 0; j < run.k; ++j) {
        ranks.push_back(target_rank(rec.target[j], rec.ranked.items[j]));
        targets.push_back(rec.target[j]);
      }
    EvalReport rep = aggregate(ranks, run.k, ks);
    const auto p = perplexity(run.scores, targets, run.M);
    rep.ppl = p.ppl;
    rep.ln_ppl = p.ln_ppl;
    rep.n_steps = n_steps;
    rep.wall_clock_seconds = run.wall_clock_seconds;

    auto j = report_to_json(rep);
    j["split"] = tag;
    j["checkpoint"] = checkpoint.string();
    records << j.dump() << '\n';
    print_report(rep, table);
    print_report(rep, out);
    {
      std::ofstream pred(dir / ("predictions-" + tag + "-s" + std::to_string(n_steps) + ".jsonl"));
      write_predictions(run, pred);
    }
    {
      std::ofstream csv(dir / ("position_hr-" + tag + "-s" + std::to_string(n_steps) + ".csv"));
      write_position_hr_csv(rep, csv);
    }
    reports.push_back(std::move(rep));
  }
  return reports;
}

// One axis of a sweep: key and its candidate values.
struct GridAxis {
  std::string key;
  std::vector<std::string> values;
};

inline GridAxis parse_grid(const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos) throw ConfigError("grid '" + spec + "' lacks '='");
  GridAxis g;
  g.key = std::string(detail::trim(std::string_view(spec).substr(0, eq)));
  if (!config_defaults().count(g.key)) throw ConfigError("unknown grid key '" + g.key + "'");
  std::stringstream ss(spec.substr(eq + 1));
  std::string v;
  while (std::getline(ss, v, ',')) {
    auto t = std::string(detail::trim(v));
    if (!t.empty()) g.values.push_back(t);
  }
  if (g.values.empty()) throw ConfigError("grid '" + g.key + "' has no values");
  return g;
}

inline std::vector<Config> expand_grid(const Config& base, const std::vector<GridAxis>& axes) {
  std::vector<Config> out{base};
  for (const auto& axis : axes) {
    std::vector<Config> next;
    for (const auto& c : out)
      for (const auto& v : axis.values) {
        Config x = c;
        x.set(axis.key, v);
        next.push_back(std::move(x));
      }
    out = std::move(next);
  }
  return out;
}

// sweep: trains (and optionally evaluates) every grid point. Runs are
// sequential unless workers > 1.
inline std::vector<TrainOutcome> cmd_sweep(const Config& base, const std::vector<GridAxis>& axes,
                                           std::size_t workers, bool evaluate_after,
                                           std::ostream& out) {
  const auto configs = expand_grid(base, axes);
  std::vector<TrainOutcome> outcomes(configs.size());
  auto run_one = [&](std::size_t i) {
    std::ostringstream log;
    outcomes[i] = cmd_train(configs[i], false, log);
    if (evaluate_after) cmd_evaluate(configs[i], outcomes[i].run_dir / "best.ckpt", log);
    return log.str();
  };
  workers = std::max<std::size_t>(1, workers);
  for (std::size_t start = 0; start < configs.size(); start += workers) {
    std::vector<std::future<std::string>> jobs;
    for (std::size_t i = start; i < std::min(configs.size(), start + workers); ++i)
      jobs.push_back(std::async(workers > 1 ? std::launch::async : std::launch::deferred, run_one, i));
    for (std::size_t i = 0; i < jobs.size(); ++i) {
      const std::string text = jobs[i].get();
      out << "== run " << (start + i + 1) << "/" << configs.size() << " -> "
          << outcomes[start + i].run_dir.string() << '\n'
          << text;
    }
  }
  return outcomes;
}

// report: summary table over every evaluated run under the run root.
inline std::size_t cmd_report(const fs::path& root, std::ostream& out) {
  if (!fs::exists(root)) throw IoError("run root '" + root.string() + "' does not exist");
  std::vector<fs::path> runs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory() && fs::exists(e.path() / "manifest.json")) runs.push_back(e.path());
  std::sort(runs.begin(), runs.end());
  std::ofstream csv(root / "summary.csv");
  csv << "run,ablation,lambda,gamma,split,n_steps,K,mean_hr,seq_hr,mean_ndcg,seq_ndcg,seq_match,ppl,"
         "ln_ppl,seconds\n";
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-18s %-16s %6s %6s %5s %5s %8s %8s %8s %8s %8s\n", "run",
                "ablation", "lambda", "gamma", "steps", "K", "SeqHR", "SeqNDCG", "SeqMatch", "PPL",
                "seconds");
  out << buf;
  std::size_t rows = 0;
  for (const auto& dir : runs) {
    const auto manifest = nlohmann::json::parse(read_file(dir / "manifest.json"));
    const std::string ablation = manifest.value("ablation", "full");
    const auto& c = manifest.at("config");
    const std::string lambda = c.value("loss.lambda", ""), gamma = c.value("loss.gamma", "");
    for (const auto& e : fs::directory_iterator(dir)) {
      const auto name = e.path().filename().string();
      if (name.rfind("eval-", 0) != 0 || e.path().extension() != ".jsonl") continue;
      std::istringstream in(read_file(e.path()));
      std::string line;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        const EvalReport rep = report_from_json(j);
        const std::string split = j.value("split", "");
        for (std::size_t i = 0; i < rep.ks.size(); ++i) {
          std::snprintf(buf, sizeof buf,
                        "%-18s %-16s %6s %6s %5zu %5zu %8.4f %8.4f %8.4f %8.3f %8.3f\n",
                        dir.filename().string().c_str(), ablation.c_str(), lambda.c_str(),
                        gamma.c_str(), rep.n_steps, rep.ks[i], rep.seq_hr[i], rep.seq_ndcg[i],
                        rep.seq_match[i], rep.ppl, rep.wall_clock_seconds);
          out << buf;
          csv << dir.filename().string() << ',' << ablation << ',' << lambda << ',' << gamma << ','
              << split << ',' << rep.n_steps << ',' << rep.ks[i] << ',' << rep.mean_hr[i] << ','
              << rep.seq_hr[i] << ',' << rep.mean_ndcg[i] << ',' << rep.seq_ndcg[i] << ','
              << rep.seq_match[i] << ',' << rep.ppl << ',' << rep.ln_ppl << ','
              << rep.wall_clock_seconds << '\n';
          ++rows;
        }
      }
    }
  }
  return rows;
}

}  // namespace lpdo::cli
