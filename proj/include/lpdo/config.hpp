#pragma once

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "lpdo/dataset.hpp"
#include "lpdo/denoiser.hpp"
#include "lpdo/errors.hpp"
#include "lpdo/trainer.hpp"

namespace lpdo {

// Every key the experiment harness understands, with its default value.
// A config file is flat "key = value" text; '#' starts a comment.
inline const std::map<std::string, std::string>& config_defaults() {
  static const std::map<std::string, std::string> defaults = {
      {"dataset.path", ""},
      {"dataset.format", "tsv"},
      {"dataset.delimiter", ""},
      {"dataset.skip_header", "false"},
      {"data.dir", ""},
      {"traj.k", "5"},
      {"traj.n_max", "50"},
      {"model.d", "128"},
      {"model.blocks", "4"},
      {"model.heads", "4"},
      {"model.ffn_mult", "4"},
      {"model.dropout", "0.1"},
      {"model.mask", "causal"},
      {"model.cosine_scores", "false"},
      {"model.seed", "0"},
      {"diffusion.steps", "50"},
      {"diffusion.beta_start", "0.0001"},
      {"diffusion.beta_end", "0.02"},
      {"loss.lambda", "0.1"},
      {"loss.gamma", "0.0"},
      {"loss.reg_weight", "1.0"},
      {"loss.trajectory_only", "false"},
      {"train.lr", "0.001"},
      {"train.batch_size", "256"},
      {"train.max_epochs", "1000"},
      {"train.patience", "5"},
      {"train.seed", "0"},
      {"train.eval_every", "1"},
      {"train.eval_steps", "1"},
      {"train.select_k", "5"},
      {"train.no_listpref", "false"},
      {"train.no_simple", "false"},
      {"train.no_reg", "false"},
      {"infer.steps", "1"},
      {"infer.exclude_previous", "false"},
      {"eval.topk", "5,10,20,50,100"},
      {"eval.split", "test"},
      {"eval.seed", "0"},
      {"eval.batch_size", "256"},
      {"run.root", ""},
  };
  return defaults;
}

// Keys that do not change what a training run computes: file locations,
// the epoch budget (so a run can be resumed with a larger one) and
// evaluation-time settings.
inline bool is_location_key(const std::string& key) {
  return key == "run.root" || key == "data.dir" || key == "dataset.path" ||
         key == "train.max_epochs" || key.rfind("infer.", 0) == 0 || key.rfind("eval.", 0) == 0;
}

class Config {
 public:
  Config() = default;

  static Config parse(std::istream& in) {
    Config c;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const auto t = std::string(detail::trim(line));
      if (t.empty()) continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos) throw ParseError("expected 'key = value'", line_no);
      c.set(std::string(detail::trim(std::string_view(t).substr(0, eq))),
            std::string(detail::trim(std::string_view(t).substr(eq + 1))));
    }
    return c;
  }

  static Config load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config '" + path + "'");
    return parse(in);
  }

  void set(const std::string& key, const std::string& value) {
    if (!config_defaults().count(key)) throw ConfigError("unknown config key '" + key + "'");
    values_[key] = value;
  }

  // "key=value" override from the command line.
  void apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' lacks '='");
    set(std::string(detail::trim(std::string_view(assignment).substr(0, eq))),
        std::string(detail::trim(std::string_view(assignment).substr(eq + 1))));
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string str(const std::string& key) const {
    if (auto it = values_.find(key); it != values_.end()) return it->second;
    const auto& d = config_defaults();
    auto it = d.find(key);
    if (it == d.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

  double real(const std::string& key) const {
    const auto s = str(key);
    try {
      std::size_t pos = 0;
      const double v = std::stod(s, &pos);
      if (pos != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw ConfigError(key + ": '" + s + "' is not a number");
    }
  }

  std::size_t count(const std::string& key) const {
    const auto s = str(key);
    std::size_t v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size())
      throw ConfigError(key + ": '" + s + "' is not a non-negative integer");
    return v;
  }

  bool flag(const std::string& key) const {
    const auto s = str(key);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw ConfigError(key + ": '" + s + "' is not a boolean");
  }

  std::vector<std::size_t> counts(const std::string& key) const {
    std::vector<std::size_t> out;
    std::stringstream ss(str(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto t = std::string(detail::trim(item));
      if (t.empty()) continue;
      std::size_t v = 0;
      const auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
      if (ec != std::errc() || p != t.data() + t.size())
        throw ConfigError(key + ": '" + t + "' is not a non-negative integer");
      out.push_back(v);
    }
    if (out.empty()) throw ConfigError(key + " is empty");
    return out;
  }

  // All keys with effective values, sorted.
  std::string canonical(bool include_locations = true) const {
    std::ostringstream os;
    for (const auto& [key, def] : config_defaults()) {
      if (!include_locations && is_location_key(key)) continue;
      os << key << " = " << str(key) << '\n';
    }
    return os.str();
  }

  // Names the training run a config describes.
  std::string hash() const { return hex64(fnv1a(canonical(false))).substr(0, 12); }

  const std::map<std::string, std::string>& explicit_values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

inline LoadOptions load_options_from(const Config& c) {
  LoadOptions o;
  o.format = parse_log_format(c.str("dataset.format"));
  if (!c.str("dataset.delimiter").empty()) {
    auto d = c.str("dataset.delimiter");
    if (d == "\\t" || d == "tab") d = "\t";
    o.delimiter = d;
  }
  o.skip_header = c.flag("dataset.skip_header");
  return o;
}

inline DenoiserConfig denoiser_config_from(const Config& c, std::size_t vocab_size) {
  DenoiserConfig m;
  m.vocab_size = vocab_size;
  m.embed_dim = c.count("model.d");
  m.n_blocks = c.count("model.blocks");
  m.n_heads = c.count("model.heads");
  m.ffn_mult = c.count("model.ffn_mult");
  m.dropout = c.real("model.dropout");
  m.mask_mode = parse_mask_mode(c.str("model.mask"));
  m.cosine_scores = c.flag("model.cosine_scores");
  m.init_seed = c.count("model.seed");
  m.n_max = c.count("traj.n_max");
  m.k = c.count("traj.k");
  m.validate();
  return m;
}

inline NoiseSchedule schedule_from(const Config& c) {
  return linear_schedule(c.count("diffusion.steps"), c.real("diffusion.beta_start"),
                         c.real("diffusion.beta_end"));
}

inline TrainConfig train_config_from(const Config& c) {
  TrainConfig t;
  t.learning_rate = c.real("train.lr");
  t.batch_size = c.count("train.batch_size");
  t.max_epochs = c.count("train.max_epochs");
  t.patience = c.count("train.patience");
  t.seed = c.count("train.seed");
  t.eval_every = c.count("train.eval_every");
  t.eval_steps = c.count("train.eval_steps");
  t.select_k = c.count("train.select_k");
  t.no_listpref = c.flag("train.no_listpref");
  t.no_simple = c.flag("train.no_simple");
  t.no_reg = c.flag("train.no_reg");
  t.trajectory_only_reconstruction = c.flag("loss.trajectory_only");
  t.weights.lambda = c.real("loss.lambda");
  t.weights.gamma = c.real("loss.gamma");
  t.weights.reg_weight = c.real("loss.reg_weight");
  t.validate();
  return t;
}

}  // namespace lpdo
