#pragma once

#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "lpdo/denoiser.hpp"
#include "lpdo/errors.hpp"
#include "lpdo/trainer.hpp"

namespace lpdo {

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json denoiser_config_to_json(const DenoiserConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"embed_dim", c.embed_dim},
          {"n_blocks", c.n_blocks},     {"n_heads", c.n_heads},
          {"ffn_mult", c.ffn_mult},     {"dropout", c.dropout},
          {"mask_mode", mask_mode_name(c.mask_mode)},
          {"n_max", c.n_max},           {"k", c.k},
          {"cosine_scores", c.cosine_scores},
          {"init_seed", c.init_seed}};
}

inline DenoiserConfig denoiser_config_from_json(const nlohmann::json& j) {
  DenoiserConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.embed_dim = j.at("embed_dim").get<std::size_t>();
  c.n_blocks = j.at("n_blocks").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.ffn_mult = j.at("ffn_mult").get<std::size_t>();
  c.dropout = j.at("dropout").get<double>();
  c.mask_mode = parse_mask_mode(j.at("mask_mode").get<std::string>());
  c.n_max = j.at("n_max").get<std::size_t>();
  c.k = j.at("k").get<std::size_t>();
  c.cosine_scores = j.at("cosine_scores").get<bool>();
  c.init_seed = j.at("init_seed").get<std::uint64_t>();
  return c;
}

namespace detail {
inline nlohmann::json named_arrays(const Denoiser& model, const ParameterSnapshot& values) {
  nlohmann::json out = nlohmann::json::object();
  const auto& params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) out[params[i].first] = values[i];
  return out;
}

inline ParameterSnapshot read_named_arrays(const Denoiser& model, const nlohmann::json& j) {
  ParameterSnapshot out;
  for (const auto& [name, t] : model.parameters()) {
    if (!j.contains(name)) throw CheckpointMismatchError("checkpoint lacks parameter " + name);
    auto v = j.at(name).get<std::vector<double>>();
    if (v.size() != t.size())
      throw CheckpointMismatchError("parameter " + name + " has " + std::to_string(v.size()) +
                                    " values, model expects " + std::to_string(t.size()));
    out.push_back(std::move(v));
  }
  return out;
}
}  // namespace detail

// A loaded checkpoint. `trainer` is present when the file was written
// mid-training and carries what is needed to resume.
struct Checkpoint {
  DenoiserConfig config;
  std::string vocab_hash;
  nlohmann::json params;
  std::optional<nlohmann::json> trainer;
};

// Binary CBOR file: version, model config, vocabulary hash, parameter
// arrays and optionally the trainer/optimizer state.
inline void save_checkpoint(const std::string& path, const Denoiser& model,
                            const std::string& vocab_hash, const Trainer* trainer = nullptr) {
  nlohmann::json j;
  j["format"] = "lpdo-checkpoint";
  j["version"] = kCheckpointVersion;
  j["config"] = denoiser_config_to_json(model.config());
  j["vocab_hash"] = vocab_hash;
  j["params"] = detail::named_arrays(model, snapshot(model));
  if (trainer) {
    const auto& st = trainer->state();
    nlohmann::json tj;
    tj["epoch"] = st.epoch;
    tj["global_step"] = st.global_step;
    tj["evals_since_best"] = st.evals_since_best;
    tj["best_metric"] = std::isfinite(st.best_metric) ? nlohmann::json(st.best_metric) : nlohmann::json();
    tj["best_epoch"] = st.best_epoch;
    if (!st.best_params.empty()) tj["best_params"] = detail::named_arrays(model, st.best_params);
    tj["rng"] = st.rng_state;
    const auto& opt = trainer->optimizer();
    tj["adam_t"] = opt.steps_taken();
    tj["adam_m"] = opt.first_moments();
    tj["adam_v"] = opt.second_moments();
    j["trainer"] = std::move(tj);
  }
  const auto bytes = nlohmann::json::to_cbor(j);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint '" + path + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to '" + tmp + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw IoError("cannot move checkpoint into place at '" + path + "'");
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  nlohmann::json j;
  try {
    j = nlohmann::json::from_cbor(bytes);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("'" + path + "' is not a checkpoint: " + e.what());
  }
  if (j.value("format", "") != "lpdo-checkpoint")
    throw IoError("'" + path + "' is not a checkpoint");
  if (j.at("version").get<int>() != kCheckpointVersion)
    throw CheckpointMismatchError("unsupported checkpoint version " + j.at("version").dump());
  Checkpoint c;
  c.config = denoiser_config_from_json(j.at("config"));
  c.vocab_hash = j.at("vocab_hash").get<std::string>();
  c.params = std::move(j.at("params"));
  if (j.contains("trainer")) c.trainer = std::move(j.at("trainer"));
  return c;
}

// Rebuilds the model stored in a checkpoint, refusing it when it was
// trained against a different vocabulary.
inline Denoiser load_model(const Checkpoint& ckpt, const std::string& expected_vocab_hash) {
  if (!expected_vocab_hash.empty() && ckpt.vocab_hash != expected_vocab_hash)
    throw CheckpointMismatchError("checkpoint vocabulary " + ckpt.vocab_hash +
                                  " does not match dataset vocabulary " + expected_vocab_hash);
  Denoiser model(ckpt.config);
  restore(model, detail::read_named_arrays(model, ckpt.params));
  return model;
}

// Restores optimizer, random stream and early-stopping state so that
// training continues where the checkpoint left off.
inline void restore_trainer(Trainer& trainer, const Denoiser& model, const Checkpoint& ckpt) {
  if (!ckpt.trainer) throw CheckpointMismatchError("checkpoint has no trainer state to resume");
  const auto& tj = *ckpt.trainer;
  auto& st = trainer.state();
  st.epoch = tj.at("epoch").get<std::size_t>();
  st.global_step = tj.at("global_step").get<std::size_t>();
  st.evals_since_best = tj.at("evals_since_best").get<std::size_t>();
  st.best_metric = tj.at("best_metric").is_null() ? -std::numeric_limits<double>::infinity()
                                                  : tj.at("best_metric").get<double>();
  st.best_epoch = tj.at("best_epoch").get<std::size_t>();
  st.best_params.clear();
  if (tj.contains("best_params")) st.best_params = detail::read_named_arrays(model, tj.at("best_params"));
  st.rng_state = tj.at("rng").get<std::string>();
  if (!st.rng_state.empty()) trainer.rng().set_state(st.rng_state);
  trainer.optimizer().restore(tj.at("adam_t").get<std::size_t>(),
                              tj.at("adam_m").get<std::vector<std::vector<double>>>(),
                              tj.at("adam_v").get<std::vector<std::vector<double>>>());
}

}  // namespace lpdo
