#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "lpdo/errors.hpp"
#include "lpdo/random.hpp"

namespace lpdo {

inline constexpr int kPaddingId = 0;

enum class LogFormat { tsv, csv };

inline LogFormat parse_log_format(const std::string& s) {
  if (s == "tsv") return LogFormat::tsv;
  if (s == "csv") return LogFormat::csv;
  throw ConfigError("unknown log format '" + s + "' (expected tsv or csv)");
}

struct Event {
  int item = kPaddingId;
  std::int64_t timestamp = 0;
};

// Per-user time-ordered interactions with items remapped to [1, M].
struct InteractionCorpus {
  std::vector<std::string> users;
  std::vector<std::vector<Event>> events;
  // item_raw_ids[i - 1] is the raw id of remapped item i.
  std::vector<std::string> item_raw_ids;

  std::size_t vocab_size() const { return item_raw_ids.size(); }
  std::size_t num_actions() const {
    std::size_t n = 0;
    for (const auto& e : events) n += e.size();
    return n;
  }
  std::vector<int> sequence(std::size_t user) const {
    std::vector<int> out;
    out.reserve(events[user].size());
    for (const auto& e : events[user]) out.push_back(e.item);
    return out;
  }
};

struct LoadOptions {
  LogFormat format = LogFormat::tsv;
  // Overrides the delimiter implied by the format, e.g. "::" for raw
  // MovieLens dumps.
  std::optional<std::string> delimiter;
  bool skip_header = false;
};

namespace detail {

inline std::vector<std::string_view> split_fields(std::string_view line, std::string_view delim) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(delim, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + delim.size();
  }
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\r' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\r' || s.back() == '\t')) s.remove_suffix(1);
  return s;
}

}  // namespace detail

// Parses rows of (user, item, [auxiliary...,] timestamp). The first two
// columns are user and item, the last is an integer timestamp, anything in
// between (ratings) is ignored. Items are numbered by first appearance in
// the file; each user's events are stably sorted by timestamp so ties keep
// file order.
inline InteractionCorpus parse_interactions(std::istream& in, const LoadOptions& opts = {}) {
  const std::string delim =
      opts.delimiter.value_or(opts.format == LogFormat::csv ? std::string(",") : std::string("\t"));
  if (delim.empty()) throw ConfigError("empty delimiter");
  InteractionCorpus corpus;
  std::unordered_map<std::string, std::size_t> user_index;
  std::unordered_map<std::string, int> item_index;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (opts.skip_header && line_no == 1) continue;
    const auto trimmed = detail::trim(line);
    if (trimmed.empty()) continue;
    const auto fields = detail::split_fields(trimmed, delim);
    if (fields.size() < 3)
      throw ParseError("expected at least 3 fields (user, item, timestamp), found " +
                           std::to_string(fields.size()),
                       line_no);
    const auto user = detail::trim(fields[0]);
    const auto item = detail::trim(fields[1]);
    const auto ts_field = detail::trim(fields.back());
    if (user.empty() || item.empty()) throw ParseError("empty user or item field", line_no);
    std::int64_t ts = 0;
    const auto [ptr, ec] = std::from_chars(ts_field.data(), ts_field.data() + ts_field.size(), ts);
    if (ec != std::errc() || ptr != ts_field.data() + ts_field.size())
      throw ParseError("timestamp '" + std::string(ts_field) + "' is not an integer", line_no);

    auto [uit, new_user] = user_index.try_emplace(std::string(user), corpus.users.size());
    if (new_user) {
      corpus.users.emplace_back(user);
      corpus.events.emplace_back();
    }
    auto [iit, new_item] =
        item_index.try_emplace(std::string(item), static_cast<int>(corpus.item_raw_ids.size()) + 1);
    if (new_item) corpus.item_raw_ids.emplace_back(item);
    corpus.events[uit->second].push_back({iit->second, ts});
  }
  if (corpus.users.empty()) throw EmptyCorpusError("no interactions found");
  for (auto& ev : corpus.events)
    std::stable_sort(ev.begin(), ev.end(),
                     [](const Event& a, const Event& b) { return a.timestamp < b.timestamp; });
  return corpus;
}

inline InteractionCorpus load_interactions(const std::string& path, const LoadOptions& opts = {}) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open interaction log '" + path + "'");
  return parse_interactions(in, opts);
}

// Two-column text: remapped id, raw id.
inline void write_id_map(const InteractionCorpus& corpus, std::ostream& out) {
  for (std::size_t i = 0; i < corpus.item_raw_ids.size(); ++i)
    out << (i + 1) << '\t' << corpus.item_raw_ids[i] << '\n';
}

inline std::vector<std::string> read_id_map(std::istream& in) {
  std::vector<std::string> raw;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw ParseError("id map row needs two columns", line_no);
    const int id = std::stoi(line.substr(0, tab));
    if (id != static_cast<int>(raw.size()) + 1)
      throw ParseError("id map must list ids 1..M in order", line_no);
    raw.push_back(std::string(detail::trim(line.substr(tab + 1))));
  }
  return raw;
}

// FNV-1a over the raw-id table; identifies the vocabulary a model was
// trained against.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << v;
  return os.str();
}

inline std::string vocabulary_hash(std::span<const std::string> item_raw_ids) {
  std::uint64_t h = fnv1a("lpdo-vocab");
  for (const auto& id : item_raw_ids) {
    h = fnv1a(id, h);
    h = fnv1a(std::string_view("\n", 1), h);
  }
  return hex64(h);
}

enum class Split { train, valid, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "valid") return Split::valid;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split '" + s + "'");
}

struct TrajectoryExample {
  std::string user;
  // Left-padded with kPaddingId to n_max; real items occupy the right end.
  std::vector<int> history;
  std::vector<int> target;
  Split split = Split::train;

  std::size_t history_length() const {
    return static_cast<std::size_t>(
        std::count_if(history.begin(), history.end(), [](int id) { return id != kPaddingId; }));
  }
};

struct SplitStats {
  std::size_t k = 0;
  std::size_t n_max = 0;
  std::size_t min_length_exclusive = 0;
  std::size_t sequences_before = 0;
  std::size_t sequences_after = 0;
  std::size_t items = 0;
  std::size_t actions = 0;
  double average_length = 0.0;
};

inline std::vector<int> left_pad(std::span<const int> items, std::size_t n_max) {
  std::vector<int> out(n_max, kPaddingId);
  const std::size_t take = std::min(items.size(), n_max);
  std::copy(items.end() - static_cast<long>(take), items.end(),
            out.end() - static_cast<long>(take));
  return out;
}

// Users whose full sequence is longer than 1 + 3k each yield a train, valid
// and test example: the last k items are the test target, the k before the
// validation target, the k before that the training target. Histories are
// everything preceding the target, truncated to the most recent n_max.
inline std::vector<TrajectoryExample> filter_and_split(const InteractionCorpus& corpus,
                                                       std::size_t k, std::size_t n_max,
                                                       SplitStats* stats = nullptr) {
  if (k < 1) throw ConfigError("trajectory length k must be >= 1");
  if (n_max < 1) throw ConfigError("n_max must be >= 1");
  const std::size_t threshold = 1 + 3 * k;
  std::vector<TrajectoryExample> out;
  std::size_t valid_users = 0;
  for (std::size_t u = 0; u < corpus.users.size(); ++u) {
    const auto seq = corpus.sequence(u);
    if (seq.size() <= threshold) continue;
    ++valid_users;
    const std::size_t L = seq.size();
    const Split order[] = {Split::train, Split::valid, Split::test};
    for (std::size_t s = 0; s < 3; ++s) {
      const std::size_t target_begin = L - (3 - s) * k;
      TrajectoryExample ex;
      ex.user = corpus.users[u];
      ex.split = order[s];
      ex.history = left_pad(std::span<const int>(seq.data(), target_begin), n_max);
      ex.target.assign(seq.begin() + static_cast<long>(target_begin),
                       seq.begin() + static_cast<long>(target_begin + k));
      out.push_back(std::move(ex));
    }
  }
  if (valid_users == 0)
    throw EmptySplitError("no user sequence is longer than 1 + 3k = " + std::to_string(threshold) +
                          " items");
  if (stats) {
    stats->k = k;
    stats->n_max = n_max;
    stats->min_length_exclusive = threshold;
    stats->sequences_before = corpus.users.size();
    stats->sequences_after = valid_users;
    stats->items = corpus.vocab_size();
    stats->actions = corpus.num_actions();
    stats->average_length =
        static_cast<double>(stats->actions) / static_cast<double>(corpus.users.size());
  }
  return out;
}

inline std::vector<TrajectoryExample> select_split(std::span<const TrajectoryExample> all,
                                                   Split split) {
  std::vector<TrajectoryExample> out;
  for (const auto& ex : all)
    if (ex.split == split) out.push_back(ex);
  return out;
}

// Split manifest: one JSON object per line with the unpadded history.
inline void write_manifest(std::span<const TrajectoryExample> examples, std::ostream& out) {
  for (const auto& ex : examples) {
    std::vector<int> hist;
    for (int id : ex.history)
      if (id != kPaddingId) hist.push_back(id);
    nlohmann::ordered_json j;
    j["user"] = ex.user;
    j["split"] = split_name(ex.split);
    j["history"] = hist;
    j["target"] = ex.target;
    out << j.dump() << '\n';
  }
}

inline std::vector<TrajectoryExample> read_manifest(std::istream& in, std::size_t n_max) {
  std::vector<TrajectoryExample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      TrajectoryExample ex;
      ex.user = j.at("user").get<std::string>();
      ex.split = parse_split(j.at("split").get<std::string>());
      const auto hist = j.at("history").get<std::vector<int>>();
      ex.history = left_pad(hist, n_max);
      ex.target = j.at("target").get<std::vector<int>>();
      out.push_back(std::move(ex));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("manifest record: ") + e.what(), line_no);
    }
  }
  return out;
}

struct Batch {
  std::vector<std::size_t> indices;
  std::size_t n_max = 0;
  std::size_t k = 0;
  std::vector<int> histories;              // (B, n_max)
  std::vector<std::uint8_t> history_mask;  // (B, n_max), 1 for real items
  std::vector<int> targets;                // (B, k)

  std::size_t size() const { return indices.size(); }
};

inline Batch make_batch(std::span<const TrajectoryExample> examples,
                        std::span<const std::size_t> indices) {
  Batch b;
  b.indices.assign(indices.begin(), indices.end());
  if (indices.empty()) return b;
  b.n_max = examples[indices[0]].history.size();
  b.k = examples[indices[0]].target.size();
  for (auto i : indices) {
    const auto& ex = examples[i];
    if (ex.history.size() != b.n_max || ex.target.size() != b.k)
      throw ShapeError("examples in one batch must share n_max and k");
    b.histories.insert(b.histories.end(), ex.history.begin(), ex.history.end());
    for (int id : ex.history) b.history_mask.push_back(id != kPaddingId ? 1 : 0);
    b.targets.insert(b.targets.end(), ex.target.begin(), ex.target.end());
  }
  return b;
}

// Single-consumer batch stream. Each call to start_epoch(e) fixes an order
// derived from (seed, e); shuffle=false keeps the input order.
class BatchIterator {
 public:
  BatchIterator(std::span<const TrajectoryExample> examples, std::size_t batch_size, bool shuffle,
                std::uint64_t seed)
      : examples_(examples), batch_size_(batch_size), shuffle_(shuffle), seed_(seed) {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (examples.empty()) throw ArgumentError("batch iterator over an empty example list");
    start_epoch(0);
  }

  void start_epoch(std::size_t epoch) {
    order_.resize(examples_.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    if (shuffle_) {
      Rng rng(derive_seed(seed_, epoch));
      std::shuffle(order_.begin(), order_.end(), rng.engine());
    }
    cursor_ = 0;
  }

  std::optional<Batch> next() {
    if (cursor_ >= order_.size()) return std::nullopt;
    const std::size_t n = std::min(batch_size_, order_.size() - cursor_);
    Batch b = make_batch(examples_, std::span<const std::size_t>(order_.data() + cursor_, n));
    cursor_ += n;
    return b;
  }

  std::size_t batches_per_epoch() const { return (examples_.size() + batch_size_ - 1) / batch_size_; }

 private:
  std::span<const TrajectoryExample> examples_;
  std::size_t batch_size_;
  bool shuffle_;
  std::uint64_t seed_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

}  // namespace lpdo
