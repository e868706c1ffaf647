#pragma once

// Dialogues, context-response pairs and the JSONL files that carry them.

#include <array>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mddeval/core.hpp"

namespace mddeval {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

inline constexpr int kMaxContextTurns = 4;

struct Dialogue {
  std::string id;
  std::string domain;
  std::vector<std::string> utterances;

  bool operator==(const Dialogue&) const = default;
};

enum class Origin {
  original,
  word_drop,
  word_shuffle,
  word_repeat,
  paraphrase,
  generated,
  random_same_corpus,
  random_generated_pool,
  random_paraphrase_pool,
  mask_and_fill,
};

inline constexpr std::array<std::string_view, 10> kOriginNames = {
    "original",           "word_drop",          "word_shuffle",          "word_repeat",
    "paraphrase",         "generated",          "random_same_corpus",    "random_generated_pool",
    "random_paraphrase_pool", "mask_and_fill",
};

inline std::string_view to_string(Origin o) { return kOriginNames[static_cast<size_t>(o)]; }

inline Origin origin_from_string(std::string_view s) {
  for (size_t i = 0; i < kOriginNames.size(); ++i)
    if (kOriginNames[i] == s) return static_cast<Origin>(i);
  throw validation_error("unknown origin '" + std::string(s) + "'");
}

struct ContextResponsePair {
  std::string pair_id;
  std::vector<std::string> context;
  std::string response;
  std::string domain;
  Origin origin = Origin::original;

  bool operator==(const ContextResponsePair&) const = default;
};

/// Class codes are part of every file format; do not reorder.
enum class PairLabel : int { random = 0, adversarial = 1, relevant = 2 };

inline constexpr int kNumClasses = 3;
inline constexpr std::array<std::string_view, 3> kLabelNames = {"random", "adversarial", "relevant"};

inline std::string_view to_string(PairLabel l) { return kLabelNames[static_cast<size_t>(l)]; }

inline PairLabel label_from_string(std::string_view s) {
  for (size_t i = 0; i < kLabelNames.size(); ++i)
    if (kLabelNames[i] == s) return static_cast<PairLabel>(i);
  throw validation_error("unknown label '" + std::string(s) + "'");
}

struct LabeledPair {
  ContextResponsePair pair;
  PairLabel label = PairLabel::random;

  bool operator==(const LabeledPair&) const = default;
};

struct BenchmarkRecord {
  ContextResponsePair pair;
  double human_score = 1.0;

  bool operator==(const BenchmarkRecord&) const = default;
};

/// Dialogue id of an extracted pair ("<dialogue>#<turn>"), or the pair id itself.
inline std::string dialogue_of(std::string_view pair_id) {
  const auto pos = pair_id.rfind('#');
  return std::string(pos == std::string_view::npos ? pair_id : pair_id.substr(0, pos));
}

/// Returns a description of the first violated invariant, if any.
inline std::optional<std::string> check_pair(const ContextResponsePair& p) {
  if (p.context.empty() || p.context.size() > kMaxContextTurns)
    return "pair " + p.pair_id + ": context has " + std::to_string(p.context.size()) + " turns (expected 1-4)";
  for (const auto& u : p.context)
    if (u.empty()) return "pair " + p.pair_id + ": empty context utterance";
  if (p.response.empty()) return "pair " + p.pair_id + ": empty response";
  return std::nullopt;
}

/// Emits one pair per utterance position t >= 1; the context is the last
/// min(t, max_context) utterances before t.
inline std::vector<ContextResponsePair> extract_pairs(const std::vector<Dialogue>& dialogues, int max_context) {
  if (max_context < 1 || max_context > kMaxContextTurns)
    throw validation_error("max_context must be in [1, 4], got " + std::to_string(max_context));
  std::vector<ContextResponsePair> out;
  for (const auto& d : dialogues) {
    for (size_t t = 1; t < d.utterances.size(); ++t) {
      const size_t begin = t > static_cast<size_t>(max_context) ? t - max_context : 0;
      ContextResponsePair p;
      p.pair_id = d.id + "#" + std::to_string(t);
      p.context.assign(d.utterances.begin() + static_cast<std::ptrdiff_t>(begin),
                       d.utterances.begin() + static_cast<std::ptrdiff_t>(t));
      p.response = d.utterances[t];
      p.domain = d.domain;
      p.origin = Origin::original;
      out.push_back(std::move(p));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSONL
// ---------------------------------------------------------------------------

namespace detail {

inline std::ifstream open_input(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error(ErrorKind::missing_artifact, "missing file: " + path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::missing_artifact, "cannot open " + path.string());
  return in;
}

inline std::ofstream open_output(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw validation_error("cannot write " + path.string());
  return out;
}

/// Calls fn(json, line_number) for every non-blank line. Parse failures and
/// exceptions from fn are rethrown as validation errors carrying the line.
template <typename Fn>
void for_each_jsonl(const std::filesystem::path& path, Fn&& fn) {
  auto in = open_input(path);
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (normalize_whitespace(line).empty()) continue;
    try {
      fn(json::parse(line), lineno);
    } catch (const json::exception& e) {
      throw validation_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const Error& e) {
      throw validation_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline std::string required_string(const json& j, const char* key) {
  if (!j.is_object() || !j.contains(key) || !j.at(key).is_string())
    throw validation_error(std::string("field '") + key + "' must be a string");
  return j.at(key).get<std::string>();
}

inline std::vector<std::string> required_strings(const json& j, const char* key) {
  if (!j.is_object() || !j.contains(key) || !j.at(key).is_array())
    throw validation_error(std::string("field '") + key + "' must be an array of strings");
  std::vector<std::string> out;
  for (const auto& v : j.at(key)) {
    if (!v.is_string()) throw validation_error(std::string("field '") + key + "' must be an array of strings");
    out.push_back(v.get<std::string>());
  }
  return out;
}

inline double required_number(const json& j, const char* key) {
  if (!j.is_object() || !j.contains(key) || !j.at(key).is_number())
    throw validation_error(std::string("field '") + key + "' must be a number");
  return j.at(key).get<double>();
}

/// Shared parse for the pair-shaped files (labeled, benchmark, pool, annotated).
inline ContextResponsePair parse_pair(const json& j, const std::string& default_domain) {
  ContextResponsePair p;
  p.pair_id = required_string(j, "pair_id");
  for (auto& u : required_strings(j, "context")) p.context.push_back(normalize_whitespace(u));
  p.response = normalize_whitespace(required_string(j, "response"));
  if (!default_domain.empty())
    p.domain = default_domain;
  else if (j.contains("domain") && j.at("domain").is_string())
    p.domain = j.at("domain").get<std::string>();
  p.origin = j.contains("origin") ? origin_from_string(required_string(j, "origin")) : Origin::original;
  if (p.context.size() > kMaxContextTurns) {
    warn("pair " + p.pair_id + ": context truncated to the last 4 turns");
    p.context.erase(p.context.begin(), p.context.end() - kMaxContextTurns);
  }
  if (auto err = check_pair(p)) throw validation_error(*err);
  return p;
}

inline void write_pair_fields(ordered_json& j, const ContextResponsePair& p) {
  j["pair_id"] = p.pair_id;
  j["context"] = p.context;
  j["response"] = p.response;
}

}  // namespace detail

/// Reads a dialogue file; `domain` is applied to every dialogue. Dialogues
/// with an empty utterance or fewer than two utterances are skipped with a warning.
inline std::vector<Dialogue> load_dialogues(const std::filesystem::path& path, const std::string& domain) {
  std::vector<Dialogue> out;
  std::set<std::string> seen;
  detail::for_each_jsonl(path, [&](const json& j, size_t lineno) {
    Dialogue d;
    d.id = detail::required_string(j, "id");
    d.domain = domain;
    bool has_empty = false;
    for (auto& u : detail::required_strings(j, "utterances")) {
      auto norm = normalize_whitespace(u);
      has_empty = has_empty || norm.empty();
      d.utterances.push_back(std::move(norm));
    }
    if (!seen.insert(d.id).second) throw validation_error("duplicate dialogue id '" + d.id + "'");
    const std::string where = path.string() + ":" + std::to_string(lineno);
    if (has_empty) {
      warn(where + ": dialogue " + d.id + " has an empty utterance, skipped");
      return;
    }
    if (d.utterances.size() < 2) {
      warn(where + ": dialogue " + d.id + " has fewer than 2 utterances, skipped");
      return;
    }
    out.push_back(std::move(d));
  });
  return out;
}

inline void save_dialogues(const std::filesystem::path& path, const std::vector<Dialogue>& dialogues) {
  auto out = detail::open_output(path);
  for (const auto& d : dialogues) {
    ordered_json j;
    j["id"] = d.id;
    j["utterances"] = d.utterances;
    out << j.dump() << '\n';
  }
}

inline std::vector<LabeledPair> load_labeled_pairs(const std::filesystem::path& path, const std::string& domain) {
  std::vector<LabeledPair> out;
  detail::for_each_jsonl(path, [&](const json& j, size_t) {
    LabeledPair lp;
    lp.pair = detail::parse_pair(j, domain);
    lp.label = label_from_string(detail::required_string(j, "label"));
    out.push_back(std::move(lp));
  });
  return out;
}

inline void save_labeled_pairs(const std::filesystem::path& path, const std::vector<LabeledPair>& pairs) {
  auto out = detail::open_output(path);
  for (const auto& lp : pairs) {
    ordered_json j;
    detail::write_pair_fields(j, lp.pair);
    j["label"] = to_string(lp.label);
    out << j.dump() << '\n';
  }
}

inline std::vector<BenchmarkRecord> load_benchmark(const std::filesystem::path& path, const std::string& domain) {
  std::vector<BenchmarkRecord> out;
  detail::for_each_jsonl(path, [&](const json& j, size_t) {
    BenchmarkRecord r;
    r.pair = detail::parse_pair(j, domain);
    r.human_score = detail::required_number(j, "human_score");
    if (!(r.human_score >= 1.0 && r.human_score <= 5.0))
      throw validation_error("human_score " + std::to_string(r.human_score) + " outside [1, 5]");
    out.push_back(std::move(r));
  });
  return out;
}

inline void save_benchmark(const std::filesystem::path& path, const std::vector<BenchmarkRecord>& records) {
  auto out = detail::open_output(path);
  for (const auto& r : records) {
    ordered_json j;
    detail::write_pair_fields(j, r.pair);
    j["human_score"] = r.human_score;
    out << j.dump() << '\n';
  }
}

/// Augmented pool entry: a pair plus the original it was derived from.
struct PoolEntry {
  ContextResponsePair pair;
  std::string source_pair_id;

  bool operator==(const PoolEntry&) const = default;
};

inline void save_pool(const std::filesystem::path& path, const std::vector<PoolEntry>& pool) {
  auto out = detail::open_output(path);
  for (const auto& e : pool) {
    ordered_json j;
    detail::write_pair_fields(j, e.pair);
    j["origin"] = to_string(e.pair.origin);
    j["source_pair_id"] = e.source_pair_id;
    j["domain"] = e.pair.domain;
    out << j.dump() << '\n';
  }
}

inline std::vector<PoolEntry> load_pool(const std::filesystem::path& path) {
  std::vector<PoolEntry> out;
  detail::for_each_jsonl(path, [&](const json& j, size_t) {
    PoolEntry e;
    e.pair = detail::parse_pair(j, "");
    e.source_pair_id = detail::required_string(j, "source_pair_id");
    out.push_back(std::move(e));
  });
  return out;
}

}  // namespace mddeval
