#pragma once

// Word-level vocabulary, pair encoding and masked-LM corruption.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mddeval/corpus.hpp"

namespace mddeval {

using TokenId = int32_t;

namespace special {
inline constexpr TokenId pad = 0;
inline constexpr TokenId unk = 1;
inline constexpr TokenId cls = 2;
inline constexpr TokenId sep = 3;
inline constexpr TokenId mask = 4;
inline constexpr TokenId blank = 5;
inline constexpr TokenId count = 6;
}  // namespace special

inline constexpr std::array<std::string_view, 6> kSpecialTokens = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[BLANK]"};

inline bool is_special(TokenId id) { return id < special::count; }

class Vocabulary {
 public:
  Vocabulary() {
    for (auto s : kSpecialTokens) push(std::string(s));
  }

  /// Builds from an ordered list whose first six entries are the specials.
  static Vocabulary from_tokens(const std::vector<std::string>& tokens) {
    if (tokens.size() < special::count) throw validation_error("vocabulary is missing special tokens");
    for (size_t i = 0; i < special::count; ++i)
      if (tokens[i] != kSpecialTokens[i]) throw validation_error("vocabulary special token mismatch at id " + std::to_string(i));
    Vocabulary v;
    for (size_t i = special::count; i < tokens.size(); ++i) {
      if (v.token_to_id_.count(tokens[i])) throw validation_error("duplicate vocabulary token '" + tokens[i] + "'");
      v.push(tokens[i]);
    }
    return v;
  }

  size_t size() const { return id_to_token_.size(); }

  TokenId id(const std::string& token) const {
    auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? special::unk : it->second;
  }

  bool contains(const std::string& token) const { return token_to_id_.count(token) != 0; }

  const std::string& token(TokenId id) const { return id_to_token_.at(static_cast<size_t>(id)); }

  const std::vector<std::string>& tokens() const { return id_to_token_; }

  /// Content fingerprint used by checkpoints to reference the vocabulary.
  std::string fingerprint() const {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& t : id_to_token_) h = fnv1a(t + '\n', h);
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
  }

  bool operator==(const Vocabulary& o) const { return id_to_token_ == o.id_to_token_; }

 private:
  void push(std::string t) {
    token_to_id_.emplace(t, static_cast<TokenId>(id_to_token_.size()));
    id_to_token_.push_back(std::move(t));
  }

  std::unordered_map<std::string, TokenId> token_to_id_;
  std::vector<std::string> id_to_token_;
};

/// Frequency-ranked vocabulary (ties broken lexicographically) over contexts
/// and responses. Tokens below min_freq are excluded.
inline Vocabulary build_vocab(const std::vector<ContextResponsePair>& corpus, size_t max_vocab, size_t min_freq) {
  if (corpus.empty()) throw validation_error("cannot build a vocabulary from an empty corpus");
  if (max_vocab <= special::count) throw validation_error("max_vocab must exceed the 6 special tokens");
  std::map<std::string, size_t> counts;
  for (const auto& p : corpus) {
    for (const auto& u : p.context)
      for (auto& w : split_words(u)) ++counts[w];
    for (auto& w : split_words(p.response)) ++counts[w];
  }
  std::vector<std::pair<std::string, size_t>> ranked;
  for (auto& [w, c] : counts)
    if (c >= min_freq) ranked.emplace_back(w, c);
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens(kSpecialTokens.begin(), kSpecialTokens.end());
  for (auto& [w, c] : ranked) {
    if (tokens.size() >= max_vocab) break;
    tokens.push_back(w);
  }
  return Vocabulary::from_tokens(tokens);
}

inline void save_vocab(const std::filesystem::path& path, const Vocabulary& vocab) {
  ordered_json j;
  j["format"] = 1;
  j["tokens"] = vocab.tokens();
  ordered_json map = ordered_json::object();
  for (size_t i = 0; i < vocab.size(); ++i) map[vocab.token(static_cast<TokenId>(i))] = i;
  j["token_to_id"] = std::move(map);
  auto out = detail::open_output(path);
  out << j.dump() << '\n';
}

inline Vocabulary load_vocab(const std::filesystem::path& path) {
  auto in = detail::open_input(path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw validation_error(path.string() + ": " + e.what());
  }
  if (!j.contains("format") || j["format"] != 1) throw validation_error(path.string() + ": unsupported vocabulary format");
  auto vocab = Vocabulary::from_tokens(j.at("tokens").get<std::vector<std::string>>());
  if (j.contains("token_to_id")) {
    for (auto& [tok, id] : j["token_to_id"].items())
      if (vocab.id(tok) != id.get<TokenId>() && tok != "[UNK]")
        throw validation_error(path.string() + ": token_to_id disagrees with the token list for '" + tok + "'");
  }
  return vocab;
}

enum class Segment : uint8_t { context = 0, response = 1 };

/// Layout: [CLS] context-tokens [SEP] response-tokens [SEP], with [SEP]
/// between context turns.
struct EncodedPair {
  std::vector<TokenId> ids;
  std::vector<Segment> segments;

  size_t size() const { return ids.size(); }
  bool operator==(const EncodedPair&) const = default;
};

/// Oldest context tokens are dropped first when the pair does not fit.
inline EncodedPair encode_pair(const ContextResponsePair& pair, const Vocabulary& vocab, size_t max_seq_len) {
  if (max_seq_len < 8) throw validation_error("max_seq_len must be at least 8");
  std::vector<TokenId> ctx;
  for (size_t i = 0; i < pair.context.size(); ++i) {
    if (i) ctx.push_back(special::sep);
    for (auto& w : split_words(pair.context[i])) ctx.push_back(vocab.id(w));
  }
  std::vector<TokenId> resp;
  for (auto& w : split_words(pair.response)) resp.push_back(vocab.id(w));

  if (3 + resp.size() > max_seq_len) resp.resize(max_seq_len - 3);
  const size_t ctx_budget = max_seq_len - 3 - resp.size();
  size_t drop = ctx.size() > ctx_budget ? ctx.size() - ctx_budget : 0;
  while (drop < ctx.size() && ctx[drop] == special::sep) ++drop;

  EncodedPair e;
  e.ids.reserve(3 + ctx.size() - drop + resp.size());
  e.ids.push_back(special::cls);
  e.ids.insert(e.ids.end(), ctx.begin() + static_cast<std::ptrdiff_t>(drop), ctx.end());
  e.ids.push_back(special::sep);
  e.segments.assign(e.ids.size(), Segment::context);
  e.ids.insert(e.ids.end(), resp.begin(), resp.end());
  e.ids.push_back(special::sep);
  e.segments.resize(e.ids.size(), Segment::response);
  return e;
}

struct DecodedPair {
  std::vector<std::string> context;
  std::string response;
};

inline DecodedPair decode_pair(const EncodedPair& e, const Vocabulary& vocab) {
  DecodedPair d;
  std::vector<std::string> cur;
  std::vector<std::string> response_words;
  for (size_t i = 1; i < e.size(); ++i) {
    const TokenId id = e.ids[i];
    if (e.segments[i] == Segment::response) {
      if (id != special::sep) response_words.push_back(vocab.token(id));
      continue;
    }
    if (id == special::sep) {
      if (!cur.empty()) d.context.push_back(join(cur));
      cur.clear();
    } else {
      cur.push_back(vocab.token(id));
    }
  }
  d.response = join(response_words);
  return d;
}

struct MaskPolicy {
  double mask_prob = 0.15;
  double replace_with_mask = 0.8;  // remaining selected: half random token, half kept
  double replace_with_random = 0.1;
};

struct MaskedSequence {
  std::vector<TokenId> ids;
  std::vector<std::pair<size_t, TokenId>> targets;  // position -> original id, ascending positions

  bool operator==(const MaskedSequence&) const = default;
};

/// Selects each non-special position with probability mask_prob; selected
/// positions become [MASK] / a random token / unchanged per the policy split.
inline MaskedSequence apply_mlm_mask(const EncodedPair& encoded, const MaskPolicy& policy, size_t vocab_size, uint64_t seed) {
  if (policy.mask_prob < 0.0 || policy.mask_prob > 1.0) throw validation_error("mask_prob must be in [0, 1]");
  Rng rng(seed);
  MaskedSequence m;
  m.ids = encoded.ids;
  for (size_t i = 0; i < m.ids.size(); ++i) {
    if (is_special(m.ids[i])) continue;
    if (!rng.bernoulli(policy.mask_prob)) continue;
    m.targets.emplace_back(i, m.ids[i]);
    const double r = rng.uniform();
    if (r < policy.replace_with_mask) {
      m.ids[i] = special::mask;
    } else if (r < policy.replace_with_mask + policy.replace_with_random && vocab_size > special::count) {
      m.ids[i] = static_cast<TokenId>(special::count + rng.below(vocab_size - special::count));
    }
  }
  return m;
}

}  // namespace mddeval
