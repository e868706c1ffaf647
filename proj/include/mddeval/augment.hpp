#pragma once

// Candidate-response generation for the unlabeled multi-domain pool:
// syntactic perturbations, random negatives, provider paraphrases and
// MLM mask-and-fill.

#include <map>
#include <memory>
#include <thread>

#include "mddeval/training.hpp"

namespace mddeval {

// ---------------------------------------------------------------------------
// Syntactic perturbations. Tokens are tokenizer words; output is space-joined.
// ---------------------------------------------------------------------------

inline std::vector<std::string> response_tokens(const std::string& response) {
  auto t = split_words(response);
  if (t.empty()) throw validation_error("response must be non-empty");
  return t;
}

/// Drops each token with drop_prob; if every token is dropped one uniformly
/// chosen token survives.
inline std::string word_drop(const std::string& response, double drop_prob, uint64_t seed) {
  const auto toks = response_tokens(response);
  Rng rng(seed);
  std::vector<std::string> kept;
  for (const auto& t : toks)
    if (!rng.bernoulli(drop_prob)) kept.push_back(t);
  if (kept.empty()) kept.push_back(toks[rng.below(toks.size())]);
  return join(kept);
}

inline std::string word_shuffle(const std::string& response, uint64_t seed) {
  auto toks = response_tokens(response);
  Rng(seed).shuffle(toks);
  return join(toks);
}

/// Each token is selected with repeat_prob and then written k times,
/// k uniform in [2, repeat_max].
inline std::string word_repeat(const std::string& response, double repeat_prob, int repeat_max, uint64_t seed) {
  if (repeat_max < 2) throw validation_error("repeat_max must be >= 2");
  const auto toks = response_tokens(response);
  Rng rng(seed);
  std::vector<std::string> out;
  for (const auto& t : toks) {
    const int64_t k = rng.bernoulli(repeat_prob) ? rng.range(2, repeat_max) : 1;
    for (int64_t i = 0; i < k; ++i) out.push_back(t);
  }
  return join(out);
}

// ---------------------------------------------------------------------------
// Random negatives
// ---------------------------------------------------------------------------

struct PoolResponse {
  std::string response;
  std::string dialogue;  // source dialogue id, for the exclusion rule
};

enum class NegativeSource { same_corpus, generated, paraphrase };

struct NegativePools {
  std::vector<PoolResponse> same_corpus;
  std::vector<PoolResponse> generated;
  std::vector<PoolResponse> paraphrase;

  const std::vector<PoolResponse>& get(NegativeSource s) const {
    switch (s) {
      case NegativeSource::same_corpus: return same_corpus;
      case NegativeSource::generated: return generated;
      case NegativeSource::paraphrase: return paraphrase;
    }
    return same_corpus;
  }
};

inline Origin origin_of(NegativeSource s) {
  switch (s) {
    case NegativeSource::same_corpus: return Origin::random_same_corpus;
    case NegativeSource::generated: return Origin::random_generated_pool;
    case NegativeSource::paraphrase: return Origin::random_paraphrase_pool;
  }
  return Origin::random_same_corpus;
}

/// Keeps the context, draws a response uniformly from the pool entries whose
/// source dialogue differs from the pair's own.
inline ContextResponsePair random_negative(const ContextResponsePair& pair, const NegativePools& pools, NegativeSource source,
                                           uint64_t seed) {
  const auto& pool = pools.get(source);
  const std::string own = dialogue_of(pair.pair_id);
  Rng rng(seed);
  // rejection sampling is uniform over the eligible entries; fall back to an
  // explicit scan when most of the pool is excluded
  const PoolResponse* pick = nullptr;
  for (int attempt = 0; attempt < 32 && !pool.empty() && !pick; ++attempt) {
    const auto& c = pool[rng.below(pool.size())];
    if (c.dialogue != own) pick = &c;
  }
  if (!pick) {
    std::vector<const PoolResponse*> eligible;
    for (const auto& c : pool)
      if (c.dialogue != own) eligible.push_back(&c);
    if (eligible.empty())
      throw validation_error("no eligible response in the " + std::string(to_string(origin_of(source))) + " pool for " + pair.pair_id);
    pick = eligible[rng.below(eligible.size())];
  }
  ContextResponsePair out = pair;
  out.response = pick->response;
  out.origin = origin_of(source);
  return out;
}

// ---------------------------------------------------------------------------
// Paraphrase providers
// ---------------------------------------------------------------------------

/// External rewriting model. Paraphrase providers rewrite the response;
/// generation providers answer the last context turn.
struct ParaphraseProvider {
  std::string name;
  Origin origin = Origin::paraphrase;  // paraphrase or generated
  std::function<std::string(const std::string&, uint64_t seed)> transform;
};

using SynonymTable = std::map<std::string, std::vector<std::string>>;

inline SynonymTable load_synonyms(const std::filesystem::path& path) {
  auto in = detail::open_input(path);
  try {
    return json::parse(in).get<SynonymTable>();
  } catch (const json::exception& e) {
    throw validation_error(path.string() + ": " + e.what());
  }
}

inline void save_synonyms(const std::filesystem::path& path, const SynonymTable& table) {
  auto out = detail::open_output(path);
  out << ordered_json(table).dump() << '\n';
}

/// Lexical substitution: every word with synonyms is replaced with
/// probability `rate` by a uniformly drawn synonym. At least one
/// substitution happens when any word is eligible.
inline std::string substitute_synonyms(const std::string& text, const SynonymTable& table, double rate, uint64_t seed) {
  auto toks = response_tokens(text);
  Rng rng(seed);
  std::vector<size_t> eligible;
  bool changed = false;
  for (size_t i = 0; i < toks.size(); ++i) {
    auto it = table.find(toks[i]);
    if (it == table.end() || it->second.empty()) continue;
    eligible.push_back(i);
    if (rng.bernoulli(rate)) {
      toks[i] = it->second[rng.below(it->second.size())];
      changed = true;
    }
  }
  if (!changed && !eligible.empty()) {
    const size_t i = eligible[rng.below(eligible.size())];
    const auto& syn = table.at(toks[i]);
    toks[i] = syn[rng.below(syn.size())];
  }
  return join(toks);
}

inline ParaphraseProvider synonym_provider(std::shared_ptr<const SynonymTable> table, Origin origin = Origin::paraphrase,
                                           double rate = 0.5) {
  if (origin != Origin::paraphrase && origin != Origin::generated) throw validation_error("provider origin must be paraphrase or generated");
  ParaphraseProvider p;
  p.name = origin == Origin::paraphrase ? "synonym-paraphrase" : "synonym-echo";
  p.origin = origin;
  p.transform = [table, rate](const std::string& s, uint64_t seed) { return substitute_synonyms(s, *table, rate, seed); };
  return p;
}

// ---------------------------------------------------------------------------
// Mask-and-fill
// ---------------------------------------------------------------------------

/// Predictive distribution over the vocabulary for one masked position.
class Infiller {
 public:
  virtual ~Infiller() = default;
  virtual bool trained() const = 0;
  virtual size_t max_seq_len() const = 0;
  /// Logits over the vocabulary at `pos` of `seq`.
  virtual std::vector<double> logits(const EncodedPair& seq, size_t pos) const = 0;
};

class EncoderInfiller : public Infiller {
 public:
  explicit EncoderInfiller(const EncoderModel& model) : model_(model) {}
  bool trained() const override { return model_.info().mlm_steps > 0; }
  size_t max_seq_len() const override { return model_.config().max_seq_len; }
  std::vector<double> logits(const EncodedPair& seq, size_t pos) const override {
    ForwardCache<float> cache;
    const size_t p[1] = {pos};
    auto out = forward(model_, std::span<const TokenId>(seq.ids), std::span<const Segment>(seq.segments), std::span<const size_t>(p), cache);
    return std::move(out.mlm_logits[0]);
  }

 private:
  const EncoderModel& model_;
};

/// Samples a non-special token from softmax(logits / temperature).
inline TokenId sample_token(const std::vector<double>& logits, double temperature, Rng& rng) {
  if (logits.size() <= static_cast<size_t>(special::count)) throw validation_error("infiller vocabulary has no ordinary tokens");
  double mx = -std::numeric_limits<double>::infinity();
  for (size_t i = special::count; i < logits.size(); ++i) mx = std::max(mx, logits[i] / temperature);
  std::vector<double> w(logits.size(), 0.0);
  double z = 0.0;
  for (size_t i = special::count; i < logits.size(); ++i) z += w[i] = std::exp(logits[i] / temperature - mx);
  double u = rng.uniform() * z;
  for (size_t i = special::count; i < logits.size(); ++i) {
    u -= w[i];
    if (u < 0.0) return static_cast<TokenId>(i);
  }
  for (size_t i = logits.size(); i-- > special::count;)
    if (w[i] > 0.0) return static_cast<TokenId>(i);
  return static_cast<TokenId>(special::count);
}

struct InfillSpan {
  size_t begin = 0;  // word index in the response
  size_t length = 0;
};

/// Picks a span of 1..min(span_max, n-1) words inside the first `n` words.
inline InfillSpan choose_span(size_t n, int span_max, Rng& rng) {
  const size_t max_len = std::min(static_cast<size_t>(span_max), n - 1);
  InfillSpan s;
  s.length = 1 + rng.below(max_len);
  s.begin = rng.below(n - s.length + 1);
  return s;
}

/// Replaces one contiguous response span with [BLANK] placeholders (fed to
/// the model as [MASK]) and fills the blanks left to right by sampling.
/// Words outside the span are copied verbatim.
inline ContextResponsePair mask_and_fill(const ContextResponsePair& pair, const Infiller& infiller, const Vocabulary& vocab, int span_max,
                                         uint64_t seed, double temperature = 1.0, InfillSpan* chosen = nullptr) {
  if (!infiller.trained()) throw validation_error("mask-and-fill needs a trained infiller (no MLM steps recorded)");
  if (span_max < 1) throw validation_error("infill span_max must be >= 1");
  if (!(temperature > 0.0)) throw validation_error("infill temperature must be positive");
  auto words = response_tokens(pair.response);
  if (words.size() < 2) throw validation_error("mask-and-fill needs a response of at least 2 tokens");

  auto seq = encode_pair(pair, vocab, infiller.max_seq_len());
  size_t resp_start = 0;
  while (seq.segments[resp_start] == Segment::context) ++resp_start;
  const size_t visible = std::min(words.size(), seq.size() - 1 - resp_start);  // response words kept by truncation
  if (visible < 2) throw validation_error("mask-and-fill: response truncated below 2 tokens");

  Rng rng(seed);
  const auto span = choose_span(visible, span_max, rng);
  if (chosen) *chosen = span;
  for (size_t i = 0; i < span.length; ++i) seq.ids[resp_start + span.begin + i] = special::mask;
  for (size_t i = 0; i < span.length; ++i) {
    const size_t pos = resp_start + span.begin + i;
    const TokenId tok = sample_token(infiller.logits(seq, pos), temperature, rng);
    seq.ids[pos] = tok;
    words[span.begin + i] = vocab.token(tok);
  }
  ContextResponsePair out = pair;
  out.response = join(words);
  out.origin = Origin::mask_and_fill;
  return out;
}

// ---------------------------------------------------------------------------
// Pool construction
// ---------------------------------------------------------------------------

/// Techniques in output order. Each produces candidates with the origin of
/// the same name.
enum class Technique {
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

inline constexpr std::array<Technique, 9> kAllTechniques = {
    Technique::word_drop,          Technique::word_shuffle,          Technique::word_repeat,
    Technique::paraphrase,         Technique::generated,             Technique::random_same_corpus,
    Technique::random_generated_pool, Technique::random_paraphrase_pool, Technique::mask_and_fill,
};

inline Origin origin_of(Technique t) { return static_cast<Origin>(static_cast<int>(t) + 1); }
inline std::string_view to_string(Technique t) { return to_string(origin_of(t)); }

inline Technique technique_from_string(std::string_view s) {
  for (auto t : kAllTechniques)
    if (to_string(t) == s) return t;
  throw validation_error("unknown augmentation technique '" + std::string(s) + "'");
}

struct AugmentPlan {
  int per_technique_count = 10;
  double drop_prob = 0.3;
  double repeat_prob = 0.3;
  int repeat_max = 3;
  int infill_span_max = 4;
  double infill_temperature = 1.0;
  uint64_t rng_seed = 1;
  std::vector<Technique> techniques{kAllTechniques.begin(), kAllTechniques.end()};

  void validate() const {
    if (per_technique_count < 1) throw validation_error("per_technique_count must be >= 1");
    if (!(drop_prob > 0.0 && drop_prob <= 1.0)) throw validation_error("drop_prob must be in (0, 1]");
    if (!(repeat_prob > 0.0 && repeat_prob <= 1.0)) throw validation_error("repeat_prob must be in (0, 1]");
    if (repeat_max < 2) throw validation_error("repeat_max must be >= 2");
    if (infill_span_max < 1) throw validation_error("infill_span_max must be >= 1");
  }

  bool enabled(Technique t) const { return std::find(techniques.begin(), techniques.end(), t) != techniques.end(); }
};

inline uint64_t item_seed(uint64_t seed, const std::string& pair_id, Technique t, int index) {
  return derive_seed(seed, std::string_view(pair_id), to_string(t), static_cast<uint64_t>(index));
}

namespace detail {

/// Runs fn(i) for i in [0, n) across `parallelism` threads. Each index is
/// written to its own slot by the caller, so results are order-independent.
template <typename Fn>
void parallel_for(size_t n, size_t parallelism, Fn fn) {
  parallelism = std::max<size_t>(1, std::min(parallelism, n));
  if (parallelism == 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> workers;
  std::vector<std::exception_ptr> errors(parallelism);
  for (size_t w = 0; w < parallelism; ++w) {
    workers.emplace_back([&, w] {
      try {
        for (size_t i = w; i < n; i += parallelism) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : workers) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace detail

/// Builds the candidate pool: for each original, the original itself, then
/// per_technique_count candidates for every enabled technique in enum order.
/// Provider techniques are skipped when no provider of that kind exists and
/// the matching random-pool technique is skipped when its pool is empty.
/// Output is a pure function of the inputs, whatever the parallelism.
inline std::vector<PoolEntry> build_mdd_pool(const std::vector<ContextResponsePair>& originals, const AugmentPlan& plan,
                                             const std::vector<ParaphraseProvider>& providers, const Infiller* infiller,
                                             const Vocabulary& vocab, size_t parallelism = 1) {
  plan.validate();
  if (originals.empty()) throw validation_error("no original pairs to augment");
  std::vector<const ParaphraseProvider*> para, gen;
  for (const auto& p : providers) (p.origin == Origin::generated ? gen : para).push_back(&p);
  if (plan.enabled(Technique::mask_and_fill) && (!infiller || !infiller->trained()))
    throw validation_error("mask_and_fill is enabled but the infiller is untrained");

  const size_t n = originals.size();
  const int count = plan.per_technique_count;
  auto make = [&](const ContextResponsePair& o, Technique t, int idx, ContextResponsePair p) {
    p.pair_id = o.pair_id + "~" + std::string(to_string(t)) + "~" + std::to_string(idx);
    p.origin = origin_of(t);
    return PoolEntry{std::move(p), o.pair_id};
  };

  // pass 1: everything that does not draw from a pool
  std::vector<std::map<Technique, std::vector<PoolEntry>>> slots(n);
  detail::parallel_for(n, parallelism, [&](size_t i) {
    const auto& o = originals[i];
    auto& out = slots[i];
    for (auto t : plan.techniques) {
      for (int k = 0; k < count; ++k) {
        const uint64_t s = item_seed(plan.rng_seed, o.pair_id, t, k);
        ContextResponsePair p = o;
        switch (t) {
          case Technique::word_drop: p.response = word_drop(o.response, plan.drop_prob, s); break;
          case Technique::word_shuffle: p.response = word_shuffle(o.response, s); break;
          case Technique::word_repeat: p.response = word_repeat(o.response, plan.repeat_prob, plan.repeat_max, s); break;
          case Technique::paraphrase:
            if (para.empty()) continue;
            p.response = para[static_cast<size_t>(k) % para.size()]->transform(o.response, s);
            break;
          case Technique::generated:
            if (gen.empty()) continue;
            p.response = gen[static_cast<size_t>(k) % gen.size()]->transform(o.context.back(), s);
            break;
          case Technique::mask_and_fill:
            if (split_words(o.response).size() < 2) continue;
            p = mask_and_fill(o, *infiller, vocab, plan.infill_span_max, s, plan.infill_temperature);
            break;
          default: continue;  // pool draws happen in pass 2
        }
        out[t].push_back(make(o, t, k, std::move(p)));
      }
    }
  });

  NegativePools pools;
  for (size_t i = 0; i < n; ++i) {
    const std::string dlg = dialogue_of(originals[i].pair_id);
    pools.same_corpus.push_back({originals[i].response, dlg});
    for (auto& e : slots[i][Technique::generated]) pools.generated.push_back({e.pair.response, dlg});
    for (auto& e : slots[i][Technique::paraphrase]) pools.paraphrase.push_back({e.pair.response, dlg});
  }
  // same-corpus negatives come from the original's own domain
  std::map<std::string, NegativePools> by_domain;
  for (size_t i = 0; i < n; ++i) by_domain[originals[i].domain].same_corpus.push_back(pools.same_corpus[i]);

  // pass 2: random negatives
  detail::parallel_for(n, parallelism, [&](size_t i) {
    const auto& o = originals[i];
    for (auto t : plan.techniques) {
      NegativeSource src;
      const NegativePools* from = &pools;
      if (t == Technique::random_same_corpus) {
        src = NegativeSource::same_corpus;
        from = &by_domain.at(o.domain);
      } else if (t == Technique::random_generated_pool) {
        src = NegativeSource::generated;
      } else if (t == Technique::random_paraphrase_pool) {
        src = NegativeSource::paraphrase;
      } else {
        continue;
      }
      if (from->get(src).empty()) continue;
      for (int k = 0; k < count; ++k)
        slots[i][t].push_back(make(o, t, k, random_negative(o, *from, src, item_seed(plan.rng_seed, o.pair_id, t, k))));
    }
  });

  std::vector<PoolEntry> out;
  for (size_t i = 0; i < n; ++i) {
    out.push_back({originals[i], originals[i].pair_id});
    out.back().pair.origin = Origin::original;
    for (auto& [t, entries] : slots[i])
      for (auto& e : entries) out.push_back(std::move(e));
  }
  return out;
}

}  // namespace mddeval
