#pragma once

// Planted-relevance multi-domain fixture.
//
// Each dialogue stays on one topic. A topic is expressed through words shared
// by every domain and through words specific to one domain. A response is
// relevant when all of its topic words match the context topic, adversarial
// when it mixes the context topic with another one, and random when it is on
// another topic. Benchmark human scores are a noisy monotone function of the
// fraction of matching topic words.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mddeval/corpus.hpp"

namespace mddeval::synthetic {

struct DomainLexicon {
  std::string name;
  std::vector<std::vector<std::string>> topic_words;  // [topic][word]
  double shared_prob;                                 // chance a topic word is drawn from the shared list
};

struct Lexicon {
  std::vector<std::string> topics;
  std::vector<std::vector<std::string>> shared;  // [topic][word]
  std::vector<DomainLexicon> domains;
  std::vector<std::string> openers;
  std::vector<std::string> fillers;
  std::vector<std::string> closers;
};

inline Lexicon default_lexicon() {
  Lexicon L;
  L.topics = {"food", "travel", "music", "sport"};
  L.shared = {{"food", "eat", "dinner"}, {"trip", "travel", "city"}, {"music", "song", "band"}, {"game", "team", "play"}};
  L.domains = {
      {"chat",
       {{"pizza", "pasta", "salad", "soup"},
        {"train", "hotel", "airport", "beach"},
        {"guitar", "concert", "album", "piano"},
        {"soccer", "match", "coach", "goal"}},
       0.5},
      {"persona",
       {{"vegan", "baking", "recipes", "cooking"},
        {"hiking", "camping", "mountains", "backpacking"},
        {"singing", "violin", "choir", "drums"},
        {"running", "swimming", "yoga", "cycling"}},
       0.5},
      {"topical",
       {{"cuisine", "spices", "wine", "cheese"},
        {"museum", "island", "castle", "passport"},
        {"jazz", "orchestra", "symphony", "opera"},
        {"olympics", "league", "stadium", "championship"}},
       0.5},
      {"empathy",
       {{"hungry", "craving", "delicious", "cookies"},
        {"homesick", "vacation", "flight", "journey"},
        {"lyrics", "melody", "dance", "tune"},
        {"injury", "trophy", "losing", "winning"}},
       0.5},
  };
  L.openers = {"well", "oh", "yes", "hmm", "so", "honestly", "wow", "sure"};
  L.fillers = {"i",      "you",    "the",    "a",      "really", "like",   "it",     "is",     "that",   "we",     "my",
               "about",  "some",   "very",   "love",   "think",  "just",   "was",    "have",   "do",     "know",   "what",
               "there",  "this",   "they",   "would",  "could",  "maybe",  "always", "never",  "often",  "today",  "yesterday",
               "week",   "friend", "sister", "brother", "mom",   "dad",    "people", "time",   "thing",  "lot",    "little",
               "great",  "good",   "nice",   "fun",    "cool",   "pretty", "quite",  "also",   "too",    "again",  "still",
               "here",   "then",   "now",    "later",  "soon",   "once",   "every",  "other",  "same",   "kind",   "sort",
               "way",    "much",   "many",   "more",   "most",   "few",    "enough", "sometimes", "usually", "actually", "probably",
               "definitely", "totally", "feel", "felt", "guess", "mean",  "say",    "said",   "tell",   "told",   "want",
               "wanted", "need",   "try",    "tried",  "went",   "go",     "going",  "come",   "came",   "get",    "got",
               "make",   "made",   "see",    "saw",    "look",   "seems",  "sounds", "hope",   "wish",   "remember", "forgot",
               "weekend", "morning", "evening", "night", "year",  "month",  "last",   "next",   "first",  "new",    "old",
               "best",   "better", "bad",    "worse",  "busy",   "tired",  "happy",  "glad",   "sorry",  "excited", "interesting"};
  L.closers = {".", "!", "?"};
  return L;
}

struct FixtureSpec {
  uint64_t seed = 2022;
  size_t dialogues_per_domain = 50;
  size_t min_turns = 4;
  size_t max_turns = 7;
  size_t base_contexts = 150;  // teacher-domain labeled contexts, 5 responses per class each
  size_t responses_per_class = 5;
  size_t benchmark_contexts = 40;  // per domain
  size_t benchmark_annotators = 3;
  double annotator_noise = 0.6;
  std::string teacher_domain = "chat";
};

struct Fixture {
  Lexicon lexicon;
  std::map<std::string, std::vector<Dialogue>> dialogues;  // raw unlabeled corpora per domain
  std::vector<LabeledPair> base;                           // labeled teacher-domain pairs
  std::map<std::string, std::vector<BenchmarkRecord>> benchmarks;
  std::map<std::string, std::vector<std::string>> synonyms;
};

class Generator {
 public:
  Generator(Lexicon lexicon, uint64_t seed) : L_(std::move(lexicon)), rng_(seed) {}

  const DomainLexicon& domain(const std::string& name) const {
    for (const auto& d : L_.domains)
      if (d.name == name) return d;
    throw validation_error("unknown synthetic domain " + name);
  }

  std::string topic_word(const DomainLexicon& d, size_t topic) {
    const auto& pool = rng_.bernoulli(d.shared_prob) ? L_.shared[topic] : d.topic_words[topic];
    return pool[rng_.below(pool.size())];
  }

  /// Utterance whose topic words follow `topics` (one entry per topic word).
  std::string utterance(const DomainLexicon& d, const std::vector<size_t>& topics) {
    std::vector<std::string> words;
    if (rng_.bernoulli(0.6)) words.push_back(pick(L_.openers));
    size_t fill = 1 + rng_.below(3);
    std::vector<std::string> content;
    for (size_t t : topics) content.push_back(topic_word(d, t));
    // interleave fillers and topic words
    std::vector<std::string> body = content;
    for (size_t i = 0; i < fill; ++i) body.insert(body.begin() + static_cast<std::ptrdiff_t>(rng_.below(body.size() + 1)), pick(L_.fillers));
    words.insert(words.end(), body.begin(), body.end());
    words.push_back(pick(L_.closers));
    return join(words);
  }

  std::vector<size_t> same_topic(size_t topic, size_t n) { return std::vector<size_t>(n, topic); }

  size_t other_topic(size_t topic) {
    size_t u = rng_.below(L_.topics.size() - 1);
    return u >= topic ? u + 1 : u;
  }

  /// Topic list for a response whose matching fraction is `matches / n`.
  std::vector<size_t> mixed_topics(size_t topic, size_t n, size_t matches) {
    const size_t off = other_topic(topic);
    std::vector<size_t> out(n, off);
    for (size_t i = 0; i < matches; ++i) out[i] = topic;
    rng_.shuffle(out);
    return out;
  }

  Dialogue dialogue(const std::string& id, const DomainLexicon& d, size_t topic, size_t turns) {
    Dialogue dlg;
    dlg.id = id;
    dlg.domain = d.name;
    for (size_t i = 0; i < turns; ++i) dlg.utterances.push_back(utterance(d, same_topic(topic, 1 + rng_.below(3))));
    return dlg;
  }

  Rng& rng() { return rng_; }
  const Lexicon& lexicon() const { return L_; }

  template <typename V>
  const typename V::value_type& pick(const V& v) {
    return v[rng_.below(v.size())];
  }

 private:
  Lexicon L_;
  Rng rng_;
};

/// Labeled pairs for `domain`: per context, `per_class` relevant responses,
/// `per_class` adversarial ones (1..n-1 of n topic words match) and
/// `per_class` random ones (another topic).
inline std::vector<LabeledPair> labeled_pairs(Generator& gen, const std::string& domain, size_t contexts, size_t per_class,
                                              const std::string& prefix) {
  const auto& d = gen.domain(domain);
  const size_t K = gen.lexicon().topics.size();
  std::vector<LabeledPair> out;
  for (size_t c = 0; c < contexts; ++c) {
    const size_t topic = c % K;
    const size_t turns = 1 + gen.rng().below(kMaxContextTurns);
    const auto ctx = gen.dialogue(prefix, d, topic, turns).utterances;
    const std::string cid = prefix + "-" + std::to_string(c);
    size_t r = 0;
    auto add = [&](PairLabel label, const std::vector<size_t>& topics) {
      LabeledPair lp;
      lp.pair.pair_id = cid + "-r" + std::to_string(r++);
      lp.pair.context = ctx;
      lp.pair.response = gen.utterance(d, topics);
      lp.pair.domain = d.name;
      lp.label = label;
      out.push_back(std::move(lp));
    };
    for (size_t i = 0; i < per_class; ++i) add(PairLabel::relevant, gen.same_topic(topic, 2 + gen.rng().below(2)));
    for (size_t i = 0; i < per_class; ++i) {
      const size_t n = 2 + gen.rng().below(2);
      add(PairLabel::adversarial, gen.mixed_topics(topic, n, 1 + gen.rng().below(n - 1)));
    }
    for (size_t i = 0; i < per_class; ++i) add(PairLabel::random, gen.same_topic(gen.other_topic(topic), 2 + gen.rng().below(2)));
  }
  return out;
}

/// Ground truth for generated text: which topic every word belongs to.
class TopicOracle {
 public:
  explicit TopicOracle(const Lexicon& L) {
    for (size_t t = 0; t < L.shared.size(); ++t)
      for (const auto& w : L.shared[t]) topic_[w] = t;
    for (const auto& d : L.domains)
      for (size_t t = 0; t < d.topic_words.size(); ++t)
        for (const auto& w : d.topic_words[t]) topic_[w] = t;
    K_ = L.topics.size();
  }

  std::optional<size_t> topic_of(const std::string& w) const {
    auto it = topic_.find(w);
    if (it == topic_.end()) return std::nullopt;
    return it->second;
  }

  /// Majority topic of the context's topic words (lowest index on ties).
  std::optional<size_t> context_topic(const std::vector<std::string>& context) const {
    std::vector<size_t> n(K_, 0);
    bool any = false;
    for (const auto& u : context)
      for (const auto& w : split_words(u))
        if (auto t = topic_of(w)) ++n[*t], any = true;
    if (!any) return std::nullopt;
    return static_cast<size_t>(std::max_element(n.begin(), n.end()) - n.begin());
  }

  /// Planted label: relevant if every response topic word matches the
  /// context topic, random if none does, adversarial otherwise.
  std::optional<PairLabel> label(const ContextResponsePair& p) const {
    const auto ct = context_topic(p.context);
    if (!ct) return std::nullopt;
    size_t match = 0, total = 0;
    for (const auto& w : split_words(p.response))
      if (auto t = topic_of(w)) ++total, match += *t == *ct;
    if (total == 0) return std::nullopt;
    if (match == total) return PairLabel::relevant;
    if (match == 0) return PairLabel::random;
    return PairLabel::adversarial;
  }

 private:
  std::map<std::string, size_t> topic_;
  size_t K_ = 0;
};

inline Fixture generate_fixture(const FixtureSpec& spec, Lexicon lexicon = default_lexicon()) {
  Fixture fx;
  fx.lexicon = lexicon;
  Generator gen(lexicon, spec.seed);
  const size_t K = lexicon.topics.size();

  for (const auto& d : lexicon.domains) {
    auto& out = fx.dialogues[d.name];
    for (size_t i = 0; i < spec.dialogues_per_domain; ++i) {
      const size_t turns = spec.min_turns + gen.rng().below(spec.max_turns - spec.min_turns + 1);
      out.push_back(gen.dialogue(d.name + "-" + std::to_string(i), d, i % K, turns));
    }
  }

  fx.base = labeled_pairs(gen, spec.teacher_domain, spec.base_contexts, spec.responses_per_class, "base");

  for (const auto& d : lexicon.domains) {
    auto& out = fx.benchmarks[d.name];
    for (size_t c = 0; c < spec.benchmark_contexts; ++c) {
      const size_t topic = gen.rng().below(K);
      const size_t turns = 1 + gen.rng().below(kMaxContextTurns);
      const auto ctx = gen.dialogue("bench", d, topic, turns).utterances;
      // one response per quality level: 3 topic words with 0..3 matching
      for (size_t matches = 0; matches <= 3; ++matches) {
        BenchmarkRecord rec;
        rec.pair.pair_id = d.name + "-bench-" + std::to_string(c) + "-" + std::to_string(matches);
        rec.pair.context = ctx;
        rec.pair.domain = d.name;
        rec.pair.response = gen.utterance(d, gen.mixed_topics(topic, 3, matches));
        const double truth = 1.0 + 4.0 * static_cast<double>(matches) / 3.0;
        double sum = 0.0;
        for (size_t a = 0; a < spec.benchmark_annotators; ++a)
          sum += std::clamp(std::round(truth + gen.rng().normal() * spec.annotator_noise), 1.0, 5.0);
        rec.human_score = sum / static_cast<double>(spec.benchmark_annotators);
        out.push_back(std::move(rec));
      }
    }
  }

  // Synonym table: each domain-specific topic word maps to the other words
  // of the same topic (same domain) plus the shared words.
  for (const auto& d : lexicon.domains) {
    for (size_t t = 0; t < K; ++t) {
      for (const auto& w : d.topic_words[t]) {
        auto& syn = fx.synonyms[w];
        for (const auto& o : d.topic_words[t])
          if (o != w) syn.push_back(o);
        for (const auto& s : lexicon.shared[t]) syn.push_back(s);
      }
    }
  }
  return fx;
}

}  // namespace mddeval::synthetic
