#include "mddeval/augment.hpp"

#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace mddeval;
using namespace mddeval::testing;

namespace {

std::vector<std::string> sorted_words(const std::string& s) {
  auto w = split_words(s);
  std::sort(w.begin(), w.end());
  return w;
}

ContextResponsePair pair(const std::string& id, const std::string& resp, const std::string& domain = "d") {
  return {id, {"how was your day"}, resp, domain, Origin::original};
}

/// Puts all probability on whatever token sat at the position before masking.
class EchoInfiller : public Infiller {
 public:
  EchoInfiller(EncodedPair original, size_t vocab) : original_(std::move(original)), vocab_(vocab) {}
  bool trained() const override { return true; }
  size_t max_seq_len() const override { return 64; }
  std::vector<double> logits(const EncodedPair&, size_t pos) const override {
    std::vector<double> l(vocab_, 0.0);
    l[static_cast<size_t>(original_.ids[pos])] = 1e3;
    return l;
  }

 private:
  EncodedPair original_;
  size_t vocab_;
};

/// Always proposes the same token.
class ConstantInfiller : public Infiller {
 public:
  ConstantInfiller(TokenId tok, size_t vocab) : tok_(tok), vocab_(vocab) {}
  bool trained() const override { return true; }
  size_t max_seq_len() const override { return 64; }
  std::vector<double> logits(const EncodedPair&, size_t) const override {
    std::vector<double> l(vocab_, 0.0);
    l[static_cast<size_t>(tok_)] = 1e3;
    return l;
  }

 private:
  TokenId tok_;
  size_t vocab_;
};

}  // namespace

TEST(WordDrop, NothingDropsAtZero) { EXPECT_EQ(word_drop("a b c d", 0.0, 7), "a b c d"); }

TEST(WordDrop, AllDropLeavesOneSurvivor) {
  for (uint64_t s = 0; s < 50; ++s) {
    const auto out = split_words(word_drop("a b c d", 1.0, s));
    ASSERT_EQ(out.size(), 1u);
    EXPECT_NE(std::string("abcd").find(out[0]), std::string::npos);
  }
}

TEST(WordDrop, Deterministic) { EXPECT_EQ(word_drop("one two three four five six", 0.5, 3), word_drop("one two three four five six", 0.5, 3)); }

TEST(WordShuffle, SingleToken) { EXPECT_EQ(word_shuffle("hello", 1), "hello"); }

TEST(WordShuffle, KeepsMultiset) { EXPECT_EQ(sorted_words(word_shuffle("a b c", 5)), sorted_words("a b c")); }

TEST(WordShuffle, SeedsGiveValidPermutations) {
  const std::string s = "w0 w1 w2 w3 w4 w5 w6 w7 w8 w9";
  const auto a = word_shuffle(s, 1), b = word_shuffle(s, 2);
  EXPECT_EQ(sorted_words(a), sorted_words(s));
  EXPECT_EQ(sorted_words(b), sorted_words(s));
  EXPECT_NE(a, b);
}

TEST(WordRepeat, ZeroIsIdentity) { EXPECT_EQ(word_repeat("a b c", 0.0, 3, 9), "a b c"); }

TEST(WordRepeat, FullySelectedSingleToken) {
  // k is uniform in [2, repeat_max]; with repeat_max = 3 some seed yields three copies
  bool saw_three = false;
  for (uint64_t s = 0; s < 20; ++s) {
    const auto out = word_repeat("a", 1.0, 3, s);
    EXPECT_TRUE(out == "a a" || out == "a a a") << out;
    saw_three = saw_three || out == "a a a";
  }
  EXPECT_TRUE(saw_three);
}

TEST(WordRepeat, NeverShrinks) {
  for (uint64_t s = 0; s < 200; ++s) EXPECT_GE(split_words(word_repeat("x y z w", 0.5, 4, s)).size(), 4u);
}

TEST(WordRepeat, RejectsSmallRepeatMax) { EXPECT_THROW(word_repeat("a", 0.5, 1, 1), Error); }

TEST(RandomNegative, SingleEligibleResponse) {
  NegativePools pools;
  pools.same_corpus = {{"mine", "d1"}, {"theirs", "d2"}};
  const auto out = random_negative(pair("d1#2", "orig"), pools, NegativeSource::same_corpus, 4);
  EXPECT_EQ(out.response, "theirs");
  EXPECT_EQ(out.origin, Origin::random_same_corpus);
  EXPECT_EQ(out.context, pair("d1#2", "orig").context);
}

TEST(RandomNegative, OnlySameDialogueIsError) {
  NegativePools pools;
  pools.generated = {{"x", "d1"}, {"y", "d1"}};
  EXPECT_THROW(random_negative(pair("d1#1", "o"), pools, NegativeSource::generated, 1), Error);
  EXPECT_THROW(random_negative(pair("d1#1", "o"), pools, NegativeSource::paraphrase, 1), Error);
}

TEST(RandomNegative, UniformOverFourElements) {
  NegativePools pools;
  pools.paraphrase = {{"a", "x"}, {"b", "y"}, {"c", "z"}, {"d", "w"}, {"own", "d1"}};
  std::map<std::string, int> freq;
  const int n = 10000;
  for (int i = 0; i < n; ++i) ++freq[random_negative(pair("d1#1", "o"), pools, NegativeSource::paraphrase, static_cast<uint64_t>(i)).response];
  const double sigma = std::sqrt(n * 0.25 * 0.75);
  EXPECT_EQ(freq.count("own"), 0u);
  for (auto w : {"a", "b", "c", "d"}) EXPECT_NEAR(freq[w], 2500, 3 * sigma) << w;
}

TEST(Synonyms, SubstitutionOnlyUsesTable) {
  SynonymTable t{{"big", {"large", "huge"}}};
  for (uint64_t s = 0; s < 20; ++s) {
    const auto out = substitute_synonyms("a big dog", t, 1.0, s);
    EXPECT_TRUE(out == "a large dog" || out == "a huge dog") << out;
  }
  // at least one eligible word always changes; text without table words is untouched
  EXPECT_NE(substitute_synonyms("a big dog", t, 0.0, 1), "a big dog");
  EXPECT_EQ(substitute_synonyms("a small dog", t, 1.0, 1), "a small dog");
}

TEST(MaskAndFill, DeltaOnOriginalReconstructs) {
  const auto p = pair("d#1", "we should go hiking soon");
  const auto v = build_vocab({p}, 100, 1);
  EchoInfiller inf(encode_pair(p, v, 64), v.size());
  for (uint64_t s = 0; s < 20; ++s) {
    const auto out = mask_and_fill(p, inf, v, 1, s);
    EXPECT_EQ(out.response, p.response);
    EXPECT_EQ(out.origin, Origin::mask_and_fill);
  }
}

TEST(MaskAndFill, OnlySpanChanges) {
  const auto p = pair("d#1", "t1 t2 t3 t4 t5");
  auto v = build_vocab({p, pair("x#1", "filler")}, 100, 1);
  ConstantInfiller inf(v.id("filler"), v.size());
  for (uint64_t s = 0; s < 100; ++s) {
    InfillSpan span;
    const auto out = split_words(mask_and_fill(p, inf, v, 2, s, 1.0, &span).response);
    const auto in = split_words(p.response);
    ASSERT_EQ(out.size(), in.size());
    ASSERT_GE(span.length, 1u);
    ASSERT_LE(span.length, 2u);
    for (size_t i = 0; i < in.size(); ++i) {
      const bool inside = i >= span.begin && i < span.begin + span.length;
      EXPECT_EQ(out[i], inside ? "filler" : in[i]) << "seed " << s << " position " << i;
    }
  }
}

TEST(MaskAndFill, SeededFillRepeats) {
  const auto p = pair("d#1", "alpha beta gamma delta");
  const auto v = build_vocab({p}, 100, 1);
  TrainConfig c = tiny_train_config();
  EncoderModel m(c.encoder(v.size()));
  m.initialize(5);
  m.info().mlm_steps = 1;  // random weights stand in for a trained head
  EncoderInfiller inf(m);
  EXPECT_EQ(mask_and_fill(p, inf, v, 3, 42), mask_and_fill(p, inf, v, 3, 42));
}

TEST(MaskAndFill, UntrainedInfillerRejected) {
  const auto p = pair("d#1", "alpha beta");
  const auto v = build_vocab({p}, 100, 1);
  EncoderModel m(tiny_train_config().encoder(v.size()));
  m.initialize(1);
  EXPECT_THROW(mask_and_fill(p, EncoderInfiller(m), v, 2, 1), Error);
}

TEST(BuildPool, CountsOriginalPlusCandidates) {
  const std::vector<ContextResponsePair> orig{pair("d#1", "a b c d")};
  const auto v = build_vocab(orig, 100, 1);
  AugmentPlan plan;
  plan.per_technique_count = 10;
  plan.techniques = {Technique::word_drop, Technique::word_shuffle};
  const auto pool = build_mdd_pool(orig, plan, {}, nullptr, v);
  ASSERT_EQ(pool.size(), 21u);
  EXPECT_EQ(pool[0].pair.origin, Origin::original);
  for (size_t i = 1; i <= 10; ++i) EXPECT_EQ(pool[i].pair.origin, Origin::word_drop);
  for (size_t i = 11; i <= 20; ++i) EXPECT_EQ(pool[i].pair.origin, Origin::word_shuffle);
  for (const auto& e : pool) EXPECT_EQ(e.source_pair_id, "d#1");
  EXPECT_EQ(pool[1].pair.pair_id, "d#1~word_drop~0");
}

TEST(BuildPool, NoProvidersNoParaphraseOrigins) {
  std::vector<ContextResponsePair> orig{pair("d1#1", "a b c"), pair("d2#1", "x y z"), pair("d3#1", "p q r")};
  const auto v = build_vocab(orig, 100, 1);
  AugmentPlan plan;
  plan.per_technique_count = 2;
  plan.techniques = {Technique::word_drop,        Technique::paraphrase,            Technique::generated,
                     Technique::random_same_corpus, Technique::random_generated_pool, Technique::random_paraphrase_pool};
  const auto pool = build_mdd_pool(orig, plan, {}, nullptr, v);
  for (const auto& e : pool) {
    EXPECT_NE(e.pair.origin, Origin::paraphrase);
    EXPECT_NE(e.pair.origin, Origin::generated);
    EXPECT_NE(e.pair.origin, Origin::random_generated_pool);
    EXPECT_NE(e.pair.origin, Origin::random_paraphrase_pool);
  }
  EXPECT_EQ(pool.size(), 3u * (1 + 2 + 2));
}

TEST(BuildPool, ProvidersAndNegativesRespectExclusion) {
  std::vector<ContextResponsePair> orig{pair("d1#1", "a b c"), pair("d2#1", "x y z"), pair("d3#1", "p q r")};
  const auto v = build_vocab(orig, 100, 1);
  auto table = std::make_shared<const SynonymTable>(SynonymTable{{"a", {"aa"}}, {"x", {"xx"}}});
  AugmentPlan plan;
  plan.per_technique_count = 3;
  plan.techniques = {Technique::paraphrase, Technique::random_same_corpus, Technique::random_paraphrase_pool};
  const auto pool = build_mdd_pool(orig, plan, {synonym_provider(table)}, nullptr, v);
  std::map<std::string, std::string> owner;  // response -> dialogue for originals and paraphrases
  for (const auto& e : pool)
    if (e.pair.origin == Origin::original || e.pair.origin == Origin::paraphrase) owner[e.pair.response] = dialogue_of(e.source_pair_id);
  for (const auto& e : pool)
    if (e.pair.origin == Origin::random_same_corpus || e.pair.origin == Origin::random_paraphrase_pool) {
      EXPECT_NE(owner.at(e.pair.response), dialogue_of(e.source_pair_id));
    }
}

TEST(BuildPool, SameOutputFileOnRerunAndAcrossParallelism) {
  TempDir dir("pool");
  std::vector<ContextResponsePair> orig;
  for (int i = 0; i < 12; ++i) orig.push_back(pair("d" + std::to_string(i) + "#1", "r" + std::to_string(i) + " and more words here"));
  const auto v = build_vocab(orig, 100, 1);
  EncoderModel m(tiny_train_config().encoder(v.size()));
  m.initialize(2);
  m.info().mlm_steps = 1;
  EncoderInfiller inf(m);
  auto table = std::make_shared<const SynonymTable>(SynonymTable{{"more", {"extra"}}, {"words", {"terms"}}});
  AugmentPlan plan;
  plan.per_technique_count = 2;
  const std::vector<ParaphraseProvider> prov{synonym_provider(table), synonym_provider(table, Origin::generated)};
  save_pool(dir / "a.jsonl", build_mdd_pool(orig, plan, prov, &inf, v, 1));
  save_pool(dir / "b.jsonl", build_mdd_pool(orig, plan, prov, &inf, v, 1));
  save_pool(dir / "c.jsonl", build_mdd_pool(orig, plan, prov, &inf, v, 3));
  EXPECT_EQ(read_text(dir / "a.jsonl"), read_text(dir / "b.jsonl"));
  EXPECT_EQ(read_text(dir / "a.jsonl"), read_text(dir / "c.jsonl"));
}

TEST(BuildPool, MaskAndFillNeedsTrainedInfiller) {
  std::vector<ContextResponsePair> orig{pair("d#1", "a b c")};
  const auto v = build_vocab(orig, 100, 1);
  AugmentPlan plan;
  plan.techniques = {Technique::mask_and_fill};
  EXPECT_THROW(build_mdd_pool(orig, plan, {}, nullptr, v), Error);
}

TEST(AugmentPlan, Validation) {
  AugmentPlan p;
  p.per_technique_count = 0;
  EXPECT_THROW(p.validate(), Error);
  p = {};
  p.repeat_max = 1;
  EXPECT_THROW(p.validate(), Error);
  EXPECT_THROW(technique_from_string("teleport"), Error);
  EXPECT_EQ(technique_from_string("word_repeat"), Technique::word_repeat);
}
