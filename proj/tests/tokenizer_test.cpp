#include "mddeval/tokenizer.hpp"

#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace mddeval;
using namespace mddeval::testing;

namespace {

ContextResponsePair pair(std::vector<std::string> ctx, std::string resp) { return {"p#1", std::move(ctx), std::move(resp), "d", Origin::original}; }

}  // namespace

TEST(BuildVocab, CountsWithMinFreqOne) {
  const auto v = build_vocab({pair({"a a"}, "b")}, 100, 1);
  EXPECT_EQ(v.size(), 8u);
  EXPECT_TRUE(v.contains("a"));
  EXPECT_TRUE(v.contains("b"));
  EXPECT_LT(v.id("a"), v.id("b"));
}

TEST(BuildVocab, MinFreqTwoDropsRareWord) {
  const auto v = build_vocab({pair({"a a"}, "b")}, 100, 2);
  EXPECT_EQ(v.size(), 7u);
  EXPECT_TRUE(v.contains("a"));
  EXPECT_FALSE(v.contains("b"));
}

TEST(BuildVocab, TiesBrokenLexicographically) {
  const auto v = build_vocab({pair({"b"}, "a")}, 100, 1);
  EXPECT_EQ(v.id("a"), special::count);
  EXPECT_EQ(v.id("b"), special::count + 1);
}

TEST(BuildVocab, MaxVocabCaps) {
  const auto v = build_vocab({pair({"a a a b b c"}, "d")}, 8, 1);
  EXPECT_EQ(v.size(), 8u);
  EXPECT_FALSE(v.contains("c"));
}

TEST(EncodePair, Layout) {
  const auto v = build_vocab({pair({"hi"}, "yo")}, 100, 1);
  const auto e = encode_pair(pair({"hi"}, "yo"), v, 16);
  EXPECT_EQ(e.ids, (std::vector<TokenId>{special::cls, v.id("hi"), special::sep, v.id("yo"), special::sep}));
  EXPECT_EQ(e.segments,
            (std::vector<Segment>{Segment::context, Segment::context, Segment::context, Segment::response, Segment::response}));
}

TEST(EncodePair, TurnsSeparatedBySep) {
  const auto v = build_vocab({pair({"a", "b"}, "c")}, 100, 1);
  const auto e = encode_pair(pair({"a", "b"}, "c"), v, 16);
  EXPECT_EQ(e.ids, (std::vector<TokenId>{special::cls, v.id("a"), special::sep, v.id("b"), special::sep, v.id("c"), special::sep}));
}

TEST(EncodePair, UnknownWordIsUnk) {
  const auto v = build_vocab({pair({"hi"}, "yo")}, 100, 1);
  const auto e = encode_pair(pair({"hi"}, "stranger"), v, 16);
  EXPECT_EQ(e.ids[3], special::unk);
}

TEST(EncodePair, OverlongContextLosesLeftmostTokens) {
  std::vector<std::string> words;
  for (int i = 0; i < 20; ++i) words.push_back("w" + std::to_string(i));
  const auto ctx = join(words);
  const auto v = build_vocab({pair({ctx}, "r1 r2 r3")}, 100, 1);
  const auto e = encode_pair(pair({ctx}, "r1 r2 r3"), v, 10);
  ASSERT_EQ(e.size(), 10u);
  // 10 - 3 specials - 3 response = 4 context tokens: the last four
  EXPECT_EQ(e.ids[1], v.id("w16"));
  EXPECT_EQ(e.ids[4], v.id("w19"));
  EXPECT_EQ(e.ids[6], v.id("r1"));
  EXPECT_EQ(e.ids[8], v.id("r3"));
  const auto d = decode_pair(e, v);
  EXPECT_EQ(d.response, "r1 r2 r3");
}

TEST(EncodePair, NeverStartsContextWithSep) {
  const auto v = build_vocab({pair({"a b c", "d"}, "r1 r2 r3 r4")}, 100, 1);
  // budget of 2 context tokens would keep "[SEP] d"; the dangling separator goes
  const auto e = encode_pair(pair({"a b c", "d"}, "r1 r2 r3 r4"), v, 9);
  EXPECT_EQ(e.size(), 8u);
  EXPECT_EQ(e.ids[1], v.id("d"));
}

TEST(EncodePair, RoundTripsThroughDecode) {
  const auto p = pair({"how are you", "fine"}, "good to hear");
  const auto v = build_vocab({p}, 100, 1);
  const auto d = decode_pair(encode_pair(p, v, 64), v);
  EXPECT_EQ(d.context, p.context);
  EXPECT_EQ(d.response, p.response);
}

TEST(MlmMask, ZeroProbabilityMasksNothing) {
  const auto p = pair({"a b c"}, "d e");
  const auto v = build_vocab({p}, 100, 1);
  const auto e = encode_pair(p, v, 16);
  MaskPolicy pol;
  pol.mask_prob = 0.0;
  const auto m = apply_mlm_mask(e, pol, v.size(), 3);
  EXPECT_TRUE(m.targets.empty());
  EXPECT_EQ(m.ids, e.ids);
}

TEST(MlmMask, FullMaskVariantMasksEveryOrdinaryPosition) {
  const auto p = pair({"a b c"}, "d e");
  const auto v = build_vocab({p}, 100, 1);
  const auto e = encode_pair(p, v, 16);
  MaskPolicy pol;
  pol.mask_prob = 1.0;
  pol.replace_with_mask = 1.0;
  pol.replace_with_random = 0.0;
  const auto m = apply_mlm_mask(e, pol, v.size(), 3);
  for (size_t i = 0; i < e.size(); ++i) {
    if (is_special(e.ids[i]))
      EXPECT_EQ(m.ids[i], e.ids[i]);
    else
      EXPECT_EQ(m.ids[i], special::mask);
  }
  EXPECT_EQ(m.targets.size(), 5u);
  for (auto [pos, id] : m.targets) EXPECT_EQ(e.ids[pos], id);
}

TEST(MlmMask, SeededRunsAgree) {
  const auto p = pair({"a b c d e f g"}, "h i j k");
  const auto v = build_vocab({p}, 100, 1);
  const auto e = encode_pair(p, v, 32);
  MaskPolicy pol;
  pol.mask_prob = 0.5;
  EXPECT_EQ(apply_mlm_mask(e, pol, v.size(), 11), apply_mlm_mask(e, pol, v.size(), 11));
}

TEST(VocabFile, RoundTripAndFingerprint) {
  TempDir dir("vocab");
  const auto v = build_vocab({pair({"x y z"}, "w")}, 100, 1);
  save_vocab(dir / "v.json", v);
  const auto back = load_vocab(dir / "v.json");
  EXPECT_EQ(back, v);
  EXPECT_EQ(back.fingerprint(), v.fingerprint());
  EXPECT_NE(build_vocab({pair({"x y"}, "w")}, 100, 1).fingerprint(), v.fingerprint());
}
