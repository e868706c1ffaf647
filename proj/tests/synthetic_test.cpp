#include "mddeval/synthetic.hpp"

#include <gtest/gtest.h>

#include "mddeval/pipeline.hpp"
#include "test_util.hpp"

using namespace mddeval;
using namespace mddeval::testing;

namespace {

const synthetic::Fixture& fixture() {
  static const auto fx = synthetic::generate_fixture({});
  return fx;
}

}  // namespace

TEST(Synthetic, ShapeOfTheBundledCorpus) {
  const auto& fx = fixture();
  ASSERT_EQ(fx.dialogues.size(), 4u);
  size_t dialogues = 0;
  for (const auto& [d, dl] : fx.dialogues) {
    dialogues += dl.size();
    for (const auto& x : dl) {
      EXPECT_GE(x.utterances.size(), 4u);
      EXPECT_LE(x.utterances.size(), 7u);
    }
  }
  EXPECT_EQ(dialogues, 200u);
  EXPECT_EQ(fx.base.size(), 150u * 15u);
  ASSERT_EQ(fx.benchmarks.size(), 4u);
  for (const auto& [d, b] : fx.benchmarks) EXPECT_EQ(b.size(), 160u) << d;
}

TEST(Synthetic, BaseLabelsMatchThePlantedTopics) {
  const auto& fx = fixture();
  synthetic::TopicOracle oracle(fx.lexicon);
  std::array<size_t, 3> counts{};
  for (const auto& lp : fx.base) {
    const auto l = oracle.label(lp.pair);
    ASSERT_TRUE(l.has_value()) << lp.pair.pair_id;
    EXPECT_EQ(*l, lp.label) << lp.pair.pair_id;
    ++counts[static_cast<size_t>(lp.label)];
    EXPECT_EQ(lp.pair.domain, "chat");
  }
  EXPECT_EQ(counts[0], counts[1]);
  EXPECT_EQ(counts[1], counts[2]);
}

TEST(Synthetic, HumanScoresFollowRelevance) {
  const auto& fx = fixture();
  synthetic::TopicOracle oracle(fx.lexicon);
  for (const auto& [d, recs] : fx.benchmarks) {
    std::vector<double> planted, human;
    for (const auto& r : recs) {
      EXPECT_GE(r.human_score, 1.0);
      EXPECT_LE(r.human_score, 5.0);
      planted.push_back(static_cast<double>(r.pair.pair_id.back() - '0'));  // matching topic words
      human.push_back(r.human_score);
    }
    EXPECT_GT(spearman(planted, human), 0.8) << d;
  }
}

TEST(Synthetic, DomainsHaveTheirOwnWords) {
  const auto& fx = fixture();
  std::map<std::string, std::set<std::string>> words;
  for (const auto& [d, dl] : fx.dialogues)
    for (const auto& x : dl)
      for (const auto& u : x.utterances)
        for (const auto& w : split_words(u)) words[d].insert(w);
  for (const auto& dom : fx.lexicon.domains)
    for (const auto& other : fx.lexicon.domains) {
      if (dom.name == other.name) continue;
      for (const auto& topic : dom.topic_words)
        for (const auto& w : topic) EXPECT_FALSE(words[other.name].count(w)) << w << " leaks into " << other.name;
    }
}

TEST(Synthetic, GeneratorIsDeterministic) {
  const auto a = synthetic::generate_fixture({});
  EXPECT_EQ(a.base, fixture().base);
  EXPECT_EQ(a.dialogues, fixture().dialogues);
  EXPECT_EQ(a.benchmarks, fixture().benchmarks);
  synthetic::FixtureSpec other;
  other.seed = 7;
  EXPECT_NE(synthetic::generate_fixture(other).base, a.base);
}

TEST(Synthetic, BundledFilesMatchTheGenerator) {
  TempDir dir("bundle");
  write_synthetic(dir.path(), fixture(), "chat", 1);
  const std::filesystem::path bundled = std::filesystem::path(MDDEVAL_SOURCE_DIR) / "data" / "synthetic";
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir.path())) {
    if (!e.is_regular_file()) continue;
    const auto rel = e.path().lexically_relative(dir.path());
    EXPECT_EQ(read_text(e.path()), read_text(bundled / rel)) << rel;
  }
}
