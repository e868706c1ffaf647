#include "mddeval/encoder.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"

using namespace mddeval;
using namespace mddeval::testing;

namespace {

EncoderModel small_float_model(uint64_t seed) {
  EncoderConfig c = tiny_config(30);
  EncoderModel m(c);
  m.initialize(seed);
  return m;
}

}  // namespace

TEST(Encoder, ZeroHeadGivesUniformLogits) {
  auto m = small_float_model(1);
  const auto e = random_sequence(30, 10, 5);
  const auto out = forward(m, e);
  for (double l : out.class_logits) EXPECT_EQ(l, 0.0);
  for (double p : class_probs(out.class_logits)) EXPECT_NEAR(p, 1.0 / 3.0, 1e-12);
}

TEST(Encoder, InferenceIsBitDeterministic) {
  auto m = random_model(tiny_config(30), 3).cast<float>();
  const auto e = random_sequence(30, 12, 9);
  const auto a = forward(m, e);
  const auto b = forward(m, e);
  EXPECT_EQ(a.class_logits, b.class_logits);
}

TEST(Encoder, PositionalEncodingIsActive) {
  auto m = random_model(tiny_config(30), 4);
  auto e = random_sequence(30, 12, 10);
  // swap two distinct response tokens
  size_t i = e.size() - 2, j = e.size() - 3;
  while (e.ids[i] == e.ids[j] || is_special(e.ids[j])) e.ids[j] = static_cast<TokenId>(special::count + (e.ids[j] + 1) % 24);
  const auto before = forward(m, e).class_logits;
  std::swap(e.ids[i], e.ids[j]);
  const auto after = forward(m, e).class_logits;
  EXPECT_NE(before, after);
}

TEST(Encoder, RejectsOutOfRangeIds) {
  auto m = small_float_model(1);
  EncodedPair e = random_sequence(30, 8, 1);
  e.ids[2] = 30;
  EXPECT_THROW(forward(m, e), Error);
  e.ids[2] = -1;
  EXPECT_THROW(forward(m, e), Error);
}

TEST(Losses, CrossEntropyValues) {
  EXPECT_NEAR(loss_ce({0, 0, 0}, PairLabel::relevant).value, std::log(3.0), 1e-12);
  EXPECT_LT(loss_ce({10, 0, 0}, PairLabel::random).value, 1e-4);
  // softmax target: CE equals the entropy of the target
  const std::array<double, 3> logits{0.3, -1.2, 2.0};
  const auto p = class_probs(logits);
  double entropy = 0;
  for (double v : p) entropy -= v * std::log(v);
  EXPECT_NEAR(loss_ce(logits, p).value, entropy, 1e-12);
}

TEST(Losses, KlValues) {
  EXPECT_NEAR(loss_kl({1, 2, 3}, {1, 2, 3}).value, 0.0, 1e-15);
  // p = (1/3,1/3,1/3), q = softmax(ln 2, 0, 0) = (1/2, 1/4, 1/4)
  const double expected = (std::log(2.0 / 3.0) + 2 * std::log(4.0 / 3.0)) / 3.0;
  EXPECT_NEAR(loss_kl({0, 0, 0}, {std::log(2.0), 0, 0}).value, expected, 1e-12);
  EXPECT_NEAR(expected, 0.0566, 1e-4);
  Rng rng(7);
  for (int i = 0; i < 1000; ++i) {
    std::array<double, 3> a{rng.normal() * 3, rng.normal() * 3, rng.normal() * 3};
    std::array<double, 3> b{rng.normal() * 3, rng.normal() * 3, rng.normal() * 3};
    EXPECT_GE(loss_kl(a, b).value, 0.0);
    EXPECT_GE(loss_kl(a, b, KlDirection::symmetric).value, 0.0);
  }
}

TEST(Losses, MlmValues) {
  EXPECT_EQ(loss_mlm({}, {}).value, 0.0);
  const std::vector<std::vector<double>> uniform(3, std::vector<double>(50, 0.7));
  const std::vector<TokenId> t{6, 7, 8};
  EXPECT_NEAR(loss_mlm(uniform, t).value, std::log(50.0), 1e-12);
  std::vector<std::vector<double>> peaked(1, std::vector<double>(50, 0.0));
  peaked[0][9] = 30.0;
  EXPECT_LT(loss_mlm(peaked, std::vector<TokenId>{9}).value, 1e-10);
}

TEST(Gradients, MatchCentralDifferences) {
  const auto cfg = tiny_config();
  for (uint64_t seed = 0; seed < 3; ++seed) {
    const auto m = random_model(cfg, 100 + seed);
    const auto ex = random_example(cfg, 200 + seed);
    for (Term term : {Term::ce, Term::kl, Term::mlm}) {
      for (const auto& be : check_term(m, term, ex)) {
        if (be.numeric_norm == 0.0) continue;  // e.g. cls head under the MLM term
        EXPECT_LT(be.rel_error, 1e-4) << "block " << be.name << " term " << static_cast<int>(term);
      }
    }
  }
}

TEST(Gradients, SymmetricKlMatchesCentralDifferences) {
  const auto cfg = tiny_config();
  const auto m = random_model(cfg, 5);
  const auto ex = random_example(cfg, 6);
  ForwardCache<double> cache;
  const auto ref = forward(m, std::span<const TokenId>(ex.clean.ids), std::span<const Segment>(ex.clean.segments), {}, cache).class_logits;
  const auto noisy = forward(m, *ex.noisy).class_logits;
  const auto lv = loss_kl(ref, noisy, KlDirection::symmetric);
  for (size_t k = 0; k < 3; ++k) {
    auto up = noisy, dn = noisy;
    up[k] += 1e-6;
    dn[k] -= 1e-6;
    const double num = (loss_kl(ref, up, KlDirection::symmetric).value - loss_kl(ref, dn, KlDirection::symmetric).value) / 2e-6;
    EXPECT_NEAR(lv.grad[k], num, 1e-8);
  }
}

TEST(Gradients, NonFiniteGradientNamesBlock) {
  auto m = random_model(tiny_config(), 1);
  m.params()[m.layout().cls_w] = std::numeric_limits<double>::infinity();
  const auto ex = random_example(tiny_config(), 2);
  Gradients<double> g;
  try {
    compute_gradients(m, std::span<const TrainExample>(&ex, 1), LossSpec{}, g);
    FAIL() << "expected a numerical error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::numerical);
  }
}

TEST(Sgd, ZeroGradientOrZeroLrLeavesModelUnchanged) {
  auto m = small_float_model(2);
  const auto before = std::vector<float>(m.params().begin(), m.params().end());
  Gradients<float> zero(m.params().size());
  sgd_step(m, zero, 0.1, 1.0);
  EXPECT_TRUE(std::equal(before.begin(), before.end(), m.params().begin()));
  Gradients<float> ones(m.params().size());
  std::fill(ones.data.begin(), ones.data.end(), 1.0f);
  sgd_step(m, ones, 0.0, 1.0);
  EXPECT_TRUE(std::equal(before.begin(), before.end(), m.params().begin()));
}

TEST(Sgd, ClippingScalesUpdate) {
  Model64 m(tiny_config());
  const auto before = std::vector<double>(m.params().begin(), m.params().end());
  Gradients<double> g(m.params().size());
  g.data[0] = 6.0;
  g.data[1] = 8.0;  // norm 10
  const double norm = sgd_step(m, g, 1.0, 1.0);
  EXPECT_DOUBLE_EQ(norm, 10.0);
  EXPECT_NEAR(before[0] - m.params()[0], 0.6, 1e-12);
  EXPECT_NEAR(before[1] - m.params()[1], 0.8, 1e-12);
}

TEST(Sgd, SmallStepDecreasesLoss) {
  const auto cfg = tiny_config();
  auto m = random_model(cfg, 11, 0.3).cast<float>();
  auto ex = random_example(cfg, 12);
  ex.noisy.reset();
  ex.masked.reset();
  LossSpec spec;
  Gradients<float> g;
  const double before = compute_gradients(m, std::span<const TrainExample>(&ex, 1), spec, g).total;
  sgd_step(m, g, 1e-3, 0.0);
  Gradients<float> g2;
  const double after = compute_gradients(m, std::span<const TrainExample>(&ex, 1), spec, g2).total;
  EXPECT_LT(after, before);
}

TEST(Checkpoint, RoundTripsExactly) {
  auto m = random_model(tiny_config(), 21).cast<float>();
  m.info().ce_steps = 7;
  const auto path = std::filesystem::temp_directory_path() / "mddeval_ckpt_test.json";
  save_checkpoint(path, m, {"abc", "def"});
  const auto loaded = load_checkpoint(path);
  EXPECT_TRUE(std::equal(m.params().begin(), m.params().end(), loaded.model.params().begin()));
  EXPECT_EQ(loaded.model.config(), m.config());
  EXPECT_EQ(loaded.model.info(), m.info());
  EXPECT_EQ(loaded.meta.vocab_fingerprint, "abc");
  std::filesystem::remove(path);
}
