#pragma once

// Pseudo-labeling, confidence filtering with class balancing, noise
// injection, and student training on the machine-annotated pool.

#include "mddeval/augment.hpp"
#include "mddeval/teacher.hpp"

namespace mddeval {

struct AnnotatedPair {
  ContextResponsePair pair;
  SoftLabel soft_label;

  PairLabel hard_class() const { return soft_label.hard_class(); }
  double confidence() const { return soft_label.confidence(); }
  bool operator==(const AnnotatedPair&) const = default;
};

/// One annotation per input, in input order.
inline std::vector<AnnotatedPair> pseudo_label(const EncoderModel& teacher, const Vocabulary& vocab,
                                               const std::vector<ContextResponsePair>& pool, size_t parallelism = 1) {
  std::vector<AnnotatedPair> out(pool.size());
  detail::parallel_for(pool.size(), parallelism, [&](size_t i) { out[i] = {pool[i], teacher_predict(teacher, vocab, pool[i])}; });
  return out;
}

struct BalanceResult {
  std::vector<AnnotatedPair> pairs;
  std::array<size_t, kNumClasses> retained{};   // per class after filtering
  std::array<size_t, kNumClasses> selected{};   // per class after balancing
  std::array<size_t, kNumClasses> shortfall{};  // per_class - selected
};

/// Keeps pairs with confidence >= threshold, then draws floor(target/3)
/// pairs per hard class uniformly without replacement. A short class is
/// taken whole and its shortfall reported. Output keeps input order.
inline BalanceResult filter_and_balance(const std::vector<AnnotatedPair>& annotated, double threshold, size_t target_size, uint64_t seed) {
  if (!(threshold > 1.0 / 3.0 && threshold < 1.0)) throw validation_error("confidence threshold must be in (1/3, 1)");
  std::array<std::vector<size_t>, kNumClasses> by_class;
  for (size_t i = 0; i < annotated.size(); ++i)
    if (annotated[i].confidence() >= threshold) by_class[static_cast<size_t>(annotated[i].hard_class())].push_back(i);

  BalanceResult r;
  const size_t per_class = target_size / kNumClasses;
  std::vector<size_t> keep;
  for (size_t k = 0; k < kNumClasses; ++k) {
    r.retained[k] = by_class[k].size();
    if (by_class[k].empty())
      throw validation_error("no '" + std::string(kLabelNames[k]) + "' pairs left after filtering at threshold " + std::to_string(threshold));
    auto idx = by_class[k];
    if (idx.size() > per_class) {
      Rng(derive_seed(seed, std::string_view("balance"), static_cast<uint64_t>(k))).shuffle(idx);
      idx.resize(per_class);
    }
    r.selected[k] = idx.size();
    r.shortfall[k] = per_class - idx.size();
    keep.insert(keep.end(), idx.begin(), idx.end());
  }
  std::sort(keep.begin(), keep.end());
  for (size_t i : keep) r.pairs.push_back(annotated[i]);
  return r;
}

/// Per token: drop with drop_prob, otherwise replace with a uniformly drawn
/// non-special vocabulary token with replace_prob. One token always survives.
inline std::string inject_noise(const std::string& response, const NoiseConfig& noise, const Vocabulary& vocab, uint64_t seed) {
  const auto toks = response_tokens(response);
  Rng rng(seed);
  const size_t ordinary = vocab.size() - special::count;
  std::vector<std::string> out;
  for (size_t i = 0; i < toks.size(); ++i) {
    if (rng.bernoulli(noise.drop_prob)) continue;
    if (ordinary > 0 && rng.bernoulli(noise.replace_prob))
      out.push_back(vocab.token(static_cast<TokenId>(special::count + rng.below(ordinary))));
    else
      out.push_back(toks[i]);
  }
  if (out.empty()) out.push_back(toks[rng.below(toks.size())]);
  return join(out);
}

/// Composite-objective training on annotated pairs (soft-label CE, optional
/// MLM on the masked clean sequence, optional clean-to-noisy KL). The
/// starting point follows config.init: from_scratch uses `backbone` when
/// given (random weights otherwise), from_teacher requires `teacher`.
/// Returns the final model.
inline TrainResult train_student(const std::vector<AnnotatedPair>& data, const Vocabulary& vocab, const TrainConfig& config,
                                 const std::optional<WarmStart>& backbone = std::nullopt,
                                 const std::optional<WarmStart>& teacher = std::nullopt,
                                 const std::function<void(const EpochStats&)>& on_eval = {}) {
  config.validate();
  if (data.empty()) throw validation_error("student training data is empty");
  std::vector<TargetedPair> train;
  train.reserve(data.size());
  for (const auto& a : data) train.push_back({a.pair, a.soft_label.probs});

  if (config.init == StudentInit::from_teacher && !teacher) throw validation_error("from_teacher initialization needs the teacher checkpoint");
  auto model = initial_model(config, vocab, config.init == StudentInit::from_teacher ? teacher : backbone);
  NoiseFn noise = [&](const std::string& r, uint64_t s) { return inject_noise(r, config.noise, vocab, s); };
  return train_classifier(std::move(model), vocab, train, {}, config, noise, on_eval);
}

// ---------------------------------------------------------------------------
// Annotated-pair JSONL
// ---------------------------------------------------------------------------

inline void save_annotated(const std::filesystem::path& path, const std::vector<AnnotatedPair>& pairs) {
  auto out = detail::open_output(path);
  for (const auto& a : pairs) {
    ordered_json j;
    detail::write_pair_fields(j, a.pair);
    j["origin"] = to_string(a.pair.origin);
    j["domain"] = a.pair.domain;
    j["soft_label"] = a.soft_label.probs;
    j["hard_class"] = to_string(a.hard_class());
    j["confidence"] = a.confidence();
    out << j.dump() << '\n';
  }
}

inline std::vector<AnnotatedPair> load_annotated(const std::filesystem::path& path) {
  std::vector<AnnotatedPair> out;
  detail::for_each_jsonl(path, [&](const json& j, size_t) {
    AnnotatedPair a;
    a.pair = detail::parse_pair(j, "");
    const auto probs = j.at("soft_label").get<std::vector<double>>();
    if (probs.size() != kNumClasses) throw validation_error("soft_label must have 3 components");
    double sum = 0.0;
    for (size_t k = 0; k < kNumClasses; ++k) {
      if (!(probs[k] >= 0.0)) throw validation_error("soft_label components must be non-negative");
      a.soft_label.probs[k] = probs[k];
      sum += probs[k];
    }
    if (std::abs(sum - 1.0) > 1e-6) throw validation_error("soft_label must sum to 1");
    if (j.contains("hard_class") && label_from_string(j["hard_class"].get<std::string>()) != a.hard_class())
      throw validation_error("hard_class disagrees with the soft_label argmax");
    out.push_back(std::move(a));
  });
  return out;
}

}  // namespace mddeval
