#pragma once

// Teacher classifier: supervised CE on the labeled base set.

#include <set>

#include "mddeval/training.hpp"

namespace mddeval {

struct BaseSplit {
  std::vector<TargetedPair> train;
  std::vector<TargetedPair> validation;
};

/// Key that groups every response written for one context.
inline std::string context_key(const ContextResponsePair& p) { return join(p.context, "\n"); }

/// Validation holds out ~`fraction` of contexts, chosen by a hash of the
/// context text, so responses sharing a context never straddle the split.
/// The split does not depend on the training seed.
inline BaseSplit split_base(const std::vector<LabeledPair>& base, double fraction = 0.1) {
  BaseSplit s;
  const uint64_t buckets = 1000;
  const auto cut = static_cast<uint64_t>(fraction * static_cast<double>(buckets));
  for (const auto& lp : base) {
    TargetedPair t{lp.pair, one_hot(lp.label)};
    if (splitmix64(fnv1a(context_key(lp.pair))) % buckets < cut)
      s.validation.push_back(std::move(t));
    else
      s.train.push_back(std::move(t));
  }
  if (s.train.empty()) std::swap(s.train, s.validation);
  return s;
}

inline void require_all_classes(const std::vector<LabeledPair>& base) {
  std::set<PairLabel> seen;
  for (const auto& lp : base) seen.insert(lp.label);
  for (int k = 0; k < kNumClasses; ++k)
    if (!seen.count(static_cast<PairLabel>(k)))
      throw validation_error("base data has no '" + std::string(kLabelNames[static_cast<size_t>(k)]) + "' pairs; a teacher needs all three classes");
}

/// Trains on the base set, starting from `backbone` when given, and returns
/// the checkpoint with the best validation accuracy.
inline TrainResult train_teacher(const std::vector<LabeledPair>& base, const Vocabulary& vocab, const TrainConfig& config,
                                 const std::optional<WarmStart>& backbone = std::nullopt,
                                 const std::function<void(const EpochStats&)>& on_eval = {}) {
  config.validate();
  if (base.empty()) throw validation_error("base data is empty");
  require_all_classes(base);
  TrainConfig cfg = config;
  cfg.loss = LossSpec{};  // CE only
  const auto split = split_base(base);
  return train_classifier(initial_model(cfg, vocab, backbone), vocab, split.train, split.validation, cfg, {}, on_eval);
}

inline SoftLabel teacher_predict(const EncoderModel& model, const Vocabulary& vocab, const ContextResponsePair& pair) {
  return predict(model, vocab, pair);
}

}  // namespace mddeval
