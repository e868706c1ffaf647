#pragma once

// Run-time score: probability mass on the relevant class.

#include "mddeval/augment.hpp"

namespace mddeval {

struct MetricScore {
  std::string pair_id;
  double score = 0.0;
  bool operator==(const MetricScore&) const = default;
};

inline MetricScore score(const EncoderModel& model, const Vocabulary& vocab, const ContextResponsePair& pair) {
  const auto p = predict(model, vocab, pair);
  return {pair.pair_id, p.probs[static_cast<size_t>(PairLabel::relevant)]};
}

/// Same values as mapping score(), in input order, for any parallelism.
inline std::vector<MetricScore> score_batch(const EncoderModel& model, const Vocabulary& vocab, const std::vector<ContextResponsePair>& pairs,
                                            size_t parallelism = 1) {
  if (parallelism < 1) throw validation_error("parallelism must be >= 1");
  std::vector<MetricScore> out(pairs.size());
  detail::parallel_for(pairs.size(), parallelism, [&](size_t i) { out[i] = score(model, vocab, pairs[i]); });
  return out;
}

inline void save_scores(const std::filesystem::path& path, const std::vector<MetricScore>& scores) {
  auto out = detail::open_output(path);
  for (const auto& s : scores) {
    ordered_json j;
    j["pair_id"] = s.pair_id;
    j["score"] = s.score;
    out << j.dump() << '\n';
  }
}

inline std::vector<MetricScore> load_scores(const std::filesystem::path& path) {
  std::vector<MetricScore> out;
  detail::for_each_jsonl(path, [&](const json& j, size_t) {
    MetricScore s{detail::required_string(j, "pair_id"), detail::required_number(j, "score")};
    if (!(s.score >= 0.0 && s.score <= 1.0)) throw validation_error("score must be in [0, 1]");
    out.push_back(std::move(s));
  });
  return out;
}

}  // namespace mddeval
