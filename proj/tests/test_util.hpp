#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "mddeval/training.hpp"

namespace mddeval::testing {

/// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() / ("mddeval-" + tag + "-" + std::to_string(::getpid()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream(p, std::ios::binary) << text;
}

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

/// Collects warnings while alive.
class WarningCapture {
 public:
  WarningCapture() : saved_(warning_sink()) {
    warning_sink() = [this](std::string_view m) { messages.emplace_back(m); };
  }
  ~WarningCapture() { warning_sink() = saved_; }
  std::vector<std::string> messages;

 private:
  WarningSink saved_;
};

// Marker-token task: the class is carried by one planted response word; all
// other words are noise drawn from a shared filler list.
inline const std::vector<std::string>& marker_fillers() {
  static const std::vector<std::string> w = {"the", "a", "we", "you", "it", "so", "then", "maybe", "very", "just",
                                             "that", "this", "and", "or", "but", "well", "sure", "okay", "yes", "no"};
  return w;
}

inline constexpr std::array<const char*, 3> kMarkers = {"zzrandom", "zzadversarial", "zzrelevant"};

inline std::vector<LabeledPair> marker_pairs(size_t per_class, uint64_t seed, const std::string& prefix = "m") {
  Rng rng(seed);
  const auto& f = marker_fillers();
  auto words = [&](size_t n) {
    std::vector<std::string> out;
    for (size_t i = 0; i < n; ++i) out.push_back(f[rng.below(f.size())]);
    return out;
  };
  std::vector<LabeledPair> out;
  for (size_t i = 0; i < per_class; ++i) {
    for (int k = 0; k < kNumClasses; ++k) {
      LabeledPair lp;
      lp.pair.pair_id = prefix + std::to_string(i) + "-" + std::to_string(k) + "#1";
      lp.pair.context = {join(words(4))};
      auto r = words(3);
      r.insert(r.begin() + static_cast<std::ptrdiff_t>(rng.below(4)), kMarkers[static_cast<size_t>(k)]);
      lp.pair.response = join(r);
      lp.pair.domain = "marker";
      lp.label = static_cast<PairLabel>(k);
      out.push_back(std::move(lp));
    }
  }
  return out;
}

inline TrainConfig tiny_train_config(uint64_t seed = 1) {
  TrainConfig c;
  c.seed = seed;
  c.max_seq_len = 24;
  c.dim = 16;
  c.heads = 2;
  c.layers = 1;
  c.ffn_dim = 32;
  c.batch_size = 8;
  c.epochs = 30;
  c.lr = 0.05;
  return c;
}

inline std::vector<ContextResponsePair> pairs_of(const std::vector<LabeledPair>& lps) {
  std::vector<ContextResponsePair> out;
  for (const auto& lp : lps) out.push_back(lp.pair);
  return out;
}

}  // namespace mddeval::testing
