#pragma once

// Training configuration and the mini-batch loop shared by teacher and student.

#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "mddeval/encoder.hpp"

namespace mddeval {

struct NoiseConfig {
  double drop_prob = 0.1;
  double replace_prob = 0.1;
  bool operator==(const NoiseConfig&) const = default;
};

enum class StudentInit { from_scratch, from_teacher };

enum class OptimizerKind { sgd, adam };

struct TrainConfig {
  // optimization
  size_t epochs = 10;
  size_t batch_size = 16;
  OptimizerKind optimizer = OptimizerKind::sgd;
  double lr = 0.05;
  double momentum = 0.9;  // sgd only
  double clip_norm = 1.0;
  uint64_t seed = 1;
  size_t eval_every = 0;  // steps between validations; 0 = once per epoch

  // architecture
  size_t max_seq_len = 128;
  size_t dim = 128;
  size_t layers = 2;
  size_t heads = 4;
  size_t ffn_dim = 512;
  double init_std = 0.02;

  // objective
  LossSpec loss;  // CE always required for classifier training
  double mask_prob = 0.15;
  NoiseConfig noise;
  double unk_prob = 0.0;  // word dropout to [UNK] on the clean input

  // self-training
  double confidence_threshold = 0.70;
  size_t balance_target_size = 6000;
  StudentInit init = StudentInit::from_scratch;

  void validate() const {
    if (batch_size < 1) throw validation_error("batch_size must be >= 1");
    if (epochs < 1) throw validation_error("epochs must be >= 1");
    if (!(lr > 0.0)) throw validation_error("lr must be positive");
    if (!(confidence_threshold > 1.0 / 3.0 && confidence_threshold < 1.0))
      throw validation_error("confidence_threshold must be in (1/3, 1)");
    if (!loss.ce) throw validation_error("loss flags must include CE");
    if (mask_prob < 0.0 || mask_prob > 1.0) throw validation_error("mask_prob must be in [0, 1]");
    if (unk_prob < 0.0 || unk_prob >= 1.0) throw validation_error("unk_prob must be in [0, 1)");
    if (noise.drop_prob < 0.0 || noise.drop_prob > 1.0 || noise.replace_prob < 0.0 || noise.replace_prob > 1.0)
      throw validation_error("noise probabilities must be in [0, 1]");
  }

  EncoderConfig encoder(size_t vocab_size) const {
    EncoderConfig c;
    c.vocab_size = vocab_size;
    c.max_seq_len = max_seq_len;
    c.dim = dim;
    c.layers = layers;
    c.heads = heads;
    c.ffn_dim = ffn_dim;
    c.init_std = init_std;
    return c;
  }
};

/// Ablation presets: MDD-C = {CE}, MDD-CM = {CE, MLM}, MDD-S = {CE, MLM, KL}.
enum class Ablation { ce, ce_mlm, full };

inline LossSpec loss_flags_for(Ablation a) {
  LossSpec s;
  s.ce = true;
  s.mlm = a != Ablation::ce;
  s.kl = a == Ablation::full;
  return s;
}

inline std::string loss_flags_string(const LossSpec& s) {
  std::string out = "CE";
  if (s.mlm) out += ",MLM";
  if (s.kl) out += ",KL";
  return out;
}

/// Class distribution predicted for a pair.
struct SoftLabel {
  SoftLabelProbs probs{};

  PairLabel hard_class() const { return static_cast<PairLabel>(argmax_class(probs)); }
  double confidence() const { return *std::max_element(probs.begin(), probs.end()); }
  bool operator==(const SoftLabel&) const = default;
};

inline SoftLabel predict(const EncoderModel& model, const Vocabulary& vocab, const ContextResponsePair& pair) {
  ForwardCache<float> cache;
  const auto enc = encode_pair(pair, vocab, model.config().max_seq_len);
  const auto out = forward(model, std::span<const TokenId>(enc.ids), std::span<const Segment>(enc.segments), {}, cache);
  return {class_probs(out.class_logits)};
}

/// Item the loop trains on: a pair and its class distribution target.
struct TargetedPair {
  ContextResponsePair pair;
  SoftLabelProbs target{};
};

struct EvalStats {
  double loss = 0.0;
  double accuracy = 0.0;
  size_t count = 0;
};

struct EpochStats {
  size_t epoch = 0;
  size_t step = 0;
  double train_loss = 0.0;
  double train_ce = 0.0;
  double train_kl = 0.0;
  double train_mlm = 0.0;
  double train_accuracy = 0.0;
  std::optional<EvalStats> validation;
};

struct TrainResult {
  EncoderModel model;
  std::vector<EpochStats> history;
  std::vector<double> step_losses;
  size_t best_epoch = 0;
};

/// Existing weights to start from, with the vocabulary they were trained on.
struct WarmStart {
  const EncoderModel* model = nullptr;
  const Vocabulary* vocab = nullptr;
};

/// Fresh seeded model, or `warm` re-indexed onto `vocab`. The warm model's
/// architecture (apart from vocabulary size) must match the configuration.
inline EncoderModel initial_model(const TrainConfig& config, const Vocabulary& vocab, const std::optional<WarmStart>& warm) {
  const auto arch = config.encoder(vocab.size());
  if (!warm) {
    EncoderModel m(arch);
    m.initialize(derive_seed(config.seed, std::string_view("init")));
    return m;
  }
  if (!warm->model || !warm->vocab) throw validation_error("warm start needs both a model and its vocabulary");
  auto want = arch;
  want.vocab_size = warm->model->config().vocab_size;
  if (!(warm->model->config() == want)) throw validation_error("warm-start architecture differs from the training configuration");
  auto m = remap_vocabulary(*warm->model, *warm->vocab, vocab, derive_seed(config.seed, std::string_view("remap")));
  m.info() = {};
  return m;
}

/// Hook used to build the noisy view of a response (consistency term).
using NoiseFn = std::function<std::string(const std::string& response, uint64_t seed)>;

inline EvalStats evaluate_targets(const EncoderModel& model, const Vocabulary& vocab, const std::vector<TargetedPair>& data, size_t max_seq_len) {
  EvalStats s;
  ForwardCache<float> cache;
  for (const auto& item : data) {
    const auto enc = encode_pair(item.pair, vocab, max_seq_len);
    const auto out = forward(model, std::span<const TokenId>(enc.ids), std::span<const Segment>(enc.segments), {}, cache);
    s.loss += loss_ce(out.class_logits, item.target).value;
    if (argmax_class(out.class_logits) == argmax_class(item.target)) s.accuracy += 1.0;
  }
  s.count = data.size();
  if (!data.empty()) {
    s.loss /= static_cast<double>(data.size());
    s.accuracy /= static_cast<double>(data.size());
  }
  return s;
}

/// Mini-batch SGD with momentum over `train`. When `validation` is non-empty
/// the returned model is the one with the best validation accuracy (ties go
/// to lower validation loss); otherwise the final model. All randomness is
/// derived from config.seed per (epoch, item), so disabled terms consume no
/// random numbers.
inline TrainResult train_classifier(EncoderModel model, const Vocabulary& vocab, const std::vector<TargetedPair>& train,
                                    const std::vector<TargetedPair>& validation, const TrainConfig& config, const NoiseFn& noise,
                                    const std::function<void(const EpochStats&)>& on_eval = {}) {
  config.validate();
  if (train.empty()) throw validation_error("training set is empty");
  if (config.loss.kl && !noise) throw validation_error("consistency training needs a noise function");

  std::vector<EncodedPair> encoded;
  encoded.reserve(train.size());
  for (const auto& t : train) encoded.push_back(encode_pair(t.pair, vocab, config.max_seq_len));

  std::optional<MomentumSgd<float>> sgd;
  std::optional<Adam<float>> adam;
  if (config.optimizer == OptimizerKind::adam)
    adam.emplace(config.lr, 0.9, 0.999, 1e-8, config.clip_norm);
  else
    sgd.emplace(config.lr, config.momentum, config.clip_norm);
  MaskPolicy mask_policy;
  mask_policy.mask_prob = config.mask_prob;

  TrainResult result{model, {}, {}, 0};
  std::optional<std::pair<double, double>> best;  // (accuracy, -loss)
  size_t step = 0;
  const size_t steps_per_epoch = (train.size() + config.batch_size - 1) / config.batch_size;
  const size_t eval_every = config.eval_every ? config.eval_every : steps_per_epoch;

  EpochStats running;
  size_t running_batches = 0;
  size_t running_correct = 0, running_count = 0;

  std::vector<size_t> order(train.size());
  Gradients<float> grads;
  std::vector<TrainExample> batch;
  for (size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), size_t{0});
    Rng(derive_seed(config.seed, std::string_view("shuffle"), epoch)).shuffle(order);
    for (size_t start = 0; start < order.size(); start += config.batch_size) {
      const size_t end = std::min(order.size(), start + config.batch_size);
      batch.clear();
      for (size_t b = start; b < end; ++b) {
        const size_t idx = order[b];
        TrainExample ex;
        ex.clean = encoded[idx];
        ex.target = train[idx].target;
        if (config.unk_prob > 0.0) {
          Rng rng(derive_seed(config.seed, std::string_view("unk"), epoch, idx));
          for (auto& id : ex.clean.ids)
            if (!is_special(id) && rng.bernoulli(config.unk_prob)) id = special::unk;
        }
        if (config.loss.kl) {
          ContextResponsePair noisy = train[idx].pair;
          noisy.response = noise(noisy.response, derive_seed(config.seed, std::string_view("noise"), epoch, idx));
          ex.noisy = encode_pair(noisy, vocab, config.max_seq_len);
        }
        if (config.loss.mlm)
          ex.masked = apply_mlm_mask(ex.clean, mask_policy, vocab.size(), derive_seed(config.seed, std::string_view("mlm"), epoch, idx));
        batch.push_back(std::move(ex));
      }
      const auto lb = compute_gradients(model, std::span<const TrainExample>(batch), config.loss, grads);
      if (adam)
        adam->step(model, grads);
      else
        sgd->step(model, grads);
      ++model.info().ce_steps;
      if (config.loss.mlm) ++model.info().mlm_steps;
      ++step;
      result.step_losses.push_back(lb.total);

      running.train_loss += lb.total;
      running.train_ce += lb.ce;
      running.train_kl += lb.kl;
      running.train_mlm += lb.mlm;
      running_correct += lb.correct;
      running_count += lb.count;
      ++running_batches;

      const bool last = epoch + 1 == config.epochs && end == order.size();
      if (step % eval_every == 0 || last) {
        EpochStats s = running;
        s.epoch = epoch;
        s.step = step;
        const double nb = static_cast<double>(running_batches);
        s.train_loss /= nb;
        s.train_ce /= nb;
        s.train_kl /= nb;
        s.train_mlm /= nb;
        s.train_accuracy = static_cast<double>(running_correct) / static_cast<double>(running_count);
        if (!validation.empty()) {
          s.validation = evaluate_targets(model, vocab, validation, config.max_seq_len);
          const std::pair<double, double> key{s.validation->accuracy, -s.validation->loss};
          if (!best || key > *best) {
            best = key;
            result.model = model;
            result.best_epoch = epoch;
          }
        }
        result.history.push_back(s);
        if (on_eval) on_eval(s);
        running = EpochStats{};
        running_batches = running_correct = running_count = 0;
      }
    }
  }
  if (validation.empty()) {
    result.model = model;
    result.best_epoch = config.epochs - 1;
  }
  return result;
}

/// Masked-LM-only training: used for the pretrained backbone and for the
/// mask-and-fill infiller.
struct MlmConfig {
  size_t epochs = 10;
  size_t batch_size = 16;
  double lr = 0.05;
  double momentum = 0.9;
  double clip_norm = 1.0;
  double mask_prob = 0.15;
  uint64_t seed = 1;
};

inline EncoderModel train_mlm(const std::vector<ContextResponsePair>& corpus, const Vocabulary& vocab, const EncoderConfig& arch,
                              const MlmConfig& cfg, std::string_view purpose = "mlm") {
  if (corpus.empty()) throw validation_error("masked-LM corpus is empty");
  if (cfg.batch_size < 1) throw validation_error("batch_size must be >= 1");
  EncoderModel model(arch);
  model.initialize(derive_seed(cfg.seed, purpose, std::string_view("init")));
  std::vector<EncodedPair> enc;
  for (const auto& p : corpus) enc.push_back(encode_pair(p, vocab, arch.max_seq_len));
  LossSpec spec;
  spec.ce = false;
  spec.mlm = true;
  MaskPolicy policy;
  policy.mask_prob = cfg.mask_prob;
  MomentumSgd<float> opt(cfg.lr, cfg.momentum, cfg.clip_norm);
  Gradients<float> grads;
  std::vector<size_t> order(enc.size());
  std::vector<TrainExample> batch;
  for (size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), size_t{0});
    Rng(derive_seed(cfg.seed, purpose, std::string_view("shuffle"), epoch)).shuffle(order);
    for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
      batch.clear();
      for (size_t b = start; b < std::min(order.size(), start + cfg.batch_size); ++b) {
        TrainExample ex;
        ex.clean = enc[order[b]];
        ex.masked = apply_mlm_mask(ex.clean, policy, vocab.size(), derive_seed(cfg.seed, purpose, std::string_view("mask"), epoch, order[b]));
        batch.push_back(std::move(ex));
      }
      compute_gradients(model, std::span<const TrainExample>(batch), spec, grads);
      opt.step(model, grads);
      ++model.info().mlm_steps;
    }
  }
  return model;
}

}  // namespace mddeval
