#pragma once

// The whole self-training recipe in memory: backbone, teacher, pool,
// pseudo-labels, students, correlation reports. The CLI runs the same
// steps stage by stage through files.

#include <chrono>

#include "mddeval/evalharness.hpp"
#include "mddeval/selftrain.hpp"

namespace mddeval {

struct ExperimentInputs {
  std::string teacher_domain;
  std::vector<LabeledPair> base;
  std::map<std::string, std::vector<Dialogue>> dialogues;  // raw corpora per domain
  std::map<std::string, std::vector<BenchmarkRecord>> benchmarks;
  SynonymTable synonyms;
};

struct ExperimentSettings {
  size_t max_vocab = 4000;
  size_t min_freq = 1;
  int max_context = kMaxContextTurns;
  MlmConfig backbone;
  MlmConfig infiller;
  TrainConfig teacher;
  TrainConfig student;
  AugmentPlan plan;
  size_t parallelism = 1;
};

/// Text a teacher-domain model may read: the labeled base pairs and the
/// teacher domain's raw dialogues.
inline std::vector<ContextResponsePair> teacher_text(const ExperimentInputs& in, int max_context) {
  std::vector<ContextResponsePair> out;
  for (const auto& lp : in.base) out.push_back(lp.pair);
  if (auto it = in.dialogues.find(in.teacher_domain); it != in.dialogues.end())
    for (auto& p : extract_pairs(it->second, max_context)) out.push_back(std::move(p));
  return out;
}

inline std::vector<ContextResponsePair> raw_pairs(const ExperimentInputs& in, int max_context) {
  std::vector<ContextResponsePair> out;
  for (const auto& [domain, dl] : in.dialogues)
    for (auto& p : extract_pairs(dl, max_context)) out.push_back(std::move(p));
  return out;
}

inline std::vector<ParaphraseProvider> default_providers(const SynonymTable& table) {
  if (table.empty()) return {};
  auto shared = std::make_shared<const SynonymTable>(table);
  return {synonym_provider(shared, Origin::paraphrase), synonym_provider(shared, Origin::generated)};
}

struct TeacherArtifacts {
  Vocabulary vocab;
  EncoderModel backbone;
  TrainResult teacher;
};

/// Vocabulary and MLM backbone from teacher-domain text, then the teacher.
inline TeacherArtifacts build_teacher(const ExperimentInputs& in, const ExperimentSettings& s, uint64_t seed) {
  const auto text = teacher_text(in, s.max_context);
  auto vocab = build_vocab(text, s.max_vocab, s.min_freq);
  MlmConfig bc = s.backbone;
  bc.seed = seed;
  TrainConfig tc = s.teacher;
  tc.seed = seed;
  auto backbone = train_mlm(text, vocab, tc.encoder(vocab.size()), bc, "backbone");
  auto teacher = train_teacher(in.base, vocab, tc, WarmStart{&backbone, &vocab});
  return {std::move(vocab), std::move(backbone), std::move(teacher)};
}

struct PoolArtifacts {
  Vocabulary vocab;  // student vocabulary over every domain
  EncoderModel infiller;
  std::vector<PoolEntry> pool;
};

inline PoolArtifacts build_pool(const ExperimentInputs& in, const ExperimentSettings& s, uint64_t seed) {
  auto raw = raw_pairs(in, s.max_context);
  auto corpus = raw;
  for (const auto& lp : in.base) corpus.push_back(lp.pair);
  auto vocab = build_vocab(corpus, s.max_vocab, s.min_freq);
  MlmConfig ic = s.infiller;
  ic.seed = seed;
  auto infiller = train_mlm(raw, vocab, s.student.encoder(vocab.size()), ic, "infiller");
  AugmentPlan plan = s.plan;
  plan.rng_seed = seed;
  EncoderInfiller fill(infiller);
  auto pool = build_mdd_pool(raw, plan, default_providers(in.synonyms), &fill, vocab, s.parallelism);
  return {std::move(vocab), std::move(infiller), std::move(pool)};
}

struct ExperimentRun {
  std::vector<std::pair<std::string, CorrelationReport>> held_out;  // configuration -> report over non-teacher domains
  std::vector<std::pair<std::string, CorrelationReport>> all;       // every benchmark domain
  BalanceResult data;
  double seconds = 0.0;
};

struct StudentVariant {
  std::string name;
  LossSpec loss;
  StudentInit init = StudentInit::from_scratch;
};

inline std::vector<StudentVariant> ablation_variants() {
  return {{"MDD-C", loss_flags_for(Ablation::ce)}, {"MDD-CM", loss_flags_for(Ablation::ce_mlm)}, {"MDD-S", loss_flags_for(Ablation::full)}};
}

inline std::map<std::string, std::vector<BenchmarkRecord>> held_out(const ExperimentInputs& in) {
  auto out = in.benchmarks;
  out.erase(in.teacher_domain);
  return out;
}

/// Teacher (reported as MDD-T) followed by one student per variant.
inline ExperimentRun run_experiment(const ExperimentInputs& in, const ExperimentSettings& s, uint64_t seed,
                                    const std::vector<StudentVariant>& variants = ablation_variants()) {
  const auto start = std::chrono::steady_clock::now();
  const auto held = held_out(in);
  ExperimentRun run;
  auto report = [&](const std::string& name, const EncoderModel& m, const Vocabulary& v) {
    if (!held.empty()) run.held_out.emplace_back(name, evaluate(m, v, held, s.parallelism));
    run.all.emplace_back(name, evaluate(m, v, in.benchmarks, s.parallelism));
  };

  auto t = build_teacher(in, s, seed);
  report("MDD-T", t.teacher.model, t.vocab);

  auto p = build_pool(in, s, seed);
  std::vector<ContextResponsePair> pairs;
  for (const auto& e : p.pool) pairs.push_back(e.pair);
  const auto annotated = pseudo_label(t.teacher.model, t.vocab, pairs, s.parallelism);
  run.data = filter_and_balance(annotated, s.student.confidence_threshold, s.student.balance_target_size, seed);

  for (const auto& v : variants) {
    TrainConfig sc = s.student;
    sc.seed = seed;
    sc.loss = v.loss;
    sc.init = v.init;
    auto st = train_student(run.data.pairs, p.vocab, sc, WarmStart{&t.backbone, &t.vocab}, WarmStart{&t.teacher.model, &t.vocab});
    report(v.name, st.model, p.vocab);
  }
  run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return run;
}

/// Settings used by the bundled fixture (and its acceptance run).
inline ExperimentSettings desk_settings() {
  ExperimentSettings s;
  TrainConfig base;
  base.max_seq_len = 48;
  base.dim = 32;
  base.layers = 2;
  base.heads = 2;
  base.ffn_dim = 64;
  base.batch_size = 16;
  base.lr = 0.05;
  s.teacher = base;
  s.teacher.epochs = 15;
  s.teacher.unk_prob = 0.1;
  s.student = base;
  s.student.epochs = 5;
  s.student.balance_target_size = 3000;
  s.backbone.epochs = 10;
  s.infiller.epochs = 3;
  s.plan.per_technique_count = 3;
  return s;
}

}  // namespace mddeval
