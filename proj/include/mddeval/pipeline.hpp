#pragma once

// Stage runner behind the CLI. Each stage reads the inputs it declares,
// writes the outputs it declares, and leaves a run log with content hashes.

#include <openssl/evp.h>

#include "mddeval/manifest.hpp"
#include "mddeval/synthetic.hpp"

namespace mddeval {

// ---------------------------------------------------------------------------
// Hashing
// ---------------------------------------------------------------------------

namespace detail {

struct EvpDigest {
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EvpDigest() {
    if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) throw std::runtime_error("sha256 init failed");
  }
  ~EvpDigest() { EVP_MD_CTX_free(ctx); }
  EvpDigest(const EvpDigest&) = delete;
  EvpDigest& operator=(const EvpDigest&) = delete;

  void update(const void* data, size_t n) {
    if (EVP_DigestUpdate(ctx, data, n) != 1) throw std::runtime_error("sha256 update failed");
  }
  std::string hex() {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx, md.data(), &len) != 1) throw std::runtime_error("sha256 final failed");
    static constexpr char digits[] = "0123456789abcdef";
    std::string out;
    for (unsigned i = 0; i < len; ++i) {
      out.push_back(digits[md[i] >> 4]);
      out.push_back(digits[md[i] & 15]);
    }
    return out;
  }
};

}  // namespace detail

inline std::string sha256_hex(std::string_view data) {
  detail::EvpDigest d;
  d.update(data.data(), data.size());
  return d.hex();
}

inline std::string sha256_file(const fs::path& path) {
  auto in = detail::open_input(path);
  detail::EvpDigest d;
  std::array<char, 1 << 16> buf{};
  while (in) {
    in.read(buf.data(), buf.size());
    if (in.gcount() > 0) d.update(buf.data(), static_cast<size_t>(in.gcount()));
  }
  return d.hex();
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

enum class Stage { validate_data, train_teacher, augment, pseudo_label, train_student, score, evaluate };

inline constexpr std::array<std::string_view, 7> kStageNames = {"validate-data", "train-teacher", "augment", "pseudo-label",
                                                               "train-student", "score", "evaluate"};

inline std::string_view to_string(Stage s) { return kStageNames[static_cast<size_t>(s)]; }

inline Stage stage_from_string(std::string_view s) {
  for (size_t i = 0; i < kStageNames.size(); ++i)
    if (kStageNames[i] == s) return static_cast<Stage>(i);
  throw validation_error("unknown stage '" + std::string(s) + "'");
}

/// Hash of the configuration a stage depends on. Paths, parallelism and the
/// work directory are excluded: they do not change what a stage computes.
inline std::string config_hash(Stage stage, const PipelineManifest& m) {
  const auto all = manifest_sections(m);
  ordered_json j;
  j["stage"] = to_string(stage);
  auto run = all["run"];
  run.erase("parallelism");
  run.erase("workdir");
  j["run"] = run;
  auto add = [&](const char* s) { j[s] = all[s]; };
  switch (stage) {
    case Stage::train_teacher:
      add("model"), add("backbone"), add("teacher");
      break;
    case Stage::augment:
      add("model"), add("infiller"), add("augment");
      break;
    case Stage::pseudo_label:
      j["selection"] = {{"confidence_threshold", all["student"]["confidence_threshold"]},
                        {"balance_target_size", all["student"]["balance_target_size"]}};
      break;
    case Stage::train_student:
      add("model"), add("student");
      break;
    default:
      break;
  }
  return sha256_hex(j.dump());
}

enum class ScoreModel { teacher, student };

struct StageOptions {
  bool allow_config_mismatch = false;
  ScoreModel model = ScoreModel::student;                               // score
  std::vector<ScoreModel> models{ScoreModel::teacher, ScoreModel::student};  // evaluate
  std::function<void(std::string_view)> log = [](std::string_view s) { std::cerr << s << '\n'; };
};

struct StageResult {
  std::string stage;
  std::string config_hash;
  std::vector<fs::path> inputs;
  std::vector<fs::path> outputs;
  ordered_json metrics = ordered_json::object();
  fs::path runlog;
};

namespace detail {

inline std::string display_path(const fs::path& p, const fs::path& root) {
  auto rel = p.lexically_relative(root);
  if (!rel.empty() && *rel.begin() != "..") return rel.generic_string();
  return p.generic_string();
}

inline std::vector<BenchmarkRecord> all_benchmark_records(const std::map<std::string, std::vector<BenchmarkRecord>>& b) {
  std::vector<BenchmarkRecord> out;
  for (const auto& [d, recs] : b) out.insert(out.end(), recs.begin(), recs.end());
  return out;
}

inline std::string model_label(ScoreModel m) { return m == ScoreModel::teacher ? "MDD-T" : "MDD-S"; }

}  // namespace detail

class Pipeline {
 public:
  explicit Pipeline(PipelineManifest m, StageOptions opt = {}) : m_(std::move(m)), opt_(std::move(opt)), out_(m_.outputs()) { m_.validate(); }

  const PipelineManifest& manifest() const { return m_; }
  const OutputPaths& outputs() const { return out_; }

  StageResult run(Stage stage) {
    const auto start = std::chrono::steady_clock::now();
    StageResult r;
    r.stage = std::string(to_string(stage));
    r.config_hash = config_hash(stage, m_);
    for (const auto& [path, producer] : upstream(stage))
      if (!fs::exists(path))
        throw Error(ErrorKind::missing_artifact, "missing artifact: " + path.string() + " (run " + std::string(to_string(producer)) + " first)");
    switch (stage) {
      case Stage::validate_data: validate_data(r); break;
      case Stage::train_teacher: train_teacher_stage(r); break;
      case Stage::augment: augment_stage(r); break;
      case Stage::pseudo_label: pseudo_label_stage(r); break;
      case Stage::train_student: train_student_stage(r); break;
      case Stage::score: score_stage(r); break;
      case Stage::evaluate: evaluate_stage(r); break;
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_runlog(r, stage == Stage::score ? r.stage + "-" + (opt_.model == ScoreModel::teacher ? "teacher" : "student") : r.stage, secs);
    return r;
  }

  /// Loaded data bundle; raw corpora are read only when asked for.
  ExperimentInputs load_inputs(bool all_corpora, bool benchmarks, std::vector<fs::path>& read) const {
    ExperimentInputs in;
    in.teacher_domain = m_.teacher_domain;
    auto base = m_.resolve(m_.base);
    in.base = load_labeled_pairs(base, m_.teacher_domain);
    read.push_back(base);
    for (const auto& [domain, p] : m_.corpora) {
      if (!all_corpora && domain != m_.teacher_domain) continue;
      in.dialogues[domain] = load_dialogues(m_.resolve(p), domain);
      read.push_back(m_.resolve(p));
    }
    if (benchmarks) in.benchmarks = load_benchmarks(read);
    if (all_corpora && !m_.synonyms.empty()) {
      in.synonyms = load_synonyms(m_.resolve(m_.synonyms));
      read.push_back(m_.resolve(m_.synonyms));
    }
    return in;
  }

  /// Artifacts a stage reads from earlier stages, with their producer.
  std::vector<std::pair<fs::path, Stage>> upstream(Stage stage) const {
    const bool from_teacher = m_.student.init == StudentInit::from_teacher;
    switch (stage) {
      case Stage::pseudo_label:
        return {{out_.teacher, Stage::train_teacher}, {out_.teacher_vocab, Stage::train_teacher}, {out_.pool, Stage::augment}};
      case Stage::train_student:
        return {{from_teacher ? out_.teacher : out_.backbone, Stage::train_teacher},
                {out_.teacher_vocab, Stage::train_teacher},
                {out_.student_vocab, Stage::augment},
                {out_.filtered, Stage::pseudo_label}};
      case Stage::score:
        if (opt_.model == ScoreModel::teacher) return {{out_.teacher, Stage::train_teacher}, {out_.teacher_vocab, Stage::train_teacher}};
        return {{out_.student, Stage::train_student}, {out_.student_vocab, Stage::augment}};
      case Stage::evaluate: {
        std::vector<std::pair<fs::path, Stage>> v;
        for (auto which : opt_.models) v.emplace_back(which == ScoreModel::teacher ? out_.scores_teacher : out_.scores_student, Stage::score);
        return v;
      }
      default:
        return {};
    }
  }

 private:
  std::map<std::string, std::vector<BenchmarkRecord>> load_benchmarks(std::vector<fs::path>& read) const {
    std::map<std::string, std::vector<BenchmarkRecord>> out;
    std::set<std::string> ids;
    for (const auto& [domain, p] : m_.benchmarks) {
      out[domain] = load_benchmark(m_.resolve(p), domain);
      read.push_back(m_.resolve(p));
      if (out[domain].size() < kMinBenchmarkRecords)
        throw validation_error("benchmark " + domain + " has " + std::to_string(out[domain].size()) + " records; at least 10 required");
      for (const auto& r : out[domain])
        if (!ids.insert(r.pair.pair_id).second) throw validation_error("pair_id " + r.pair.pair_id + " appears in more than one benchmark record");
    }
    return out;
  }

  void log(const std::string& s) const {
    if (opt_.log) opt_.log(s);
  }

  /// Loads a checkpoint and refuses it when it was produced under a
  /// different configuration or vocabulary.
  EncoderModel load_checked(const fs::path& path, Stage producer, const Vocabulary& vocab, StageResult& r) const {
    auto ck = load_checkpoint(path);
    r.inputs.push_back(path);
    const auto expected = config_hash(producer, m_);
    if (ck.meta.config_hash != expected) {
      const std::string msg = path.string() + " was produced by " + std::string(to_string(producer)) + " under config hash " +
                              ck.meta.config_hash + ", but the manifest now gives " + expected;
      if (!opt_.allow_config_mismatch) throw validation_error(msg + "; rerun that stage or pass --allow-config-mismatch");
      log("warning: " + msg);
    }
    if (ck.meta.vocab_fingerprint != vocab.fingerprint())
      throw validation_error(path.string() + " was trained with a different vocabulary");
    return std::move(ck.model);
  }

  Vocabulary load_vocab_input(const fs::path& p, StageResult& r) const {
    auto v = load_vocab(p);
    r.inputs.push_back(p);
    return v;
  }

  void save_model(const fs::path& p, const EncoderModel& model, const Vocabulary& vocab, const StageResult& r) const {
    save_checkpoint(p, model, {vocab.fingerprint(), r.config_hash});
  }

  void validate_data(StageResult& r) {
    auto in = load_inputs(true, true, r.inputs);
    require_all_classes(in.base);
    size_t problems = 0;
    for (const auto& lp : in.base)
      if (auto why = check_pair(lp.pair)) {
        ++problems;
        log("base " + lp.pair.pair_id + ": " + *why);
      }
    if (problems) throw validation_error(std::to_string(problems) + " invalid base pairs");
    r.metrics["base_pairs"] = in.base.size();
    for (const auto& [d, dl] : in.dialogues) {
      r.metrics["dialogues"][d] = dl.size();
      r.metrics["raw_pairs"][d] = extract_pairs(dl, m_.max_context).size();
    }
    for (const auto& [d, recs] : in.benchmarks) {
      std::vector<double> human;
      for (const auto& rec : recs) human.push_back(rec.human_score);
      if (is_constant(human)) throw validation_error("benchmark " + d + " has constant human scores; correlation undefined for constant input");
      r.metrics["benchmark_records"][d] = recs.size();
    }
    r.metrics["synonym_entries"] = in.synonyms.size();
    log("data ok: " + r.metrics.dump());
  }

  void train_teacher_stage(StageResult& r) {
    auto in = load_inputs(false, false, r.inputs);
    auto s = m_.settings();
    log("training backbone and teacher on domain " + m_.teacher_domain);
    auto t = build_teacher(in, s, m_.seed);
    save_vocab(out_.teacher_vocab, t.vocab);
    save_model(out_.backbone, t.backbone, t.vocab, r);
    save_model(out_.teacher, t.teacher.model, t.vocab, r);
    r.outputs = {out_.teacher_vocab, out_.backbone, out_.teacher};
    r.metrics["vocab_size"] = t.vocab.size();
    double best = 0.0;
    for (const auto& e : t.teacher.history)
      if (e.validation) best = std::max(best, e.validation->accuracy);
    r.metrics["best_validation_accuracy"] = best;
    r.metrics["best_epoch"] = t.teacher.best_epoch;
    log("teacher validation accuracy " + format_number(best));
  }

  void augment_stage(StageResult& r) {
    auto in = load_inputs(true, false, r.inputs);
    log("training infiller and building the augmented pool");
    auto p = build_pool(in, m_.settings(), m_.seed);
    save_vocab(out_.student_vocab, p.vocab);
    save_model(out_.infiller, p.infiller, p.vocab, r);
    save_pool(out_.pool, p.pool);
    r.outputs = {out_.student_vocab, out_.infiller, out_.pool};
    std::map<std::string, size_t> by_origin;
    for (const auto& e : p.pool) ++by_origin[std::string(to_string(e.pair.origin))];
    r.metrics["pool_size"] = p.pool.size();
    r.metrics["by_origin"] = by_origin;
    log("pool size " + std::to_string(p.pool.size()));
  }

  void pseudo_label_stage(StageResult& r) {
    auto vocab = load_vocab_input(out_.teacher_vocab, r);
    auto teacher = load_checked(out_.teacher, Stage::train_teacher, vocab, r);
    auto pool = load_pool(out_.pool);
    r.inputs.push_back(out_.pool);
    std::vector<ContextResponsePair> pairs;
    for (const auto& e : pool) pairs.push_back(e.pair);
    const auto annotated = pseudo_label(teacher, vocab, pairs, m_.parallelism);
    const auto bal = filter_and_balance(annotated, m_.student.confidence_threshold, m_.student.balance_target_size, m_.seed);
    save_annotated(out_.annotated, annotated);
    save_annotated(out_.filtered, bal.pairs);
    r.outputs = {out_.annotated, out_.filtered};
    r.metrics["annotated"] = annotated.size();
    r.metrics["retained"] = bal.retained;
    r.metrics["selected"] = bal.selected;
    r.metrics["shortfall"] = bal.shortfall;
    for (size_t k = 0; k < kNumClasses; ++k)
      if (bal.shortfall[k] > 0)
        log("warning: class " + std::string(kLabelNames[k]) + " is short by " + std::to_string(bal.shortfall[k]) + " pairs");
    log("selected " + std::to_string(bal.pairs.size()) + " of " + std::to_string(annotated.size()) + " pairs");
  }

  void train_student_stage(StageResult& r) {
    auto vocab = load_vocab_input(out_.student_vocab, r);
    auto tvocab = load_vocab_input(out_.teacher_vocab, r);
    auto data = load_annotated(out_.filtered);
    r.inputs.push_back(out_.filtered);
    const bool from_teacher = m_.student.init == StudentInit::from_teacher;
    auto start = load_checked(from_teacher ? out_.teacher : out_.backbone, Stage::train_teacher, tvocab, r);
    std::optional<WarmStart> ws = WarmStart{&start, &tvocab};
    log("training student (" + loss_flags_string(m_.student.loss) + ") on " + std::to_string(data.size()) + " pairs");
    auto st = from_teacher ? train_student(data, vocab, m_.student, std::nullopt, ws) : train_student(data, vocab, m_.student, ws);
    save_model(out_.student, st.model, vocab, r);
    r.outputs = {out_.student};
    r.metrics["final_loss"] = st.history.empty() ? 0.0 : st.history.back().train_loss;
  }

  void score_stage(StageResult& r) {
    const bool teacher = opt_.model == ScoreModel::teacher;
    auto vocab = load_vocab_input(teacher ? out_.teacher_vocab : out_.student_vocab, r);
    auto model = load_checked(teacher ? out_.teacher : out_.student, teacher ? Stage::train_teacher : Stage::train_student, vocab, r);
    const auto records = detail::all_benchmark_records(load_benchmarks(r.inputs));
    std::vector<ContextResponsePair> pairs;
    for (const auto& rec : records) pairs.push_back(rec.pair);
    const auto scores = score_batch(model, vocab, pairs, m_.parallelism);
    for (const auto& s : scores)
      if (!std::isfinite(s.score)) throw Error(ErrorKind::numerical, "score for " + s.pair_id + " is not finite");
    const auto& path = teacher ? out_.scores_teacher : out_.scores_student;
    save_scores(path, scores);
    r.outputs = {path};
    r.metrics["scored"] = scores.size();
  }

  void evaluate_stage(StageResult& r) {
    if (opt_.models.empty()) throw validation_error("evaluate needs at least one model");
    const auto benchmarks = load_benchmarks(r.inputs);
    std::vector<std::pair<std::string, CorrelationReport>> columns;
    ordered_json report;
    report["teacher_domain"] = m_.teacher_domain;
    for (auto which : opt_.models) {
      const auto& path = which == ScoreModel::teacher ? out_.scores_teacher : out_.scores_student;
      const auto scores = load_scores(path);
      r.inputs.push_back(path);
      std::map<std::string, double> by_id;
      for (const auto& s : scores) by_id[s.pair_id] = s.score;
      std::map<std::string, DomainCorrelation> per;
      for (const auto& [domain, recs] : benchmarks) {
        std::vector<double> s;
        for (const auto& rec : recs) {
          auto it = by_id.find(rec.pair.pair_id);
          if (it == by_id.end()) throw validation_error(path.string() + " has no score for " + rec.pair.pair_id + "; rerun score");
          s.push_back(it->second);
        }
        per[domain] = correlate(recs, s);
      }
      auto rep = make_report(std::move(per));
      double held = 0.0;
      size_t n = 0;
      for (const auto& [d, c] : rep.per_domain)
        if (d != m_.teacher_domain) held += c.spearman, ++n;
      const auto label = detail::model_label(which);
      report["models"][label] = report_json(rep);
      if (n) report["models"][label]["held_out_average_spearman"] = held / static_cast<double>(n);
      r.metrics[label] = rep.average_spearman;
      columns.emplace_back(label, std::move(rep));
    }
    auto out = detail::open_output(out_.report);
    out << report.dump(2) << '\n';
    out.close();
    r.outputs = {out_.report};
    table_ = format_table(columns);
  }

  void write_runlog(StageResult& r, const std::string& name, double secs) const {
    ordered_json j;
    j["stage"] = r.stage;
    j["config_hash"] = r.config_hash;
    j["seed"] = m_.seed;
    j["parallelism"] = m_.parallelism;
    auto files = [&](const std::vector<fs::path>& ps) {
      ordered_json a = ordered_json::array();
      for (const auto& p : ps) a.push_back({{"path", detail::display_path(p, m_.root)}, {"sha256", sha256_file(p)}});
      return a;
    };
    j["inputs"] = files(r.inputs);
    j["outputs"] = files(r.outputs);
    j["metrics"] = r.metrics;
    j["wall_time_seconds"] = secs;
    r.runlog = out_.runlog_dir / (name + ".json");
    auto out = detail::open_output(r.runlog);
    out << j.dump(2) << '\n';
  }

 public:
  /// Table printed by the last evaluate run.
  const std::string& table() const { return table_; }

 private:
  PipelineManifest m_;
  StageOptions opt_;
  OutputPaths out_;
  std::string table_;
};

// ---------------------------------------------------------------------------
// Bundled synthetic corpus
// ---------------------------------------------------------------------------

/// Manifest matching the files written by write_synthetic.
inline PipelineManifest synthetic_manifest(const synthetic::Fixture& fx, const std::string& teacher_domain, uint64_t seed) {
  const auto s = desk_settings();
  PipelineManifest m;
  m.seed = seed;
  m.teacher_domain = teacher_domain;
  m.base = "base.jsonl";
  m.synonyms = "synonyms.json";
  for (const auto& [d, dl] : fx.dialogues) m.corpora[d] = "dialogues/" + d + ".jsonl";
  for (const auto& [d, b] : fx.benchmarks) m.benchmarks[d] = "benchmarks/" + d + ".jsonl";
  m.teacher = s.teacher;
  m.student = s.student;
  m.student.loss = loss_flags_for(Ablation::full);
  m.backbone = s.backbone;
  m.infiller = s.infiller;
  m.augment = s.plan;
  m.max_vocab = s.max_vocab;
  return m;
}

inline void write_synthetic(const fs::path& dir, const synthetic::Fixture& fx, const std::string& teacher_domain, uint64_t seed) {
  save_labeled_pairs(dir / "base.jsonl", fx.base);
  for (const auto& [d, dl] : fx.dialogues) save_dialogues(dir / "dialogues" / (d + ".jsonl"), dl);
  for (const auto& [d, b] : fx.benchmarks) save_benchmark(dir / "benchmarks" / (d + ".jsonl"), b);
  save_synonyms(dir / "synonyms.json", fx.synonyms);
  auto out = detail::open_output(dir / "manifest.ini");
  out << manifest_ini(synthetic_manifest(fx, teacher_domain, seed));
}

}  // namespace mddeval
