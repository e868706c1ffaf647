#pragma once

// Pipeline manifest: an INI file of [section] key = value pairs. Any value
// can be overridden from the environment as SECTION__KEY (upper case) or on
// the command line as section.key=value; the command line wins.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>

#include "mddeval/experiment.hpp"

extern char** environ;

namespace mddeval {

namespace fs = std::filesystem;

using RawManifest = std::map<std::string, std::map<std::string, std::string>>;

inline constexpr std::array<std::string_view, 11> kManifestSections = {
    "run", "data", "corpora", "benchmarks", "model", "backbone", "teacher", "infiller", "augment", "student", "outputs"};

inline bool is_manifest_section(std::string_view s) {
  return std::find(kManifestSections.begin(), kManifestSections.end(), s) != kManifestSections.end();
}

inline std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

inline RawManifest read_raw_manifest(const fs::path& path) {
  if (!fs::exists(path)) throw Error(ErrorKind::missing_artifact, "missing file: " + path.string());
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::read_ini(path.string(), tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw validation_error(e.what());
  }
  RawManifest raw;
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw validation_error(path.string() + ": key '" + section + "' is outside any section");
    if (!is_manifest_section(section)) throw validation_error(path.string() + ": unknown section [" + section + "]");
    for (const auto& [key, value] : body) raw[section][key] = value.data();
  }
  return raw;
}

/// SECTION__KEY variables for known sections, as (section, key, value).
inline std::vector<std::array<std::string, 3>> environment_overrides(char** env = environ) {
  std::vector<std::array<std::string, 3>> out;
  for (; env && *env; ++env) {
    std::string_view entry(*env);
    const auto eq = entry.find('=');
    const auto name = entry.substr(0, eq);
    const auto sep = name.find("__");
    if (eq == std::string_view::npos || sep == std::string_view::npos || sep == 0) continue;
    auto section = lower(std::string(name.substr(0, sep)));
    if (!is_manifest_section(section)) continue;
    out.push_back({section, lower(std::string(name.substr(sep + 2))), std::string(entry.substr(eq + 1))});
  }
  std::sort(out.begin(), out.end());
  return out;
}

/// Parses "section.key=value".
inline std::array<std::string, 3> parse_override(std::string_view s) {
  const auto eq = s.find('=');
  const auto dot = s.substr(0, eq).find('.');
  if (eq == std::string_view::npos || dot == std::string_view::npos || dot == 0 || dot + 1 == eq)
    throw validation_error("override '" + std::string(s) + "' is not of the form section.key=value");
  std::string section(s.substr(0, dot));
  if (!is_manifest_section(section)) throw validation_error("override names unknown section '" + section + "'");
  return {section, std::string(s.substr(dot + 1, eq - dot - 1)), std::string(s.substr(eq + 1))};
}

namespace detail {

/// Typed access to one section; every key must be consumed.
class SectionReader {
 public:
  SectionReader(std::string name, std::map<std::string, std::string> values) : name_(std::move(name)), values_(std::move(values)) {}

  template <class T>
  void read(const std::string& key, T& out) {
    auto it = values_.find(key);
    if (it == values_.end()) return;
    out = convert<T>(key, trim(it->second));
    values_.erase(it);
  }

  template <class T>
  T required(const std::string& key) {
    if (!values_.count(key)) throw validation_error("manifest [" + name_ + "] needs '" + key + "'");
    T v{};
    read(key, v);
    return v;
  }

  std::map<std::string, std::string> take_all() { return std::exchange(values_, {}); }

  void finish() const {
    if (!values_.empty()) throw validation_error("manifest [" + name_ + "] has unknown key '" + values_.begin()->first + "'");
  }

 private:
  template <class T>
  T convert(const std::string& key, const std::string& s) const {
    auto bad = [&](const char* what) { return validation_error("manifest " + name_ + "." + key + " = '" + s + "' is not " + what); };
    if constexpr (std::is_same_v<T, std::string>) {
      return s;
    } else if constexpr (std::is_same_v<T, bool>) {
      if (s == "true" || s == "1") return true;
      if (s == "false" || s == "0") return false;
      throw bad("a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      T v{};
      auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (ec != std::errc() || p != s.data() + s.size()) throw bad("an integer");
      return v;
    } else {
      static_assert(std::is_floating_point_v<T>);
      T v{};
      auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (ec != std::errc() || p != s.data() + s.size() || !std::isfinite(v)) throw bad("a number");
      return v;
    }
  }

  std::string name_;
  std::map<std::string, std::string> values_;
};

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  size_t start = 0;
  while (start <= s.size()) {
    const auto end = std::min(s.find(',', start), s.size());
    auto item = trim(s.substr(start, end - start));
    if (!item.empty()) out.push_back(std::move(item));
    start = end + 1;
  }
  return out;
}

}  // namespace detail

inline LossSpec parse_loss_flags(const std::string& s) {
  LossSpec spec;
  spec.ce = spec.mlm = spec.kl = false;
  for (const auto& f : detail::split_list(s)) {
    if (f == "CE") spec.ce = true;
    else if (f == "MLM") spec.mlm = true;
    else if (f == "KL") spec.kl = true;
    else throw validation_error("unknown loss flag '" + f + "' (expected CE, MLM, KL)");
  }
  return spec;
}

struct OutputPaths {
  fs::path workdir;
  fs::path teacher_vocab, backbone, teacher;
  fs::path student_vocab, infiller, pool;
  fs::path annotated, filtered;
  fs::path student;
  fs::path scores_teacher, scores_student;
  fs::path report;
  fs::path runlog_dir;
};

struct PipelineManifest {
  fs::path root;  // relative paths resolve against this (the manifest's directory)

  // [run]
  uint64_t seed = 0;
  size_t parallelism = 1;
  std::string teacher_domain;
  size_t max_vocab = 4000;
  size_t min_freq = 1;
  int max_context = kMaxContextTurns;
  std::string workdir = "runs";

  // [data], [corpora], [benchmarks]
  std::string base;
  std::string synonyms;  // optional
  std::map<std::string, std::string> corpora;
  std::map<std::string, std::string> benchmarks;

  // [model] is folded into both train configs
  TrainConfig teacher;
  TrainConfig student;
  MlmConfig backbone;
  MlmConfig infiller;
  AugmentPlan augment;

  std::map<std::string, std::string> output_names;

  fs::path resolve(const std::string& p) const {
    fs::path q(p);
    return q.is_absolute() ? q : root / q;
  }

  OutputPaths outputs() const {
    OutputPaths o;
    o.workdir = resolve(workdir);
    auto at = [&](const std::string& key, const std::string& def) {
      auto it = output_names.find(key);
      fs::path q(it == output_names.end() ? def : it->second);
      return q.is_absolute() ? q : o.workdir / q;
    };
    o.teacher_vocab = at("teacher_vocab", "teacher/vocab.json");
    o.backbone = at("backbone", "teacher/backbone.ckpt.json");
    o.teacher = at("teacher", "teacher/teacher.ckpt.json");
    o.student_vocab = at("student_vocab", "augment/vocab.json");
    o.infiller = at("infiller", "augment/infiller.ckpt.json");
    o.pool = at("pool", "augment/pool.jsonl");
    o.annotated = at("annotated", "pseudo/annotated.jsonl");
    o.filtered = at("filtered", "pseudo/filtered.jsonl");
    o.student = at("student", "student/student.ckpt.json");
    o.scores_teacher = at("scores_teacher", "scores/teacher.jsonl");
    o.scores_student = at("scores_student", "scores/student.jsonl");
    o.report = at("report", "report.json");
    o.runlog_dir = at("runlog", "runlog");
    return o;
  }

  ExperimentSettings settings() const {
    ExperimentSettings s;
    s.max_vocab = max_vocab;
    s.min_freq = min_freq;
    s.max_context = max_context;
    s.backbone = backbone;
    s.infiller = infiller;
    s.teacher = teacher;
    s.student = student;
    s.plan = augment;
    s.parallelism = parallelism;
    return s;
  }

  void validate() const {
    if (teacher_domain.empty()) throw validation_error("manifest run.teacher_domain is empty");
    if (parallelism < 1) throw validation_error("manifest run.parallelism must be >= 1");
    if (max_vocab <= special::count) throw validation_error("manifest run.max_vocab is too small");
    if (max_context < 1) throw validation_error("manifest run.max_context must be >= 1");
    if (corpora.empty()) throw validation_error("manifest [corpora] lists no raw corpora");
    if (benchmarks.empty()) throw validation_error("manifest [benchmarks] lists no benchmark files");
    if (!corpora.count(teacher_domain)) throw validation_error("manifest has no corpus for teacher domain '" + teacher_domain + "'");
    teacher.validate();
    student.validate();
    augment.validate();
    if (teacher.encoder(special::count + 1) != student.encoder(special::count + 1))
      throw validation_error("teacher and student architectures differ");  // unreachable via [model]; guards hand-built manifests
    for (const auto& p : input_paths())
      if (!fs::exists(p)) throw Error(ErrorKind::missing_artifact, "missing file: " + p.string());
  }

  std::vector<fs::path> input_paths() const {
    std::vector<fs::path> out{resolve(base)};
    if (!synonyms.empty()) out.push_back(resolve(synonyms));
    for (const auto& [d, p] : corpora) out.push_back(resolve(p));
    for (const auto& [d, p] : benchmarks) out.push_back(resolve(p));
    return out;
  }
};

// ---------------------------------------------------------------------------
// Canonical section view: used for hashing and for writing manifests.
// ---------------------------------------------------------------------------

inline std::string format_number(double v) {
  std::array<char, 64> buf{};
  auto [p, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), p);
}

inline ordered_json mlm_section(const MlmConfig& c) {
  return {{"epochs", c.epochs}, {"batch_size", c.batch_size}, {"lr", format_number(c.lr)}, {"momentum", format_number(c.momentum)},
          {"clip_norm", format_number(c.clip_norm)}, {"mask_prob", format_number(c.mask_prob)}};
}

inline ordered_json model_section(const TrainConfig& c) {
  return {{"max_seq_len", c.max_seq_len}, {"dim", c.dim}, {"layers", c.layers},
          {"heads", c.heads}, {"ffn_dim", c.ffn_dim}, {"init_std", format_number(c.init_std)}};
}

inline ordered_json optimizer_fields(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"optimizer", c.optimizer == OptimizerKind::adam ? "adam" : "sgd"},
          {"lr", format_number(c.lr)},
          {"momentum", format_number(c.momentum)},
          {"clip_norm", format_number(c.clip_norm)},
          {"eval_every", c.eval_every},
          {"unk_prob", format_number(c.unk_prob)}};
}

inline ordered_json teacher_section(const TrainConfig& c) { return optimizer_fields(c); }

inline ordered_json student_section(const TrainConfig& c) {
  auto j = optimizer_fields(c);
  j["loss"] = loss_flags_string(c.loss);
  j["ce_weight"] = format_number(c.loss.ce_weight);
  j["mlm_weight"] = format_number(c.loss.mlm_weight);
  j["kl_weight"] = format_number(c.loss.kl_weight);
  j["kl_direction"] = c.loss.kl_direction == KlDirection::symmetric ? "symmetric" : "clean_to_noisy";
  j["mask_prob"] = format_number(c.mask_prob);
  j["noise_drop_prob"] = format_number(c.noise.drop_prob);
  j["noise_replace_prob"] = format_number(c.noise.replace_prob);
  j["confidence_threshold"] = format_number(c.confidence_threshold);
  j["balance_target_size"] = c.balance_target_size;
  j["init"] = c.init == StudentInit::from_teacher ? "from_teacher" : "from_scratch";
  return j;
}

inline ordered_json augment_section(const AugmentPlan& p) {
  std::string techniques;
  for (auto t : p.techniques) techniques += (techniques.empty() ? "" : ",") + std::string(to_string(t));
  return {{"per_technique_count", p.per_technique_count}, {"drop_prob", format_number(p.drop_prob)},
          {"repeat_prob", format_number(p.repeat_prob)},  {"repeat_max", p.repeat_max},
          {"infill_span_max", p.infill_span_max},         {"infill_temperature", format_number(p.infill_temperature)},
          {"techniques", techniques}};
}

inline ordered_json run_section(const PipelineManifest& m) {
  return {{"seed", m.seed},         {"parallelism", m.parallelism}, {"teacher_domain", m.teacher_domain}, {"max_vocab", m.max_vocab},
          {"min_freq", m.min_freq}, {"max_context", m.max_context}, {"workdir", m.workdir}};
}

/// Every section with defaults filled in.
inline ordered_json manifest_sections(const PipelineManifest& m) {
  ordered_json j;
  j["run"] = run_section(m);
  ordered_json data = {{"base", m.base}};
  if (!m.synonyms.empty()) data["synonyms"] = m.synonyms;
  j["data"] = data;
  j["corpora"] = m.corpora;
  j["benchmarks"] = m.benchmarks;
  j["model"] = model_section(m.teacher);
  j["backbone"] = mlm_section(m.backbone);
  j["teacher"] = teacher_section(m.teacher);
  j["infiller"] = mlm_section(m.infiller);
  j["augment"] = augment_section(m.augment);
  j["student"] = student_section(m.student);
  if (!m.output_names.empty()) j["outputs"] = m.output_names;
  return j;
}

inline std::string manifest_ini(const PipelineManifest& m) {
  std::ostringstream os;
  bool first = true;
  const auto sections = manifest_sections(m);
  for (const auto& [section, body] : sections.items()) {
    os << (first ? "" : "\n") << '[' << section << "]\n";
    first = false;
    for (const auto& [k, v] : body.items()) os << k << " = " << (v.is_string() ? v.get<std::string>() : v.dump()) << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

inline void read_mlm(detail::SectionReader& r, MlmConfig& c) {
  r.read("epochs", c.epochs);
  r.read("batch_size", c.batch_size);
  r.read("lr", c.lr);
  r.read("momentum", c.momentum);
  r.read("clip_norm", c.clip_norm);
  r.read("mask_prob", c.mask_prob);
  if (c.epochs < 1 || c.batch_size < 1 || !(c.lr > 0.0)) throw validation_error("masked-LM epochs, batch_size and lr must be positive");
}

inline void read_optimizer(detail::SectionReader& r, TrainConfig& c) {
  r.read("epochs", c.epochs);
  r.read("batch_size", c.batch_size);
  std::string opt = c.optimizer == OptimizerKind::adam ? "adam" : "sgd";
  r.read("optimizer", opt);
  if (opt == "sgd") c.optimizer = OptimizerKind::sgd;
  else if (opt == "adam") c.optimizer = OptimizerKind::adam;
  else throw validation_error("optimizer must be sgd or adam");
  r.read("lr", c.lr);
  r.read("momentum", c.momentum);
  r.read("clip_norm", c.clip_norm);
  r.read("eval_every", c.eval_every);
  r.read("unk_prob", c.unk_prob);
}

inline PipelineManifest manifest_from_raw(RawManifest raw, const fs::path& root) {
  PipelineManifest m;
  m.root = root;
  auto section = [&](const std::string& name) {
    auto it = raw.find(name);
    return detail::SectionReader(name, it == raw.end() ? std::map<std::string, std::string>{} : it->second);
  };

  auto run = section("run");
  if (!raw["run"].count("seed")) throw validation_error("manifest [run] needs an explicit 'seed'");
  run.read("seed", m.seed);
  run.read("parallelism", m.parallelism);
  m.teacher_domain = run.required<std::string>("teacher_domain");
  run.read("max_vocab", m.max_vocab);
  run.read("min_freq", m.min_freq);
  run.read("max_context", m.max_context);
  run.read("workdir", m.workdir);
  run.finish();

  auto data = section("data");
  m.base = data.required<std::string>("base");
  data.read("synonyms", m.synonyms);
  data.finish();
  m.corpora = section("corpora").take_all();
  m.benchmarks = section("benchmarks").take_all();
  for (auto* table : {&m.corpora, &m.benchmarks})
    for (auto& [k, v] : *table) v = trim(v);

  auto model = section("model");
  TrainConfig arch;
  model.read("max_seq_len", arch.max_seq_len);
  model.read("dim", arch.dim);
  model.read("layers", arch.layers);
  model.read("heads", arch.heads);
  model.read("ffn_dim", arch.ffn_dim);
  model.read("init_std", arch.init_std);
  model.finish();
  arch.encoder(special::count + 1).validate();

  m.teacher = arch;
  m.student = arch;
  m.teacher.seed = m.student.seed = m.seed;
  auto teacher = section("teacher");
  read_optimizer(teacher, m.teacher);
  teacher.finish();

  auto student = section("student");
  read_optimizer(student, m.student);
  std::string loss = loss_flags_string(m.student.loss);
  student.read("loss", loss);
  m.student.loss = parse_loss_flags(loss);
  student.read("ce_weight", m.student.loss.ce_weight);
  student.read("mlm_weight", m.student.loss.mlm_weight);
  student.read("kl_weight", m.student.loss.kl_weight);
  std::string dir = "clean_to_noisy";
  student.read("kl_direction", dir);
  if (dir == "clean_to_noisy") m.student.loss.kl_direction = KlDirection::clean_to_noisy;
  else if (dir == "symmetric") m.student.loss.kl_direction = KlDirection::symmetric;
  else throw validation_error("kl_direction must be clean_to_noisy or symmetric");
  student.read("mask_prob", m.student.mask_prob);
  student.read("noise_drop_prob", m.student.noise.drop_prob);
  student.read("noise_replace_prob", m.student.noise.replace_prob);
  student.read("confidence_threshold", m.student.confidence_threshold);
  student.read("balance_target_size", m.student.balance_target_size);
  std::string init = "from_scratch";
  student.read("init", init);
  if (init == "from_scratch") m.student.init = StudentInit::from_scratch;
  else if (init == "from_teacher") m.student.init = StudentInit::from_teacher;
  else throw validation_error("student init must be from_scratch or from_teacher");
  student.finish();

  auto backbone = section("backbone");
  read_mlm(backbone, m.backbone);
  backbone.finish();
  auto infiller = section("infiller");
  read_mlm(infiller, m.infiller);
  infiller.finish();
  m.backbone.seed = m.infiller.seed = m.seed;

  auto aug = section("augment");
  aug.read("per_technique_count", m.augment.per_technique_count);
  aug.read("drop_prob", m.augment.drop_prob);
  aug.read("repeat_prob", m.augment.repeat_prob);
  aug.read("repeat_max", m.augment.repeat_max);
  aug.read("infill_span_max", m.augment.infill_span_max);
  aug.read("infill_temperature", m.augment.infill_temperature);
  std::string techniques;
  aug.read("techniques", techniques);
  if (!techniques.empty()) {
    m.augment.techniques.clear();
    for (const auto& t : detail::split_list(techniques)) m.augment.techniques.push_back(technique_from_string(t));
  }
  m.augment.rng_seed = m.seed;
  aug.finish();

  auto outputs = section("outputs");
  m.output_names = outputs.take_all();
  static const std::set<std::string> known = {"teacher_vocab", "backbone", "teacher", "student_vocab", "infiller", "pool",  "annotated",
                                              "filtered",      "student",  "scores_teacher", "scores_student", "report", "runlog"};
  for (const auto& [k, v] : m.output_names)
    if (!known.count(k)) throw validation_error("manifest [outputs] has unknown key '" + k + "'");
  return m;
}

/// Reads the manifest, then applies environment and command-line overrides.
inline PipelineManifest load_manifest(const fs::path& path, const std::vector<std::string>& overrides = {}, char** env = environ) {
  auto raw = read_raw_manifest(path);
  for (const auto& [s, k, v] : environment_overrides(env)) raw[s][k] = v;
  for (const auto& o : overrides) {
    auto [s, k, v] = parse_override(o);
    raw[s][k] = v;
  }
  auto root = fs::absolute(path).parent_path();
  return manifest_from_raw(std::move(raw), root);
}

}  // namespace mddeval
