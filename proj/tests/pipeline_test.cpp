#include "mddeval/pipeline.hpp"

#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace mddeval;
using namespace mddeval::testing;

namespace {

// Small enough to run every stage in seconds.
const std::vector<std::string> kTiny = {
    "model.dim=16",         "model.heads=2",        "model.layers=1",         "model.ffn_dim=32",
    "model.max_seq_len=32", "teacher.optimizer=adam", "teacher.lr=0.003",     "teacher.epochs=10",
    "infiller.epochs=1",    "augment.per_technique_count=1", "student.epochs=1", "student.balance_target_size=300",
};

char* kNoEnv[] = {nullptr};

std::filesystem::path write_corpus(const TempDir& dir) {
  static const auto fx = synthetic::generate_fixture({});
  write_synthetic(dir.path(), fx, "chat", 1);
  return dir / "manifest.ini";
}

PipelineManifest tiny_manifest(const std::filesystem::path& ini, std::vector<std::string> extra = {}) {
  auto o = kTiny;
  o.insert(o.end(), extra.begin(), extra.end());
  return load_manifest(ini, o, kNoEnv);
}

StageOptions quiet(ScoreModel m = ScoreModel::student) {
  StageOptions o;
  o.log = nullptr;
  o.model = m;
  return o;
}

void run_all(const PipelineManifest& m) {
  Pipeline p(m, quiet());
  for (auto s : {Stage::validate_data, Stage::train_teacher, Stage::augment, Stage::pseudo_label, Stage::train_student}) p.run(s);
  Pipeline(m, quiet(ScoreModel::teacher)).run(Stage::score);
  p.run(Stage::score);
  p.run(Stage::evaluate);
}

}  // namespace

TEST(Manifest, BundledManifestParses) {
  const auto m = load_manifest(std::filesystem::path(MDDEVAL_SOURCE_DIR) / "data/synthetic/manifest.ini", {}, kNoEnv);
  EXPECT_EQ(m.seed, 1u);
  EXPECT_EQ(m.teacher_domain, "chat");
  EXPECT_EQ(m.corpora.size(), 4u);
  EXPECT_EQ(m.benchmarks.size(), 4u);
  EXPECT_EQ(loss_flags_string(m.student.loss), "CE,MLM,KL");
  EXPECT_EQ(m.teacher.unk_prob, 0.1);
  EXPECT_EQ(m.teacher.dim, m.student.dim);
  EXPECT_NO_THROW(m.validate());
}

TEST(Manifest, WriteThenReadIsStable) {
  TempDir dir("manifest1");
  const auto ini = write_corpus(dir);
  const auto m = load_manifest(ini, {}, kNoEnv);
  write_text(dir / "again.ini", manifest_ini(m));
  const auto again = load_manifest(dir / "again.ini", {}, kNoEnv);
  EXPECT_EQ(manifest_sections(m).dump(), manifest_sections(again).dump());
  for (auto s : kStageNames) EXPECT_EQ(config_hash(stage_from_string(s), m), config_hash(stage_from_string(s), again));
}

TEST(Manifest, EnvironmentAndCommandLineOverrides) {
  TempDir dir("manifest2");
  const auto ini = write_corpus(dir);
  std::string a = "TEACHER__EPOCHS=3", b = "STUDENT__LOSS=CE,MLM", c = "UNRELATED__THING=1", d = "PATH=/bin";
  char* env[] = {a.data(), b.data(), c.data(), d.data(), nullptr};
  auto m = load_manifest(ini, {}, env);
  EXPECT_EQ(m.teacher.epochs, 3u);
  EXPECT_EQ(loss_flags_string(m.student.loss), "CE,MLM");
  m = load_manifest(ini, {"teacher.epochs=4"}, env);
  EXPECT_EQ(m.teacher.epochs, 4u);
}

TEST(Manifest, Rejections) {
  TempDir dir("manifest3");
  const auto ini = write_corpus(dir);
  EXPECT_THROW(load_manifest(ini, {"teacher.epoch=3"}, kNoEnv), Error);        // unknown key
  EXPECT_THROW(load_manifest(ini, {"teacher.epochs=three"}, kNoEnv), Error);    // not a number
  EXPECT_THROW(load_manifest(ini, {"nosuch.key=1"}, kNoEnv), Error);            // unknown section
  EXPECT_THROW(load_manifest(ini, {"student.loss=MLM"}, kNoEnv).validate(), Error);
  EXPECT_THROW(load_manifest(ini, {"model.heads=3"}, kNoEnv), Error);
  EXPECT_THROW(load_manifest(ini, {"run.seed"}, kNoEnv), Error);

  auto text = read_text(ini);
  write_text(dir / "noseed.ini", text.replace(text.find("seed = 1"), 8, ""));
  EXPECT_THROW(load_manifest(dir / "noseed.ini", {}, kNoEnv), Error);

  try {
    load_manifest(dir / "absent.ini", {}, kNoEnv);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::missing_artifact);
  }
  std::filesystem::remove(dir / "benchmarks/empathy.jsonl");
  try {
    load_manifest(ini, {}, kNoEnv).validate();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::missing_artifact);
    EXPECT_NE(std::string(e.what()).find("empathy.jsonl"), std::string::npos);
  }
}

TEST(Manifest, ConfigHashTracksWhatAStageReads) {
  TempDir dir("manifest4");
  const auto ini = write_corpus(dir);
  const auto m = load_manifest(ini, {}, kNoEnv);
  const auto student_change = load_manifest(ini, {"student.epochs=9"}, kNoEnv);
  const auto par_change = load_manifest(ini, {"run.parallelism=4", "run.workdir=elsewhere"}, kNoEnv);
  EXPECT_EQ(config_hash(Stage::train_teacher, m), config_hash(Stage::train_teacher, student_change));
  EXPECT_NE(config_hash(Stage::train_student, m), config_hash(Stage::train_student, student_change));
  for (auto s : kStageNames) EXPECT_EQ(config_hash(stage_from_string(s), m), config_hash(stage_from_string(s), par_change));
  EXPECT_NE(config_hash(Stage::train_teacher, m), config_hash(Stage::train_teacher, load_manifest(ini, {"run.seed=2"}, kNoEnv)));
}

TEST(Pipeline, PseudoLabelBeforeTeacherNamesTheCheckpoint) {
  TempDir dir("order");
  const auto m = tiny_manifest(write_corpus(dir));
  Pipeline p(m, quiet());
  try {
    p.run(Stage::pseudo_label);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::missing_artifact);
    EXPECT_NE(std::string(e.what()).find(p.outputs().teacher.string()), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("train-teacher"), std::string::npos) << e.what();
  }
}

TEST(Pipeline, FullRunIsByteIdenticalAndEmitsReport) {
  TempDir dir("full");
  const auto ini = write_corpus(dir);
  const auto a = tiny_manifest(ini, {"run.workdir=a"});
  const auto b = tiny_manifest(ini, {"run.workdir=b", "run.parallelism=3"});
  run_all(a);
  run_all(b);

  size_t compared = 0;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir / "a")) {
    if (!e.is_regular_file()) continue;
    const auto rel = e.path().lexically_relative(dir / "a");
    if (*rel.begin() == "runlog") continue;  // wall time differs
    EXPECT_EQ(read_text(e.path()), read_text(dir / "b" / rel)) << rel;
    ++compared;
  }
  EXPECT_GE(compared, 12u);

  const auto report = json::parse(read_text(dir / "a/report.json"));
  EXPECT_TRUE(report["models"].contains("MDD-T"));
  EXPECT_TRUE(report["models"].contains("MDD-S"));
  EXPECT_EQ(report["models"]["MDD-S"]["per_domain"].size(), 4u);

  // run logs hash what is on disk
  const auto log = json::parse(read_text(dir / "a/runlog/train-teacher.json"));
  EXPECT_EQ(log["config_hash"], config_hash(Stage::train_teacher, a));
  EXPECT_EQ(log["seed"], 1);
  ASSERT_EQ(log["outputs"].size(), 3u);
  for (const auto& o : log["outputs"]) EXPECT_EQ(o["sha256"], sha256_file(dir.path() / o["path"].get<std::string>()));
  EXPECT_GE(log["inputs"].size(), 2u);
  EXPECT_TRUE(log.contains("wall_time_seconds"));

  // a changed teacher configuration makes its checkpoint stale
  const auto changed = tiny_manifest(ini, {"run.workdir=a", "teacher.epochs=11"});
  try {
    Pipeline(changed, quiet()).run(Stage::pseudo_label);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::validation);
    EXPECT_NE(std::string(e.what()).find("config hash"), std::string::npos);
  }
  auto allow = quiet();
  allow.allow_config_mismatch = true;
  EXPECT_NO_THROW(Pipeline(changed, allow).run(Stage::pseudo_label));
}

TEST(Sha256, KnownVector) {
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}
