// mddeval: pipeline driver. One subcommand per stage, all sharing one manifest.
//
//   mddeval generate-synthetic --out data/synthetic
//   mddeval train-teacher data/synthetic/manifest.ini
//   TEACHER__EPOCHS=3 mddeval train-teacher data/synthetic/manifest.ini
//   mddeval score data/synthetic/manifest.ini --model teacher --set run.parallelism=4

#include <CLI11.hpp>

#include "mddeval/pipeline.hpp"

using namespace mddeval;

namespace {

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::validation: return 2;
    case ErrorKind::missing_artifact: return 3;
    case ErrorKind::numerical: return 4;
  }
  return 2;
}

ScoreModel parse_model(const std::string& s) {
  if (s == "teacher") return ScoreModel::teacher;
  if (s == "student") return ScoreModel::student;
  throw validation_error("model must be teacher or student, got '" + s + "'");
}

struct Common {
  std::string manifest;
  std::vector<std::string> set;
  bool allow_mismatch = false;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("manifest", c.manifest, "pipeline manifest (INI)")->required();
  cmd->add_option("--set", c.set, "override section.key=value (repeatable)");
  cmd->add_flag("--allow-config-mismatch", c.allow_mismatch, "use checkpoints produced under a different configuration");
  cmd->add_flag("-q,--quiet", c.quiet, "suppress progress messages");
}

StageOptions stage_options(const Common& c) {
  StageOptions o;
  o.allow_config_mismatch = c.allow_mismatch;
  if (c.quiet) o.log = nullptr;
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-trained open-domain dialogue evaluation: pipeline driver"};
  app.require_subcommand(1);

  Common common;
  std::string score_model = "student";
  std::vector<std::string> eval_models{"teacher", "student"};
  std::vector<std::pair<CLI::App*, Stage>> stage_cmds;
  for (size_t i = 0; i < kStageNames.size(); ++i) {
    const auto stage = static_cast<Stage>(i);
    static const std::map<Stage, std::string> help = {
        {Stage::validate_data, "check every input file of the manifest"},
        {Stage::train_teacher, "train the backbone and the teacher on the labeled base set"},
        {Stage::augment, "train the infiller and build the augmented pool"},
        {Stage::pseudo_label, "annotate the pool with the teacher, then filter and balance"},
        {Stage::train_student, "train the student on the filtered pool"},
        {Stage::score, "score every benchmark pair"},
        {Stage::evaluate, "correlate scores with human judgements"}};
    auto* cmd = app.add_subcommand(std::string(kStageNames[i]), help.at(stage));
    add_common(cmd, common);
    if (stage == Stage::score) cmd->add_option("--model", score_model, "teacher or student")->capture_default_str();
    if (stage == Stage::evaluate) cmd->add_option("--models", eval_models, "score files to evaluate")->delimiter(',')->capture_default_str();
    stage_cmds.emplace_back(cmd, stage);
  }

  auto* all = app.add_subcommand("all", "run every stage in order and print the evaluation table");
  add_common(all, common);

  std::string out_dir = "data/synthetic";
  uint64_t fixture_seed = synthetic::FixtureSpec{}.seed;
  uint64_t run_seed = 1;
  std::string teacher_domain = synthetic::FixtureSpec{}.teacher_domain;
  auto* gen = app.add_subcommand("generate-synthetic", "write the planted-relevance multi-domain corpus and a manifest for it");
  gen->add_option("--out", out_dir, "output directory")->capture_default_str();
  gen->add_option("--fixture-seed", fixture_seed, "corpus generator seed")->capture_default_str();
  gen->add_option("--seed", run_seed, "pipeline seed written to the manifest")->capture_default_str();

  std::vector<uint64_t> exp_seeds{1, 2, 3, 4, 5};
  auto* exp = app.add_subcommand("experiment", "in-memory teacher and C/CM/S students over several seeds, held-out table");
  add_common(exp, common);
  exp->add_option("--seeds", exp_seeds, "seeds")->delimiter(',')->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      synthetic::FixtureSpec spec;
      spec.seed = fixture_seed;
      const auto fx = synthetic::generate_fixture(spec);
      write_synthetic(out_dir, fx, teacher_domain, run_seed);
      std::cout << "wrote " << (fs::path(out_dir) / "manifest.ini").string() << '\n';
      return 0;
    }

    auto manifest = load_manifest(common.manifest, common.set);
    auto opts = stage_options(common);
    opts.model = parse_model(score_model);
    opts.models.clear();
    for (const auto& m : eval_models) opts.models.push_back(parse_model(m));

    if (exp->parsed()) {
      manifest.validate();
      Pipeline p(manifest, opts);
      std::vector<fs::path> read;
      const auto in = p.load_inputs(true, true, read);
      std::map<std::string, std::vector<double>> sums;
      std::vector<std::string> order;
      for (auto seed : exp_seeds) {
        const auto run = run_experiment(in, manifest.settings(), seed);
        std::cout << "seed " << seed << " (" << format_number(std::round(run.seconds)) << " s)\n" << format_table(run.held_out) << '\n';
        for (const auto& [name, rep] : run.held_out) {
          if (!sums.count(name)) order.push_back(name);
          sums[name].push_back(rep.average_spearman);
        }
      }
      std::cout << "held-out average Spearman over " << exp_seeds.size() << " seeds\n";
      for (const auto& name : order) {
        const auto& v = sums[name];
        std::cout << "  " << name << "  " << format_number(std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size())) << '\n';
      }
      return 0;
    }

    if (all->parsed()) {
      Pipeline p(manifest, opts);
      for (auto s : {Stage::validate_data, Stage::train_teacher, Stage::augment, Stage::pseudo_label, Stage::train_student}) p.run(s);
      for (auto m : {ScoreModel::teacher, ScoreModel::student}) {
        auto o = opts;
        o.model = m;
        Pipeline(manifest, o).run(Stage::score);
      }
      p.run(Stage::evaluate);
      std::cout << p.table();
      return 0;
    }

    for (auto& [cmd, stage] : stage_cmds) {
      if (!cmd->parsed()) continue;
      Pipeline p(manifest, opts);
      const auto r = p.run(stage);
      if (stage == Stage::evaluate) std::cout << p.table();
      if (!common.quiet) std::cerr << "run log: " << r.runlog.string() << '\n';
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
