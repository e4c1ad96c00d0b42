// czsl: dataset generation, training, evaluation, confusion mining,
// incremental tuning and report rendering.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "czsl/error.hpp"
#include "czsl/experiment.hpp"
#include "czsl/log.hpp"

namespace fs = std::filesystem;
using namespace czsl;

namespace {

// Flags shared by every verb. Each one overrides the matching config key only
// when given.
struct Common {
  std::string config_path;
  std::optional<std::string> manifest;
  std::optional<std::string> output_dir;
  std::optional<std::string> data_dir;
  std::optional<std::uint64_t> data_seed;
  std::optional<int> dim;

  void attach(CLI::App& app) {
    app.add_option("--config", config_path, "JSON experiment config")->check(CLI::ExistingFile);
    app.add_option("--manifest", manifest, "composition manifest (JSON)");
    app.add_option("--out", output_dir, "run directory root (default: runs)");
    app.add_option("--data-dir", data_dir, "dataset root (default: <out>/data)");
    app.add_option("--data-seed", data_seed, "seed of the generated datasets");
    app.add_option("--dim", dim, "embedding dimension");
  }

  ExperimentConfig resolve() const {
    ExperimentConfig c = config_path.empty() ? ExperimentConfig{} : ExperimentConfig::load(config_path);
    if (manifest) c.manifest_path = *manifest;
    if (output_dir) c.output_dir = *output_dir;
    if (data_dir) c.data_dir = *data_dir;
    if (data_seed) c.seed = *data_seed;
    if (dim) c.model.dim = *dim;
    return c;
  }
};

struct TrainFlags {
  std::optional<int> epochs;
  std::optional<double> lr;
  std::optional<double> prompt_lr;
  std::optional<int> batch;

  void attach(CLI::App& app) {
    app.add_option("--epochs", epochs, "training epochs")->check(CLI::NonNegativeNumber);
    app.add_option("--lr", lr, "token learning rate");
    app.add_option("--prompt-lr", prompt_lr, "prompt learning rate");
    app.add_option("--batch", batch, "images per step");
  }

  void apply(TrainConfig& t) const {
    if (epochs) t.epochs = *epochs;
    if (lr) t.learning_rate = *lr;
    if (prompt_lr) t.prompt_learning_rate = *prompt_lr;
    if (batch) t.batch_size = *batch;
  }
};

std::vector<Composition> parse_compositions(const std::vector<std::string>& names,
                                            const CompositionSpace& space) {
  std::vector<Composition> out;
  for (const auto& n : names) out.push_back(space.parse(n));
  return out;
}

void write_or_print(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << text;
}

nlohmann::json record_summary(const RunRecord& r) {
  nlohmann::json j = r.to_json();
  j["dir"] = r.dir;
  return j;
}

const char* error_kind(const std::exception& e) {
  if (dynamic_cast<const CoverageError*>(&e)) return "coverage";
  if (dynamic_cast<const ValidationError*>(&e)) return "validation";
  if (dynamic_cast<const ShapeError*>(&e)) return "shape";
  if (dynamic_cast<const IoError*>(&e)) return "io";
  if (dynamic_cast<const LoadError*>(&e)) return "load";
  if (dynamic_cast<const PlacementError*>(&e)) return "placement";
  if (dynamic_cast<const TrainingError*>(&e)) return "training";
  return "internal";
}

int exit_code(const std::exception& e) {
  if (dynamic_cast<const ValidationError*>(&e)) return 2;
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const LoadError*>(&e)) return 3;
  if (dynamic_cast<const TrainingError*>(&e)) return 4;
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Compositional detection experiments on synthetic scenes"};
  app.require_subcommand(1);

  // gen
  Common gen_common;
  std::optional<int> gen_pretrain_shots, gen_test_shots, gen_max_objects;
  auto* gen = app.add_subcommand("gen", "generate the pretrain and test datasets");
  gen_common.attach(*gen);
  gen->add_option("--pretrain-shots", gen_pretrain_shots, "instances per pretrain composition");
  gen->add_option("--test-shots", gen_test_shots, "instances per test composition");
  gen->add_option("--max-objects", gen_max_objects, "objects per image at most");

  // train
  Common train_common;
  TrainFlags train_flags;
  bool csp = false, ca = false, smoothing = false, separation = false, decorrelation = false;
  std::optional<std::uint64_t> train_seed;
  std::optional<int> n_seeds;
  int jobs = 1;
  auto* tr = app.add_subcommand("train", "train, evaluate and write a run directory per seed");
  train_common.attach(*tr);
  train_flags.attach(*tr);
  auto* csp_flag = tr->add_flag("--baseline-csp", csp, "plain BCE, no auxiliary terms");
  auto* ca_flag = tr->add_flag("--ca", ca, "smoothing, separation and decorrelation");
  auto* s_flag = tr->add_flag("--smoothing", smoothing, "compositional smoothing on");
  auto* p_flag = tr->add_flag("--separation", separation, "separation losses on");
  auto* d_flag = tr->add_flag("--decorrelation", decorrelation, "HSIC decorrelation on");
  csp_flag->excludes(ca_flag)->excludes(s_flag)->excludes(p_flag)->excludes(d_flag);
  ca_flag->excludes(s_flag)->excludes(p_flag)->excludes(d_flag);
  auto* seed_opt = tr->add_option("--seed", train_seed, "run seed (token init, batch order)");
  tr->add_option("--seeds", n_seeds, "run seeds 0..N-1 (13 when given without a value)")
      ->expected(0, 1)
      ->default_str("13")
      ->excludes(seed_opt);
  tr->add_option("--jobs", jobs, "seeds trained concurrently")->check(CLI::PositiveNumber);

  // eval
  Common eval_common;
  std::string eval_checkpoint, eval_detections, eval_data, eval_out;
  std::vector<std::string> eval_increment;
  auto* ev = app.add_subcommand("eval", "NMS mAP of a checkpoint or of precomputed detections");
  eval_common.attach(*ev);
  auto* ck = ev->add_option("--checkpoint", eval_checkpoint, "checkpoint file")->check(CLI::ExistingFile);
  auto* det = ev->add_option("--detections", eval_detections, "detections JSON")->check(CLI::ExistingFile);
  ck->excludes(det);
  ev->add_option("--data", eval_data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--increment", eval_increment, "increment composition, e.g. \"green cube\"");
  ev->add_option("--report", eval_out, "write the report here instead of stdout");

  // confusions
  Common conf_common;
  std::string conf_run, conf_plan;
  std::optional<double> conf_threshold;
  std::optional<int> conf_max_pairs;
  std::optional<std::string> conf_regime, conf_components;
  auto* cf = app.add_subcommand("confusions", "mine confused pairs and write an increment plan");
  conf_common.attach(*cf);
  cf->add_option("--run", conf_run, "train run directory")->required()->check(CLI::ExistingDirectory);
  cf->add_option("--threshold", conf_threshold, "minimum confusion rate");
  cf->add_option("--max-pairs", conf_max_pairs, "underperformers that get a prompt");
  cf->add_option("--regime", conf_regime, "all-tokens | subset-tokens | prompt");
  cf->add_option("--components", conf_components, "none | affirmation | negation | both");
  cf->add_option("--plan", conf_plan, "output plan (default: <run>/plan.json)");

  // increment
  Common inc_common;
  TrainFlags inc_flags;
  std::string inc_run, inc_plan;
  std::optional<std::string> inc_regime, inc_components;
  std::optional<int> inc_shots;
  auto* inc = app.add_subcommand("increment", "tune a train run on a plan's increment set");
  inc_common.attach(*inc);
  inc_flags.attach(*inc);
  inc->add_option("--run", inc_run, "train run directory")->required()->check(CLI::ExistingDirectory);
  inc->add_option("--plan", inc_plan, "plan from 'confusions' (default: <run>/plan.json)");
  inc->add_option("--regime", inc_regime, "all-tokens | subset-tokens | prompt");
  inc->add_option("--components", inc_components, "none | affirmation | negation | both");
  inc->add_option("--increment-shots", inc_shots, "instances per increment composition");

  // report
  std::vector<std::string> report_runs;
  std::string report_csv, report_text;
  auto* rp = app.add_subcommand("report", "ablation and increment tables over run directories");
  rp->add_option("runs", report_runs, "run directories")->required()->check(CLI::ExistingDirectory);
  rp->add_option("--csv", report_csv, "write the CSV view here");
  rp->add_option("--text", report_text, "write the text view here instead of stdout");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      ExperimentConfig c = gen_common.resolve();
      if (gen_pretrain_shots) c.data.pretrain_shots = *gen_pretrain_shots;
      if (gen_test_shots) c.data.test_shots = *gen_test_shots;
      if (gen_max_objects) c.data.max_objects = *gen_max_objects;
      const GenResult r = cmd_gen(c);
      std::cout << nlohmann::json{{"pretrain", r.pretrain_dir},
                                  {"pretrain_instances", r.pretrain_instances},
                                  {"test", r.test_dir},
                                  {"test_instances", r.test_instances},
                                  {"seed", c.seed}}
                       .dump(2)
                << "\n";
    } else if (*tr) {
      ExperimentConfig c = train_common.resolve();
      train_flags.apply(c.train);
      if (csp) {
        c.train.loss = LossConfig::csp_baseline();
      } else if (ca) {
        c.train.loss = LossConfig::full_ca();
      } else if (smoothing || separation || decorrelation) {
        c.train.loss = LossConfig::from_toggles(smoothing, separation, decorrelation);
      }
      if (train_seed) c.train.seed = *train_seed;
      nlohmann::json out = nlohmann::json::array();
      if (tr->count("--seeds") > 0) {
        const int n = n_seeds.value_or(13);
        if (n < 1) throw ValidationError("--seeds needs a positive count");
        std::vector<std::uint64_t> seeds;
        for (int s = 0; s < n; ++s) seeds.push_back(static_cast<std::uint64_t>(s));
        for (const auto& r : cmd_train_seeds(c, seeds, jobs)) out.push_back(record_summary(r));
      } else {
        out.push_back(record_summary(cmd_train(c)));
      }
      std::cout << out.dump(2) << "\n";
    } else if (*ev) {
      const ExperimentConfig c = eval_common.resolve();
      if (eval_checkpoint.empty() == eval_detections.empty()) {
        throw ValidationError("eval needs exactly one of --checkpoint and --detections");
      }
      const Manifest manifest = c.manifest();
      const auto increment = parse_compositions(eval_increment, manifest.space);
      const EvalReport report = eval_checkpoint.empty()
                                    ? cmd_eval_detections(c, eval_detections, eval_data, increment)
                                    : cmd_eval(c, eval_checkpoint, eval_data, increment);
      nlohmann::json doc = report.to_json(manifest.space);
      doc["seed"] = c.seed;
      write_or_print(eval_out, doc.dump(2) + "\n");
    } else if (*cf) {
      ExperimentConfig c = conf_common.resolve();
      if (conf_threshold) c.plan.threshold = *conf_threshold;
      if (conf_max_pairs) c.plan.max_pairs = *conf_max_pairs;
      if (conf_regime) c.plan.regime.kind = parse_tuning_kind(*conf_regime);
      if (conf_components) c.plan.regime.components = parse_prompt_components(*conf_components);
      const std::string path = conf_plan.empty() ? (fs::path(conf_run) / "plan.json").string() : conf_plan;
      const IncrementPlan plan = cmd_confusions(c, conf_run, path);
      std::cout << nlohmann::json{{"plan", path},
                                  {"pairs", plan.pairs.size()},
                                  {"increment", plan.increment.size()}}
                       .dump(2)
                << "\n";
    } else if (*inc) {
      ExperimentConfig c = inc_common.resolve();
      inc_flags.apply(c.train);
      if (inc_shots) c.data.increment_shots = *inc_shots;
      const std::string path = inc_plan.empty() ? (fs::path(inc_run) / "plan.json").string() : inc_plan;
      const Manifest manifest = load_run_config(inc_run).manifest();
      IncrementPlan plan = load_plan(path, manifest.space);
      if (inc_regime || inc_components) {
        TuningRegime regime = plan.regime;
        if (inc_regime) regime.kind = parse_tuning_kind(*inc_regime);
        if (inc_components) regime.components = parse_prompt_components(*inc_components);
        apply_regime(plan, regime, manifest.space);
      }
      std::cout << record_summary(cmd_increment(c, inc_run, plan)).dump(2) << "\n";
    } else if (*rp) {
      const ReportTables t = cmd_report(report_runs);
      write_or_print(report_text, t.text);
      if (!report_csv.empty()) write_or_print(report_csv, t.csv);
    }
  } catch (const std::exception& e) {
    std::cerr << nlohmann::json{{"error", {{"kind", error_kind(e)}, {"message", e.what()}}}}.dump()
              << "\n";
    return exit_code(e);
  }
  return 0;
}
