#include "czsl/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <future>
#include <iomanip>
#include <map>
#include <sstream>

#include "czsl/error.hpp"
#include "czsl/log.hpp"
#include "czsl/rng.hpp"

namespace fs = std::filesystem;

namespace czsl {
namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw IoError("short write to '" + path.string() + "'");
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read '" + path.string() + "'");
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

nlohmann::json read_json(const fs::path& path) {
  try {
    return nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

nlohmann::json eval_config_json(const EvalConfig& c) {
  return {{"nms_iou", c.nms_iou},
          {"score_threshold", c.score_threshold},
          {"confusion_iou", c.confusion_iou},
          {"iou_sweep", c.iou_sweep}};
}

EvalConfig eval_config_from(const nlohmann::json& doc) {
  EvalConfig c;
  c.nms_iou = doc.value("nms_iou", c.nms_iou);
  c.score_threshold = doc.value("score_threshold", c.score_threshold);
  c.confusion_iou = doc.value("confusion_iou", c.confusion_iou);
  if (doc.contains("iou_sweep")) c.iou_sweep = doc.at("iou_sweep").get<std::vector<double>>();
  if (!(c.nms_iou > 0.0 && c.nms_iou <= 1.0)) throw ValidationError("eval.nms_iou must be in (0, 1]");
  if (c.iou_sweep.empty()) throw ValidationError("eval.iou_sweep is empty");
  return c;
}

nlohmann::json toggles_json(const LossConfig& loss) {
  return {{"smoothing", loss.policy.mode != SmoothingMode::none},
          {"separation", loss.separation},
          {"decorrelation", loss.decorrelation}};
}

std::string provenance_line(const std::string& hash, std::uint64_t seed) {
  return "# config_hash=" + hash + " seed=" + std::to_string(seed) + "\n";
}

// Appends the config hash and seed to every log line.
std::string tagged_log(const TrainLog& log, const std::string& hash, std::uint64_t seed) {
  std::istringstream in(log.to_jsonl());
  std::ostringstream out;
  for (std::string line; std::getline(in, line);) {
    auto rec = nlohmann::json::parse(line);
    rec["config_hash"] = hash;
    rec["seed"] = seed;
    out << rec.dump() << '\n';
  }
  return out.str();
}

Dataset load_checked(const fs::path& dir, const CompositionSpace& space, const DatasetSpec& expected) {
  if (!fs::exists(dir / "annotations.json")) {
    throw ValidationError("no dataset at '" + dir.string() + "'; run 'czsl gen' first");
  }
  Dataset d = load_dataset(dir.string(), space);
  if (d.spec.seed != expected.seed || d.spec.shots != expected.shots ||
      d.spec.compositions != expected.compositions) {
    throw ValidationError("dataset at '" + dir.string() +
                          "' was generated from a different config; rerun 'czsl gen'");
  }
  return d;
}

}  // namespace

std::string hex_hash(std::uint64_t value) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << value;
  return s.str();
}

void ExperimentConfig::validate() const {
  if (!manifest_path.empty() && !fs::exists(manifest_path)) {
    throw ValidationError("manifest '" + manifest_path + "' does not exist");
  }
  if (model.dim < 8) throw ValidationError("model.dim must be at least 8");
  if (data.pretrain_shots < 1 || data.test_shots < 1 || data.increment_shots < 1) {
    throw ValidationError("shot counts must be positive");
  }
  if (data.max_objects < 1) throw ValidationError("data.max_objects must be positive");
  train.validate();
  if (!(plan.threshold > 0.0)) throw ValidationError("increment.threshold must be > 0");
  if (plan.max_pairs < 1) throw ValidationError("increment.max_pairs must be >= 1");
}

Manifest ExperimentConfig::manifest() const {
  if (manifest_path.empty()) return default_manifest();
  if (!fs::exists(manifest_path)) {
    throw ValidationError("manifest '" + manifest_path + "' does not exist");
  }
  return Manifest::load(manifest_path);
}

std::string ExperimentConfig::resolved_data_dir() const {
  return data_dir.empty() ? (fs::path(output_dir) / "data").string() : data_dir;
}

nlohmann::json ExperimentConfig::to_json() const {
  return {{"manifest", manifest_path},
          {"output_dir", output_dir},
          {"data_dir", data_dir},
          {"seed", seed},
          {"model", {{"dim", model.dim}, {"model_seed", model.model_seed}}},
          {"data",
           {{"pretrain_shots", data.pretrain_shots},
            {"test_shots", data.test_shots},
            {"increment_shots", data.increment_shots},
            {"max_objects", data.max_objects}}},
          {"train", train.to_json()},
          {"eval", eval_config_json(eval)},
          {"increment",
           {{"threshold", plan.threshold},
            {"max_pairs", plan.max_pairs},
            {"regime", to_string(plan.regime.kind)},
            {"components", to_string(plan.regime.components)}}}};
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& doc) {
  ExperimentConfig c;
  try {
    c.manifest_path = doc.value("manifest", c.manifest_path);
    c.output_dir = doc.value("output_dir", c.output_dir);
    c.data_dir = doc.value("data_dir", c.data_dir);
    c.seed = doc.value("seed", c.seed);
    if (doc.contains("model")) {
      const auto& m = doc.at("model");
      c.model.dim = m.value("dim", c.model.dim);
      c.model.model_seed = m.value("model_seed", c.model.model_seed);
    }
    if (doc.contains("data")) {
      const auto& d = doc.at("data");
      c.data.pretrain_shots = d.value("pretrain_shots", c.data.pretrain_shots);
      c.data.test_shots = d.value("test_shots", c.data.test_shots);
      c.data.increment_shots = d.value("increment_shots", c.data.increment_shots);
      c.data.max_objects = d.value("max_objects", c.data.max_objects);
    }
    if (doc.contains("train")) c.train = TrainConfig::from_json(doc.at("train"));
    // A top-level "loss" section wins over train.loss.
    if (doc.contains("loss")) c.train.loss = LossConfig::from_json(doc.at("loss"));
    if (doc.contains("eval")) c.eval = eval_config_from(doc.at("eval"));
    if (doc.contains("increment")) {
      const auto& i = doc.at("increment");
      c.plan.threshold = i.value("threshold", c.plan.threshold);
      c.plan.max_pairs = i.value("max_pairs", c.plan.max_pairs);
      if (i.contains("regime")) c.plan.regime.kind = parse_tuning_kind(i.at("regime"));
      if (i.contains("components")) {
        c.plan.regime.components = parse_prompt_components(i.at("components"));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed experiment config: ") + e.what());
  }
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  return from_json(read_json(path));
}

std::string ExperimentConfig::hash() const {
  nlohmann::json doc = to_json();
  doc.erase("manifest");
  doc.erase("output_dir");
  doc.erase("data_dir");
  doc["manifest_hash"] = hex_hash(manifest().hash());
  return hex_hash(fnv1a64(doc.dump()));
}

DatasetSpec pretrain_spec(const ExperimentConfig& config, const Manifest& manifest) {
  DatasetSpec s;
  s.role = DatasetRole::train;
  s.shots = config.data.pretrain_shots;
  s.compositions = manifest.pretrain;
  s.seed = Rng::splitmix64(config.seed ^ fnv1a64("pretrain"));
  s.max_objects = config.data.max_objects;
  return s;
}

DatasetSpec test_spec(const ExperimentConfig& config, const Manifest& manifest) {
  DatasetSpec s;
  s.role = DatasetRole::test;
  s.shots = config.data.test_shots;
  s.compositions = manifest.space.compositions();
  s.seed = Rng::splitmix64(config.seed ^ fnv1a64("test"));
  s.max_objects = config.data.max_objects;
  return s;
}

DatasetSpec increment_spec(const ExperimentConfig& config, const std::vector<Composition>& increment) {
  DatasetSpec s;
  s.role = DatasetRole::train;
  s.shots = config.data.increment_shots;
  s.compositions = increment;
  s.seed = Rng::splitmix64(config.seed ^ fnv1a64("increment") ^ Rng::splitmix64(config.train.seed));
  s.max_objects = config.data.max_objects;
  return s;
}

GenResult cmd_gen(const ExperimentConfig& config) {
  config.validate();
  const Manifest manifest = config.manifest();
  manifest.split();  // coverage and disjointness checks
  const fs::path root = config.resolved_data_dir();
  GenResult out;
  out.pretrain_dir = (root / "pretrain").string();
  out.test_dir = (root / "test").string();
  const Dataset pretrain = generate_dataset(manifest.space, pretrain_spec(config, manifest));
  write_dataset(pretrain, manifest, out.pretrain_dir);
  out.pretrain_instances = pretrain.num_instances();
  const Dataset test = generate_dataset(manifest.space, test_spec(config, manifest));
  write_dataset(test, manifest, out.test_dir);
  out.test_instances = test.num_instances();
  return out;
}

nlohmann::json RunRecord::to_json() const {
  return {{"kind", kind},
          {"config_hash", config_hash},
          {"manifest_hash", manifest_hash},
          {"seed", seed},
          {"checkpoint", checkpoint},
          {"report", report},
          {"confusion", confusion},
          {"log", log},
          {"started", started},
          {"finished", finished},
          {"wall_seconds", wall_seconds},
          {"extra", extra}};
}

RunRecord RunRecord::from_json(const nlohmann::json& doc) {
  RunRecord r;
  try {
    r.kind = doc.at("kind");
    r.config_hash = doc.at("config_hash");
    r.manifest_hash = doc.at("manifest_hash");
    r.seed = doc.at("seed");
    r.checkpoint = doc.at("checkpoint");
    r.report = doc.at("report");
    r.confusion = doc.at("confusion");
    r.log = doc.at("log");
    r.started = doc.value("started", "");
    r.finished = doc.value("finished", "");
    r.wall_seconds = doc.value("wall_seconds", 0.0);
    r.extra = doc.value("extra", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed run record: ") + e.what());
  }
  return r;
}

RunRecord RunRecord::load(const std::string& dir) {
  RunRecord r = from_json(read_json(fs::path(dir) / "run.json"));
  r.dir = dir;
  return r;
}

RunRecord cmd_train(const ExperimentConfig& config) {
  config.validate();
  const auto clock_start = std::chrono::steady_clock::now();
  RunRecord rec;
  rec.kind = "train";
  rec.started = utc_now();
  const Manifest manifest = config.manifest();
  const SplitSpec split = manifest.split();
  const CompositionSpace& space = manifest.space;
  const fs::path data = config.resolved_data_dir();
  const Dataset pretrain = load_checked(data / "pretrain", space, pretrain_spec(config, manifest));
  const Dataset test = load_checked(data / "test", space, test_spec(config, manifest));

  Detector detector = make_detector(space, config.model.dim, config.model.model_seed, config.train.seed);
  const Dataset* datasets[] = {&pretrain};
  const TrainLog log = train(detector, space, datasets, config.train);
  const EvalSet eval_set = prepare_eval_set(test, detector.frozen, space);
  const EvalOutcome outcome = evaluate(detector, space, eval_set, split, config.eval);

  rec.config_hash = config.hash();
  rec.manifest_hash = hex_hash(manifest.hash());
  rec.seed = config.train.seed;
  const fs::path dir = fs::path(config.output_dir) / rec.config_hash;
  fs::create_directories(dir);
  rec.dir = dir.string();
  rec.checkpoint = "checkpoint.czck";
  rec.report = "report.json";
  rec.confusion = "confusion.csv";
  rec.log = "log.jsonl";

  write_text(dir / "config.json",
             nlohmann::json{{"config_hash", rec.config_hash}, {"seed", rec.seed}, {"config", config.to_json()}}
                     .dump(2) +
                 "\n");
  save_checkpoint(detector, space, (dir / rec.checkpoint).string(), manifest.hash(),
                  {{"config_hash", rec.config_hash}, {"seed", std::to_string(rec.seed)}});
  const nlohmann::json report = {{"config_hash", rec.config_hash},
                                 {"seed", rec.seed},
                                 {"components", toggles_json(config.train.loss)},
                                 {"report", outcome.report.to_json(space)}};
  write_text(dir / rec.report, report.dump(2) + "\n");
  write_text(dir / rec.confusion,
             provenance_line(rec.config_hash, rec.seed) + outcome.confusion.to_csv(space));
  write_text(dir / rec.log, tagged_log(log, rec.config_hash, rec.seed));

  rec.finished = utc_now();
  rec.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - clock_start).count();
  rec.extra = {{"components", toggles_json(config.train.loss)},
               {"train_wall_seconds", log.wall_seconds}};
  write_text(dir / "run.json", rec.to_json().dump(2) + "\n");
  return rec;
}

std::vector<RunRecord> cmd_train_seeds(const ExperimentConfig& config,
                                       const std::vector<std::uint64_t>& seeds, int jobs) {
  if (jobs < 1) throw ValidationError("jobs must be at least 1");
  std::vector<RunRecord> out;
  for (std::size_t start = 0; start < seeds.size(); start += static_cast<std::size_t>(jobs)) {
    std::vector<std::future<RunRecord>> wave;
    for (std::size_t i = start; i < std::min(seeds.size(), start + static_cast<std::size_t>(jobs)); ++i) {
      ExperimentConfig c = config;
      c.train.seed = seeds[i];
      wave.push_back(std::async(std::launch::async, [c] { return cmd_train(c); }));
    }
    for (auto& f : wave) out.push_back(f.get());
  }
  return out;
}

EvalReport cmd_eval(const ExperimentConfig& config, const std::string& checkpoint,
                    const std::string& dataset_dir, const std::vector<Composition>& increment) {
  const Manifest manifest = config.manifest();
  const SplitSpec split = SplitSpec::make(manifest.space, manifest.pretrain,
                                          increment.empty() ? manifest.increment : increment);
  const Detector detector = load_checkpoint(checkpoint, manifest.space);
  const Dataset data = load_dataset(dataset_dir, manifest.space);
  const EvalSet eval_set = prepare_eval_set(data, detector.frozen, manifest.space);
  return evaluate(detector, manifest.space, eval_set, split, config.eval).report;
}

EvalReport cmd_eval_detections(const ExperimentConfig& config, const std::string& detections_path,
                               const std::string& dataset_dir,
                               const std::vector<Composition>& increment) {
  const Manifest manifest = config.manifest();
  const SplitSpec split = SplitSpec::make(manifest.space, manifest.pretrain,
                                          increment.empty() ? manifest.increment : increment);
  const auto detections = detections_from_json(read_json(detections_path));
  const auto ground_truth = ground_truth_from_coco(read_json(fs::path(dataset_dir) / "annotations.json"));
  for (const auto& d : detections) {
    if (d.composition < 0 || d.composition >= manifest.space.size()) {
      throw ValidationError("detection category " + std::to_string(d.composition) +
                            " is outside the composition space");
    }
  }
  return nms_map(detections, ground_truth, split, config.eval);
}

ExperimentConfig load_run_config(const std::string& run_dir) {
  const auto doc = read_json(fs::path(run_dir) / "config.json");
  if (!doc.contains("config")) throw ValidationError("'" + run_dir + "' has no config snapshot");
  return ExperimentConfig::from_json(doc.at("config"));
}

IncrementPlan load_plan(const std::string& path, const CompositionSpace& space) {
  if (!fs::exists(path)) throw IoError("no plan at '" + path + "'; run 'czsl confusions' first");
  return IncrementPlan::from_json(read_json(path), space);
}

IncrementPlan cmd_confusions(const ExperimentConfig& config, const std::string& run_dir,
                             const std::string& plan_path) {
  const RunRecord rec = RunRecord::load(run_dir);
  if (rec.kind != "train") throw ValidationError("confusions need a train run");
  const ExperimentConfig base = load_run_config(run_dir);
  const Manifest manifest = base.manifest();
  const SplitSpec split = manifest.split();
  const ConfusionMatrix matrix =
      ConfusionMatrix::from_csv(read_text(fs::path(run_dir) / rec.confusion), manifest.space);
  IncrementPlan plan;
  plan.threshold = config.plan.threshold;
  plan.regime = config.plan.regime;
  const bool reachable = config.plan.threshold <= 1.0;
  try {
    if (!reachable) throw ValidationError("threshold above 1");
    plan = plan_increment(matrix, split, config.plan);
  } catch (const ValidationError& e) {
    warn(std::string("empty increment plan: ") + e.what());
  }
  nlohmann::json doc = plan.to_json(manifest.space);
  doc["source_run"] = rec.config_hash;
  doc["seed"] = rec.seed;
  write_text(plan_path, doc.dump(2) + "\n");
  return plan;
}

RunRecord cmd_increment(const ExperimentConfig& config, const std::string& run_dir,
                        const IncrementPlan& plan) {
  const auto clock_start = std::chrono::steady_clock::now();
  const RunRecord base_rec = RunRecord::load(run_dir);
  if (base_rec.kind != "train") throw ValidationError("increments start from a train run");
  if (plan.pairs.empty() || plan.increment.empty()) {
    throw ValidationError("increment plan is empty; nothing to tune");
  }
  ExperimentConfig base = load_run_config(run_dir);
  // Data and model come from the base run; training settings from the caller.
  ExperimentConfig cfg = base;
  cfg.train = config.train;
  cfg.train.seed = base.train.seed;
  cfg.data.increment_shots = config.data.increment_shots;
  cfg.eval = config.eval;
  cfg.output_dir = config.output_dir;
  cfg.validate();

  RunRecord rec;
  rec.kind = "increment";
  rec.started = utc_now();
  const Manifest manifest = cfg.manifest();
  const CompositionSpace& space = manifest.space;
  const fs::path data = cfg.resolved_data_dir();
  const Dataset pretrain = load_checked(data / "pretrain", space, pretrain_spec(cfg, manifest));
  const Dataset test = load_checked(data / "test", space, test_spec(cfg, manifest));
  const Dataset increment = generate_dataset(space, increment_spec(cfg, plan.increment));
  const Detector detector = load_checkpoint((fs::path(run_dir) / base_rec.checkpoint).string(), space);

  const IncrementResult result =
      run_increment(detector, manifest, plan, pretrain, increment, test, cfg.train, cfg.eval);

  const nlohmann::json plan_json = plan.to_json(space);
  nlohmann::json identity = {{"base_run", base_rec.config_hash},
                             {"plan", plan_json},
                             {"train", cfg.train.to_json()},
                             {"eval", eval_config_json(cfg.eval)},
                             {"increment_shots", cfg.data.increment_shots}};
  rec.config_hash = hex_hash(fnv1a64(identity.dump()));
  rec.manifest_hash = hex_hash(manifest.hash());
  rec.seed = cfg.train.seed;
  const fs::path dir = fs::path(cfg.output_dir) / rec.config_hash;
  fs::create_directories(dir);
  rec.dir = dir.string();
  rec.checkpoint = "checkpoint.czck";
  rec.report = "report.json";
  rec.confusion = "confusion.csv";
  rec.log = "log.jsonl";

  write_text(dir / "config.json", nlohmann::json{{"config_hash", rec.config_hash},
                                                 {"seed", rec.seed},
                                                 {"config", cfg.to_json()},
                                                 {"base_run", base_rec.config_hash},
                                                 {"plan", plan_json}}
                                          .dump(2) +
                                      "\n");
  nlohmann::json tagged_plan = plan_json;
  tagged_plan["config_hash"] = rec.config_hash;
  tagged_plan["seed"] = rec.seed;
  write_text(dir / "plan.json", tagged_plan.dump(2) + "\n");
  save_checkpoint(result.detector, space, (dir / rec.checkpoint).string(), manifest.hash(),
                  {{"config_hash", rec.config_hash}, {"seed", std::to_string(rec.seed)}});
  const nlohmann::json report = {{"config_hash", rec.config_hash},
                                 {"seed", rec.seed},
                                 {"regime", to_string(plan.regime.kind)},
                                 {"components", to_string(plan.regime.components)},
                                 {"increment", plan_json.at("increment")},
                                 {"before", result.before.to_json(space)},
                                 {"after", result.after.to_json(space)},
                                 {"delta", result.delta.to_json()}};
  write_text(dir / rec.report, report.dump(2) + "\n");
  write_text(dir / rec.confusion,
             provenance_line(rec.config_hash, rec.seed) + result.confusion.to_csv(space));
  write_text(dir / rec.log, tagged_log(result.log, rec.config_hash, rec.seed));

  rec.finished = utc_now();
  rec.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - clock_start).count();
  rec.extra = {{"base_run", base_rec.config_hash},
               {"regime", to_string(plan.regime.kind)},
               {"components", to_string(plan.regime.components)}};
  write_text(dir / "run.json", rec.to_json().dump(2) + "\n");
  return rec;
}

namespace {

struct Stat {
  std::vector<double> values;

  void add(double v) { values.push_back(v); }
  double mean() const {
    double s = 0.0;
    for (double v : values) s += v;
    return values.empty() ? 0.0 : s / static_cast<double>(values.size());
  }
  // Sample standard deviation; 0 for a single run.
  double std() const {
    if (values.size() < 2) return 0.0;
    const double m = mean();
    double s = 0.0;
    for (double v : values) s += (v - m) * (v - m);
    return std::sqrt(s / static_cast<double>(values.size() - 1));
  }
};

std::string fixed1(double v) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(1) << round1(v);
  std::string out = s.str();
  return out == "-0.0" ? "0.0" : out;
}

std::string pm(const Stat& s) { return fixed1(s.mean()) + " ± " + fixed1(s.std()); }

std::string signed_pm(const Stat& s) {
  const std::string m = fixed1(s.mean());
  return (m[0] == '-' ? m : "+" + m) + " ± " + fixed1(s.std());
}

std::string pad(const std::string& text, std::size_t width) {
  // "±" is two bytes but one column.
  std::size_t columns = 0;
  for (unsigned char ch : text) columns += (ch & 0xC0) != 0x80;
  return text + std::string(width > columns ? width - columns : 0, ' ');
}

std::string mark(bool on) { return on ? "x" : "-"; }

double value_or_zero(const nlohmann::json& v) { return v.is_null() ? 0.0 : v.get<double>(); }

}  // namespace

ReportTables cmd_report(const std::vector<std::string>& run_dirs) {
  if (run_dirs.empty()) throw ValidationError("report needs at least one run");
  std::string manifest_hash;
  struct TrainRow {
    Stat seen, unseen, hm;
  };
  struct IncrementRow {
    Stat pretrain, increment, unseen, hm, d_pretrain, d_increment, d_unseen, d_hm;
  };
  std::map<std::tuple<bool, bool, bool>, TrainRow> train_rows;
  std::map<std::pair<std::string, std::string>, IncrementRow> increment_rows;

  std::size_t used = 0;
  for (const auto& dir : run_dirs) {
    // Globs over the output root also catch the dataset directory.
    if (!fs::exists(fs::path(dir) / "run.json")) {
      warn("'" + dir + "' is not a run directory; skipped");
      continue;
    }
    ++used;
    const RunRecord rec = RunRecord::load(dir);
    if (manifest_hash.empty()) manifest_hash = rec.manifest_hash;
    if (rec.manifest_hash != manifest_hash) {
      throw ValidationError("runs use different manifests ('" + dir + "')");
    }
    const auto doc = read_json(fs::path(dir) / rec.report);
    if (rec.kind == "train") {
      const auto& c = doc.at("components");
      auto& row = train_rows[{c.at("smoothing"), c.at("separation"), c.at("decorrelation")}];
      const auto& r = doc.at("report");
      row.seen.add(value_or_zero(r.at("seen")));
      row.unseen.add(value_or_zero(r.at("unseen")));
      row.hm.add(r.at("hm").get<double>());
    } else if (rec.kind == "increment") {
      auto& row = increment_rows[{doc.at("components"), doc.at("regime")}];
      const auto& a = doc.at("after");
      const auto& d = doc.at("delta");
      row.pretrain.add(value_or_zero(a.at("pretrain")));
      row.increment.add(value_or_zero(a.at("increment")));
      row.unseen.add(value_or_zero(a.at("unseen")));
      row.hm.add(value_or_zero(a.at("hm_three")));
      row.d_pretrain.add(value_or_zero(d.at("pretrain")));
      row.d_increment.add(value_or_zero(d.at("increment")));
      row.d_unseen.add(value_or_zero(d.at("unseen")));
      row.d_hm.add(value_or_zero(d.at("hm_three")));
    } else {
      throw ValidationError("unknown run kind '" + rec.kind + "' in '" + dir + "'");
    }
  }

  if (used == 0) throw ValidationError("none of the given directories is a run");

  std::ostringstream text;
  std::ostringstream csv;
  if (!train_rows.empty()) {
    text << "Ablation (NMS mAP, mean ± std over runs)\n";
    text << pad("Smoothing", 11) << pad("Separation", 12) << pad("Decorrelation", 15)
         << pad("Runs", 6) << pad("Seen", 14) << pad("Unseen", 14) << "HM\n";
    csv << "table,smoothing,separation,decorrelation,runs,seen_mean,seen_std,unseen_mean,"
           "unseen_std,hm_mean,hm_std\n";
    for (const auto& [key, row] : train_rows) {
      const auto [s, p, d] = key;
      text << pad(mark(s), 11) << pad(mark(p), 12) << pad(mark(d), 15)
           << pad(std::to_string(row.hm.values.size()), 6) << pad(pm(row.seen), 14)
           << pad(pm(row.unseen), 14) << pm(row.hm) << "\n";
      csv << "ablation," << s << "," << p << "," << d << "," << row.hm.values.size() << ","
          << fixed1(row.seen.mean()) << "," << fixed1(row.seen.std()) << ","
          << fixed1(row.unseen.mean()) << "," << fixed1(row.unseen.std()) << ","
          << fixed1(row.hm.mean()) << "," << fixed1(row.hm.std()) << "\n";
    }
  }
  if (!increment_rows.empty()) {
    if (!train_rows.empty()) text << "\n";
    text << "Increment (NMS mAP after tuning, change in parentheses)\n";
    text << pad("Components", 13) << pad("Tunable", 15) << pad("Runs", 6)
         << pad("Pretrain", 28) << pad("Increment", 28) << pad("Unseen", 28) << "HM\n";
    csv << "table,components,tunable,runs,pretrain_mean,pretrain_std,pretrain_delta_mean,"
           "pretrain_delta_std,increment_mean,increment_std,increment_delta_mean,"
           "increment_delta_std,unseen_mean,unseen_std,unseen_delta_mean,unseen_delta_std,"
           "hm_mean,hm_std,hm_delta_mean,hm_delta_std\n";
    for (const auto& [key, row] : increment_rows) {
      const auto cell = [](const Stat& v, const Stat& d) { return pm(v) + " (" + signed_pm(d) + ")"; };
      text << pad(key.first, 13) << pad(key.second, 15)
           << pad(std::to_string(row.hm.values.size()), 6)
           << pad(cell(row.pretrain, row.d_pretrain), 28)
           << pad(cell(row.increment, row.d_increment), 28)
           << pad(cell(row.unseen, row.d_unseen), 28) << cell(row.hm, row.d_hm) << "\n";
      csv << "increment," << key.first << "," << key.second << "," << row.hm.values.size();
      for (const Stat* s : {&row.pretrain, &row.d_pretrain, &row.increment, &row.d_increment,
                            &row.unseen, &row.d_unseen, &row.hm, &row.d_hm}) {
        csv << "," << fixed1(s->mean()) << "," << fixed1(s->std());
      }
      csv << "\n";
    }
  }
  return {text.str(), csv.str()};
}

}  // namespace czsl
