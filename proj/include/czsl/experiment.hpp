#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "czsl/compspace.hpp"
#include "czsl/evalkit.hpp"
#include "czsl/incrementer.hpp"
#include "czsl/scenegen.hpp"
#include "czsl/trainer.hpp"

namespace czsl {

struct ModelConfig {
  int dim = 64;
  std::uint64_t model_seed = 7;  // frozen featurizer, map and word table
};

struct DataConfig {
  int pretrain_shots = 10;
  int test_shots = 60;
  int increment_shots = 10;
  int max_objects = 4;
};

/// One JSON document with nested sections. Paths do not enter the hash.
struct ExperimentConfig {
  std::string manifest_path;  // empty: the built-in default manifest
  std::string output_dir = "runs";
  std::string data_dir;       // empty: <output_dir>/data
  std::uint64_t seed = 0;     // data generation
  ModelConfig model;
  DataConfig data;
  TrainConfig train;          // train.seed is the run seed
  EvalConfig eval;
  PlanOptions plan;

  void validate() const;
  Manifest manifest() const;
  std::string resolved_data_dir() const;

  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& doc);
  static ExperimentConfig load(const std::string& path);
  /// Hex fingerprint of the canonical JSON without paths.
  std::string hash() const;
};

std::string hex_hash(std::uint64_t value);

DatasetSpec pretrain_spec(const ExperimentConfig& config, const Manifest& manifest);
DatasetSpec test_spec(const ExperimentConfig& config, const Manifest& manifest);
DatasetSpec increment_spec(const ExperimentConfig& config, const std::vector<Composition>& increment);

struct GenResult {
  std::string pretrain_dir;
  std::string test_dir;
  std::size_t pretrain_instances = 0;
  std::size_t test_instances = 0;
};

/// Writes <data_dir>/pretrain and <data_dir>/test.
GenResult cmd_gen(const ExperimentConfig& config);

/// Immutable summary of one run directory (run.json).
struct RunRecord {
  std::string kind;  // "train" or "increment"
  std::string dir;
  std::string config_hash;
  std::string manifest_hash;
  std::uint64_t seed = 0;
  std::string checkpoint;
  std::string report;
  std::string confusion;
  std::string log;
  std::string started;  // ISO-8601 UTC
  std::string finished;
  double wall_seconds = 0.0;
  nlohmann::json extra;  // kind-specific fields

  nlohmann::json to_json() const;
  static RunRecord from_json(const nlohmann::json& doc);
  static RunRecord load(const std::string& dir);
};

/// Trains with config.train (loss toggles included), evaluates on the test
/// set and writes runs/<hash>/. Datasets must already exist.
RunRecord cmd_train(const ExperimentConfig& config);

/// One run per seed in `seeds`, each in its own directory, up to `jobs` at a
/// time. Records come back in seed-list order.
std::vector<RunRecord> cmd_train_seeds(const ExperimentConfig& config,
                                       const std::vector<std::uint64_t>& seeds, int jobs = 1);

/// NMS mAP of a checkpoint on a dataset directory, split given by the
/// manifest with `increment` as C_i.
EvalReport cmd_eval(const ExperimentConfig& config, const std::string& checkpoint,
                    const std::string& dataset_dir, const std::vector<Composition>& increment = {});

/// NMS mAP of precomputed detections (JSON list) against a dataset directory.
EvalReport cmd_eval_detections(const ExperimentConfig& config, const std::string& detections_path,
                               const std::string& dataset_dir,
                               const std::vector<Composition>& increment = {});

/// The config snapshot stored in a run directory.
ExperimentConfig load_run_config(const std::string& run_dir);

/// Reads a plan written by cmd_confusions.
IncrementPlan load_plan(const std::string& path, const CompositionSpace& space);

/// Mines the run's confusion CSV. Writes and returns the plan; when nothing
/// clears the threshold the plan is empty and a warning is logged.
IncrementPlan cmd_confusions(const ExperimentConfig& config, const std::string& run_dir,
                             const std::string& plan_path);

/// Runs the plan on top of a train run's checkpoint. The regime in `plan`
/// can be overridden by the caller before the call.
RunRecord cmd_increment(const ExperimentConfig& config, const std::string& run_dir,
                        const IncrementPlan& plan);

struct ReportTables {
  std::string text;
  std::string csv;
};

/// Ablation table over train runs and delta table over increment runs,
/// mean and sample std over seeds. Directories without run.json are skipped
/// with a warning. Throws on mixed manifests.
ReportTables cmd_report(const std::vector<std::string>& run_dirs);

}  // namespace czsl
