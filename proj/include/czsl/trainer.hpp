#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "czsl/complosses.hpp"
#include "czsl/evalkit.hpp"
#include "czsl/scenegen.hpp"
#include "czsl/tokenmodel.hpp"

namespace czsl {

/// Which parameters receive updates.
struct TunableMask {
  std::vector<bool> attributes;
  std::vector<bool> objects;
  bool prompts = false;

  static TunableMask all_tokens(const CompositionSpace& space);
  /// Only rows of primitives used by `compositions`.
  static TunableMask subset_tokens(const CompositionSpace& space,
                                   std::span<const Composition> compositions);
  static TunableMask prompts_only(const CompositionSpace& space);

  Eigen::Index tunable_count(const Detector& detector) const;
};

/// The three loss components toggled by the ablation grid, plus their settings.
struct LossConfig {
  SmoothingPolicy policy;
  SeparationWeights weights;
  bool separation = true;
  bool decorrelation = true;
  Kernel kernel = Kernel::linear();

  /// Plain one-hot BCE with every auxiliary term off.
  static LossConfig csp_baseline();
  static LossConfig full_ca();
  static LossConfig from_toggles(bool smoothing, bool separation, bool decorrelation);

  /// Weights with disabled components zeroed.
  SeparationWeights effective_weights() const;
  nlohmann::json to_json() const;
  static LossConfig from_json(const nlohmann::json& doc);
};

enum class ClassList { full_space, seen };

struct TrainConfig {
  int epochs = 200;
  int batch_size = 8;
  double learning_rate = 1.0;
  // A prompt row carries 1/(M+2) of its class embedding and feeds one class,
  // so it sees far smaller gradients than a primitive token.
  double prompt_learning_rate = 10.0;
  std::uint64_t seed = 0;
  LossConfig loss;
  std::optional<TunableMask> mask;  // all tokens when unset
  int background_ratio = 3;
  double match_iou = 0.5;
  ClassList classes = ClassList::full_space;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& doc);
};

struct RegionMatch {
  /// Ground-truth composition per proposal; nullopt marks background.
  std::vector<std::optional<Composition>> labels;
};

/// A proposal with IoU >= threshold to a ground-truth box inherits its
/// composition; each ground truth takes only its highest-IoU proposal
/// (earlier proposal on ties).
RegionMatch match_regions(std::span<const SceneObject> objects, std::span<const Box> proposals,
                          double iou_threshold);

/// Frozen features of one training image, computed once.
struct PreparedImage {
  int image_id = 0;
  std::vector<Box> boxes;
  Eigen::MatrixXd features;  // one row per box
  std::vector<std::optional<Composition>> labels;
  std::vector<Composition> instances;  // every ground-truth object in the image
};

/// Proposals from blob_propose matched to ground truth, plus
/// background_ratio * |objects| sampled background boxes per image.
std::vector<PreparedImage> prepare_training_images(const Dataset& dataset,
                                                   const FrozenModel& frozen,
                                                   int background_ratio, double match_iou,
                                                   std::uint64_t seed);

struct DetectorGradient {
  TableGradient table;
  std::vector<Eigen::MatrixXd> prompts;  // parallel to Detector::prompts
};

struct StepResult {
  LossBreakdown breakdown;
  DetectorGradient gradient;
};

/// Loss and full gradient for one batch, no update.
StepResult compute_step(const Detector& detector, std::span<const Composition> classes,
                        std::span<const PreparedImage* const> batch, const CompositionSpace& space,
                        const LossConfig& loss);

struct EpochRecord {
  int epoch = 0;
  int steps = 0;
  LossBreakdown mean;
};

struct TrainLog {
  std::uint64_t seed = 0;
  std::vector<EpochRecord> epochs;
  double wall_seconds = 0.0;

  /// One JSON object per epoch. Wall time is excluded so logs are reproducible.
  std::string to_jsonl() const;
};

/// Plain SGD over the masked parameters, batch order drawn from the seed.
/// Throws TrainingError naming the first non-finite term.
TrainLog train(Detector& detector, const CompositionSpace& space,
               std::span<const PreparedImage> images, const TrainConfig& config,
               std::span<const Composition> seen_compositions = {});

/// Prepares the datasets and trains.
TrainLog train(Detector& detector, const CompositionSpace& space,
               std::span<const Dataset* const> datasets, const TrainConfig& config);

/// Frozen features of the proposals of one evaluation image.
struct EvalImage {
  int image_id = 0;
  std::vector<Box> boxes;
  Eigen::MatrixXd features;
};

struct EvalSet {
  std::vector<EvalImage> images;
  std::vector<GroundTruth> ground_truth;
};

EvalSet prepare_eval_set(const Dataset& dataset, const FrozenModel& frozen,
                         const CompositionSpace& space);

struct EvalOutcome {
  EvalReport report;
  ConfusionMatrix confusion;
  std::vector<Detection> detections;  // pre-NMS
};

/// Scores every proposal against every composition of the space, then
/// applies NMS mAP and builds the post-NMS confusion matrix.
EvalOutcome evaluate(const Detector& detector, const CompositionSpace& space,
                     const EvalSet& eval_set, const SplitSpec& split, const EvalConfig& config);

}  // namespace czsl
