#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "czsl/compspace.hpp"
#include "czsl/detection.hpp"

namespace czsl {

/// Greedy suppression by descending score that ignores labels. Ties go to
/// the lower composition id, then to the earlier detection. Throws
/// ValidationError unless iou_threshold is in (0, 1].
std::vector<Detection> class_agnostic_nms(std::span<const Detection> detections,
                                          double iou_threshold);

/// 0.50:0.05:0.95.
std::vector<double> coco_iou_sweep();

/// All-points interpolated AP (percent) for one composition, averaged over
/// the IoU thresholds. nullopt when the composition has no ground truth.
std::optional<double> average_precision(std::span<const Detection> detections,
                                        std::span<const GroundTruth> ground_truth,
                                        int composition, std::span<const double> iou_thresholds);

/// 2ab / (a + b), 0 when a + b = 0. Negative input is a ValidationError.
double harmonic_mean(double a, double b);
/// n / sum(1 / x_i), 0 when any value is 0.
double harmonic_mean(std::span<const double> values);

struct EvalConfig {
  double nms_iou = 0.5;
  std::vector<double> iou_sweep = coco_iou_sweep();
  double score_threshold = 0.01;
  double confusion_iou = 0.5;
};

struct EvalReport {
  std::vector<std::optional<double>> per_composition;  // indexed by composition id
  std::vector<int> gt_counts;
  std::optional<double> pretrain;
  std::optional<double> increment;
  std::optional<double> seen;
  std::optional<double> unseen;
  std::optional<double> overall;
  double hm = 0.0;                  // seen vs unseen
  std::optional<double> hm_three;   // pretrain, increment, unseen
  std::size_t num_detections = 0;   // after NMS
  std::size_t num_ground_truth = 0;

  nlohmann::json to_json(const CompositionSpace& space) const;
  static EvalReport from_json(const nlohmann::json& doc, const CompositionSpace& space);
};

/// Rounds to one decimal, the precision reports are printed with.
double round1(double value);

/// Per-image class-agnostic NMS, then per-composition AP averaged within each
/// split role. Throws ValidationError when ground truth is empty.
EvalReport nms_map(std::span<const Detection> detections,
                   std::span<const GroundTruth> ground_truth, const SplitSpec& split,
                   const EvalConfig& config = {});

/// Same aggregation without suppression (the inflated-AP variant).
EvalReport raw_map(std::span<const Detection> detections,
                   std::span<const GroundTruth> ground_truth, const SplitSpec& split,
                   const EvalConfig& config = {});

/// Rows: ground-truth composition. Columns: predicted composition, plus a
/// final "missed" column.
struct ConfusionMatrix {
  Eigen::MatrixXi counts;

  int num_classes() const { return static_cast<int>(counts.rows()); }
  int missed_column() const { return static_cast<int>(counts.cols()) - 1; }
  /// Rows divided by their instance count (matched + missed); empty rows stay 0.
  Eigen::MatrixXd normalized() const;

  std::string to_csv(const CompositionSpace& space) const;
  static ConfusionMatrix from_csv(const std::string& text, const CompositionSpace& space);
};

/// Each ground truth goes to the highest-scoring detection in its image with
/// IoU >= iou_match; unmatched ground truth counts as missed.
ConfusionMatrix confusion_matrix(std::span<const Detection> detections,
                                 std::span<const GroundTruth> ground_truth, int num_classes,
                                 double iou_match);

nlohmann::json detections_to_json(std::span<const Detection> detections);
std::vector<Detection> detections_from_json(const nlohmann::json& doc);
/// Ground truth from a COCO-style annotation document.
std::vector<GroundTruth> ground_truth_from_coco(const nlohmann::json& doc);

}  // namespace czsl
