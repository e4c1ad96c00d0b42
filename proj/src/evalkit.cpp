#include "czsl/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include "czsl/error.hpp"

namespace czsl {

std::vector<Detection> class_agnostic_nms(std::span<const Detection> detections,
                                          double iou_threshold) {
  if (!(iou_threshold > 0.0 && iou_threshold <= 1.0)) {
    throw ValidationError("NMS IoU threshold must lie in (0, 1]");
  }
  std::vector<std::size_t> order(detections.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (detections[a].score != detections[b].score) return detections[a].score > detections[b].score;
    return detections[a].composition < detections[b].composition;
  });
  std::vector<Detection> kept;
  for (std::size_t i : order) {
    const Detection& d = detections[i];
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      return iou(k.box, d.box) >= iou_threshold;
    });
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

std::vector<double> coco_iou_sweep() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

namespace {

double all_points_ap(const std::vector<bool>& true_positive, std::size_t num_gt) {
  std::vector<double> precision, recall;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < true_positive.size(); ++i) {
    if (true_positive[i]) ++tp;
    precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(num_gt));
  }
  // Precision envelope from the right, then area under the step curve.
  for (std::size_t i = precision.size(); i-- > 1;) {
    precision[i - 1] = std::max(precision[i - 1], precision[i]);
  }
  double ap = 0.0, previous_recall = 0.0;
  for (std::size_t i = 0; i < recall.size(); ++i) {
    ap += (recall[i] - previous_recall) * precision[i];
    previous_recall = recall[i];
  }
  return ap;
}

}  // namespace

std::optional<double> average_precision(std::span<const Detection> detections,
                                        std::span<const GroundTruth> ground_truth,
                                        int composition, std::span<const double> iou_thresholds) {
  std::vector<const GroundTruth*> gts;
  for (const auto& g : ground_truth) {
    if (g.composition == composition) gts.push_back(&g);
  }
  if (gts.empty()) return std::nullopt;
  std::vector<const Detection*> dets;
  for (const auto& d : detections) {
    if (d.composition == composition) dets.push_back(&d);
  }
  std::stable_sort(dets.begin(), dets.end(),
                   [](const Detection* a, const Detection* b) { return a->score > b->score; });
  if (iou_thresholds.empty()) throw ValidationError("empty IoU threshold list");

  double sum = 0.0;
  for (double threshold : iou_thresholds) {
    std::vector<bool> matched(gts.size(), false);
    std::vector<bool> true_positive;
    true_positive.reserve(dets.size());
    for (const Detection* d : dets) {
      double best = threshold;
      std::optional<std::size_t> best_gt;
      for (std::size_t g = 0; g < gts.size(); ++g) {
        if (matched[g] || gts[g]->image_id != d->image_id) continue;
        const double overlap = iou(d->box, gts[g]->box);
        if (overlap >= best && (!best_gt || overlap > best)) {
          best = overlap;
          best_gt = g;
        }
      }
      if (best_gt) matched[*best_gt] = true;
      true_positive.push_back(best_gt.has_value());
    }
    sum += all_points_ap(true_positive, gts.size());
  }
  return 100.0 * sum / static_cast<double>(iou_thresholds.size());
}

double harmonic_mean(double a, double b) {
  if (a < 0.0 || b < 0.0) throw ValidationError("harmonic mean of a negative value");
  if (a + b == 0.0) return 0.0;
  return 2.0 * a * b / (a + b);
}

double harmonic_mean(std::span<const double> values) {
  if (values.empty()) throw ValidationError("harmonic mean of nothing");
  double inverse_sum = 0.0;
  for (double v : values) {
    if (v < 0.0) throw ValidationError("harmonic mean of a negative value");
    if (v == 0.0) return 0.0;
    inverse_sum += 1.0 / v;
  }
  return static_cast<double>(values.size()) / inverse_sum;
}

double round1(double value) { return std::round(value * 10.0) / 10.0; }

namespace {

std::optional<double> mean_of(const std::vector<std::optional<double>>& ap,
                              const std::vector<int>& ids) {
  double sum = 0.0;
  int n = 0;
  for (int id : ids) {
    if (ap[static_cast<std::size_t>(id)]) {
      sum += *ap[static_cast<std::size_t>(id)];
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / n;
}

EvalReport aggregate(std::span<const Detection> detections,
                     std::span<const GroundTruth> ground_truth, const SplitSpec& split,
                     const EvalConfig& config) {
  if (ground_truth.empty()) throw ValidationError("evaluation needs ground truth");
  const int n = split.space().size();
  EvalReport report;
  report.per_composition.resize(static_cast<std::size_t>(n));
  report.gt_counts.assign(static_cast<std::size_t>(n), 0);
  for (const auto& g : ground_truth) {
    if (g.composition < 0 || g.composition >= n) {
      throw ValidationError("ground-truth composition id out of range");
    }
    ++report.gt_counts[static_cast<std::size_t>(g.composition)];
  }
  for (int c = 0; c < n; ++c) {
    report.per_composition[static_cast<std::size_t>(c)] =
        average_precision(detections, ground_truth, c, config.iou_sweep);
  }
  std::vector<int> all(static_cast<std::size_t>(n));
  std::iota(all.begin(), all.end(), 0);
  report.pretrain = mean_of(report.per_composition, split.pretrain());
  report.increment = mean_of(report.per_composition, split.increment());
  report.seen = mean_of(report.per_composition, split.seen());
  report.unseen = mean_of(report.per_composition, split.unseen());
  report.overall = mean_of(report.per_composition, all);
  report.hm = harmonic_mean(report.seen.value_or(0.0), report.unseen.value_or(0.0));
  if (!split.increment().empty()) {
    const double values[3] = {report.pretrain.value_or(0.0), report.increment.value_or(0.0),
                              report.unseen.value_or(0.0)};
    report.hm_three = harmonic_mean(values);
  }
  report.num_detections = detections.size();
  report.num_ground_truth = ground_truth.size();
  return report;
}

}  // namespace

EvalReport nms_map(std::span<const Detection> detections,
                   std::span<const GroundTruth> ground_truth, const SplitSpec& split,
                   const EvalConfig& config) {
  std::map<int, std::vector<Detection>> per_image;
  for (const auto& d : detections) per_image[d.image_id].push_back(d);
  std::vector<Detection> survivors;
  for (const auto& [image, dets] : per_image) {
    auto kept = class_agnostic_nms(dets, config.nms_iou);
    survivors.insert(survivors.end(), kept.begin(), kept.end());
  }
  return aggregate(survivors, ground_truth, split, config);
}

EvalReport raw_map(std::span<const Detection> detections,
                   std::span<const GroundTruth> ground_truth, const SplitSpec& split,
                   const EvalConfig& config) {
  return aggregate(detections, ground_truth, split, config);
}

namespace {

nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

std::optional<double> optional_from(const nlohmann::json& v) {
  if (v.is_null()) return std::nullopt;
  return v.get<double>();
}

}  // namespace

nlohmann::json EvalReport::to_json(const CompositionSpace& space) const {
  nlohmann::json per = nlohmann::json::array();
  for (std::size_t c = 0; c < per_composition.size(); ++c) {
    per.push_back({{"composition", space.name(static_cast<int>(c))},
                   {"id", c},
                   {"ap", optional_json(per_composition[c])},
                   {"gt", gt_counts.empty() ? 0 : gt_counts[c]}});
  }
  return {{"per_composition", per},
          {"pretrain", optional_json(pretrain)},
          {"increment", optional_json(increment)},
          {"seen", optional_json(seen)},
          {"unseen", optional_json(unseen)},
          {"overall", optional_json(overall)},
          {"hm", hm},
          {"hm_three", optional_json(hm_three)},
          {"num_detections", num_detections},
          {"num_ground_truth", num_ground_truth}};
}

EvalReport EvalReport::from_json(const nlohmann::json& doc, const CompositionSpace& space) {
  try {
    EvalReport r;
    r.per_composition.resize(static_cast<std::size_t>(space.size()));
    r.gt_counts.assign(static_cast<std::size_t>(space.size()), 0);
    for (const auto& entry : doc.at("per_composition")) {
      const int id = space.id(space.parse(entry.at("composition").get<std::string>()));
      r.per_composition[static_cast<std::size_t>(id)] = optional_from(entry.at("ap"));
      r.gt_counts[static_cast<std::size_t>(id)] = entry.at("gt");
    }
    r.pretrain = optional_from(doc.at("pretrain"));
    r.increment = optional_from(doc.at("increment"));
    r.seen = optional_from(doc.at("seen"));
    r.unseen = optional_from(doc.at("unseen"));
    r.overall = optional_from(doc.at("overall"));
    r.hm = doc.at("hm");
    r.hm_three = optional_from(doc.at("hm_three"));
    r.num_detections = doc.at("num_detections");
    r.num_ground_truth = doc.at("num_ground_truth");
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed report: ") + e.what());
  }
}

Eigen::MatrixXd ConfusionMatrix::normalized() const {
  Eigen::MatrixXd out = counts.cast<double>();
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const double total = out.row(r).sum();
    if (total > 0.0) out.row(r) /= total;
  }
  return out;
}

std::string ConfusionMatrix::to_csv(const CompositionSpace& space) const {
  std::ostringstream out;
  out << "ground_truth";
  for (int c = 0; c < num_classes(); ++c) out << ',' << space.name(c);
  out << ",missed\n";
  for (int r = 0; r < num_classes(); ++r) {
    out << space.name(r);
    for (Eigen::Index c = 0; c < counts.cols(); ++c) out << ',' << counts(r, c);
    out << '\n';
  }
  return out.str();
}

ConfusionMatrix ConfusionMatrix::from_csv(const std::string& text, const CompositionSpace& space) {
  std::istringstream in(text);
  std::string line;
  // Leading '#' lines carry provenance.
  do {
    if (!std::getline(in, line)) throw ValidationError("empty confusion CSV");
  } while (line.starts_with('#'));
  ConfusionMatrix m;
  m.counts = Eigen::MatrixXi::Zero(space.size(), space.size() + 1);
  int row = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream cells(line);
    std::string cell;
    std::getline(cells, cell, ',');
    const int r = space.id(space.parse(cell));
    int c = 0;
    while (std::getline(cells, cell, ',')) {
      if (c > space.size()) throw ValidationError("confusion CSV row too long");
      m.counts(r, c++) = std::stoi(cell);
    }
    if (c != space.size() + 1) throw ValidationError("confusion CSV row too short");
    ++row;
  }
  if (row != space.size()) throw ValidationError("confusion CSV has the wrong number of rows");
  return m;
}

ConfusionMatrix confusion_matrix(std::span<const Detection> detections,
                                 std::span<const GroundTruth> ground_truth, int num_classes,
                                 double iou_match) {
  ConfusionMatrix m;
  m.counts = Eigen::MatrixXi::Zero(num_classes, num_classes + 1);
  for (const auto& g : ground_truth) {
    const Detection* best = nullptr;
    for (const auto& d : detections) {
      if (d.image_id != g.image_id || iou(d.box, g.box) < iou_match) continue;
      if (best == nullptr || d.score > best->score) best = &d;
    }
    m.counts(g.composition, best ? best->composition : num_classes) += 1;
  }
  return m;
}

nlohmann::json detections_to_json(std::span<const Detection> detections) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& d : detections) {
    out.push_back({{"image_id", d.image_id},
                   {"bbox", {d.box.x, d.box.y, d.box.w, d.box.h}},
                   {"category_id", d.composition},
                   {"score", d.score}});
  }
  return out;
}

std::vector<Detection> detections_from_json(const nlohmann::json& doc) {
  try {
    std::vector<Detection> out;
    for (const auto& entry : doc) {
      const auto& b = entry.at("bbox");
      Detection d{entry.at("image_id"), {b[0], b[1], b[2], b[3]}, entry.at("category_id"),
                  entry.at("score")};
      if (!(d.box.w > 0 && d.box.h > 0) || !(d.score >= 0.0 && d.score <= 1.0)) {
        throw ValidationError("detection with empty box or score outside [0, 1]");
      }
      out.push_back(d);
    }
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed detections: ") + e.what());
  }
}

std::vector<GroundTruth> ground_truth_from_coco(const nlohmann::json& doc) {
  try {
    std::vector<GroundTruth> out;
    for (const auto& ann : doc.at("annotations")) {
      const auto& b = ann.at("bbox");
      out.push_back({ann.at("image_id"), {b[0], b[1], b[2], b[3]}, ann.at("category_id")});
    }
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed annotations: ") + e.what());
  }
}

}  // namespace czsl
