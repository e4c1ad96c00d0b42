#include "czsl/complosses.hpp"

namespace czsl {

const char* to_string(SmoothingMode mode) {
  switch (mode) {
    case SmoothingMode::compositional:
      return "compositional";
    case SmoothingMode::conventional:
      return "conventional";
    case SmoothingMode::none:
      return "none";
  }
  return "unknown";
}

SmoothingMode parse_smoothing_mode(const std::string& text) {
  if (text == "compositional") return SmoothingMode::compositional;
  if (text == "conventional") return SmoothingMode::conventional;
  if (text == "none") return SmoothingMode::none;
  throw ValidationError("unknown smoothing mode '" + text + "'");
}

void SmoothingPolicy::validate() const {
  if (!(p_composition <= 1.0 && p_object >= 0.0 && p_attribute >= 0.0 &&
        p_object < p_composition && p_attribute < p_composition)) {
    throw ValidationError("smoothing policy needs 0 <= p_O, p_A < p_C <= 1");
  }
  if (!(epsilon >= 0.0 && epsilon < 1.0)) throw ValidationError("epsilon must lie in [0, 1)");
}

void SeparationWeights::validate() const {
  for (double w : {distance, attribute, object, hsic}) {
    if (!std::isfinite(w) || w < 0.0) {
      throw ValidationError("loss weights must be finite and non-negative");
    }
  }
}

Eigen::MatrixXd smooth_targets(const CompositionSpace& space,
                               std::span<const std::optional<Composition>> ground_truth,
                               std::span<const Composition> classes,
                               const SmoothingPolicy& policy) {
  policy.validate();
  const auto rows = static_cast<Eigen::Index>(ground_truth.size());
  const auto cols = static_cast<Eigen::Index>(classes.size());
  Eigen::MatrixXd y = Eigen::MatrixXd::Zero(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto& gt = ground_truth[static_cast<std::size_t>(r)];
    if (!gt) continue;
    if (!space.contains(*gt)) throw ValidationError("ground-truth composition outside the space");
    for (Eigen::Index k = 0; k < cols; ++k) {
      const Composition& c = classes[static_cast<std::size_t>(k)];
      const bool attribute_match = c.attribute == gt->attribute;
      const bool object_match = c.object == gt->object;
      switch (policy.mode) {
        case SmoothingMode::compositional:
          if (attribute_match && object_match) {
            y(r, k) = policy.p_composition;
          } else if (object_match) {
            y(r, k) = policy.p_object;
          } else if (attribute_match) {
            y(r, k) = policy.p_attribute;
          }
          break;
        case SmoothingMode::conventional:
          y(r, k) = (attribute_match && object_match ? 1.0 - policy.epsilon : 0.0) +
                    policy.epsilon / static_cast<double>(cols);
          break;
        case SmoothingMode::none:
          y(r, k) = attribute_match && object_match ? 1.0 : 0.0;
          break;
      }
    }
  }
  return y;
}

SeparationResult separation_loss(const TokenTable& table, const SeparationWeights& weights) {
  weights.validate();
  SeparationResult out;
  out.gradient = TableGradient::zeros(table);
  if (weights.distance > 0.0) {
    const auto d = distance_loss_with_gradient(table.attributes(), table.objects());
    out.distance = weights.distance * d.value;
    out.gradient.attributes += weights.distance * d.grad_attributes;
    out.gradient.objects += weights.distance * d.grad_objects;
  }
  if (weights.attribute > 0.0) {
    const auto a = orthogonality_loss_with_gradient(table.attributes());
    out.attribute = weights.attribute * a.value;
    out.gradient.attributes += weights.attribute * a.gradient;
  }
  if (weights.object > 0.0) {
    const auto o = orthogonality_loss_with_gradient(table.objects());
    out.object = weights.object * o.value;
    out.gradient.objects += weights.object * o.gradient;
  }
  out.total = out.distance + out.attribute + out.object;
  return out;
}

DecorrelationResult decorrelation_loss(const TokenTable& table,
                                       std::span<const Composition> batch,
                                       const SeparationWeights& weights, const Kernel& kernel) {
  weights.validate();
  DecorrelationResult out;
  out.gradient = TableGradient::zeros(table);
  if (weights.hsic == 0.0 || batch.size() < 2) return out;
  const auto n = static_cast<Eigen::Index>(batch.size());
  Eigen::MatrixXd objects(n, table.dim());
  Eigen::MatrixXd attributes(n, table.dim());
  Eigen::VectorXd object_norms(n);
  Eigen::VectorXd attribute_norms(n);
  // Unit rows: the linear kernel grows with the fourth power of the token norm otherwise.
  for (Eigen::Index i = 0; i < n; ++i) {
    const Composition& c = batch[static_cast<std::size_t>(i)];
    object_norms(i) = std::max(table.objects().row(c.object).norm(), kDistanceFloor);
    attribute_norms(i) = std::max(table.attributes().row(c.attribute).norm(), kDistanceFloor);
    objects.row(i) = table.objects().row(c.object) / object_norms(i);
    attributes.row(i) = table.attributes().row(c.attribute) / attribute_norms(i);
  }
  const auto h = hsic_with_gradient(objects, attributes, kernel);
  out.value = weights.hsic * h.value;
  const auto through_norm = [](const Eigen::RowVectorXd& g, const Eigen::RowVectorXd& u,
                               double norm) -> Eigen::RowVectorXd {
    return (g - u * u.dot(g)) / norm;
  };
  for (Eigen::Index i = 0; i < n; ++i) {
    const Composition& c = batch[static_cast<std::size_t>(i)];
    out.gradient.objects.row(c.object) +=
        weights.hsic * through_norm(h.grad_x.row(i), objects.row(i), object_norms(i));
    out.gradient.attributes.row(c.attribute) +=
        weights.hsic * through_norm(h.grad_y.row(i), attributes.row(i), attribute_norms(i));
  }
  return out;
}

TotalLoss total_loss(const Eigen::MatrixXd& logits, const Eigen::MatrixXd& targets,
                     const TokenTable& table, std::span<const Composition> batch,
                     const SeparationWeights& weights, const Kernel& kernel) {
  TotalLoss out;
  const auto cls = classification_loss_from_logits(logits, targets);
  const auto sep = separation_loss(table, weights);
  const auto dec = decorrelation_loss(table, batch, weights, kernel);
  out.breakdown.classification = cls.value;
  out.breakdown.distance = sep.distance;
  out.breakdown.attribute_orthogonality = sep.attribute;
  out.breakdown.object_orthogonality = sep.object;
  out.breakdown.hsic = dec.value;
  out.breakdown.total = out.breakdown.sum_of_terms();
  out.grad_logits = cls.gradient;
  out.table_gradient.attributes = sep.gradient.attributes + dec.gradient.attributes;
  out.table_gradient.objects = sep.gradient.objects + dec.gradient.objects;
  return out;
}

}  // namespace czsl
