#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "czsl/compspace.hpp"
#include "czsl/error.hpp"
#include "czsl/log.hpp"
#include "czsl/tokenmodel.hpp"

namespace czsl {

enum class SmoothingMode { compositional, conventional, none };

const char* to_string(SmoothingMode mode);
SmoothingMode parse_smoothing_mode(const std::string& text);

/// Soft-label routing. `p_object` is used when only the object matches,
/// `p_attribute` when only the attribute matches.
struct SmoothingPolicy {
  double p_composition = 1.0;
  double p_object = 0.2;
  double p_attribute = 0.2;
  double epsilon = 0.1;  // conventional mode only
  SmoothingMode mode = SmoothingMode::compositional;

  void validate() const;
};

struct SeparationWeights {
  double distance = 0.1;   // lambda_1
  double attribute = 0.1;  // lambda_2
  double object = 0.1;     // lambda_3
  double hsic = 1.0;       // lambda_h

  void validate() const;
};

/// Regions x classes matrix of smoothed labels. A region without a ground
/// truth composition is background and gets an all-zero row.
///
/// compositional: p_C / p_O / p_A / 0 by which primitives match.
/// conventional:  (1 - eps) * onehot + eps / k.
/// none:          onehot.
Eigen::MatrixXd smooth_targets(const CompositionSpace& space,
                               std::span<const std::optional<Composition>> ground_truth,
                               std::span<const Composition> classes,
                               const SmoothingPolicy& policy);

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
struct ValueAndGradient {
  Scalar value{};
  MatrixX<Scalar> gradient;
};

namespace detail {

template <typename Scalar>
Scalar softplus(Scalar z) {
  using std::abs, std::exp, std::log1p, std::max;
  return max(z, Scalar(0)) + log1p(exp(-abs(z)));
}

template <typename Scalar>
Scalar sigmoid(Scalar z) {
  using std::exp;
  return z >= 0 ? Scalar(1) / (Scalar(1) + exp(-z)) : exp(z) / (Scalar(1) + exp(z));
}

template <typename Derived>
MatrixX<typename Derived::Scalar> normalized_rows(const Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  MatrixX<Scalar> out = m;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const Scalar n = std::max(out.row(i).norm(), Scalar(1e-12));
    out.row(i) /= n;
  }
  return out;
}

/// Back-propagates d/dN through N = rows of E scaled to unit length.
template <typename Scalar>
MatrixX<Scalar> normalization_backward(const MatrixX<Scalar>& raw, const MatrixX<Scalar>& unit,
                                       const MatrixX<Scalar>& grad_unit) {
  MatrixX<Scalar> out(raw.rows(), raw.cols());
  for (Eigen::Index i = 0; i < raw.rows(); ++i) {
    const Scalar n = std::max(raw.row(i).norm(), Scalar(1e-12));
    const Scalar radial = grad_unit.row(i).dot(unit.row(i));
    out.row(i) = (grad_unit.row(i) - radial * unit.row(i)) / n;
  }
  return out;
}

}  // namespace detail

/// Binary cross-entropy summed over classes and averaged over regions (rows).
template <typename DP, typename DY>
typename DP::Scalar classification_loss(const Eigen::MatrixBase<DP>& probabilities,
                                        const Eigen::MatrixBase<DY>& targets) {
  using Scalar = typename DP::Scalar;
  if (probabilities.rows() != targets.rows() || probabilities.cols() != targets.cols()) {
    throw ShapeError("probabilities and targets differ in shape");
  }
  if (probabilities.size() == 0) return Scalar(0);
  Scalar sum = 0;
  for (Eigen::Index i = 0; i < probabilities.rows(); ++i) {
    for (Eigen::Index j = 0; j < probabilities.cols(); ++j) {
      const Scalar p = probabilities(i, j);
      const Scalar y = targets(i, j);
      // 0 * log(0) terms vanish, so saturated probabilities stay finite.
      if (y > 0) sum -= y * std::log(p);
      if (y < 1) sum -= (1 - y) * std::log1p(-p);
    }
  }
  return sum / static_cast<Scalar>(probabilities.rows());
}

/// The same loss evaluated from logits, with its gradient w.r.t. the logits.
template <typename DZ, typename DY>
ValueAndGradient<typename DZ::Scalar> classification_loss_from_logits(
    const Eigen::MatrixBase<DZ>& logits, const Eigen::MatrixBase<DY>& targets) {
  using Scalar = typename DZ::Scalar;
  if (logits.rows() != targets.rows() || logits.cols() != targets.cols()) {
    throw ShapeError("logits and targets differ in shape");
  }
  ValueAndGradient<Scalar> out;
  out.gradient.resize(logits.rows(), logits.cols());
  if (logits.size() == 0) return out;
  const Scalar n = static_cast<Scalar>(logits.rows());
  Scalar sum = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
      const Scalar z = logits(i, j);
      const Scalar y = targets(i, j);
      sum += detail::softplus(z) - y * z;
      out.gradient(i, j) = (detail::sigmoid(z) - y) / n;
    }
  }
  out.value = sum / n;
  return out;
}

/// Mean absolute cosine similarity over distinct pairs of rows.
/// Fewer than two rows: 0, with a warning.
template <typename Derived>
ValueAndGradient<typename Derived::Scalar> orthogonality_loss_with_gradient(
    const Eigen::MatrixBase<Derived>& embeddings) {
  using Scalar = typename Derived::Scalar;
  const Eigen::Index m = embeddings.rows();
  ValueAndGradient<Scalar> out;
  out.gradient = MatrixX<Scalar>::Zero(m, embeddings.cols());
  if (m < 2) {
    warn("orthogonality loss over fewer than two embeddings is defined as 0");
    return out;
  }
  const MatrixX<Scalar> raw = embeddings;
  const MatrixX<Scalar> unit = detail::normalized_rows(raw);
  const MatrixX<Scalar> gram = unit * unit.transpose();
  const Scalar scale = Scalar(1) / static_cast<Scalar>(m * m - m);
  MatrixX<Scalar> signs = MatrixX<Scalar>::Zero(m, m);
  Scalar sum = 0;
  for (Eigen::Index i = 0; i < m; ++i) {
    for (Eigen::Index j = 0; j < m; ++j) {
      if (i == j) continue;
      sum += std::abs(gram(i, j));
      signs(i, j) = gram(i, j) > 0 ? Scalar(1) : (gram(i, j) < 0 ? Scalar(-1) : Scalar(0));
    }
  }
  out.value = sum * scale;
  const MatrixX<Scalar> grad_unit = Scalar(2) * scale * signs * unit;
  out.gradient = detail::normalization_backward(raw, unit, grad_unit);
  return out;
}

template <typename Derived>
typename Derived::Scalar orthogonality_loss(const Eigen::MatrixBase<Derived>& embeddings) {
  return orthogonality_loss_with_gradient(embeddings).value;
}

inline constexpr double kDistanceFloor = 1e-8;

template <typename Scalar>
struct DistanceResult {
  Scalar value{};
  MatrixX<Scalar> grad_attributes;
  MatrixX<Scalar> grad_objects;
};

/// -log || mean(unit attribute rows) - mean(unit object rows) ||, with the
/// norm floored at 1e-8.
template <typename DA, typename DO>
DistanceResult<typename DA::Scalar> distance_loss_with_gradient(
    const Eigen::MatrixBase<DA>& attributes, const Eigen::MatrixBase<DO>& objects) {
  using Scalar = typename DA::Scalar;
  if (attributes.rows() == 0 || objects.rows() == 0) {
    throw ValidationError("distance loss needs non-empty attribute and object sets");
  }
  const MatrixX<Scalar> raw_a = attributes;
  const MatrixX<Scalar> raw_o = objects;
  const MatrixX<Scalar> unit_a = detail::normalized_rows(raw_a);
  const MatrixX<Scalar> unit_o = detail::normalized_rows(raw_o);
  const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> diff =
      unit_a.colwise().mean() - unit_o.colwise().mean();
  const Scalar norm = diff.norm();
  DistanceResult<Scalar> out;
  out.grad_attributes = MatrixX<Scalar>::Zero(raw_a.rows(), raw_a.cols());
  out.grad_objects = MatrixX<Scalar>::Zero(raw_o.rows(), raw_o.cols());
  if (norm < Scalar(kDistanceFloor)) {
    out.value = -std::log(Scalar(kDistanceFloor));
    return out;
  }
  out.value = -std::log(norm);
  const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> grad_diff = -diff / (norm * norm);
  const MatrixX<Scalar> grad_unit_a =
      grad_diff.replicate(raw_a.rows(), 1) / static_cast<Scalar>(raw_a.rows());
  const MatrixX<Scalar> grad_unit_o =
      -grad_diff.replicate(raw_o.rows(), 1) / static_cast<Scalar>(raw_o.rows());
  out.grad_attributes = detail::normalization_backward(raw_a, unit_a, grad_unit_a);
  out.grad_objects = detail::normalization_backward(raw_o, unit_o, grad_unit_o);
  return out;
}

template <typename DA, typename DO>
typename DA::Scalar distance_loss(const Eigen::MatrixBase<DA>& attributes,
                                  const Eigen::MatrixBase<DO>& objects) {
  return distance_loss_with_gradient(attributes, objects).value;
}

/// Kernel for HSIC. A Gaussian bandwidth of 0 selects the median pairwise
/// distance of the sample; gradients treat the bandwidth as a constant.
struct Kernel {
  enum class Type { linear, gaussian };
  Type type = Type::linear;
  double bandwidth = 0.0;

  static Kernel linear() { return {}; }
  static Kernel gaussian(double bandwidth = 0.0) { return {Type::gaussian, bandwidth}; }
};

template <typename Derived>
typename Derived::Scalar median_bandwidth(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  std::vector<Scalar> distances;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < x.rows(); ++j) distances.push_back((x.row(i) - x.row(j)).norm());
  }
  if (distances.empty()) return Scalar(1);
  const auto mid = distances.begin() + static_cast<std::ptrdiff_t>(distances.size() / 2);
  std::nth_element(distances.begin(), mid, distances.end());
  Scalar median = *mid;
  if (distances.size() % 2 == 0) {
    median = (median + *std::max_element(distances.begin(), mid)) / Scalar(2);
  }
  return median > Scalar(0) ? median : Scalar(1);
}

template <typename Derived>
MatrixX<typename Derived::Scalar> gram_matrix(const Eigen::MatrixBase<Derived>& x,
                                              const Kernel& kernel,
                                              typename Derived::Scalar bandwidth) {
  using Scalar = typename Derived::Scalar;
  if (kernel.type == Kernel::Type::linear) return x * x.transpose();
  const Eigen::Index n = x.rows();
  MatrixX<Scalar> k(n, n);
  const Scalar denom = Scalar(2) * bandwidth * bandwidth;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) k(i, j) = std::exp(-(x.row(i) - x.row(j)).squaredNorm() / denom);
  }
  return k;
}

template <typename Scalar>
struct HsicResult {
  Scalar value{};
  MatrixX<Scalar> grad_x;
  MatrixX<Scalar> grad_y;
};

namespace detail {

// d tr(K H L H) / dX given dHSIC/dK = weight (symmetric).
template <typename Scalar>
MatrixX<Scalar> gram_backward(const MatrixX<Scalar>& x, const MatrixX<Scalar>& gram,
                              const MatrixX<Scalar>& weight, const Kernel& kernel,
                              Scalar bandwidth) {
  if (kernel.type == Kernel::Type::linear) return Scalar(2) * weight * x;
  const MatrixX<Scalar> wk = weight.cwiseProduct(gram);
  const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> row_sums = wk.rowwise().sum();
  return -(Scalar(2) / (bandwidth * bandwidth)) * (row_sums.asDiagonal() * x - wk * x);
}

template <typename Scalar>
MatrixX<Scalar> double_center(const MatrixX<Scalar>& m) {
  MatrixX<Scalar> out = m;
  out.rowwise() -= m.colwise().mean();
  out.colwise() -= out.rowwise().mean();
  return out;
}

}  // namespace detail

/// Biased HSIC estimate tr(K H L H) / (n - 1)^2 between paired samples
/// (rows of x and y), with gradients w.r.t. both.
template <typename DX, typename DY>
HsicResult<typename DX::Scalar> hsic_with_gradient(const Eigen::MatrixBase<DX>& x,
                                                   const Eigen::MatrixBase<DY>& y,
                                                   const Kernel& kernel = Kernel::linear()) {
  using Scalar = typename DX::Scalar;
  const Eigen::Index n = x.rows();
  if (n < 2) throw ValidationError("HSIC needs at least two samples");
  if (y.rows() != n) throw ShapeError("HSIC samples differ in count");
  const MatrixX<Scalar> xs = x;
  const MatrixX<Scalar> ys = y;
  const Scalar bw_x = kernel.bandwidth > 0 ? Scalar(kernel.bandwidth) : median_bandwidth(xs);
  const Scalar bw_y = kernel.bandwidth > 0 ? Scalar(kernel.bandwidth) : median_bandwidth(ys);
  const MatrixX<Scalar> k = gram_matrix(xs, kernel, bw_x);
  const MatrixX<Scalar> l = gram_matrix(ys, kernel, bw_y);
  const MatrixX<Scalar> kc = detail::double_center(k);
  const MatrixX<Scalar> lc = detail::double_center(l);
  const Scalar norm = Scalar(1) / static_cast<Scalar>((n - 1) * (n - 1));
  HsicResult<Scalar> out;
  out.value = kc.cwiseProduct(l).sum() * norm;
  out.grad_x = detail::gram_backward<Scalar>(xs, k, lc * norm, kernel, bw_x);
  out.grad_y = detail::gram_backward<Scalar>(ys, l, kc * norm, kernel, bw_y);
  return out;
}

template <typename DX, typename DY>
typename DX::Scalar hsic(const Eigen::MatrixBase<DX>& x, const Eigen::MatrixBase<DY>& y,
                         const Kernel& kernel = Kernel::linear()) {
  return hsic_with_gradient(x, y, kernel).value;
}

/// Weighted contributions of each loss term; `total` is their sum.
struct LossBreakdown {
  double classification = 0.0;
  double attribute_orthogonality = 0.0;  // lambda_2 * L_A
  double object_orthogonality = 0.0;     // lambda_3 * L_O
  double distance = 0.0;                 // lambda_1 * L_distance
  double hsic = 0.0;                     // lambda_h * HSIC
  double total = 0.0;

  double sum_of_terms() const {
    return classification + attribute_orthogonality + object_orthogonality + distance + hsic;
  }
};

/// Gradients w.r.t. the token table rows.
struct TableGradient {
  Eigen::MatrixXd attributes;
  Eigen::MatrixXd objects;

  static TableGradient zeros(const TokenTable& table) {
    return {Eigen::MatrixXd::Zero(table.attributes().rows(), table.attributes().cols()),
            Eigen::MatrixXd::Zero(table.objects().rows(), table.objects().cols())};
  }
};

struct SeparationResult {
  double distance = 0.0;   // weighted
  double attribute = 0.0;  // weighted
  double object = 0.0;     // weighted
  double total = 0.0;
  TableGradient gradient;
};

/// lambda_1 L_distance + lambda_2 L_orth(attributes) + lambda_3 L_orth(objects).
/// Terms with zero weight are skipped entirely.
SeparationResult separation_loss(const TokenTable& table, const SeparationWeights& weights);

struct DecorrelationResult {
  double value = 0.0;  // weighted
  TableGradient gradient;
};

/// lambda_h * HSIC between the unit-normalized object-token and attribute-token
/// rows of each instance in the batch. Batches with fewer than two instances
/// contribute 0.
DecorrelationResult decorrelation_loss(const TokenTable& table,
                                       std::span<const Composition> batch,
                                       const SeparationWeights& weights,
                                       const Kernel& kernel = Kernel::linear());

struct TotalLoss {
  LossBreakdown breakdown;
  Eigen::MatrixXd grad_logits;
  TableGradient table_gradient;  // separation + decorrelation only
};

/// Classification BCE over (logits, targets) plus separation and decorrelation.
TotalLoss total_loss(const Eigen::MatrixXd& logits, const Eigen::MatrixXd& targets,
                     const TokenTable& table, std::span<const Composition> batch,
                     const SeparationWeights& weights, const Kernel& kernel = Kernel::linear());

}  // namespace czsl
