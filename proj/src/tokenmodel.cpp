#include "czsl/tokenmodel.hpp"

#include <algorithm>
#include <cmath>

#include "czsl/error.hpp"
#include "czsl/rng.hpp"
#include "czsl/scenegen.hpp"

namespace czsl {
namespace {

Eigen::MatrixXd gaussian(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = stddev * rng.normal();
  }
  return m;
}

void normalize_rows(Eigen::MatrixXd& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) m.row(r).normalize();
}

// rows x cols with orthonormal rows (rows <= cols) or orthonormal columns.
Eigen::MatrixXd random_orthogonal(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  const Eigen::Index n = std::max(rows, cols);
  const Eigen::MatrixXd g = gaussian(n, n, 1.0, rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ();
  // Fix the sign ambiguity of QR so the result is a function of the seed alone.
  const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index i = 0; i < n; ++i) {
    if (r(i, i) < 0) q.col(i) = -q.col(i);
  }
  return q.topLeftCorner(rows, cols);
}

}  // namespace

TokenTable::TokenTable(Eigen::MatrixXd attributes, Eigen::MatrixXd objects)
    : attributes_(std::move(attributes)),
      objects_(std::move(objects)),
      attribute_base_(attributes_),
      object_base_(objects_) {
  if (attributes_.cols() != objects_.cols()) {
    throw ShapeError("attribute and object tokens differ in dimension");
  }
}

TokenTable TokenTable::restore(Eigen::MatrixXd attributes, Eigen::MatrixXd objects,
                               Eigen::MatrixXd attribute_base, Eigen::MatrixXd object_base) {
  if (attribute_base.rows() != attributes.rows() || attribute_base.cols() != attributes.cols() ||
      object_base.rows() != objects.rows() || object_base.cols() != objects.cols()) {
    throw ShapeError("token base copy shape differs from live tokens");
  }
  TokenTable table(std::move(attributes), std::move(objects));
  table.attribute_base_ = std::move(attribute_base);
  table.object_base_ = std::move(object_base);
  return table;
}

TokenTable init_tokens(const CompositionSpace& space, int dim, std::uint64_t seed) {
  if (dim < 8) throw ValidationError("token dimension must be at least 8");
  Rng rng(seed);
  const double stddev = 1.0 / std::sqrt(static_cast<double>(dim));
  Eigen::MatrixXd attributes = gaussian(space.num_attributes(), dim, stddev, rng);
  Eigen::MatrixXd objects = gaussian(space.num_objects(), dim, stddev, rng);
  normalize_rows(attributes);
  normalize_rows(objects);
  return TokenTable(std::move(attributes), std::move(objects));
}

FunctionWordTable::FunctionWordTable(int dim, std::uint64_t seed) {
  Rng rng(seed);
  const double stddev = 1.0 / std::sqrt(static_cast<double>(dim));
  for (const char* word : {"a", "an", "but", "is", "not", "the"}) {
    Eigen::VectorXd v = gaussian(dim, 1, stddev, rng).col(0);
    words_.emplace(word, v.normalized());
  }
}

const Eigen::VectorXd& FunctionWordTable::at(const std::string& word) const {
  const auto it = words_.find(word);
  if (it == words_.end()) throw ValidationError("'" + word + "' is not a function word");
  return it->second;
}

RegionFeaturizer::RegionFeaturizer(int dim, std::uint64_t seed) {
  Rng rng(seed);
  projection_ = random_orthogonal(dim, kRawDim, rng);
}

namespace {
// Colour offsets rarely exceed 0.5; stretch every group to roughly unit range.
constexpr double kGain = 2.0;
}

Eigen::VectorXd RegionFeaturizer::raw_features(const Image& image, const Box& box) {
  constexpr int kPatch = kCrop / kGrid;
  constexpr double kForeground = 30.0 / 255.0;
  const double background[3] = {kBackground.r / 255.0, kBackground.g / 255.0,
                                kBackground.b / 255.0};
  Eigen::VectorXd raw = Eigen::VectorXd::Zero(kRawDim);
  Eigen::Vector3d sum = Eigen::Vector3d::Zero();
  Eigen::Vector3d sum_sq = Eigen::Vector3d::Zero();
  double count = 0.0;
  Eigen::VectorXd occupancy = Eigen::VectorXd::Zero(kGrid * kGrid);

  for (int j = 0; j < kCrop; ++j) {
    const double sy = box.y + (j + 0.5) * box.h / kCrop;
    const int py = std::clamp(static_cast<int>(std::floor(sy)), 0, image.height() - 1);
    for (int i = 0; i < kCrop; ++i) {
      const double sx = box.x + (i + 0.5) * box.w / kCrop;
      const int px = std::clamp(static_cast<int>(std::floor(sx)), 0, image.width() - 1);
      const Rgb c = image.at(px, py);
      const Eigen::Vector3d v(c.r / 255.0 - background[0], c.g / 255.0 - background[1],
                              c.b / 255.0 - background[2]);
      if (v.cwiseAbs().maxCoeff() <= kForeground) continue;
      sum += v;
      sum_sq += v.cwiseProduct(v);
      count += 1.0;
      occupancy((j / kPatch) * kGrid + (i / kPatch)) += 1.0;
    }
  }
  // Colour statistics over foreground pixels only, so they do not depend on shape.
  if (count > 0) {
    const Eigen::Vector3d mean = sum / count;
    raw.head<3>() = kGain * mean;
    raw.segment<3>(3) = kGain * (sum_sq / count - mean.cwiseProduct(mean)).cwiseMax(0.0).cwiseSqrt();
  }
  raw.segment(6, kGrid * kGrid) =
      kGain * (occupancy.array() / (kPatch * kPatch) - 0.5).matrix();
  raw(kRawDim - 2) = kGain * std::log(box.w / box.h);
  // Constant input; without it no score can separate a sphere from the cube
  // and the empty box whose occupancies it lies between.
  raw(kRawDim - 1) = 1.0;
  return raw;
}

Eigen::VectorXd RegionFeaturizer::operator()(const Image& image, const Box& box) const {
  return projection_ * raw_features(image, box);
}

Eigen::MatrixXd RegionFeaturizer::features(const Image& image, std::span<const Box> boxes) const {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(boxes.size()), projection_.rows());
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = (*this)(image, boxes[i]).transpose();
  }
  return out;
}

FrozenModel FrozenModel::create(int dim, std::uint64_t seed) {
  if (dim < 8) throw ValidationError("embedding dimension must be at least 8");
  FrozenModel m;
  m.dim = dim;
  m.seed = seed;
  m.tau = 10.0 / std::sqrt(static_cast<double>(dim));
  m.featurizer = RegionFeaturizer(dim, Rng::splitmix64(seed ^ 0xfea7));
  Rng rng(Rng::splitmix64(seed ^ 0xc0de));
  m.compose_map = random_orthogonal(dim, dim, rng);
  m.words = FunctionWordTable(dim, Rng::splitmix64(seed ^ 0x3d5));
  return m;
}

Eigen::VectorXd compose_embedding(const TokenTable& table, const Eigen::MatrixXd& compose_map,
                                  const Composition& composition, const PromptSlot* prompt) {
  Eigen::VectorXd sum = table.attributes().row(composition.attribute).transpose() +
                        table.objects().row(composition.object).transpose();
  double count = 2.0;
  if (prompt != nullptr && prompt->tokens.rows() > 0) {
    sum += prompt->tokens.colwise().sum().transpose();
    count += static_cast<double>(prompt->tokens.rows());
  }
  return compose_map * (sum / count);
}

Eigen::MatrixXd region_logits(const Eigen::MatrixXd& region_features,
                              const Eigen::MatrixXd& class_embeddings, double tau) {
  return region_features * class_embeddings.transpose() / tau;
}

std::vector<RegionScore> score_regions(const Image& image, std::span<const Box> boxes,
                                       const Eigen::MatrixXd& class_embeddings,
                                       const RegionFeaturizer& featurizer, double tau) {
  if (class_embeddings.rows() < 1) throw ValidationError("scoring needs at least one class");
  std::vector<RegionScore> out;
  if (boxes.empty()) return out;
  const Eigen::MatrixXd logits = region_logits(featurizer.features(image, boxes), class_embeddings, tau);
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    RegionScore s;
    s.box = boxes[i];
    s.logits = logits.row(static_cast<Eigen::Index>(i)).transpose();
    s.probabilities = s.logits.unaryExpr([](double z) { return logistic(z); });
    out.push_back(std::move(s));
  }
  return out;
}

const PromptSlot* Detector::prompt_for(const Composition& c) const {
  for (const auto& p : prompts) {
    if (p.owner == c) return &p;
  }
  return nullptr;
}

Eigen::MatrixXd Detector::class_embeddings(std::span<const Composition> classes) const {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(classes.size()), frozen.dim);
  for (std::size_t k = 0; k < classes.size(); ++k) {
    out.row(static_cast<Eigen::Index>(k)) =
        compose_embedding(tokens, frozen.compose_map, classes[k], prompt_for(classes[k])).transpose();
  }
  return out;
}

Eigen::Index Detector::trainable_parameter_count() const {
  Eigen::Index n = tokens.trainable_parameter_count();
  for (const auto& p : prompts) n += p.tokens.size();
  return n;
}

Detector make_detector(const CompositionSpace& space, int dim, std::uint64_t model_seed,
                       std::uint64_t token_seed) {
  Detector d;
  d.frozen = FrozenModel::create(dim, model_seed);
  d.tokens = init_tokens(space, dim, token_seed);
  return d;
}

std::vector<Detection> detections_from_scores(int image_id, std::span<const Box> boxes,
                                              const Eigen::MatrixXd& logits,
                                              std::span<const int> class_ids, double threshold) {
  std::vector<Detection> out;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    for (Eigen::Index k = 0; k < logits.cols(); ++k) {
      const double p = logistic(logits(r, k));
      if (p >= threshold) {
        out.push_back({image_id, boxes[static_cast<std::size_t>(r)],
                       class_ids[static_cast<std::size_t>(k)], p});
      }
    }
  }
  return out;
}

std::vector<Detection> predict(const Detector& detector, const CompositionSpace& space,
                               const Image& image, int image_id,
                               std::span<const Composition> classes, double threshold) {
  const std::vector<Box> boxes = blob_propose(image);
  if (boxes.empty()) return {};
  const Eigen::MatrixXd logits =
      region_logits(detector.frozen.featurizer.features(image, boxes),
                    detector.class_embeddings(classes), detector.frozen.tau);
  std::vector<int> ids;
  for (const auto& c : classes) ids.push_back(space.id(c));
  return detections_from_scores(image_id, boxes, logits, ids, threshold);
}

}  // namespace czsl
