#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "czsl/box.hpp"
#include "czsl/compspace.hpp"
#include "czsl/detection.hpp"
#include "czsl/image.hpp"

namespace czsl {

/// Trainable auxiliary tokens for every attribute and object, plus a frozen
/// snapshot of their initial values.
class TokenTable {
 public:
  TokenTable() = default;
  TokenTable(Eigen::MatrixXd attributes, Eigen::MatrixXd objects);

  /// Rebuilds a table whose base copy differs from the live rows (checkpoint load).
  static TokenTable restore(Eigen::MatrixXd attributes, Eigen::MatrixXd objects,
                            Eigen::MatrixXd attribute_base, Eigen::MatrixXd object_base);

  Eigen::MatrixXd& attributes() { return attributes_; }
  const Eigen::MatrixXd& attributes() const { return attributes_; }
  Eigen::MatrixXd& objects() { return objects_; }
  const Eigen::MatrixXd& objects() const { return objects_; }

  const Eigen::MatrixXd& attribute_base() const { return attribute_base_; }
  const Eigen::MatrixXd& object_base() const { return object_base_; }

  int dim() const { return static_cast<int>(attributes_.cols()); }
  /// (|A| + |O|) * d.
  Eigen::Index trainable_parameter_count() const {
    return attributes_.size() + objects_.size();
  }

 private:
  Eigen::MatrixXd attributes_;
  Eigen::MatrixXd objects_;
  Eigen::MatrixXd attribute_base_;
  Eigen::MatrixXd object_base_;
};

/// Rows drawn from N(0, 1/d) and scaled to unit length. Requires d >= 8.
TokenTable init_tokens(const CompositionSpace& space, int dim, std::uint64_t seed);

/// Frozen embeddings for the closed vocabulary of prompt function words.
class FunctionWordTable {
 public:
  FunctionWordTable() = default;
  FunctionWordTable(int dim, std::uint64_t seed);

  bool contains(const std::string& word) const { return words_.count(word) != 0; }
  const Eigen::VectorXd& at(const std::string& word) const;
  const std::map<std::string, Eigen::VectorXd>& entries() const { return words_; }

 private:
  std::map<std::string, Eigen::VectorXd> words_;
};

/// A trainable prompt prepended to one composition's class phrase.
struct PromptSlot {
  Composition owner;
  Eigen::MatrixXd tokens;  // M x d, M = word count of init_text
  std::string init_text;
};

/// Fixed random patch projection from a box crop to R^d. Never trained.
///
/// The crop is resampled to 32x32. Raw features: per-channel mean and standard
/// deviation over foreground pixels, 4x4 patch averages of foreground
/// occupancy, the log aspect ratio of the box and a constant 1. Colours are
/// centred on the background grey. The projection is a random partial isometry.
class RegionFeaturizer {
 public:
  static constexpr int kCrop = 32;
  static constexpr int kGrid = 4;
  static constexpr int kRawDim = 6 + kGrid * kGrid + 2;

  RegionFeaturizer() = default;
  RegionFeaturizer(int dim, std::uint64_t seed);

  static Eigen::VectorXd raw_features(const Image& image, const Box& box);
  Eigen::VectorXd operator()(const Image& image, const Box& box) const;
  /// One row per box.
  Eigen::MatrixXd features(const Image& image, std::span<const Box> boxes) const;

  const Eigen::MatrixXd& projection() const { return projection_; }

 private:
  Eigen::MatrixXd projection_;  // d x kRawDim
};

/// Every parameter of the detector that no training regime may touch.
struct FrozenModel {
  int dim = 64;
  std::uint64_t seed = 0;
  double tau = 1.25;
  RegionFeaturizer featurizer;
  Eigen::MatrixXd compose_map;  // d x d
  FunctionWordTable words;

  /// Derives featurizer, composition map and word table from one seed;
  /// temperature is 10 / sqrt(d).
  static FrozenModel create(int dim, std::uint64_t seed);
};

/// Mean of (prompt tokens ++ t_a ++ t_o), passed through the frozen map.
/// A null or zero-length prompt means t_a and t_o only.
Eigen::VectorXd compose_embedding(const TokenTable& table, const Eigen::MatrixXd& compose_map,
                                  const Composition& composition,
                                  const PromptSlot* prompt = nullptr);

struct RegionScore {
  Box box;
  Eigen::VectorXd logits;
  Eigen::VectorXd probabilities;
};

/// logits = features * class_embeddings^T / tau.
Eigen::MatrixXd region_logits(const Eigen::MatrixXd& region_features,
                              const Eigen::MatrixXd& class_embeddings, double tau);

inline double logistic(double z) { return 1.0 / (1.0 + std::exp(-z)); }

std::vector<RegionScore> score_regions(const Image& image, std::span<const Box> boxes,
                                       const Eigen::MatrixXd& class_embeddings,
                                       const RegionFeaturizer& featurizer, double tau);

/// The toy open-vocabulary detector.
struct Detector {
  FrozenModel frozen;
  TokenTable tokens;
  std::vector<PromptSlot> prompts;

  const PromptSlot* prompt_for(const Composition& c) const;
  /// One row per entry of `classes`.
  Eigen::MatrixXd class_embeddings(std::span<const Composition> classes) const;
  /// (|A| + |O|) * d plus sum of prompt token counts times d.
  Eigen::Index trainable_parameter_count() const;
};

Detector make_detector(const CompositionSpace& space, int dim, std::uint64_t model_seed,
                       std::uint64_t token_seed);

/// One detection per (region, class) whose probability reaches `threshold`.
/// Redundant by construction; class-agnostic NMS happens at evaluation.
std::vector<Detection> detections_from_scores(int image_id, std::span<const Box> boxes,
                                              const Eigen::MatrixXd& logits,
                                              std::span<const int> class_ids, double threshold);

std::vector<Detection> predict(const Detector& detector, const CompositionSpace& space,
                               const Image& image, int image_id,
                               std::span<const Composition> classes, double threshold);

/// Binary checkpoint; layout documented in docs/checkpoint-format.md. `tags`
/// land in the header verbatim (run provenance).
void save_checkpoint(const Detector& detector, const CompositionSpace& space,
                     const std::string& path, std::uint64_t manifest_hash = 0,
                     const std::map<std::string, std::string>& tags = {});

/// Throws LoadError for missing/corrupt files and ShapeError when the stored
/// space or array shapes disagree with `space`.
Detector load_checkpoint(const std::string& path, const CompositionSpace& space);

/// Named float arrays in checkpoint order, for diffing.
std::vector<std::pair<std::string, Eigen::MatrixXd>> named_arrays(const Detector& detector,
                                                                  const CompositionSpace& space);

}  // namespace czsl
