#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "czsl/box.hpp"
#include "czsl/compspace.hpp"
#include "czsl/image.hpp"

namespace czsl {

inline constexpr Rgb kBackground{128, 128, 128};

/// Canonical RGB for the named palette; throws ValidationError for other names.
Rgb palette_color(std::string_view attribute);

enum class ShapeKind { square, circle, capsule };

/// cube -> square, sphere -> circle, cylinder -> vertical capsule.
ShapeKind shape_for(std::string_view object);

struct SceneObject {
  Composition composition;
  Box box;
  double center_x = 0.0;
  double center_y = 0.0;
  int size = 0;  // height of the shape in pixels
  Rgb color;
};

struct Scene {
  int id = 0;
  Image image;
  std::vector<SceneObject> objects;
  std::uint64_t seed = 0;
};

struct RenderOptions {
  int width = 128;
  int height = 128;
  double overlap_cap = 0.1;
  int min_size = 22;
  int max_size = 36;
  int color_jitter = 10;
  int placement_retries = 200;
};

/// Draws one scene holding exactly `compositions`, deterministically from `seed`.
///
/// Throws PlacementError carrying the seed if an object cannot be placed
/// without exceeding the overlap cap or touching another object.
Scene render_scene(const CompositionSpace& space, const std::vector<Composition>& compositions,
                   const RenderOptions& options, std::uint64_t seed);

enum class DatasetRole { train, test };

const char* to_string(DatasetRole role);

struct DatasetSpec {
  DatasetRole role = DatasetRole::train;
  int shots = 10;
  std::vector<Composition> compositions;
  std::uint64_t seed = 0;
  int max_objects = 4;
  RenderOptions render;
};

struct Dataset {
  DatasetSpec spec;
  std::vector<Scene> scenes;

  std::size_t num_instances() const;
  /// Instance count per composition id over the whole space.
  std::vector<int> histogram(const CompositionSpace& space) const;
};

/// Exactly `shots` instances of every listed composition, packed into scenes
/// of 1..max_objects objects. Scene i is rendered from seed ^ i.
Dataset generate_dataset(const CompositionSpace& space, const DatasetSpec& spec);

/// Writes images/NNNNNN.ppm, annotations.json (COCO layout) and manifest.json.
void write_dataset(const Dataset& dataset, const Manifest& manifest, const std::string& dir);
Dataset load_dataset(const std::string& dir, const CompositionSpace& space);

nlohmann::json coco_annotations(const Dataset& dataset, const CompositionSpace& space);

struct ProposerOptions {
  Rgb background = kBackground;
  int threshold = 30;  // max per-channel difference that still counts as background
  int min_area = 20;
};

/// Class-agnostic boxes from 8-connected foreground components, ordered by
/// component pixel count descending, then box x, then box y.
std::vector<Box> blob_propose(const Image& image, const ProposerOptions& options = {});

}  // namespace czsl
