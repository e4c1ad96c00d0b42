#include "czsl/scenegen.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "czsl/error.hpp"
#include "czsl/rng.hpp"

namespace czsl {
namespace {

struct NamedColor {
  std::string_view name;
  Rgb rgb;
};

constexpr std::array<NamedColor, 6> kPalette{{
    {"blue", {42, 75, 215}},
    {"red", {173, 35, 35}},
    {"green", {29, 105, 20}},
    {"purple", {129, 38, 192}},
    {"brown", {129, 74, 25}},
    {"yellow", {255, 238, 51}},
}};

std::uint8_t jitter(std::uint8_t value, int amount, Rng& rng) {
  const auto shifted = static_cast<int>(value) + static_cast<int>(rng.uniform_int(-amount, amount));
  return static_cast<std::uint8_t>(std::clamp(shifted, 0, 255));
}

// Whether pixel (x, y) is covered by a shape of the given kind centred at (cx, cy).
bool covers(ShapeKind kind, double cx, double cy, int size, int x, int y) {
  const double dx = x + 0.5 - cx;
  const double dy = y + 0.5 - cy;
  const double half = size / 2.0;
  switch (kind) {
    case ShapeKind::square:
      return std::abs(dx) < half && std::abs(dy) < half;
    case ShapeKind::circle:
      return dx * dx + dy * dy < half * half;
    case ShapeKind::capsule: {
      const double radius = std::round(0.6 * size) / 2.0;
      const double straight = half - radius;
      if (std::abs(dx) >= radius) return false;
      if (std::abs(dy) <= straight) return true;
      const double ey = std::abs(dy) - straight;
      return dx * dx + ey * ey < radius * radius;
    }
  }
  return false;
}

double shape_width(ShapeKind kind, int size) {
  return kind == ShapeKind::capsule ? std::round(0.6 * size) : size;
}

}  // namespace

Rgb palette_color(std::string_view attribute) {
  for (const auto& entry : kPalette) {
    if (entry.name == attribute) return entry.rgb;
  }
  throw ValidationError("attribute '" + std::string(attribute) + "' has no palette colour");
}

ShapeKind shape_for(std::string_view object) {
  if (object == "cube") return ShapeKind::square;
  if (object == "sphere") return ShapeKind::circle;
  if (object == "cylinder") return ShapeKind::capsule;
  throw ValidationError("object '" + std::string(object) + "' has no drawable shape");
}

Scene render_scene(const CompositionSpace& space, const std::vector<Composition>& compositions,
                   const RenderOptions& options, std::uint64_t seed) {
  if (options.width < 64 || options.height < 64) {
    throw ValidationError("image size must be at least 64x64");
  }
  if (options.min_size < 4 || options.max_size < options.min_size) {
    throw ValidationError("invalid shape size range");
  }
  Rng rng(seed);
  Scene scene;
  scene.seed = seed;
  scene.image = Image(options.width, options.height, kBackground);
  // Per-pixel owner (object index + 1) used to keep shapes from touching.
  std::vector<int> owner(static_cast<std::size_t>(options.width * options.height), 0);

  for (std::size_t k = 0; k < compositions.size(); ++k) {
    const Composition& comp = compositions[k];
    const ShapeKind kind = shape_for(space.object_name(comp.object));
    const Rgb base = palette_color(space.attribute_name(comp.attribute));
    const Rgb color{jitter(base.r, options.color_jitter, rng),
                    jitter(base.g, options.color_jitter, rng),
                    jitter(base.b, options.color_jitter, rng)};

    bool placed = false;
    for (int attempt = 0; attempt < options.placement_retries && !placed; ++attempt) {
      const int size = static_cast<int>(rng.uniform_int(options.min_size, options.max_size));
      const double half_w = shape_width(kind, size) / 2.0 + 1.0;
      const double half_h = size / 2.0 + 1.0;
      const double cx = rng.uniform(half_w, options.width - half_w);
      const double cy = rng.uniform(half_h, options.height - half_h);

      const int x0 = std::max(0, static_cast<int>(std::floor(cx - half_w)));
      const int x1 = std::min(options.width - 1, static_cast<int>(std::ceil(cx + half_w)));
      const int y0 = std::max(0, static_cast<int>(std::floor(cy - half_h)));
      const int y1 = std::min(options.height - 1, static_cast<int>(std::ceil(cy + half_h)));

      std::vector<std::pair<int, int>> pixels;
      int min_x = options.width, min_y = options.height, max_x = -1, max_y = -1;
      bool touches = false;
      for (int y = y0; y <= y1 && !touches; ++y) {
        for (int x = x0; x <= x1; ++x) {
          if (!covers(kind, cx, cy, size, x, y)) continue;
          for (int ny = std::max(0, y - 1); ny <= std::min(options.height - 1, y + 1); ++ny) {
            for (int nx = std::max(0, x - 1); nx <= std::min(options.width - 1, x + 1); ++nx) {
              if (owner[static_cast<std::size_t>(ny * options.width + nx)] != 0) touches = true;
            }
          }
          pixels.emplace_back(x, y);
          min_x = std::min(min_x, x);
          max_x = std::max(max_x, x);
          min_y = std::min(min_y, y);
          max_y = std::max(max_y, y);
        }
      }
      if (touches || pixels.empty()) continue;

      const Box box{static_cast<double>(min_x), static_cast<double>(min_y),
                    static_cast<double>(max_x - min_x + 1), static_cast<double>(max_y - min_y + 1)};
      const bool overlaps = std::any_of(scene.objects.begin(), scene.objects.end(),
                                        [&](const SceneObject& o) {
                                          return iou(o.box, box) > options.overlap_cap;
                                        });
      if (overlaps) continue;

      for (const auto& [x, y] : pixels) {
        owner[static_cast<std::size_t>(y * options.width + x)] = static_cast<int>(k) + 1;
        scene.image.set(x, y, color);
      }
      scene.objects.push_back({comp, box, cx, cy, size, color});
      placed = true;
    }
    if (!placed) {
      throw PlacementError("could not place '" + space.name(comp) + "' after " +
                               std::to_string(options.placement_retries) + " attempts",
                           seed);
    }
  }
  return scene;
}

const char* to_string(DatasetRole role) { return role == DatasetRole::train ? "train" : "test"; }

std::size_t Dataset::num_instances() const {
  std::size_t n = 0;
  for (const auto& s : scenes) n += s.objects.size();
  return n;
}

std::vector<int> Dataset::histogram(const CompositionSpace& space) const {
  std::vector<int> counts(static_cast<std::size_t>(space.size()), 0);
  for (const auto& s : scenes) {
    for (const auto& o : s.objects) ++counts[static_cast<std::size_t>(space.id(o.composition))];
  }
  return counts;
}

Dataset generate_dataset(const CompositionSpace& space, const DatasetSpec& spec) {
  if (spec.shots < 1) throw ValidationError("shots per composition must be at least 1");
  if (spec.compositions.empty()) throw ValidationError("dataset has no compositions");
  if (spec.max_objects < 1) throw ValidationError("max_objects must be at least 1");
  for (const auto& c : spec.compositions) {
    if (!space.contains(c)) throw ValidationError("dataset composition outside the space");
  }

  std::vector<Composition> instances;
  for (const auto& c : spec.compositions) {
    for (int s = 0; s < spec.shots; ++s) instances.push_back(c);
  }
  Rng rng(spec.seed);
  rng.shuffle(instances);

  Dataset dataset;
  dataset.spec = spec;
  std::size_t next = 0;
  while (next < instances.size()) {
    const auto remaining = static_cast<std::int64_t>(instances.size() - next);
    const auto count = std::min<std::int64_t>(remaining, rng.uniform_int(1, spec.max_objects));
    std::vector<Composition> chunk(instances.begin() + static_cast<std::ptrdiff_t>(next),
                                   instances.begin() + static_cast<std::ptrdiff_t>(next) + count);
    next += static_cast<std::size_t>(count);
    const int index = static_cast<int>(dataset.scenes.size());
    Scene scene = render_scene(space, chunk, spec.render, spec.seed ^ static_cast<std::uint64_t>(index));
    scene.id = index;
    dataset.scenes.push_back(std::move(scene));
  }
  return dataset;
}

namespace {

std::string image_file_name(int id) {
  std::ostringstream name;
  name << "images/" << std::setw(6) << std::setfill('0') << id << ".ppm";
  return name.str();
}

}  // namespace

nlohmann::json coco_annotations(const Dataset& dataset, const CompositionSpace& space) {
  nlohmann::json images = nlohmann::json::array();
  nlohmann::json annotations = nlohmann::json::array();
  nlohmann::json categories = nlohmann::json::array();
  int annotation_id = 1;
  for (const auto& scene : dataset.scenes) {
    images.push_back({{"id", scene.id},
                      {"file_name", image_file_name(scene.id)},
                      {"width", scene.image.width()},
                      {"height", scene.image.height()},
                      {"seed", scene.seed}});
    for (const auto& o : scene.objects) {
      annotations.push_back({{"id", annotation_id++},
                             {"image_id", scene.id},
                             {"bbox", {o.box.x, o.box.y, o.box.w, o.box.h}},
                             {"area", o.box.area()},
                             {"iscrowd", 0},
                             {"category_id", space.id(o.composition)},
                             {"draw",
                              {{"center", {o.center_x, o.center_y}},
                               {"size", o.size},
                               {"color", {o.color.r, o.color.g, o.color.b}}}}});
    }
  }
  for (const auto& c : space.compositions()) {
    categories.push_back({{"id", space.id(c)},
                          {"name", space.name(c)},
                          {"attribute_id", c.attribute},
                          {"object_id", c.object}});
  }
  std::vector<std::string> names;
  for (const auto& c : dataset.spec.compositions) names.push_back(space.name(c));
  return {{"info",
           {{"role", to_string(dataset.spec.role)},
            {"shots", dataset.spec.shots},
            {"seed", dataset.spec.seed},
            {"max_objects", dataset.spec.max_objects},
            {"overlap_cap", dataset.spec.render.overlap_cap},
            {"compositions", names}}},
          {"images", images},
          {"annotations", annotations},
          {"categories", categories}};
}

void write_dataset(const Dataset& dataset, const Manifest& manifest, const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(dir) / "images", ec);
  if (ec) throw IoError("cannot create dataset directory '" + dir + "': " + ec.message());
  for (const auto& scene : dataset.scenes) {
    write_ppm(scene.image, (fs::path(dir) / image_file_name(scene.id)).string());
  }
  std::ofstream out(fs::path(dir) / "annotations.json");
  if (!out) throw IoError("cannot write annotations in '" + dir + "'");
  out << coco_annotations(dataset, manifest.space).dump(1) << '\n';
  manifest.save((fs::path(dir) / "manifest.json").string());
}

Dataset load_dataset(const std::string& dir, const CompositionSpace& space) {
  namespace fs = std::filesystem;
  std::ifstream in(fs::path(dir) / "annotations.json");
  if (!in) throw IoError("no annotations.json in '" + dir + "'");
  nlohmann::json doc;
  try {
    in >> doc;
    Dataset dataset;
    const auto& info = doc.at("info");
    dataset.spec.role = info.at("role") == "train" ? DatasetRole::train : DatasetRole::test;
    dataset.spec.shots = info.at("shots");
    dataset.spec.seed = info.at("seed");
    dataset.spec.max_objects = info.at("max_objects");
    dataset.spec.render.overlap_cap = info.at("overlap_cap");
    for (const auto& name : info.at("compositions")) {
      dataset.spec.compositions.push_back(space.parse(name.get<std::string>()));
    }
    for (const auto& img : doc.at("images")) {
      Scene scene;
      scene.id = img.at("id");
      scene.seed = img.at("seed");
      scene.image = read_ppm((fs::path(dir) / img.at("file_name").get<std::string>()).string());
      dataset.spec.render.width = scene.image.width();
      dataset.spec.render.height = scene.image.height();
      dataset.scenes.push_back(std::move(scene));
    }
    std::sort(dataset.scenes.begin(), dataset.scenes.end(),
              [](const Scene& a, const Scene& b) { return a.id < b.id; });
    for (const auto& ann : doc.at("annotations")) {
      const int image_id = ann.at("image_id");
      auto it = std::lower_bound(dataset.scenes.begin(), dataset.scenes.end(), image_id,
                                 [](const Scene& s, int id) { return s.id < id; });
      if (it == dataset.scenes.end() || it->id != image_id) {
        throw ValidationError("annotation references unknown image " + std::to_string(image_id));
      }
      SceneObject o;
      o.composition = space.decompose(ann.at("category_id"));
      const auto& bbox = ann.at("bbox");
      o.box = {bbox[0], bbox[1], bbox[2], bbox[3]};
      if (ann.contains("draw")) {
        const auto& draw = ann.at("draw");
        o.center_x = draw.at("center")[0];
        o.center_y = draw.at("center")[1];
        o.size = draw.at("size");
        o.color = {draw.at("color")[0], draw.at("color")[1], draw.at("color")[2]};
      }
      it->objects.push_back(o);
    }
    return dataset;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("malformed annotations in '" + dir + "': " + e.what());
  }
}

std::vector<Box> blob_propose(const Image& image, const ProposerOptions& options) {
  const int w = image.width();
  const int h = image.height();
  std::vector<std::uint8_t> foreground(static_cast<std::size_t>(w * h), 0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const Rgb c = image.at(x, y);
      const int diff = std::max({std::abs(c.r - options.background.r),
                                 std::abs(c.g - options.background.g),
                                 std::abs(c.b - options.background.b)});
      foreground[static_cast<std::size_t>(y * w + x)] = diff > options.threshold ? 1 : 0;
    }
  }

  struct Component {
    Box box;
    int area;
  };
  std::vector<Component> components;
  std::vector<int> stack;
  for (int start = 0; start < w * h; ++start) {
    if (foreground[static_cast<std::size_t>(start)] != 1) continue;
    foreground[static_cast<std::size_t>(start)] = 2;
    stack.assign(1, start);
    int area = 0, min_x = w, min_y = h, max_x = -1, max_y = -1;
    while (!stack.empty()) {
      const int p = stack.back();
      stack.pop_back();
      const int px = p % w, py = p / w;
      ++area;
      min_x = std::min(min_x, px);
      max_x = std::max(max_x, px);
      min_y = std::min(min_y, py);
      max_y = std::max(max_y, py);
      for (int ny = std::max(0, py - 1); ny <= std::min(h - 1, py + 1); ++ny) {
        for (int nx = std::max(0, px - 1); nx <= std::min(w - 1, px + 1); ++nx) {
          auto& f = foreground[static_cast<std::size_t>(ny * w + nx)];
          if (f == 1) {
            f = 2;
            stack.push_back(ny * w + nx);
          }
        }
      }
    }
    if (area < options.min_area) continue;
    components.push_back({{static_cast<double>(min_x), static_cast<double>(min_y),
                           static_cast<double>(max_x - min_x + 1),
                           static_cast<double>(max_y - min_y + 1)},
                          area});
  }
  std::sort(components.begin(), components.end(), [](const Component& a, const Component& b) {
    if (a.area != b.area) return a.area > b.area;
    if (a.box.x != b.box.x) return a.box.x < b.box.x;
    return a.box.y < b.box.y;
  });
  std::vector<Box> boxes;
  boxes.reserve(components.size());
  for (const auto& c : components) boxes.push_back(c.box);
  return boxes;
}

}  // namespace czsl
