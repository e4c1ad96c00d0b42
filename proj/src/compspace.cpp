#include "czsl/compspace.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

#include "czsl/error.hpp"
#include "czsl/rng.hpp"

namespace czsl {
namespace {

void validate_names(const std::vector<std::string>& names, const char* kind) {
  if (names.empty()) throw ValidationError(std::string("no ") + kind + " names given");
  std::set<std::string> seen;
  for (const auto& name : names) {
    if (name.empty()) throw ValidationError(std::string("empty ") + kind + " name");
    for (unsigned char c : name) {
      if (std::isspace(c) || std::isupper(c)) {
        throw ValidationError(std::string(kind) + " name '" + name +
                              "' must be lowercase without whitespace");
      }
    }
    if (!seen.insert(name).second) {
      throw ValidationError(std::string("duplicate ") + kind + " name '" + name + "'");
    }
  }
}

}  // namespace

CompositionSpace CompositionSpace::build(std::vector<std::string> attributes,
                                         std::vector<std::string> objects) {
  validate_names(attributes, "attribute");
  validate_names(objects, "object");
  CompositionSpace space;
  for (std::size_t i = 0; i < attributes.size(); ++i) {
    space.attributes_.push_back({static_cast<int>(i), std::move(attributes[i])});
  }
  for (std::size_t i = 0; i < objects.size(); ++i) {
    space.objects_.push_back({static_cast<int>(i), std::move(objects[i])});
  }
  return space;
}

int CompositionSpace::id(const Composition& c) const {
  if (!contains(c)) throw ValidationError("composition outside the space");
  return c.attribute * num_objects() + c.object;
}

Composition CompositionSpace::compose(int attribute, int object) const {
  Composition c{attribute, object};
  if (!contains(c)) throw ValidationError("composition outside the space");
  return c;
}

Composition CompositionSpace::decompose(int id) const {
  if (id < 0 || id >= size()) {
    throw ValidationError("composition id " + std::to_string(id) + " out of range [0, " +
                          std::to_string(size()) + ")");
  }
  return {id / num_objects(), id % num_objects()};
}

bool CompositionSpace::contains(const Composition& c) const {
  return c.attribute >= 0 && c.attribute < num_attributes() && c.object >= 0 &&
         c.object < num_objects();
}

std::vector<Composition> CompositionSpace::compositions() const {
  std::vector<Composition> out;
  out.reserve(static_cast<std::size_t>(size()));
  for (int i = 0; i < size(); ++i) out.push_back(decompose(i));
  return out;
}

const std::string& CompositionSpace::attribute_name(int attribute) const {
  if (attribute < 0 || attribute >= num_attributes()) {
    throw ValidationError("attribute id out of range");
  }
  return attributes_[static_cast<std::size_t>(attribute)].name;
}

const std::string& CompositionSpace::object_name(int object) const {
  if (object < 0 || object >= num_objects()) throw ValidationError("object id out of range");
  return objects_[static_cast<std::size_t>(object)].name;
}

std::optional<int> CompositionSpace::find_attribute(std::string_view name) const {
  for (const auto& a : attributes_) {
    if (a.name == name) return a.id;
  }
  return std::nullopt;
}

std::optional<int> CompositionSpace::find_object(std::string_view name) const {
  for (const auto& o : objects_) {
    if (o.name == name) return o.id;
  }
  return std::nullopt;
}

std::string CompositionSpace::name(const Composition& c) const {
  return attribute_name(c.attribute) + " " + object_name(c.object);
}

Composition CompositionSpace::parse(std::string_view text) const {
  std::istringstream in{std::string(text)};
  std::string attribute, object, extra;
  if (!(in >> attribute >> object) || (in >> extra)) {
    throw ValidationError("expected 'attribute object', got '" + std::string(text) + "'");
  }
  const auto a = find_attribute(attribute);
  if (!a) throw ValidationError("unknown attribute '" + attribute + "'");
  const auto o = find_object(object);
  if (!o) throw ValidationError("unknown object '" + object + "'");
  return {*a, *o};
}

bool operator==(const CompositionSpace& lhs, const CompositionSpace& rhs) {
  auto names = [](const auto& items) {
    std::vector<std::string> out;
    for (const auto& item : items) out.push_back(item.name);
    return out;
  };
  return names(lhs.attributes_) == names(rhs.attributes_) &&
         names(lhs.objects_) == names(rhs.objects_);
}

const char* to_string(SplitRole role) {
  switch (role) {
    case SplitRole::pretrain:
      return "pretrain";
    case SplitRole::increment:
      return "increment";
    case SplitRole::unseen:
      return "unseen";
  }
  return "unknown";
}

SplitSpec SplitSpec::make(const CompositionSpace& space,
                          const std::vector<Composition>& pretrain,
                          const std::vector<Composition>& increment) {
  SplitSpec split;
  split.space_ = space;
  split.roles_.assign(static_cast<std::size_t>(space.size()), SplitRole::unseen);

  for (const auto& c : pretrain) {
    const int id = space.id(c);
    split.roles_[static_cast<std::size_t>(id)] = SplitRole::pretrain;
  }
  for (const auto& c : increment) {
    const int id = space.id(c);
    if (split.roles_[static_cast<std::size_t>(id)] == SplitRole::pretrain) {
      throw ValidationError("'" + space.name(c) + "' is in both the pretrain and increment sets");
    }
    split.roles_[static_cast<std::size_t>(id)] = SplitRole::increment;
  }

  std::vector<bool> attribute_covered(static_cast<std::size_t>(space.num_attributes()), false);
  std::vector<bool> object_covered(static_cast<std::size_t>(space.num_objects()), false);
  for (const auto& c : pretrain) {
    attribute_covered[static_cast<std::size_t>(c.attribute)] = true;
    object_covered[static_cast<std::size_t>(c.object)] = true;
  }
  for (int o = 0; o < space.num_objects(); ++o) {
    if (!object_covered[static_cast<std::size_t>(o)]) {
      throw CoverageError("object '" + space.object_name(o) + "' unseen");
    }
  }
  for (int a = 0; a < space.num_attributes(); ++a) {
    if (!attribute_covered[static_cast<std::size_t>(a)]) {
      throw CoverageError("attribute '" + space.attribute_name(a) + "' unseen");
    }
  }

  for (int id = 0; id < space.size(); ++id) {
    switch (split.roles_[static_cast<std::size_t>(id)]) {
      case SplitRole::pretrain:
        split.pretrain_.push_back(id);
        break;
      case SplitRole::increment:
        split.increment_.push_back(id);
        break;
      case SplitRole::unseen:
        split.unseen_.push_back(id);
        break;
    }
  }
  return split;
}

std::vector<int> SplitSpec::seen() const {
  std::vector<int> out;
  std::merge(pretrain_.begin(), pretrain_.end(), increment_.begin(), increment_.end(),
             std::back_inserter(out));
  return out;
}

SplitRole SplitSpec::role(int composition_id) const {
  if (composition_id < 0 || composition_id >= static_cast<int>(roles_.size())) {
    throw ValidationError("composition id out of range");
  }
  return roles_[static_cast<std::size_t>(composition_id)];
}

SplitSpec SplitSpec::with_increment(const std::vector<Composition>& increment) const {
  std::vector<Composition> pretrain;
  for (int id : pretrain_) pretrain.push_back(space_.decompose(id));
  return make(space_, pretrain, increment);
}

Manifest Manifest::from_json(const nlohmann::json& doc) {
  try {
    Manifest m;
    m.space = CompositionSpace::build(doc.at("attributes").get<std::vector<std::string>>(),
                                      doc.at("objects").get<std::vector<std::string>>());
    if (doc.contains("splits")) {
      const auto& splits = doc.at("splits");
      if (splits.contains("pretrain")) {
        for (const auto& entry : splits.at("pretrain")) {
          m.pretrain.push_back(m.space.parse(entry.get<std::string>()));
        }
      }
      if (splits.contains("increment")) {
        for (const auto& entry : splits.at("increment")) {
          m.increment.push_back(m.space.parse(entry.get<std::string>()));
        }
      }
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed manifest: ") + e.what());
  }
}

nlohmann::json Manifest::to_json() const {
  nlohmann::json doc;
  std::vector<std::string> attributes, objects, pre, inc;
  for (const auto& a : space.attributes()) attributes.push_back(a.name);
  for (const auto& o : space.objects()) objects.push_back(o.name);
  for (const auto& c : pretrain) pre.push_back(space.name(c));
  for (const auto& c : increment) inc.push_back(space.name(c));
  doc["attributes"] = attributes;
  doc["objects"] = objects;
  doc["splits"] = {{"pretrain", pre}, {"increment", inc}};
  return doc;
}

Manifest Manifest::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open manifest '" + path + "'");
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("manifest '" + path + "' is not valid JSON: " + e.what());
  }
  return from_json(doc);
}

void Manifest::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest '" + path + "'");
  out << to_json().dump(2) << '\n';
}

std::uint64_t Manifest::hash() const { return fnv1a64(to_json().dump()); }

Manifest default_manifest() {
  Manifest m;
  m.space = CompositionSpace::build({"blue", "red", "green", "purple", "brown", "yellow"},
                                    {"cube", "cylinder", "sphere"});
  for (const char* name : {"red cube", "blue cube", "green sphere", "purple sphere",
                           "brown cylinder", "yellow cylinder"}) {
    m.pretrain.push_back(m.space.parse(name));
  }
  return m;
}

}  // namespace czsl
