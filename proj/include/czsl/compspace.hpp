#pragma once

#include <compare>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace czsl {

struct Attribute {
  int id = 0;
  std::string name;
};

struct ObjectClass {
  int id = 0;
  std::string name;
};

/// An (attribute, object) pair, identified by primitive ids.
struct Composition {
  int attribute = 0;
  int object = 0;

  friend auto operator<=>(const Composition&, const Composition&) = default;
};

/// The full space C = A x O. Immutable once built.
///
/// Composition ids are `attribute * |O| + object`.
class CompositionSpace {
 public:
  CompositionSpace() = default;

  /// Throws ValidationError on empty lists or empty/duplicate/non-lowercase names.
  static CompositionSpace build(std::vector<std::string> attributes,
                                std::vector<std::string> objects);

  int num_attributes() const { return static_cast<int>(attributes_.size()); }
  int num_objects() const { return static_cast<int>(objects_.size()); }
  int size() const { return num_attributes() * num_objects(); }

  const std::vector<Attribute>& attributes() const { return attributes_; }
  const std::vector<ObjectClass>& objects() const { return objects_; }

  int id(const Composition& c) const;
  Composition compose(int attribute, int object) const;
  /// Inverse of id(); throws ValidationError when out of range.
  Composition decompose(int id) const;
  bool contains(const Composition& c) const;

  /// All compositions in canonical id order.
  std::vector<Composition> compositions() const;

  const std::string& attribute_name(int attribute) const;
  const std::string& object_name(int object) const;
  std::optional<int> find_attribute(std::string_view name) const;
  std::optional<int> find_object(std::string_view name) const;

  /// "attribute object", e.g. "blue cube".
  std::string name(const Composition& c) const;
  std::string name(int id) const { return name(decompose(id)); }
  /// Parses "attribute object"; throws ValidationError for unknown words.
  Composition parse(std::string_view text) const;

  friend bool operator==(const CompositionSpace&, const CompositionSpace&);

 private:
  std::vector<Attribute> attributes_;
  std::vector<ObjectClass> objects_;
};

enum class SplitRole { pretrain, increment, unseen };

const char* to_string(SplitRole role);

/// Partition of the space into pretrain C_p, increment C_i and unseen C_u.
///
/// Sets are kept as sorted composition ids. C_p must cover every attribute
/// and every object of the space.
class SplitSpec {
 public:
  SplitSpec() = default;

  /// Throws ValidationError on out-of-space members or C_p/C_i overlap, and
  /// CoverageError naming the first primitive C_p fails to cover.
  static SplitSpec make(const CompositionSpace& space,
                        const std::vector<Composition>& pretrain,
                        const std::vector<Composition>& increment);

  const CompositionSpace& space() const { return space_; }
  const std::vector<int>& pretrain() const { return pretrain_; }
  const std::vector<int>& increment() const { return increment_; }
  const std::vector<int>& unseen() const { return unseen_; }
  /// C_p union C_i, sorted.
  std::vector<int> seen() const;

  SplitRole role(int composition_id) const;
  bool is_seen(int composition_id) const { return role(composition_id) != SplitRole::unseen; }

  /// Same C_p, new C_i.
  SplitSpec with_increment(const std::vector<Composition>& increment) const;

 private:
  CompositionSpace space_;
  std::vector<int> pretrain_;
  std::vector<int> increment_;
  std::vector<int> unseen_;
  std::vector<SplitRole> roles_;
};

/// Space plus named splits, as stored in the manifest JSON document.
struct Manifest {
  CompositionSpace space;
  std::vector<Composition> pretrain;
  std::vector<Composition> increment;

  SplitSpec split() const { return SplitSpec::make(space, pretrain, increment); }

  static Manifest from_json(const nlohmann::json& doc);
  nlohmann::json to_json() const;
  static Manifest load(const std::string& path);
  void save(const std::string& path) const;
  /// Fingerprint of the canonical JSON form.
  std::uint64_t hash() const;
};

/// The six-colour, three-shape space with the standard pretrain split.
Manifest default_manifest();

}  // namespace czsl
