#include <doctest.h>

#include <algorithm>
#include <set>

#include "czsl/compspace.hpp"
#include "czsl/error.hpp"
#include "support.hpp"

using namespace czsl;

TEST_SUITE("compspace") {

TEST_CASE("six colours by three shapes give 18 compositions in id order") {
  const Manifest m = default_manifest();
  CHECK(m.space.size() == 18);
  const auto all = m.space.compositions();
  REQUIRE(all.size() == 18);
  for (int i = 0; i < 18; ++i) CHECK(m.space.id(all[static_cast<std::size_t>(i)]) == i);
}

TEST_CASE("singleton space") {
  const auto s = CompositionSpace::build({"red"}, {"cube"});
  CHECK(s.size() == 1);
  CHECK(s.name(0) == "red cube");
}

TEST_CASE("2x3 space enumerates the bijection") {
  const auto s = CompositionSpace::build({"a", "b"}, {"x", "y", "z"});
  CHECK(s.size() == 6);
  CHECK(s.id(s.compose(1, 2)) == 5);
  // attribute * |O| + object, written out.
  int expected = 0;
  for (int a = 0; a < 2; ++a) {
    for (int o = 0; o < 3; ++o) CHECK(s.id(Composition{a, o}) == expected++);
  }
}

TEST_CASE("decompose examples and round trip") {
  const auto& s = default_manifest().space;
  CHECK(s.decompose(0) == Composition{0, 0});
  CHECK(s.decompose(17) == Composition{5, 2});
  for (int id = 0; id < s.size(); ++id) CHECK(s.id(s.decompose(id)) == id);
  for (const auto& c : s.compositions()) CHECK(s.decompose(s.id(c)) == c);
  CHECK_THROWS_AS(s.decompose(18), ValidationError);
  CHECK_THROWS_AS(s.decompose(-1), ValidationError);
}

TEST_CASE("names are validated") {
  CHECK_THROWS_AS(CompositionSpace::build({}, {"cube"}), ValidationError);
  CHECK_THROWS_AS(CompositionSpace::build({"red", "red"}, {"cube"}), ValidationError);
  CHECK_THROWS_AS(CompositionSpace::build({"red"}, {""}), ValidationError);
  CHECK_THROWS_AS(CompositionSpace::build({"Red"}, {"cube"}), ValidationError);
}

TEST_CASE("parse and name are inverse") {
  const auto& s = default_manifest().space;
  for (const auto& c : s.compositions()) CHECK(s.parse(s.name(c)) == c);
  CHECK_THROWS_AS(s.parse("pink cube"), ValidationError);
  CHECK_THROWS_AS(s.parse("red"), ValidationError);
}

TEST_CASE("standard pretrain split leaves 12 unseen") {
  const Manifest m = default_manifest();
  const SplitSpec split = m.split();
  CHECK(split.pretrain().size() == 6);
  CHECK(split.increment().empty());
  CHECK(split.unseen().size() == 12);
}

TEST_CASE("full pretrain leaves nothing unseen") {
  const auto& s = default_manifest().space;
  const SplitSpec split = SplitSpec::make(s, s.compositions(), {});
  CHECK(split.unseen().empty());
}

TEST_CASE("missing cylinders is a coverage error naming the object") {
  const auto& s = default_manifest().space;
  std::vector<Composition> pretrain;
  for (const auto& c : s.compositions()) {
    if (s.object_name(c.object) != "cylinder") pretrain.push_back(c);
  }
  try {
    SplitSpec::make(s, pretrain, {});
    FAIL("expected a coverage error");
  } catch (const CoverageError& e) {
    CHECK(std::string(e.what()) == "object 'cylinder' unseen");
  }
}

TEST_CASE("overlap between pretrain and increment is rejected") {
  const Manifest m = default_manifest();
  CHECK_THROWS_AS(SplitSpec::make(m.space, m.pretrain, {m.pretrain[0]}), ValidationError);
}

TEST_CASE("splits partition the space (random increments)") {
  const Manifest m = default_manifest();
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Composition> increment;
    for (const auto& c : m.space.compositions()) {
      const bool in_pretrain = std::find(m.pretrain.begin(), m.pretrain.end(), c) != m.pretrain.end();
      if (!in_pretrain && rng.uniform() < 0.3) increment.push_back(c);
    }
    const SplitSpec split = SplitSpec::make(m.space, m.pretrain, increment);
    std::multiset<int> all;
    for (int id : split.pretrain()) all.insert(id);
    for (int id : split.increment()) all.insert(id);
    for (int id : split.unseen()) all.insert(id);
    CHECK(all.size() == 18);
    CHECK(std::set<int>(all.begin(), all.end()).size() == 18);
    for (int id : split.pretrain()) CHECK(split.role(id) == SplitRole::pretrain);
    for (int id : split.increment()) CHECK(split.role(id) == SplitRole::increment);
    for (int id : split.unseen()) CHECK_FALSE(split.is_seen(id));
    // Coverage by set scan.
    std::set<int> attrs, objs;
    for (int id : split.pretrain()) {
      attrs.insert(m.space.decompose(id).attribute);
      objs.insert(m.space.decompose(id).object);
    }
    CHECK(static_cast<int>(attrs.size()) == m.space.num_attributes());
    CHECK(static_cast<int>(objs.size()) == m.space.num_objects());
  }
}

TEST_CASE("manifest round trips through JSON and disk") {
  testing::TempDir dir("manifest");
  Manifest m = default_manifest();
  m.increment = {m.space.parse("green cylinder"), m.space.parse("green cube")};
  m.save(dir.str("m.json"));
  const Manifest back = Manifest::load(dir.str("m.json"));
  CHECK(back.space == m.space);
  CHECK(back.pretrain == m.pretrain);
  CHECK(back.increment == m.increment);
  CHECK(back.hash() == m.hash());
  CHECK(back.to_json().at("splits").at("increment")[0] == "green cylinder");
  CHECK_THROWS_AS(Manifest::load(dir.str("missing.json")), ValidationError);
}

}  // TEST_SUITE
