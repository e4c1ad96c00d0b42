#include <doctest.h>

#include <string>
#include <vector>

#include "czsl/error.hpp"
#include "czsl/incrementer.hpp"
#include "czsl/log.hpp"
#include "support.hpp"

using namespace czsl;
using testing::bitwise_equal;

namespace {

ConfusionMatrix identity_matrix(int n, int count = 10) {
  ConfusionMatrix m;
  m.counts = Eigen::MatrixXi::Zero(n, n + 1);
  for (int i = 0; i < n; ++i) m.counts(i, i) = count;
  return m;
}

struct CapturedWarnings {
  CapturedWarnings() : previous(set_warning_sink([this](const std::string& m) { messages.push_back(m); })) {}
  ~CapturedWarnings() { set_warning_sink(previous); }
  std::vector<std::string> messages;
  WarningSink previous;
};

struct SmallData {
  Manifest manifest = default_manifest();
  Dataset pretrain, increment, test;

  explicit SmallData(const std::vector<Composition>& inc) {
    DatasetSpec p;
    p.compositions = manifest.pretrain;
    p.shots = 3;
    p.seed = 1;
    pretrain = generate_dataset(manifest.space, p);
    DatasetSpec i = p;
    i.compositions = inc;
    i.seed = 2;
    increment = generate_dataset(manifest.space, i);
    DatasetSpec t;
    t.role = DatasetRole::test;
    t.compositions = manifest.space.compositions();
    t.shots = 3;
    t.seed = 3;
    test = generate_dataset(manifest.space, t);
  }
};

IncrementPlan green_plan(const CompositionSpace& s, TuningRegime regime) {
  IncrementPlan plan;
  plan.pairs = {{s.parse("green cylinder"), s.parse("green cube"), 0.39}};
  plan.increment = {s.parse("green cube"), s.parse("green cylinder")};
  apply_regime(plan, regime, s);
  return plan;
}

}  // namespace

TEST_SUITE("incrementer") {

TEST_CASE("identity confusion yields no pairs and no plan") {
  const Manifest m = default_manifest();
  CHECK(mine_confusions(identity_matrix(18), m.space, 0.2).empty());
  CHECK_THROWS_AS(plan_increment(identity_matrix(18), m.split(), PlanOptions{}), ValidationError);
  CHECK_THROWS_AS(mine_confusions(identity_matrix(18), m.space, 1.0), ValidationError);
  CHECK_THROWS_AS(mine_confusions(identity_matrix(4), m.space, 0.2), ShapeError);
}

TEST_CASE("a single confused cell above threshold is mined with its rate") {
  const auto& s = default_manifest().space;
  ConfusionMatrix m = identity_matrix(18, 0);
  const int cyl = s.id(s.parse("green cylinder"));
  const int cube = s.id(s.parse("green cube"));
  m.counts(cyl, cyl) = 61;
  m.counts(cyl, cube) = 39;
  const auto pairs = mine_confusions(m, s, 0.2);
  REQUIRE(pairs.size() == 1);
  CHECK(pairs[0].underperformer == s.parse("green cylinder"));
  CHECK(pairs[0].distractor == s.parse("green cube"));
  CHECK(pairs[0].rate == doctest::Approx(0.39));
  CHECK(mine_confusions(m, s, 0.4).empty());
}

TEST_CASE("a fully confused row gives rate 1; misses never form pairs") {
  const auto& s = default_manifest().space;
  ConfusionMatrix m = identity_matrix(18, 5);
  const int brown = s.id(s.parse("brown sphere"));
  const int yellow = s.id(s.parse("yellow sphere"));
  m.counts(brown, brown) = 0;
  m.counts(brown, yellow) = 20;
  m.counts(0, 0) = 0;
  m.counts(0, m.missed_column()) = 9;
  const auto pairs = mine_confusions(m, s, 0.2);
  REQUIRE(pairs.size() == 1);
  CHECK(pairs[0].underperformer == s.parse("brown sphere"));
  CHECK(pairs[0].distractor == s.parse("yellow sphere"));
  CHECK(pairs[0].rate == 1.0);
}

TEST_CASE("mining is invariant to scaling a row's counts") {
  const auto& s = default_manifest().space;
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    ConfusionMatrix m;
    m.counts = Eigen::MatrixXi::Zero(18, 19);
    for (Eigen::Index i = 0; i < m.counts.size(); ++i) m.counts(i) = static_cast<int>(rng.uniform_int(0, 6));
    ConfusionMatrix scaled = m;
    const auto row = rng.uniform_int(0, 17);
    scaled.counts.row(row) *= static_cast<int>(rng.uniform_int(2, 7));
    const auto a = mine_confusions(m, s, 0.15);
    const auto b = mine_confusions(scaled, s, 0.15);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].underperformer == b[i].underperformer);
      CHECK(a[i].distractor == b[i].distractor);
      CHECK(a[i].rate == doctest::Approx(b[i].rate));
    }
    for (std::size_t i = 1; i < a.size(); ++i) CHECK(a[i - 1].rate >= a[i].rate);
  }
}

TEST_CASE("increment set: deduplicated, sorted, pretrain members dropped with a warning") {
  const Manifest m = default_manifest();
  const auto& s = m.space;
  const SplitSpec split = m.split();
  const std::vector<ConfusedPair> pairs = {{s.parse("green cylinder"), s.parse("green cube"), 0.4},
                                           {s.parse("green cube"), s.parse("green cylinder"), 0.3}};
  const auto inc = build_increment_set(pairs, split);
  CHECK(inc == std::vector<Composition>{s.parse("green cube"), s.parse("green cylinder")});
  CHECK_THROWS_AS(build_increment_set(std::vector<ConfusedPair>{}, split), ValidationError);

  CapturedWarnings w;
  const Composition pretrained = m.pretrain.front();
  const Composition other = s.parse(s.name(pretrained) == "red sphere" ? "blue sphere" : "red sphere");
  const std::vector<ConfusedPair> mixed = {{other, pretrained, 0.5}};
  const auto filtered = build_increment_set(mixed, split);
  CHECK(std::find(filtered.begin(), filtered.end(), pretrained) == filtered.end());
  CHECK(w.messages.size() == 1);
}

TEST_CASE("contrastive prompt texts and token rows") {
  const auto& s = default_manifest().space;
  const ConfusedPair p{s.parse("green cylinder"), s.parse("green cube"), 0.39};
  CHECK(build_contrastive_prompt(p, s, PromptComponents::both) == "is not green cube but is green cylinder");
  CHECK(build_contrastive_prompt(p, s, PromptComponents::negation) == "is not green cube");
  CHECK(build_contrastive_prompt(p, s, PromptComponents::affirmation) == "is green cylinder");
  CHECK_THROWS_AS(build_contrastive_prompt(p, s, PromptComponents::none), ValidationError);

  const Detector d = make_detector(s, 16, 7, 1);
  const PromptSlot slot = make_prompt_slot(p.underperformer, build_contrastive_prompt(p, s, PromptComponents::both),
                                           s, d.tokens, d.frozen.words);
  REQUIRE(slot.tokens.rows() == 8);
  CHECK(bitwise_equal(slot.tokens.row(0), d.frozen.words.at("is").transpose()));
  CHECK(bitwise_equal(slot.tokens.row(2), d.tokens.attributes().row(*s.find_attribute("green"))));
  CHECK(bitwise_equal(slot.tokens.row(7), d.tokens.objects().row(*s.find_object("cylinder"))));
  CHECK_THROWS_AS(make_prompt_slot(p.underperformer, "is maybe green", s, d.tokens, d.frozen.words),
                  ValidationError);
}

TEST_CASE("regime masks") {
  const auto& s = default_manifest().space;
  const std::vector<Composition> inc = {s.parse("green cube"), s.parse("green cylinder")};
  const Detector d = make_detector(s, 16, 7, 1);

  const TunableMask prompt = TuningRegime{TuningKind::prompt_only, PromptComponents::both}.mask(s, inc);
  CHECK(prompt.prompts);
  CHECK(prompt.tunable_count(d) == 0);  // no prompts attached yet

  const TunableMask subset = TuningRegime{TuningKind::subset_tokens, PromptComponents::none}.mask(s, inc);
  CHECK_FALSE(subset.prompts);
  for (int a = 0; a < s.num_attributes(); ++a) {
    CHECK(subset.attributes[static_cast<std::size_t>(a)] == (s.attribute_name(a) == "green"));
  }
  for (int o = 0; o < s.num_objects(); ++o) {
    const bool expected = s.object_name(o) == "cube" || s.object_name(o) == "cylinder";
    CHECK(subset.objects[static_cast<std::size_t>(o)] == expected);
  }
  CHECK(subset.tunable_count(d) == 3 * 16);

  const TunableMask all = TuningRegime{TuningKind::all_tokens, PromptComponents::none}.mask(s, inc);
  CHECK(all.tunable_count(d) == 9 * 16);
  CHECK(parse_tuning_kind(to_string(TuningKind::subset_tokens)) == TuningKind::subset_tokens);
  CHECK(parse_prompt_components(to_string(PromptComponents::negation)) == PromptComponents::negation);
}

TEST_CASE("plan keeps one distractor per underperformer, skips pretrain rows, caps pairs") {
  const Manifest m = default_manifest();
  const auto& s = m.space;
  ConfusionMatrix cm = identity_matrix(18, 10);
  const auto set = [&](const char* g, const char* p, int n) { cm.counts(s.id(s.parse(g)), s.id(s.parse(p))) = n; };
  set("green cylinder", "green cube", 8);
  set("green cylinder", "blue cylinder", 5);
  set("brown sphere", "yellow sphere", 6);
  set("purple cube", "brown cube", 4);
  set(s.name(m.pretrain.front()).c_str(), "brown sphere", 20);  // a pretrain row, ignored

  PlanOptions opts;
  opts.max_pairs = 2;
  const IncrementPlan plan = plan_increment(cm, m.split(), opts);
  REQUIRE(plan.pairs.size() == 2);
  // Rates: brown sphere 6/16, green cylinder 8/23 (its second distractor dropped), purple cube capped out.
  CHECK(plan.pairs[0].underperformer == s.parse("brown sphere"));
  CHECK(plan.pairs[1].underperformer == s.parse("green cylinder"));
  CHECK(plan.pairs[1].distractor == s.parse("green cube"));
  CHECK(plan.prompts.size() == 2);
  CHECK(plan.prompts[1].text == "is not green cube but is green cylinder");

  const IncrementPlan back = IncrementPlan::from_json(plan.to_json(s), s);
  CHECK(back.pairs == plan.pairs);
  CHECK(back.increment == plan.increment);
  CHECK(back.prompts.size() == plan.prompts.size());

  IncrementPlan none = plan;
  apply_regime(none, {TuningKind::all_tokens, PromptComponents::none}, s);
  CHECK(none.prompts.empty());
  opts.max_pairs = 0;
  CHECK_THROWS_AS(plan_increment(cm, m.split(), opts), ValidationError);
}

TEST_CASE("split deltas and the three-way mean") {
  EvalReport before, after;
  before.per_composition.resize(18);
  after.per_composition.resize(18);
  before.pretrain = 90.0;
  after.pretrain = 88.5;
  before.increment = 10.0;
  after.increment = 70.0;
  before.unseen = 40.0;
  after.unseen = 35.0;
  before.hm_three = 20.0;
  after.hm_three = 55.0;
  const SplitDelta d = report_deltas(before, after);
  CHECK(*d.pretrain == doctest::Approx(-1.5));
  CHECK(*d.increment == doctest::Approx(60.0));
  CHECK(*d.unseen == doctest::Approx(-5.0));
  CHECK(*d.hm_three == doctest::Approx(35.0));
  CHECK(d.to_json().at("increment") == doctest::Approx(60.0));

  EvalReport mismatched = after;
  mismatched.increment.reset();
  CHECK_THROWS_AS(report_deltas(before, mismatched), ValidationError);

  const double three[] = {92.6, 93.7, 75.2};
  CHECK(std::round(harmonic_mean(three) * 10) / 10 == doctest::Approx(86.3));
}

TEST_CASE("increment with zero epochs and no prompts changes nothing") {
  const auto& s = default_manifest().space;
  const IncrementPlan plan = green_plan(s, {TuningKind::all_tokens, PromptComponents::none});
  const SmallData data(plan.increment);
  const Detector d = make_detector(s, 16, 7, 1);
  TrainConfig cfg;
  cfg.epochs = 0;
  const IncrementResult r = run_increment(d, data.manifest, plan, data.pretrain, data.increment, data.test, cfg);
  CHECK(bitwise_equal(r.detector.tokens.attributes(), d.tokens.attributes()));
  CHECK(bitwise_equal(r.detector.tokens.objects(), d.tokens.objects()));
  CHECK(*r.delta.pretrain == 0.0);
  CHECK(*r.delta.increment == 0.0);
  CHECK(*r.delta.unseen == 0.0);
  CHECK(r.split.increment().size() == 2);
  CHECK(r.split.unseen().size() == 10);
}

TEST_CASE("prompt-only increment freezes tokens and the frozen model") {
  const auto& s = default_manifest().space;
  const IncrementPlan plan = green_plan(s, {TuningKind::prompt_only, PromptComponents::both});
  const SmallData data(plan.increment);
  const Detector d = make_detector(s, 16, 7, 1);
  TrainConfig cfg;
  cfg.epochs = 3;
  const IncrementResult r = run_increment(d, data.manifest, plan, data.pretrain, data.increment, data.test, cfg);
  CHECK(bitwise_equal(r.detector.tokens.attributes(), d.tokens.attributes()));
  CHECK(bitwise_equal(r.detector.tokens.objects(), d.tokens.objects()));
  CHECK(bitwise_equal(r.detector.frozen.compose_map, d.frozen.compose_map));
  CHECK(bitwise_equal(r.detector.frozen.featurizer.projection(), d.frozen.featurizer.projection()));
  REQUIRE(r.detector.prompts.size() == 1);
  const PromptSlot init = make_prompt_slot(plan.prompts[0].owner, plan.prompts[0].text, s, d.tokens, d.frozen.words);
  CHECK_FALSE(bitwise_equal(r.detector.prompts[0].tokens, init.tokens));
  CHECK(r.log.epochs.size() == 3);
  // The input detector is untouched.
  CHECK(d.prompts.empty());
}

TEST_CASE("subset increment only moves the increment's primitive rows") {
  const auto& s = default_manifest().space;
  const IncrementPlan plan = green_plan(s, {TuningKind::subset_tokens, PromptComponents::none});
  const SmallData data(plan.increment);
  const Detector d = make_detector(s, 16, 7, 1);
  TrainConfig cfg;
  cfg.epochs = 2;
  const IncrementResult r = run_increment(d, data.manifest, plan, data.pretrain, data.increment, data.test, cfg);
  const int sphere = *s.find_object("sphere");
  CHECK(bitwise_equal(r.detector.tokens.objects().row(sphere), d.tokens.objects().row(sphere)));
  for (int a = 0; a < s.num_attributes(); ++a) {
    if (s.attribute_name(a) == "green") continue;
    CHECK(bitwise_equal(r.detector.tokens.attributes().row(a), d.tokens.attributes().row(a)));
  }
  CHECK_FALSE(bitwise_equal(r.detector.tokens.attributes(), d.tokens.attributes()));
}

TEST_CASE("invalid increments are rejected") {
  const auto& s = default_manifest().space;
  IncrementPlan plan = green_plan(s, {TuningKind::prompt_only, PromptComponents::none});
  const SmallData data(plan.increment);
  const Detector d = make_detector(s, 16, 7, 1);
  TrainConfig cfg;
  cfg.epochs = 1;
  CHECK_THROWS_AS(run_increment(d, data.manifest, plan, data.pretrain, data.increment, data.test, cfg),
                  ValidationError);
  plan.increment.clear();
  CHECK_THROWS_AS(run_increment(d, data.manifest, plan, data.pretrain, data.increment, data.test, cfg),
                  ValidationError);

  Detector prompted = d;
  prompted.prompts.push_back(PromptSlot{s.parse("red cube"), Eigen::MatrixXd::Zero(1, 16), "is"});
  const IncrementPlan ok = green_plan(s, {TuningKind::all_tokens, PromptComponents::none});
  CHECK_THROWS_AS(run_increment(prompted, data.manifest, ok, data.pretrain, data.increment, data.test, cfg),
                  ValidationError);
}

}  // TEST_SUITE
