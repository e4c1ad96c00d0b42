#include "czsl/incrementer.hpp"

#include <algorithm>
#include <map>
#include <sstream>

#include "czsl/error.hpp"
#include "czsl/log.hpp"

namespace czsl {

std::vector<ConfusedPair> mine_confusions(const ConfusionMatrix& matrix,
                                          const CompositionSpace& space, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw ValidationError("mining threshold must lie in (0, 1)");
  }
  std::vector<ConfusedPair> pairs;
  if (matrix.counts.size() == 0) return pairs;
  if (matrix.num_classes() != space.size()) {
    throw ShapeError("confusion matrix does not match the composition space");
  }
  const Eigen::MatrixXd rates = matrix.normalized();
  for (int g = 0; g < matrix.num_classes(); ++g) {
    for (int p = 0; p < matrix.num_classes(); ++p) {
      if (p == g || rates(g, p) < threshold) continue;
      pairs.push_back({space.decompose(g), space.decompose(p), rates(g, p)});
    }
  }
  std::stable_sort(pairs.begin(), pairs.end(), [&](const ConfusedPair& a, const ConfusedPair& b) {
    if (a.rate != b.rate) return a.rate > b.rate;
    if (a.underperformer != b.underperformer) return a.underperformer < b.underperformer;
    return a.distractor < b.distractor;
  });
  return pairs;
}

std::vector<Composition> build_increment_set(std::span<const ConfusedPair> pairs,
                                             const SplitSpec& split) {
  if (pairs.empty()) throw ValidationError("no confused pairs to build an increment set from");
  const CompositionSpace& space = split.space();
  std::vector<Composition> out;
  const auto add = [&](const Composition& c) {
    if (split.role(space.id(c)) == SplitRole::pretrain) {
      warn("'" + space.name(c) + "' is already in the pretrain set; left out of the increment set");
      return;
    }
    if (std::find(out.begin(), out.end(), c) == out.end()) out.push_back(c);
  };
  for (const auto& p : pairs) {
    add(p.underperformer);
    add(p.distractor);
  }
  std::sort(out.begin(), out.end());
  return out;
}

const char* to_string(PromptComponents c) {
  switch (c) {
    case PromptComponents::none: return "none";
    case PromptComponents::affirmation: return "affirmation";
    case PromptComponents::negation: return "negation";
    case PromptComponents::both: return "both";
  }
  return "?";
}

PromptComponents parse_prompt_components(const std::string& text) {
  if (text == "none") return PromptComponents::none;
  if (text == "affirmation") return PromptComponents::affirmation;
  if (text == "negation") return PromptComponents::negation;
  if (text == "both") return PromptComponents::both;
  throw ValidationError("unknown prompt components '" + text + "'");
}

std::string build_contrastive_prompt(const ConfusedPair& pair, const CompositionSpace& space,
                                     PromptComponents components) {
  if (pair.underperformer == pair.distractor) {
    throw ValidationError("a confused pair needs two different compositions");
  }
  const std::string target = space.name(pair.underperformer);
  const std::string other = space.name(pair.distractor);
  switch (components) {
    case PromptComponents::both: return "is not " + other + " but is " + target;
    case PromptComponents::negation: return "is not " + other;
    case PromptComponents::affirmation: return "is " + target;
    case PromptComponents::none: break;
  }
  throw ValidationError("prompt components 'none' produce no prompt");
}

PromptSlot make_prompt_slot(const Composition& owner, const std::string& text,
                            const CompositionSpace& space, const TokenTable& tokens,
                            const FunctionWordTable& words) {
  std::vector<std::string> split_words;
  std::istringstream in(text);
  for (std::string w; in >> w;) split_words.push_back(w);
  if (split_words.empty()) throw ValidationError("empty prompt text");

  PromptSlot slot;
  slot.owner = owner;
  slot.init_text = text;
  slot.tokens.resize(static_cast<Eigen::Index>(split_words.size()), tokens.dim());
  for (std::size_t i = 0; i < split_words.size(); ++i) {
    const auto row = static_cast<Eigen::Index>(i);
    const std::string& w = split_words[i];
    if (words.contains(w)) {
      slot.tokens.row(row) = words.at(w).transpose();
    } else if (const auto a = space.find_attribute(w)) {
      slot.tokens.row(row) = tokens.attributes().row(*a);
    } else if (const auto o = space.find_object(w)) {
      slot.tokens.row(row) = tokens.objects().row(*o);
    } else {
      throw ValidationError("prompt word '" + w + "' is neither a function word nor a primitive");
    }
  }
  return slot;
}

const char* to_string(TuningKind k) {
  switch (k) {
    case TuningKind::all_tokens: return "all-tokens";
    case TuningKind::subset_tokens: return "subset-tokens";
    case TuningKind::prompt_only: return "prompt";
  }
  return "?";
}

TuningKind parse_tuning_kind(const std::string& text) {
  if (text == "all-tokens") return TuningKind::all_tokens;
  if (text == "subset-tokens") return TuningKind::subset_tokens;
  if (text == "prompt") return TuningKind::prompt_only;
  throw ValidationError("unknown tuning regime '" + text + "'");
}

TunableMask TuningRegime::mask(const CompositionSpace& space,
                               std::span<const Composition> increment) const {
  TunableMask m;
  switch (kind) {
    case TuningKind::all_tokens: m = TunableMask::all_tokens(space); break;
    case TuningKind::subset_tokens: m = TunableMask::subset_tokens(space, increment); break;
    case TuningKind::prompt_only: m = TunableMask::prompts_only(space); break;
  }
  m.prompts = components != PromptComponents::none;
  return m;
}

namespace {

nlohmann::json pair_json(const ConfusedPair& p, const CompositionSpace& space) {
  return {{"underperformer", space.name(p.underperformer)},
          {"distractor", space.name(p.distractor)},
          {"rate", p.rate}};
}

}  // namespace

nlohmann::json IncrementPlan::to_json(const CompositionSpace& space) const {
  nlohmann::json doc;
  doc["threshold"] = threshold;
  doc["pairs"] = nlohmann::json::array();
  for (const auto& p : pairs) doc["pairs"].push_back(pair_json(p, space));
  doc["increment"] = nlohmann::json::array();
  for (const auto& c : increment) doc["increment"].push_back(space.name(c));
  doc["regime"] = {{"kind", to_string(regime.kind)}, {"components", to_string(regime.components)}};
  doc["prompts"] = nlohmann::json::array();
  for (const auto& p : prompts) {
    doc["prompts"].push_back({{"owner", space.name(p.owner)}, {"text", p.text}});
  }
  return doc;
}

IncrementPlan IncrementPlan::from_json(const nlohmann::json& doc, const CompositionSpace& space) {
  IncrementPlan plan;
  try {
    plan.threshold = doc.value("threshold", plan.threshold);
    for (const auto& p : doc.at("pairs")) {
      plan.pairs.push_back({space.parse(p.at("underperformer").get<std::string>()),
                            space.parse(p.at("distractor").get<std::string>()),
                            p.at("rate").get<double>()});
    }
    for (const auto& c : doc.at("increment")) plan.increment.push_back(space.parse(c.get<std::string>()));
    const auto& r = doc.at("regime");
    plan.regime.kind = parse_tuning_kind(r.at("kind").get<std::string>());
    plan.regime.components = parse_prompt_components(r.at("components").get<std::string>());
    for (const auto& p : doc.at("prompts")) {
      plan.prompts.push_back({space.parse(p.at("owner").get<std::string>()),
                              p.at("text").get<std::string>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed increment plan: ") + e.what());
  }
  return plan;
}

IncrementPlan plan_increment(const ConfusionMatrix& matrix, const SplitSpec& split,
                             const PlanOptions& options) {
  if (options.max_pairs < 1) throw ValidationError("max_pairs must be at least 1");
  const CompositionSpace& space = split.space();
  IncrementPlan plan;
  plan.threshold = options.threshold;
  plan.regime = options.regime;
  // Sorted by rate, so the first pair seen per underperformer has its top distractor.
  for (const auto& p : mine_confusions(matrix, space, options.threshold)) {
    if (split.role(space.id(p.underperformer)) == SplitRole::pretrain) continue;
    const bool known = std::any_of(plan.pairs.begin(), plan.pairs.end(), [&](const ConfusedPair& q) {
      return q.underperformer == p.underperformer;
    });
    if (known) continue;
    plan.pairs.push_back(p);
    if (static_cast<int>(plan.pairs.size()) == options.max_pairs) break;
  }
  if (plan.pairs.empty()) {
    throw ValidationError("no composition outside the pretrain set is confused above the threshold");
  }
  plan.increment = build_increment_set(plan.pairs, split);
  apply_regime(plan, options.regime, space);
  return plan;
}

void apply_regime(IncrementPlan& plan, const TuningRegime& regime, const CompositionSpace& space) {
  plan.regime = regime;
  plan.prompts.clear();
  if (regime.components == PromptComponents::none) return;
  for (const auto& p : plan.pairs) {
    plan.prompts.push_back({p.underperformer, build_contrastive_prompt(p, space, regime.components)});
  }
}

nlohmann::json SplitDelta::to_json() const {
  const auto opt = [](const std::optional<double>& v) -> nlohmann::json {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  };
  return {{"pretrain", opt(pretrain)},
          {"increment", opt(increment)},
          {"unseen", opt(unseen)},
          {"hm_three", opt(hm_three)}};
}

SplitDelta report_deltas(const EvalReport& before, const EvalReport& after) {
  const auto same_shape = [](const std::optional<double>& a, const std::optional<double>& b) {
    return a.has_value() == b.has_value();
  };
  if (before.per_composition.size() != after.per_composition.size() ||
      !same_shape(before.pretrain, after.pretrain) || !same_shape(before.increment, after.increment) ||
      !same_shape(before.unseen, after.unseen) || !same_shape(before.hm_three, after.hm_three)) {
    throw ValidationError("reports were computed on different splits");
  }
  const auto diff = [](const std::optional<double>& a, const std::optional<double>& b) {
    return a && b ? std::optional<double>(*b - *a) : std::nullopt;
  };
  return {diff(before.pretrain, after.pretrain), diff(before.increment, after.increment),
          diff(before.unseen, after.unseen), diff(before.hm_three, after.hm_three)};
}

IncrementResult run_increment(const Detector& detector, const Manifest& manifest,
                              const IncrementPlan& plan, const Dataset& pretrain_data,
                              const Dataset& increment_data, const Dataset& test_data,
                              TrainConfig config, const EvalConfig& eval_config) {
  const CompositionSpace& space = manifest.space;
  if (plan.increment.empty()) throw ValidationError("increment plan has an empty increment set");
  if (plan.regime.kind == TuningKind::prompt_only && plan.prompts.empty()) {
    throw ValidationError("prompt-only tuning needs a plan with mined prompts");
  }
  if (!detector.prompts.empty()) {
    throw ValidationError("checkpoint already carries prompts; increments start from a pretrained model");
  }
  IncrementResult out{detector, SplitSpec::make(space, manifest.pretrain, plan.increment), {}, {}, {}, {}, {}};

  const EvalSet test = prepare_eval_set(test_data, detector.frozen, space);
  out.before = evaluate(detector, space, test, out.split, eval_config).report;

  for (const auto& p : plan.prompts) {
    if (out.detector.prompt_for(p.owner) != nullptr) {
      throw ValidationError("two prompts for '" + space.name(p.owner) + "'");
    }
    out.detector.prompts.push_back(
        make_prompt_slot(p.owner, p.text, space, out.detector.tokens, out.detector.frozen.words));
  }
  config.mask = plan.regime.mask(space, plan.increment);
  const Dataset* datasets[] = {&pretrain_data, &increment_data};
  out.log = train(out.detector, space, datasets, config);

  const EvalOutcome after = evaluate(out.detector, space, test, out.split, eval_config);
  out.after = after.report;
  out.confusion = after.confusion;
  out.delta = report_deltas(out.before, out.after);
  return out;
}

}  // namespace czsl
