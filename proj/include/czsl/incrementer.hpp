#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "czsl/compspace.hpp"
#include "czsl/evalkit.hpp"
#include "czsl/scenegen.hpp"
#include "czsl/tokenmodel.hpp"
#include "czsl/trainer.hpp"

namespace czsl {

/// Ground truth `underperformer` is often predicted as `distractor`.
struct ConfusedPair {
  Composition underperformer;
  Composition distractor;
  double rate = 0.0;

  bool operator==(const ConfusedPair&) const = default;
};

/// Off-diagonal cells of the row-normalized matrix with rate >= threshold,
/// highest rate first (ties by underperformer id, then distractor id). The
/// missed column never yields a pair.
std::vector<ConfusedPair> mine_confusions(const ConfusionMatrix& matrix,
                                          const CompositionSpace& space, double threshold);

/// Members of the pairs, deduplicated and sorted. Members already in C_p are
/// dropped with a warning. Throws on an empty pair list.
std::vector<Composition> build_increment_set(std::span<const ConfusedPair> pairs,
                                             const SplitSpec& split);

enum class PromptComponents { none, affirmation, negation, both };
const char* to_string(PromptComponents c);
PromptComponents parse_prompt_components(const std::string& text);

/// "is not {c_k} but is {c_j}", "is not {c_k}" or "is {c_j}".
std::string build_contrastive_prompt(const ConfusedPair& pair, const CompositionSpace& space,
                                     PromptComponents components);

/// One token row per word: function words from the frozen table, primitive
/// names copied from the current token table. Throws ValidationError on any
/// other word.
PromptSlot make_prompt_slot(const Composition& owner, const std::string& text,
                            const CompositionSpace& space, const TokenTable& tokens,
                            const FunctionWordTable& words);

enum class TuningKind { all_tokens, subset_tokens, prompt_only };
const char* to_string(TuningKind k);
TuningKind parse_tuning_kind(const std::string& text);

struct TuningRegime {
  TuningKind kind = TuningKind::prompt_only;
  PromptComponents components = PromptComponents::both;

  /// Prompts are trainable whenever the regime attaches any.
  TunableMask mask(const CompositionSpace& space, std::span<const Composition> increment) const;
};

/// What the `confusions` verb writes and the `increment` verb replays.
struct IncrementPlan {
  double threshold = 0.2;
  std::vector<ConfusedPair> pairs;  // the pairs that receive prompts
  std::vector<Composition> increment;
  TuningRegime regime;
  struct Prompt {
    Composition owner;
    std::string text;
  };
  std::vector<Prompt> prompts;

  nlohmann::json to_json(const CompositionSpace& space) const;
  static IncrementPlan from_json(const nlohmann::json& doc, const CompositionSpace& space);
};

struct PlanOptions {
  double threshold = 0.2;
  /// Underperformers that get a prompt; keeps some compositions unseen.
  int max_pairs = 2;
  TuningRegime regime;
};

/// Mines the matrix, keeps the highest-rate distractor of each underperformer
/// outside C_p, and caps the result at max_pairs. Throws ValidationError when
/// nothing qualifies.
IncrementPlan plan_increment(const ConfusionMatrix& matrix, const SplitSpec& split,
                             const PlanOptions& options);

/// Switches the plan to `regime` and rebuilds the prompt texts to match.
void apply_regime(IncrementPlan& plan, const TuningRegime& regime, const CompositionSpace& space);

struct SplitDelta {
  std::optional<double> pretrain;
  std::optional<double> increment;
  std::optional<double> unseen;
  std::optional<double> hm_three;

  nlohmann::json to_json() const;
};

/// after - before per split. Throws ValidationError when the reports do not
/// share a split structure.
SplitDelta report_deltas(const EvalReport& before, const EvalReport& after);

struct IncrementResult {
  Detector detector;
  SplitSpec split;      // C_p with the plan's C_i
  EvalReport before;    // the input detector under `split`
  EvalReport after;
  SplitDelta delta;
  ConfusionMatrix confusion;
  TrainLog log;
};

/// Attaches the plan's prompts, trains under the regime mask on
/// pretrain + increment data and evaluates before/after on `test`.
IncrementResult run_increment(const Detector& detector, const Manifest& manifest,
                              const IncrementPlan& plan, const Dataset& pretrain_data,
                              const Dataset& increment_data, const Dataset& test_data,
                              TrainConfig config, const EvalConfig& eval_config = {});

}  // namespace czsl
