#pragma once

#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "kelab/adam.hpp"
#include "kelab/scoring.hpp"
#include "kelab/tiny_lm.hpp"

namespace kelab {

enum class Method { kdpo, dpo, ft_m, ft_l };

/// Context under which y_l is scored: c_w uses the target prefix y_w^{<k} for
/// both completions, c_l scores each completion under its own prefix.
enum class ScoringMode { c_w, c_l };

std::string_view to_string(Method method);
std::string_view to_string(ScoringMode mode);
Method parse_method(std::string_view text);
ScoringMode parse_scoring_mode(std::string_view text);

struct EditorConfig {
  Method method = Method::kdpo;
  double beta = 0.1;
  double lr = 1e-4;
  int n_cycles = 10;
  int s_steps = 8;
  ParamSelector editable;  // penultimate block's FFN
  GenMode gen_mode = GenMode::teacher_forced;
  ScoringMode scoring_mode = ScoringMode::c_w;

  /// Defaults for `method`, with the generation/scoring flags it implies.
  static EditorConfig defaults(Method method);
  void validate() const;
};

/// One prompt -> new-target edit in token space.
struct EditTokens {
  TokenSeq prompt;
  TokenSeq target;
};

struct CycleTrace {
  TokenSeq negative;
  int cancelled_positions = 0;
  std::vector<double> losses;
};

struct EditOutcome {
  Method method = Method::kdpo;
  int cycles_used = 0;
  int total_steps = 0;
  bool converged = false;
  std::vector<CycleTrace> cycles;
  TokenSeq final_answer;
  /// L2 distance between edited parameters before and after the edit.
  double param_drift = 0.0;
};

class EditError : public std::runtime_error {
 public:
  EditError(const std::string& what, std::string trace) : std::runtime_error(what), trace_(std::move(trace)) {}
  const std::string& trace() const { return trace_; }

 private:
  std::string trace_;
};

/// Snapshot of one optimizer step, taken after the loss is evaluated and
/// before parameters move.
struct StepInfo {
  int cycle = 0;
  int step = 0;
  const TinyLM& model;
  const TinyLM& reference;
  const EditTokens& edit;
  const TokenSeq& negative;
  double loss = 0.0;
};
using StepObserver = std::function<void(const StepInfo&)>;

// ------------------------------------------------------------------ losses

/// Sum over positions of log pi(y_w) - log pi(y_l) under `mode`. In c_w mode
/// the sum is taken per position so equal-token positions are exactly zero.
Var policy_margin(Tape& tape, TinyLM& policy, std::span<const int> prompt, std::span<const int> chosen,
                  std::span<const int> rejected, ScoringMode mode);
double reference_margin(const TinyLM& reference, std::span<const int> prompt, std::span<const int> chosen,
                        std::span<const int> rejected, ScoringMode mode);

/// -log sigmoid(beta * (policy_margin - ref_margin)).
Var preference_loss(const Var& policy_margin, double ref_margin, double beta);

/// Vanilla DPO: each completion scored under its own prefix.
Var dpo_loss(Tape& tape, TinyLM& policy, const TinyLM& reference, std::span<const int> prompt,
             std::span<const int> chosen, std::span<const int> rejected, double beta);
/// Both completions scored under the chosen completion's prefix.
Var kdpo_loss(Tape& tape, TinyLM& policy, const TinyLM& reference, std::span<const int> prompt,
              std::span<const int> chosen, std::span<const int> rejected, double beta);

/// Value-only forms.
double dpo_loss(const TinyLM& policy, const TinyLM& reference, std::span<const int> prompt,
                std::span<const int> chosen, std::span<const int> rejected, double beta);
double kdpo_loss(const TinyLM& policy, const TinyLM& reference, std::span<const int> prompt,
                 std::span<const int> chosen, std::span<const int> rejected, double beta);

/// Fine-tuning cross-entropy. With `mask_prompt` only target tokens count
/// (FT-M); otherwise every next-token position of prompt + target does (FT-L).
Var finetune_loss(Tape& tape, TinyLM& model, std::span<const int> prompt, std::span<const int> target,
                  bool mask_prompt);

// ---------------------------------------------------------------- editing

/// Regenerate-negative / optimize cycles for kdpo or dpo. The reference is a
/// snapshot taken on entry; Adam state is fresh per call.
EditOutcome single_edit(TinyLM& model, const EditTokens& edit, const EditorConfig& cfg,
                        const StepObserver& observer = {});

/// FT-M / FT-L baselines: up to n*s steps, greedy match checked every s steps.
EditOutcome ft_edit(TinyLM& model, const EditTokens& edit, const EditorConfig& cfg,
                    const StepObserver& observer = {});

/// Dispatches on cfg.method.
EditOutcome apply_edit(TinyLM& model, const EditTokens& edit, const EditorConfig& cfg,
                       const StepObserver& observer = {});

/// Applies edits in order, no rollback; errors name the failing index.
std::vector<EditOutcome> sequential_edit(TinyLM& model, std::span<const EditTokens> edits, const EditorConfig& cfg);

}  // namespace kelab
