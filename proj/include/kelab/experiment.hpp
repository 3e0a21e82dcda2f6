#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "kelab/dataset.hpp"
#include "kelab/editors.hpp"
#include "kelab/fact_world.hpp"
#include "kelab/pretrain.hpp"
#include "kelab/report.hpp"
#include "kelab/tiny_lm.hpp"

namespace kelab {

/// Everything a run depends on. `seed` drives the synthetic world, the model
/// initialization and the pretraining shuffle; the seed fields inside `model`,
/// `synth` and `pretrain` are overwritten with it.
struct RunConfig {
  LMConfig model;
  std::vector<Method> methods{Method::kdpo};
  double beta = 0.1;
  double lr = 1e-4;
  int n_cycles = 10;
  int s_steps = 8;
  ParamSelector editable;
  /// Override the generation / scoring flags implied by each method.
  std::optional<GenMode> gen_mode;
  std::optional<ScoringMode> scoring_mode;

  /// KnowEdit-style dataset; when absent a fact world is synthesized.
  std::optional<std::string> dataset_path;
  FactWorldOptions synth;
  /// Pretrained model; when absent one is trained and saved into out_dir.
  std::optional<std::string> checkpoint_path;
  PretrainOptions pretrain;

  int n_edits = 20;
  int fluency_gen_len = 20;
  std::string out_dir = "run";
  std::uint64_t seed = 0;

  EditorConfig editor_for(Method method) const;
  void validate() const;
};

/// out_dir is left out so that the same configuration run into two
/// directories serializes identically.
nlohmann::json to_json(const RunConfig& cfg);
/// Missing keys keep their defaults.
RunConfig run_config_from_json(const nlohmann::json& doc);

/// Raised by run_experiment; `stage` names the pipeline step that failed.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& what)
      : std::runtime_error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

/// (synth | load) -> dedup -> pretrain or load -> pre-edit snapshot ->
/// sequential edits per method (each from the same snapshot) -> metrics.
/// Writes report.json, report.md, plot_data.json, trace_<method>.jsonl and
/// manifest.json into cfg.out_dir. On failure the manifest records the stage
/// and the error is rethrown as StageError.
MetricsReport run_experiment(const RunConfig& cfg);

// ---------------------------------------------------------- building blocks

/// Pretraining text for a loaded dataset: "prompt ground_truth ." for every
/// request with a ground truth and every locality probe.
std::vector<std::string> corpus_from_requests(std::span<const EditRequest> requests);
/// The (prompt, answer) pairs of corpus_from_requests, for fact accuracy.
std::vector<Probe> facts_from_requests(std::span<const EditRequest> requests, const Vocabulary& vocab);

std::vector<TokenSeq> encode_all(std::span<const std::string> lines, const Vocabulary& vocab);

/// Scores `post` against `pre` on the first outcomes.size() requests.
/// `outcomes` may be empty (eval without traces); then the edit statistics
/// stay zero.
MethodMetrics evaluate_method(const std::string& method, const TinyLM& pre, const TinyLM& post,
                              std::span<const EditRequest> requests, std::span<const EditOutcome> outcomes,
                              const Vocabulary& vocab, int fluency_gen_len);

/// Mean fluency of greedy continuations of the requests' prompts; nullopt
/// for no requests.
std::optional<double> prompt_fluency(const TinyLM& model, std::span<const EditRequest> requests,
                                     const Vocabulary& vocab, int gen_len);

/// One JSON object per edit: request fields, outcome and per-cycle negatives
/// and losses.
nlohmann::json trace_record(std::size_t index, const EditRequest& request, const EditOutcome& outcome,
                            const Vocabulary& vocab);
void write_trace(const std::string& path, std::span<const EditRequest> requests,
                 std::span<const EditOutcome> outcomes, const Vocabulary& vocab);

nlohmann::json to_json(const GeneratedWorld& world);
GeneratedWorld world_from_json(const nlohmann::json& doc);

/// Writes `text` to `path` through a temporary file and a rename.
void write_text_file(const std::string& path, const std::string& text);
nlohmann::json read_json_file(const std::string& path);

}  // namespace kelab
