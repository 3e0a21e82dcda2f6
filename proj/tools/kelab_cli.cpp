// kelab: synthesize a fact world, pretrain a tiny LM on it, apply sequential
// knowledge edits and score them.
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "kelab/experiment.hpp"

namespace fs = std::filesystem;
using namespace kelab;

namespace {

struct ModelFlags {
  LMConfig cfg;
  void add(CLI::App* app) {
    app->add_option("--vocab-size", cfg.vocab_size, "Vocabulary size")->capture_default_str();
    app->add_option("--d-model", cfg.d_model, "Residual width")->capture_default_str();
    app->add_option("--layers", cfg.n_layers, "Transformer blocks")->capture_default_str();
    app->add_option("--heads", cfg.n_heads, "Attention heads")->capture_default_str();
    app->add_option("--d-ff", cfg.d_ff, "FFN hidden width")->capture_default_str();
    app->add_option("--max-ctx", cfg.max_ctx, "Maximum context length")->capture_default_str();
  }
};

struct EditorFlags {
  std::string method = "kdpo";
  double beta = 0.1;
  double lr = 1e-4;
  int cycles = 10;
  int steps = 8;
  std::string editable = "ffn:-2";
  std::string gen_mode;
  std::string scoring_mode;

  void add(CLI::App* app, bool many_methods) {
    app->add_option("--method", method,
                    many_methods ? "Comma-separated methods among kdpo, dpo, ft_m, ft_l" : "kdpo, dpo, ft_m or ft_l")
        ->capture_default_str();
    app->add_option("--beta", beta, "Preference temperature")->capture_default_str();
    app->add_option("--lr", lr, "Adam learning rate")->capture_default_str();
    app->add_option("--cycles", cycles, "Regenerate-negative cycles n")->capture_default_str();
    app->add_option("--steps", steps, "Optimizer steps per cycle s")->capture_default_str();
    app->add_option("--editable", editable, "all, ffn:<layer> or comma-separated parameter names")
        ->capture_default_str();
    app->add_option("--gen-mode", gen_mode, "Override: teacher_forced or free_running");
    app->add_option("--scoring-mode", scoring_mode, "Override: c_w or c_l");
  }

  std::vector<Method> methods() const {
    std::vector<Method> out;
    std::size_t start = 0;
    while (start <= method.size()) {
      const std::size_t comma = std::min(method.find(',', start), method.size());
      out.push_back(parse_method(method.substr(start, comma - start)));
      start = comma + 1;
    }
    return out;
  }

  void apply(RunConfig& cfg) const {
    cfg.methods = methods();
    cfg.beta = beta;
    cfg.lr = lr;
    cfg.n_cycles = cycles;
    cfg.s_steps = steps;
    cfg.editable = ParamSelector::parse(editable);
    if (!gen_mode.empty()) {
      cfg.gen_mode = parse_gen_mode(gen_mode);
    }
    if (!scoring_mode.empty()) {
      cfg.scoring_mode = parse_scoring_mode(scoring_mode);
    }
  }
};

struct PretrainFlags {
  PretrainOptions opts;
  double stop_at = -1.0;
  void add(CLI::App* app) {
    app->add_option("--epochs", opts.epochs, "Pretraining epochs")->capture_default_str();
    app->add_option("--pretrain-lr", opts.lr, "Pretraining Adam learning rate")->capture_default_str();
    app->add_option("--batch-size", opts.batch_size, "Sentences per optimizer step")->capture_default_str();
    app->add_option("--stop-at", stop_at, "Stop once fact accuracy reaches this (checked every --eval-every)");
    app->add_option("--eval-every", opts.eval_every, "Epochs between accuracy checks")->capture_default_str();
  }
  PretrainOptions options() const {
    PretrainOptions o = opts;
    if (stop_at >= 0.0) {
      o.stop_at_accuracy = stop_at;
    }
    return o;
  }
};

void print_metrics(const MethodMetrics& m) {
  const auto show = [](const std::optional<double>& v) { return v ? std::to_string(*v) : std::string("n/a"); };
  std::cout << m.method << ": edit_success " << show(m.edit_success) << "  portability " << show(m.portability)
            << "  locality " << show(m.locality) << "  fluency " << show(m.fluency) << "  mean_cycles "
            << show(m.mean_cycles) << "\n";
}

std::vector<EditRequest> first_n(std::vector<EditRequest> requests, int n) {
  if (n < 0) {
    return requests;
  }
  if (static_cast<std::size_t>(n) > requests.size()) {
    throw std::invalid_argument("--n-edits " + std::to_string(n) + " exceeds the " +
                                std::to_string(requests.size()) + " requests left after dedup");
  }
  requests.resize(static_cast<std::size_t>(n));
  return requests;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Knowledge-editing lab on a tiny transformer"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a fact world, its corpus and edit requests");
  FactWorldOptions world_opts;
  int synth_vocab = LMConfig{}.vocab_size;
  std::string synth_out = "world";
  synth->add_option("--seed", world_opts.seed, "World seed")->capture_default_str();
  synth->add_option("--subjects", world_opts.n_subjects, "Number of subjects")->capture_default_str();
  synth->add_option("--relations", world_opts.n_relations, "Relations per subject (1-3)")->capture_default_str();
  synth->add_option("--requests", world_opts.n_requests, "Subjects that receive an edit request")
      ->capture_default_str();
  synth->add_option("--vocab-size", synth_vocab, "Model vocabulary the world must fit")->capture_default_str();
  synth->add_option("--out", synth_out, "Output directory")->capture_default_str();

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "Train a model on a world corpus or a dataset's facts");
  ModelFlags pre_model;
  PretrainFlags pre_flags;
  std::uint64_t pre_seed = 0;
  std::string pre_world, pre_dataset, pre_out = "model.ckpt";
  pre_model.add(pre);
  pre_flags.add(pre);
  pre->add_option("--seed", pre_seed, "Initialization and shuffle seed")->capture_default_str();
  auto* pre_world_opt = pre->add_option("--world", pre_world, "world.json from synth");
  pre->add_option("--dataset", pre_dataset, "Dataset JSON; trains on ground truths and locality facts")
      ->excludes(pre_world_opt);
  pre->add_option("--out", pre_out, "Checkpoint to write")->capture_default_str();

  // edit
  auto* edit = app.add_subcommand("edit", "Apply sequential edits to a checkpoint");
  EditorFlags edit_flags;
  std::uint64_t edit_seed = 0;
  std::string edit_ckpt, edit_dataset, edit_out = "edit";
  int edit_n = -1;
  edit_flags.add(edit, false);
  edit->add_option("--checkpoint", edit_ckpt, "Model to edit")->required();
  edit->add_option("--dataset", edit_dataset, "Dataset JSON")->required();
  edit->add_option("--n-edits", edit_n, "Apply only the first N requests (after dedup)");
  edit->add_option("--out", edit_out, "Output directory")->capture_default_str();
  edit->add_option("--seed", edit_seed, "Accepted for uniformity; editing draws no randomness")
      ->capture_default_str();

  // eval
  auto* eval = app.add_subcommand("eval", "Score an edited checkpoint against its pre-edit version");
  std::uint64_t eval_seed = 0;
  std::string eval_pre, eval_post, eval_dataset, eval_trace, eval_label = "edited", eval_out = "eval";
  int eval_n = -1;
  int eval_gen_len = 20;
  eval->add_option("--pre", eval_pre, "Checkpoint before editing")->required();
  eval->add_option("--post", eval_post, "Checkpoint after editing")->required();
  eval->add_option("--dataset", eval_dataset, "Dataset JSON")->required();
  eval->add_option("--n-edits", eval_n, "Score only the first N requests (after dedup)");
  eval->add_option("--trace", eval_trace, "Trace JSONL from edit, for cycle statistics");
  eval->add_option("--label", eval_label, "Method name in the report")->capture_default_str();
  eval->add_option("--gen-len", eval_gen_len, "Tokens generated for fluency")->capture_default_str();
  eval->add_option("--out", eval_out, "Output directory")->capture_default_str();
  eval->add_option("--seed", eval_seed, "Recorded in the report; evaluation draws no randomness")
      ->capture_default_str();

  // run
  auto* run = app.add_subcommand("run", "Full pipeline: synth or load, pretrain or load, edit, evaluate");
  ModelFlags run_model;
  EditorFlags run_flags;
  PretrainFlags run_pre;
  RunConfig run_cfg;
  std::string run_config_file, run_dataset, run_ckpt;
  run_model.add(run);
  run_flags.add(run, true);
  run_pre.add(run);
  run->add_option("--config", run_config_file, "RunConfig JSON; other flags are ignored when given");
  run->add_option("--dataset", run_dataset, "Dataset JSON instead of a synthetic world");
  run->add_option("--checkpoint", run_ckpt, "Pretrained model instead of pretraining");
  run->add_option("--subjects", run_cfg.synth.n_subjects, "Synthetic subjects")->capture_default_str();
  run->add_option("--relations", run_cfg.synth.n_relations, "Synthetic relations")->capture_default_str();
  run->add_option("--requests", run_cfg.synth.n_requests, "Synthetic edit requests")->capture_default_str();
  run->add_option("--n-edits", run_cfg.n_edits, "Sequential edits N")->capture_default_str();
  run->add_option("--gen-len", run_cfg.fluency_gen_len, "Tokens generated for fluency")->capture_default_str();
  run->add_option("--out", run_cfg.out_dir, "Output directory")->capture_default_str();
  run->add_option("--seed", run_cfg.seed, "Seed for world, initialization and shuffling")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    const Vocabulary& vocab = Vocabulary::fact_world();

    if (*synth) {
      const GeneratedWorld g = gen_fact_world(world_opts, synth_vocab);
      const fs::path dir(synth_out);
      write_text_file((dir / "world.json").string(), to_json(g).dump(2) + "\n");
      write_text_file((dir / "dataset.json").string(), to_json(g.requests).dump(2) + "\n");
      std::string corpus;
      for (const std::string& s : g.corpus) {
        corpus += s + "\n";
      }
      write_text_file((dir / "corpus.txt").string(), corpus);
      std::cout << "wrote " << g.corpus.size() << " sentences and " << g.requests.size() << " requests to "
                << dir.string() << "\n";
      return 0;
    }

    if (*pre) {
      std::vector<std::string> corpus;
      std::vector<Probe> facts;
      if (!pre_world.empty()) {
        const GeneratedWorld g = world_from_json(read_json_file(pre_world));
        corpus = g.corpus;
        facts = fact_probes(g.world, vocab);
      } else if (!pre_dataset.empty()) {
        const std::vector<EditRequest> requests = load_dataset(pre_dataset);
        corpus = corpus_from_requests(requests);
        facts = facts_from_requests(requests, vocab);
      } else {
        throw std::invalid_argument("pretrain needs --world or --dataset");
      }
      LMConfig cfg = pre_model.cfg;
      cfg.seed = pre_seed;
      PretrainOptions opts = pre_flags.options();
      opts.seed = pre_seed;
      TinyLM model(cfg);
      const PretrainResult r = pretrain(model, encode_all(corpus, vocab), facts, opts);
      save_checkpoint(model, pre_out);
      std::cout << "epochs " << r.epochs_run << "  final loss "
                << (r.epoch_loss.empty() ? std::string("n/a") : std::to_string(r.epoch_loss.back()))
                << "  fact accuracy " << r.fact_accuracy << "\nwrote " << pre_out << "\n";
      return 0;
    }

    if (*edit) {
      const std::vector<Method> methods = edit_flags.methods();
      if (methods.size() != 1) {
        throw std::invalid_argument("edit takes exactly one --method");
      }
      RunConfig cfg;
      edit_flags.apply(cfg);
      const EditorConfig ec = cfg.editor_for(methods.front());
      ec.validate();
      const std::vector<EditRequest> requests = first_n(dedup_by_subject(load_dataset(edit_dataset)), edit_n);
      std::vector<EditTokens> edits;
      for (const EditRequest& r : requests) {
        edits.push_back(tokenize_edit(r, vocab));
      }
      TinyLM model = load_checkpoint(edit_ckpt);
      const std::vector<EditOutcome> outcomes = sequential_edit(model, edits, ec);
      const fs::path dir(edit_out);
      fs::create_directories(dir);
      save_checkpoint(model, (dir / "edited.ckpt").string());
      const std::string name(to_string(ec.method));
      write_trace((dir / ("trace_" + name + ".jsonl")).string(), requests, outcomes, vocab);
      int converged = 0;
      for (const EditOutcome& o : outcomes) {
        converged += o.converged ? 1 : 0;
      }
      std::cout << name << ": " << converged << "/" << outcomes.size() << " edits converged (seed " << edit_seed
                << ")\nwrote " << (dir / "edited.ckpt").string() << "\n";
      return 0;
    }

    if (*eval) {
      const std::vector<EditRequest> requests = first_n(dedup_by_subject(load_dataset(eval_dataset)), eval_n);
      const TinyLM before = load_checkpoint(eval_pre);
      const TinyLM after = load_checkpoint(eval_post);
      std::vector<EditOutcome> outcomes;
      if (!eval_trace.empty()) {
        std::ifstream in(eval_trace);
        if (!in) {
          throw std::runtime_error("cannot read trace '" + eval_trace + "'");
        }
        for (std::string line; std::getline(in, line);) {
          if (line.empty()) {
            continue;
          }
          const auto rec = nlohmann::json::parse(line);
          EditOutcome o;
          o.method = parse_method(rec.at("method").get<std::string>());
          o.cycles_used = rec.at("cycles_used").get<int>();
          o.total_steps = rec.at("total_steps").get<int>();
          o.converged = rec.at("converged").get<bool>();
          o.param_drift = rec.at("param_drift").get<double>();
          outcomes.push_back(o);
        }
        outcomes.resize(std::min(outcomes.size(), requests.size()));
      }
      MetricsReport report;
      report.n_edits = static_cast<int>(requests.size());
      report.config = {{"pre", eval_pre}, {"post", eval_post}, {"dataset", eval_dataset}, {"seed", eval_seed}};
      report.fluency_pre = prompt_fluency(before, requests, vocab, eval_gen_len);
      const std::span<const EditRequest> scored(requests.data(),
                                                outcomes.empty() ? requests.size() : outcomes.size());
      report.methods.push_back(evaluate_method(eval_label, before, after, scored, outcomes, vocab, eval_gen_len));
      const fs::path dir(eval_out);
      write_text_file((dir / "report.json").string(), to_json(report, eval_gen_len).dump(2) + "\n");
      write_text_file((dir / "report.md").string(), to_markdown(report, eval_gen_len));
      write_text_file((dir / "plot_data.json").string(), plot_data(report).dump(2) + "\n");
      print_metrics(report.methods.front());
      return 0;
    }

    if (*run) {
      RunConfig cfg = run_cfg;
      if (!run_config_file.empty()) {
        const std::string out_dir = cfg.out_dir;
        cfg = run_config_from_json(read_json_file(run_config_file));
        if (run->count("--out") > 0) {
          cfg.out_dir = out_dir;
        }
      } else {
        cfg.model = run_model.cfg;
        run_flags.apply(cfg);
        cfg.pretrain = run_pre.options();
        if (!run_dataset.empty()) {
          cfg.dataset_path = run_dataset;
        }
        if (!run_ckpt.empty()) {
          cfg.checkpoint_path = run_ckpt;
        }
      }
      const MetricsReport report = run_experiment(cfg);
      for (const MethodMetrics& m : report.methods) {
        print_metrics(m);
      }
      for (const DirectionCheck& d : report.directions) {
        std::cout << d.name << ": " << (d.holds ? "holds" : "FAILS") << "\n";
      }
      std::cout << "wrote " << cfg.out_dir << "/report.json\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
