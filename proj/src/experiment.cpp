#include "kelab/experiment.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "kelab/metrics.hpp"
#include "kelab/scoring.hpp"

namespace kelab {

using nlohmann::json;
namespace fs = std::filesystem;

// ------------------------------------------------------------------ config

EditorConfig RunConfig::editor_for(Method method) const {
  EditorConfig e = EditorConfig::defaults(method);
  e.beta = beta;
  e.lr = lr;
  e.n_cycles = n_cycles;
  e.s_steps = s_steps;
  e.editable = editable;
  if (gen_mode) {
    e.gen_mode = *gen_mode;
  }
  if (scoring_mode) {
    e.scoring_mode = *scoring_mode;
  }
  return e;
}

void RunConfig::validate() const {
  model.validate();
  if (methods.empty()) {
    throw std::invalid_argument("run needs at least one method");
  }
  for (Method m : methods) {
    editor_for(m).validate();
  }
  if (n_edits < 0) {
    throw std::invalid_argument("n_edits must be >= 0");
  }
  if (fluency_gen_len < 3) {
    throw std::invalid_argument("fluency_gen_len must be >= 3");
  }
}

json to_json(const RunConfig& cfg) {
  json methods = json::array();
  for (Method m : cfg.methods) {
    methods.push_back(std::string(to_string(m)));
  }
  json out = {
      {"model",
       {{"vocab_size", cfg.model.vocab_size},
        {"d_model", cfg.model.d_model},
        {"n_layers", cfg.model.n_layers},
        {"n_heads", cfg.model.n_heads},
        {"d_ff", cfg.model.d_ff},
        {"max_ctx", cfg.model.max_ctx}}},
      {"methods", methods},
      {"beta", cfg.beta},
      {"lr", cfg.lr},
      {"n_cycles", cfg.n_cycles},
      {"s_steps", cfg.s_steps},
      {"editable", cfg.editable.to_string()},
      {"gen_mode", cfg.gen_mode ? json(std::string(to_string(*cfg.gen_mode))) : json(nullptr)},
      {"scoring_mode", cfg.scoring_mode ? json(std::string(to_string(*cfg.scoring_mode))) : json(nullptr)},
      {"dataset_path", cfg.dataset_path ? json(*cfg.dataset_path) : json(nullptr)},
      {"synth",
       {{"n_subjects", cfg.synth.n_subjects},
        {"n_relations", cfg.synth.n_relations},
        {"n_requests", cfg.synth.n_requests}}},
      {"checkpoint_path", cfg.checkpoint_path ? json(*cfg.checkpoint_path) : json(nullptr)},
      {"pretrain",
       {{"epochs", cfg.pretrain.epochs},
        {"lr", cfg.pretrain.lr},
        {"batch_size", cfg.pretrain.batch_size},
        {"stop_at_accuracy",
         cfg.pretrain.stop_at_accuracy ? json(*cfg.pretrain.stop_at_accuracy) : json(nullptr)},
        {"eval_every", cfg.pretrain.eval_every}}},
      {"n_edits", cfg.n_edits},
      {"fluency_gen_len", cfg.fluency_gen_len},
      {"seed", cfg.seed},
  };
  return out;
}

RunConfig run_config_from_json(const json& doc) {
  if (!doc.is_object()) {
    throw std::invalid_argument("run config must be a JSON object");
  }
  RunConfig cfg;
  const auto get = [](const json& obj, const char* key, auto& into) {
    if (const auto it = obj.find(key); it != obj.end() && !it->is_null()) {
      into = it->get<std::remove_reference_t<decltype(into)>>();
    }
  };
  if (const auto it = doc.find("model"); it != doc.end()) {
    get(*it, "vocab_size", cfg.model.vocab_size);
    get(*it, "d_model", cfg.model.d_model);
    get(*it, "n_layers", cfg.model.n_layers);
    get(*it, "n_heads", cfg.model.n_heads);
    get(*it, "d_ff", cfg.model.d_ff);
    get(*it, "max_ctx", cfg.model.max_ctx);
  }
  if (const auto it = doc.find("methods"); it != doc.end()) {
    cfg.methods.clear();
    for (const json& m : *it) {
      cfg.methods.push_back(parse_method(m.get<std::string>()));
    }
  }
  get(doc, "beta", cfg.beta);
  get(doc, "lr", cfg.lr);
  get(doc, "n_cycles", cfg.n_cycles);
  get(doc, "s_steps", cfg.s_steps);
  if (const auto it = doc.find("editable"); it != doc.end() && it->is_string()) {
    cfg.editable = ParamSelector::parse(it->get<std::string>());
  }
  if (const auto it = doc.find("gen_mode"); it != doc.end() && it->is_string()) {
    cfg.gen_mode = parse_gen_mode(it->get<std::string>());
  }
  if (const auto it = doc.find("scoring_mode"); it != doc.end() && it->is_string()) {
    cfg.scoring_mode = parse_scoring_mode(it->get<std::string>());
  }
  if (const auto it = doc.find("dataset_path"); it != doc.end() && it->is_string()) {
    cfg.dataset_path = it->get<std::string>();
  }
  if (const auto it = doc.find("synth"); it != doc.end()) {
    get(*it, "n_subjects", cfg.synth.n_subjects);
    get(*it, "n_relations", cfg.synth.n_relations);
    get(*it, "n_requests", cfg.synth.n_requests);
  }
  if (const auto it = doc.find("checkpoint_path"); it != doc.end() && it->is_string()) {
    cfg.checkpoint_path = it->get<std::string>();
  }
  if (const auto it = doc.find("pretrain"); it != doc.end()) {
    get(*it, "epochs", cfg.pretrain.epochs);
    get(*it, "lr", cfg.pretrain.lr);
    get(*it, "batch_size", cfg.pretrain.batch_size);
    get(*it, "eval_every", cfg.pretrain.eval_every);
    if (const auto s = it->find("stop_at_accuracy"); s != it->end() && !s->is_null()) {
      cfg.pretrain.stop_at_accuracy = s->get<double>();
    }
  }
  get(doc, "n_edits", cfg.n_edits);
  get(doc, "fluency_gen_len", cfg.fluency_gen_len);
  get(doc, "out_dir", cfg.out_dir);
  get(doc, "seed", cfg.seed);
  return cfg;
}

// ---------------------------------------------------------------- files

void write_text_file(const std::string& path, const std::string& text) {
  const fs::path target(path);
  if (target.has_parent_path()) {
    fs::create_directories(target.parent_path());
  }
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) {
      throw std::runtime_error("cannot write '" + tmp.string() + "'");
    }
    out << text;
    if (!out) {
      throw std::runtime_error("write to '" + tmp.string() + "' failed");
    }
  }
  fs::rename(tmp, target);
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw std::runtime_error("cannot read '" + path + "'");
  }
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::runtime_error("'" + path + "' is not valid JSON: " + e.what());
  }
}

json to_json(const GeneratedWorld& g) {
  const auto facts = [](const std::vector<Fact>& fs) {
    json arr = json::array();
    for (const Fact& f : fs) {
      arr.push_back({{"subject", f.subject}, {"relation", f.relation}, {"object", f.object}});
    }
    return arr;
  };
  return {{"options",
           {{"seed", g.world.options.seed},
            {"n_subjects", g.world.options.n_subjects},
            {"n_relations", g.world.options.n_relations},
            {"n_requests", g.world.options.n_requests}}},
          {"subjects", g.world.subjects},
          {"relations", g.world.relations},
          {"base_facts", facts(g.world.base_facts)},
          {"hop_facts", facts(g.world.hop_facts)},
          {"corpus", g.corpus}};
}

GeneratedWorld world_from_json(const json& doc) {
  GeneratedWorld g;
  try {
    const json& o = doc.at("options");
    g.world.options.seed = o.at("seed").get<std::uint64_t>();
    g.world.options.n_subjects = o.at("n_subjects").get<int>();
    g.world.options.n_relations = o.at("n_relations").get<int>();
    g.world.options.n_requests = o.at("n_requests").get<int>();
    g.world.subjects = doc.at("subjects").get<std::vector<std::string>>();
    g.world.relations = doc.at("relations").get<std::vector<std::string>>();
    for (const char* key : {"base_facts", "hop_facts"}) {
      auto& into = std::string(key) == "base_facts" ? g.world.base_facts : g.world.hop_facts;
      for (const json& f : doc.at(key)) {
        into.push_back(Fact{f.at("subject").get<std::string>(), f.at("relation").get<std::string>(),
                            f.at("object").get<std::string>()});
      }
    }
    g.corpus = doc.at("corpus").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("malformed world file: ") + e.what());
  }
  return g;
}

// ------------------------------------------------------------ building blocks

std::vector<std::string> corpus_from_requests(std::span<const EditRequest> requests) {
  std::vector<std::string> out;
  for (const EditRequest& r : requests) {
    if (r.ground_truth) {
      out.push_back(r.prompt + " " + *r.ground_truth + " .");
    }
    for (const auto& [category, probes] : r.locality) {
      for (const ProbeText& p : probes) {
        out.push_back(p.prompt + " " + p.ground_truth + " .");
      }
    }
  }
  return out;
}

std::vector<Probe> facts_from_requests(std::span<const EditRequest> requests, const Vocabulary& vocab) {
  std::vector<Probe> out;
  for (const EditRequest& r : requests) {
    if (r.ground_truth) {
      out.push_back(Probe{vocab.encode(r.prompt), vocab.encode(*r.ground_truth)});
    }
    for (const Probe& p : group_probes(r.locality, vocab)) {
      out.push_back(p);
    }
  }
  return out;
}

std::vector<TokenSeq> encode_all(std::span<const std::string> lines, const Vocabulary& vocab) {
  std::vector<TokenSeq> out;
  out.reserve(lines.size());
  for (const std::string& line : lines) {
    out.push_back(vocab.encode(line));
  }
  return out;
}

std::optional<double> prompt_fluency(const TinyLM& model, std::span<const EditRequest> requests,
                                     const Vocabulary& vocab, int gen_len) {
  if (requests.empty()) {
    return std::nullopt;
  }
  std::vector<TokenSeq> prompts;
  for (const EditRequest& r : requests) {
    prompts.push_back(vocab.encode(r.prompt));
  }
  return fluency(model, prompts, gen_len);
}

namespace {

std::optional<double> mean_match(const TinyLM& model, std::span<const Probe> probes) {
  if (probes.empty()) {
    return std::nullopt;
  }
  return portability(model, probes);
}

std::optional<double> mean_locality(const TinyLM& pre, const TinyLM& post, std::span<const Probe> probes) {
  if (probes.empty()) {
    return std::nullopt;
  }
  return locality(pre, post, probes);
}

}  // namespace

MethodMetrics evaluate_method(const std::string& method, const TinyLM& pre, const TinyLM& post,
                              std::span<const EditRequest> requests, std::span<const EditOutcome> outcomes,
                              const Vocabulary& vocab, int fluency_gen_len) {
  if (!outcomes.empty() && outcomes.size() != requests.size()) {
    throw std::invalid_argument("evaluate_method: " + std::to_string(outcomes.size()) + " outcomes for " +
                                std::to_string(requests.size()) + " requests");
  }
  MethodMetrics m;
  m.method = method;
  std::vector<Probe> es_pool, port_pool, loc_pool;
  int exact = 0;
  for (std::size_t i = 0; i < requests.size(); ++i) {
    const EditRequest& r = requests[i];
    const EditTokens tokens = tokenize_edit(r, vocab);
    const std::vector<Probe> es = rephrase_probes(r, vocab);
    const std::vector<Probe> port = group_probes(r.portability, vocab);
    const std::vector<Probe> loc = group_probes(r.locality, vocab);
    es_pool.insert(es_pool.end(), es.begin(), es.end());
    port_pool.insert(port_pool.end(), port.begin(), port.end());
    loc_pool.insert(loc_pool.end(), loc.begin(), loc.end());

    RequestMetrics rm;
    rm.index = static_cast<int>(i);
    rm.subject = r.subject;
    rm.prompt = r.prompt;
    rm.target = r.target_new;
    const TokenSeq answer = greedy_answer(post, tokens.prompt, tokens.target.size());
    rm.post_answer = vocab.decode(answer);
    rm.exact = exact_match(answer, tokens.target);
    exact += rm.exact ? 1 : 0;
    rm.edit_success = *edit_success(post, es);
    rm.portability = mean_match(post, port);
    rm.locality = mean_locality(pre, post, loc);
    if (!outcomes.empty()) {
      const EditOutcome& o = outcomes[i];
      rm.cycles_used = o.cycles_used;
      rm.total_steps = o.total_steps;
      rm.converged = o.converged;
      rm.param_drift = o.param_drift;
      m.converged += o.converged ? 1 : 0;
      m.total_steps += o.total_steps;
    }
    m.per_request.push_back(std::move(rm));
  }

  m.edit_success = edit_success(post, es_pool);
  if (!requests.empty()) {
    m.exact_match = static_cast<double>(exact) / static_cast<double>(requests.size());
  }
  m.portability = mean_match(post, port_pool);
  m.locality = mean_locality(pre, post, loc_pool);
  if (!m.locality && requests.empty()) {
    // No edits were made, so nothing can have moved.
    m.locality = 1.0;
  }
  m.fluency = prompt_fluency(post, requests, vocab, fluency_gen_len);
  if (!outcomes.empty()) {
    double cycles = 0.0;
    for (const EditOutcome& o : outcomes) {
      cycles += o.cycles_used;
    }
    m.mean_cycles = cycles / static_cast<double>(outcomes.size());
  }
  return m;
}

json trace_record(std::size_t index, const EditRequest& request, const EditOutcome& outcome,
                  const Vocabulary& vocab) {
  json cycles = json::array();
  for (const CycleTrace& c : outcome.cycles) {
    cycles.push_back({{"negative", vocab.decode(c.negative)},
                      {"cancelled_positions", c.cancelled_positions},
                      {"losses", c.losses}});
  }
  return {{"index", index},
          {"method", std::string(to_string(outcome.method))},
          {"subject", request.subject},
          {"prompt", request.prompt},
          {"target_new", request.target_new},
          {"converged", outcome.converged},
          {"cycles_used", outcome.cycles_used},
          {"total_steps", outcome.total_steps},
          {"final_answer", vocab.decode(outcome.final_answer)},
          {"param_drift", outcome.param_drift},
          {"cycles", std::move(cycles)}};
}

void write_trace(const std::string& path, std::span<const EditRequest> requests,
                 std::span<const EditOutcome> outcomes, const Vocabulary& vocab) {
  std::ostringstream out;
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    out << trace_record(i, requests[i], outcomes[i], vocab).dump() << '\n';
  }
  write_text_file(path, out.str());
}

// -------------------------------------------------------------- pipeline

namespace {

class Manifest {
 public:
  explicit Manifest(const RunConfig& cfg) : cfg_(cfg) {}

  void stage(std::string name) { stages_.push_back(std::move(name)); }
  void artifact(const std::string& file) { artifacts_.push_back(file); }

  void write(const std::optional<std::string>& failed_stage, const std::string& error) const {
    json doc = {{"status", failed_stage ? "failed" : "ok"},
                {"stages_completed", stages_},
                {"artifacts", artifacts_},
                {"config", to_json(cfg_)},
                {"out_dir", cfg_.out_dir}};
    if (failed_stage) {
      doc["failed_stage"] = *failed_stage;
      doc["error"] = error;
    }
    write_text_file((fs::path(cfg_.out_dir) / "manifest.json").string(), doc.dump(2) + "\n");
  }

 private:
  const RunConfig& cfg_;
  std::vector<std::string> stages_;
  std::vector<std::string> artifacts_;
};

}  // namespace

MetricsReport run_experiment(const RunConfig& input) {
  RunConfig cfg = input;
  cfg.model.seed = cfg.seed;
  cfg.synth.seed = cfg.seed;
  cfg.pretrain.seed = cfg.seed;
  fs::create_directories(cfg.out_dir);
  const fs::path out_dir(cfg.out_dir);
  const Vocabulary& vocab = Vocabulary::fact_world();

  Manifest manifest(cfg);
  std::string current = "config";
  try {
    cfg.validate();
    manifest.stage(current);

    current = "dataset";
    std::vector<EditRequest> requests;
    std::vector<std::string> corpus;
    std::vector<Probe> facts;
    if (cfg.dataset_path) {
      requests = load_dataset(*cfg.dataset_path);
      corpus = corpus_from_requests(requests);
      facts = facts_from_requests(requests, vocab);
    } else {
      GeneratedWorld g = gen_fact_world(cfg.synth, cfg.model.vocab_size);
      requests = std::move(g.requests);
      corpus = std::move(g.corpus);
      facts = fact_probes(g.world, vocab);
    }
    manifest.stage(current);

    current = "dedup";
    requests = dedup_by_subject(requests);
    if (static_cast<std::size_t>(cfg.n_edits) > requests.size()) {
      throw std::invalid_argument("n_edits = " + std::to_string(cfg.n_edits) + " but only " +
                                  std::to_string(requests.size()) + " requests remain after dedup");
    }
    requests.resize(static_cast<std::size_t>(cfg.n_edits));
    manifest.stage(current);

    current = "pretrain";
    json pretrain_info;
    std::optional<TinyLM> model;
    if (cfg.checkpoint_path) {
      model.emplace(load_checkpoint(*cfg.checkpoint_path));
      if (!(model->config().vocab_size == cfg.model.vocab_size)) {
        throw std::invalid_argument("checkpoint vocab_size " + std::to_string(model->config().vocab_size) +
                                    " does not match the run's " + std::to_string(cfg.model.vocab_size));
      }
      pretrain_info = {{"source", "checkpoint"}};
    } else {
      model.emplace(cfg.model);
      const std::vector<TokenSeq> tokens = encode_all(corpus, vocab);
      const PretrainResult r = pretrain(*model, tokens, facts, cfg.pretrain);
      save_checkpoint(*model, (out_dir / "pretrained.ckpt").string());
      manifest.artifact("pretrained.ckpt");
      pretrain_info = {{"source", "trained"},
                       {"epochs_run", r.epochs_run},
                       {"final_loss", r.epoch_loss.empty() ? json(nullptr) : json(r.epoch_loss.back())}};
    }
    pretrain_info["fact_accuracy"] = facts.empty() ? json(nullptr) : json(fact_accuracy(*model, facts));
    pretrain_info["n_facts"] = facts.size();
    manifest.stage(current);

    const TinyLM pre = model->snapshot();
    std::vector<EditTokens> edits;
    for (const EditRequest& r : requests) {
      edits.push_back(tokenize_edit(r, vocab));
    }

    MetricsReport report;
    report.n_edits = cfg.n_edits;
    report.config = to_json(cfg);
    report.pretrain = pretrain_info;
    report.fluency_pre = prompt_fluency(pre, requests, vocab, cfg.fluency_gen_len);
    for (Method method : cfg.methods) {
      const std::string name(to_string(method));
      current = "edit:" + name;
      TinyLM post = pre.snapshot();
      const std::vector<EditOutcome> outcomes = sequential_edit(post, edits, cfg.editor_for(method));
      write_trace((out_dir / ("trace_" + name + ".jsonl")).string(), requests, outcomes, vocab);
      manifest.artifact("trace_" + name + ".jsonl");
      manifest.stage(current);

      current = "metrics:" + name;
      report.methods.push_back(evaluate_method(name, pre, post, requests, outcomes, vocab, cfg.fluency_gen_len));
      manifest.stage(current);
    }

    current = "report";
    const auto has = [&](Method m) {
      return std::find(cfg.methods.begin(), cfg.methods.end(), m) != cfg.methods.end();
    };
    if (has(Method::kdpo) && has(Method::dpo)) {
      if (auto d = locality_direction(report, "kdpo", "dpo", false)) {
        report.directions.push_back(*d);
      }
    }
    if (has(Method::kdpo) && has(Method::ft_m)) {
      if (auto d = locality_direction(report, "kdpo", "ft_m", true)) {
        report.directions.push_back(*d);
      }
    }
    write_text_file((out_dir / "report.json").string(), to_json(report, cfg.fluency_gen_len).dump(2) + "\n");
    write_text_file((out_dir / "report.md").string(), to_markdown(report, cfg.fluency_gen_len));
    write_text_file((out_dir / "plot_data.json").string(), plot_data(report).dump(2) + "\n");
    for (const char* f : {"report.json", "report.md", "plot_data.json"}) {
      manifest.artifact(f);
    }
    manifest.stage(current);
    manifest.write(std::nullopt, "");
    return report;
  } catch (const std::exception& e) {
    try {
      manifest.write(current, e.what());
    } catch (...) {
      // The original failure matters more than a manifest we could not write.
    }
    throw StageError(current, e.what());
  }
}

}  // namespace kelab
