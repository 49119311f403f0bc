#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "rilke/config.hpp"
#include "rilke/engine.hpp"
#include "rilke/eval.hpp"
#include "rilke/matrix.hpp"

namespace fs = std::filesystem;
using namespace rilke;

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> layer;
  std::optional<std::size_t> rank;
  std::optional<double> gate;
  std::optional<double> tau_sim;
  std::optional<std::size_t> s_max;
  std::optional<std::string> mode;
  std::optional<std::string> out;
  std::optional<std::string> checkpoints;
  std::optional<std::string> corpus, checkpoint, store;
  std::optional<int> limit;
  std::optional<unsigned> threads;
  std::string prompt;
  int max_new = 0;
};

struct Context {
  RunConfig cfg;
  fs::path out, corpus, checkpoint, store;
  std::optional<int> limit;
  std::optional<double> gate_flag;
};

Context resolve(const Flags& f) {
  Context c;
  if (!f.config.empty()) c.cfg = load_run_config(f.config);
  RunConfig& cfg = c.cfg;
  if (f.seed) cfg.set_seed(*f.seed);
  if (f.layer) cfg.layer = *f.layer;
  if (f.rank) cfg.rank = *f.rank;
  if (f.gate) cfg.gate = *f.gate;
  if (f.tau_sim) cfg.cluster.tau_min = *f.tau_sim;
  if (f.s_max) cfg.cluster.s_max = *f.s_max;
  if (f.threads) cfg.threads = *f.threads;
  if (f.max_new > 0) cfg.max_new = f.max_new;
  if (f.mode) {
    try {
      cfg.mode = parse_mode(*f.mode);
    } catch (const Error& e) {
      fail(ErrorKind::config, e.what());
    }
  }
  if (f.checkpoints) cfg.checkpoints = parse_checkpoints(*f.checkpoints);
  cfg.validate();

  if (f.out)
    c.out = *f.out;
  else if (const char* env = std::getenv("RILKE_OUT"); env && *env)
    c.out = env;
  else if (!cfg.paths.out.empty())
    c.out = cfg.paths.out;
  else
    c.out = "rilke-out";
  auto pick = [&](const std::optional<std::string>& flag, const fs::path& configured, const char* name) {
    if (flag) return fs::path(*flag);
    if (!configured.empty()) return configured;
    return c.out / name;
  };
  c.corpus = pick(f.corpus, cfg.paths.corpus, "corpus");
  c.checkpoint = pick(f.checkpoint, cfg.paths.checkpoint, "checkpoint");
  c.store = pick(f.store, cfg.paths.store, "store");
  c.limit = f.limit;
  c.gate_flag = f.gate;
  return c;
}

void need(const fs::path& p, const std::string& what) {
  require(fs::exists(p), ErrorKind::load, what + " not found: " + p.string());
}

struct Data {
  std::vector<KnowledgeItem> items;
  std::vector<ProbeItem> probes;
};

Data load_data(const Context& c) {
  need(c.corpus / "items.jsonl", "corpus items");
  Data d;
  d.items = ingest_jsonl(c.corpus / "items.jsonl");
  if (fs::exists(c.corpus / "probes.jsonl")) d.probes = ingest_probes(c.corpus / "probes.jsonl");
  if (c.limit) {
    require(*c.limit >= 1, ErrorKind::config, "--limit must be positive");
    if (d.items.size() > static_cast<std::size_t>(*c.limit)) d.items.resize(static_cast<std::size_t>(*c.limit));
  }
  require(!d.items.empty(), ErrorKind::input, "corpus has no items");
  return d;
}

Checkpoint load_model(const Context& c) {
  need(c.checkpoint / "manifest.json", "checkpoint");
  return load_checkpoint(c.checkpoint);
}

void print_row(const MetricsRow& r) {
  std::printf("split=%s T=%zu rouge_l=%.4f exact=%.4f rep_cosine=%.4f routing=%.4f utility_delta=%.4f\n",
              to_string(r.split).c_str(), r.step, r.rouge, r.exact, r.rep_cosine, r.routing, r.utility_delta);
}

void write_rows(const fs::path& path, const std::vector<MetricsRow>& rows) {
  std::ostringstream os;
  os << "split\tT\trouge_l\texact\trep_cosine\trouting\tutility_delta\n";
  for (const auto& r : rows)
    os << to_string(r.split) << '\t' << r.step << '\t' << r.rouge << '\t' << r.exact << '\t' << r.rep_cosine << '\t'
       << r.routing << '\t' << r.utility_delta << '\n';
  fs::create_directories(path.parent_path());
  write_file_atomic(path, os.str());
}

void print_study(const StudyResult& s, const fs::path& dir) {
  write_study(dir, s);
  for (const auto& [k, v] : s.values) std::printf("%s\t%.6g\n", k.c_str(), v);
  for (const auto& [k, v] : s.series) {
    std::printf("%s\t", k.c_str());
    for (std::size_t i = 0; i < v.size(); ++i) std::printf(i ? ",%.6g" : "%.6g", v[i]);
    std::printf("\n");
  }
  std::printf("wrote %s\n", (dir / (s.name + ".json")).string().c_str());
}

int cmd_gen_corpus(const Context& c) {
  const Corpus corpus = generate_corpus(c.cfg.corpus);
  fs::create_directories(c.corpus);
  export_jsonl(c.corpus / "items.jsonl", corpus.items);
  export_probes(c.corpus / "probes.jsonl", corpus.probes);
  std::string text;
  for (const auto& line : corpus.pretrain) text += line + "\n";
  write_file_atomic(c.corpus / "pretrain.txt", text);
  std::printf("items=%zu probes=%zu pretrain_lines=%zu dir=%s\n", corpus.items.size(), corpus.probes.size(),
              corpus.pretrain.size(), c.corpus.string().c_str());
  return 0;
}

int cmd_pretrain(const Context& c) {
  need(c.corpus / "pretrain.txt", "pretraining text");
  std::vector<std::string> lines;
  {
    std::ifstream in(c.corpus / "pretrain.txt");
    for (std::string line; std::getline(in, line);)
      if (!line.empty()) lines.push_back(line);
  }
  require(!lines.empty(), ErrorKind::input, "pretraining text is empty");
  std::vector<std::string> words = corpus_lexicon();
  auto add = [&](const std::string& text) {
    for (auto& w : Tokenizer::split(text)) words.push_back(w);
  };
  for (const auto& l : lines) add(l);
  if (fs::exists(c.corpus / "items.jsonl"))
    for (const auto& item : ingest_jsonl(c.corpus / "items.jsonl")) {
      add(item.prompt);
      add(item.target);
      for (const auto& p : item.paraphrases) add(p);
    }
  if (fs::exists(c.corpus / "probes.jsonl"))
    for (const auto& p : ingest_probes(c.corpus / "probes.jsonl")) {
      add(p.prompt);
      add(p.expected);
    }
  const Tokenizer tok(words);
  std::vector<std::vector<int>> seqs;
  for (const auto& l : lines) {
    auto ids = tok.encode(l);
    ids.push_back(Tokenizer::kEos);
    seqs.push_back(std::move(ids));
  }
  ModelConfig mc = c.cfg.model;
  mc.vocab = tok.size();
  const BaseModel model = pretrain(init_model(mc), seqs, c.cfg.pretrain);
  save_checkpoint(c.checkpoint, model, tok);
  std::printf("vocab=%d final_loss=%.6f digest=%016llx dir=%s\n", tok.size(), model.final_loss(),
              static_cast<unsigned long long>(weights_digest(model)), c.checkpoint.string().c_str());
  return 0;
}

int cmd_edit(const Context& c) {
  const Data data = load_data(c);
  const Checkpoint ck = load_model(c);
  const EditSetup setup = make_setup(c.cfg, ck.model, ck.tokenizer, data.items);
  if (c.cfg.mode == StoreMode::shared) {
    // Clusters depend on every item, so the shared store is rebuilt whole and
    // swapped in only once complete.
    const fs::path staging = c.store.string() + ".staging";
    fs::remove_all(staging);
    const SharedRun run = build_shared(setup, data.items, staging);
    save_assignment(staging / "assignment.json", run.assignment);
    fs::remove_all(c.store);
    fs::rename(staging, c.store);
    std::size_t failed = 0;
    for (const auto& [id, r] : run.reports) failed += r.failed;
    std::printf("mode=shared items=%zu clusters=%zu failed=%zu params=%zu dir=%s\n", data.items.size(),
                run.assignment.k(), failed, run.store.memory_report().module_params, c.store.string().c_str());
    return 0;
  }

  std::optional<EditStore> store;
  if (fs::exists(c.store / "manifest.json")) {
    store.emplace(EditStore::load(c.store));
    require(store->mode() == StoreMode::individual, ErrorKind::config, "existing store is not in individual mode");
    require(store->layer() == setup.layer && store->rank() == setup.rank, ErrorKind::config,
            "existing store was built with a different layer or rank");
  } else {
    store.emplace(StoreMode::individual, setup.layer, setup.rank,
                  static_cast<std::size_t>(ck.model.config().width), setup.gate, c.store, setup.scope);
  }
  std::set<std::string> present;
  for (const auto& e : store->entries()) present.insert(e.item_id);
  RobustConfig cfg = setup.robust;
  cfg.scope = store->scope();
  std::size_t added = 0, failed = 0;
  for (const auto& item : data.items) {
    if (present.count(item.id)) continue;
    const auto ex = encode_example(ck.tokenizer, item.prompt, item.target);
    auto trained = train_edit(ck.model, setup.layer, setup.rank, {ex}, cfg, cfg.seed, item.id);
    failed += trained.report.failed;
    store->add_edit(trained.module, hidden_at(ck.model, ex.prompt, setup.layer).vector, item.id);
    ++added;
  }
  std::printf("mode=individual added=%zu skipped=%zu failed=%zu total=%zu sigma=%.6g dir=%s\n", added,
              data.items.size() - added, failed, store->entries().size(), setup.robust.sigma,
              c.store.string().c_str());
  return 0;
}

int cmd_query(const Context& c, const std::string& prompt) {
  require(!prompt.empty(), ErrorKind::usage, "query needs --prompt");
  const Checkpoint ck = load_model(c);
  need(c.store / "manifest.json", "store");
  EditStore store = EditStore::load(c.store);
  if (c.gate_flag) store.set_gate(*c.gate_flag);
  const Engine engine(ck.model, store);
  const Answer a = engine.generate(ck.tokenizer.encode(prompt), c.cfg.max_new);
  const auto& r = a.route;
  std::printf("matched=%s item=%s module=%s cluster=%s cosine=%.6f distance=%.6f\n", r.matched ? "true" : "false",
              r.matched ? r.item_id.c_str() : "-", r.matched ? r.module_id.c_str() : "-",
              r.cluster_id ? r.cluster_id->c_str() : "-", r.cosine, r.distance);
  std::printf("continuation: %s\n", ck.tokenizer.decode(a.tokens).c_str());
  return 0;
}

int cmd_eval(const Context& c) {
  const Data data = load_data(c);
  const Checkpoint ck = load_model(c);
  const EditSetup setup = make_setup(c.cfg, ck.model, ck.tokenizer, data.items);
  std::vector<MetricsRow> rows;
  if (c.cfg.mode == StoreMode::shared) {
    const SharedRun run = build_shared(setup, data.items);
    const auto eval = evaluate_store(setup, run.store, data.items, data.probes, data.items.size());
    rows = {eval.original, eval.paraphrase};
    std::printf("clusters=%zu\n", run.assignment.k());
  } else {
    std::vector<std::size_t> cps = c.cfg.checkpoints;
    if (cps.empty())
      for (std::size_t t : {std::size_t{1}, std::size_t{10}, std::size_t{100}, data.items.size()})
        if (t <= data.items.size()) cps.push_back(t);
    rows = evaluate_sequential(setup, data.items, data.probes, cps).rows;
  }
  for (const auto& r : rows) print_row(r);
  write_rows(c.out / "metrics.tsv", rows);
  return 0;
}

int cmd_cluster(const Context& c) {
  const Data data = load_data(c);
  const Checkpoint ck = load_model(c);
  EditSetup setup = make_setup(c.cfg, ck.model, ck.tokenizer, data.items);
  std::vector<std::string> ids;
  for (const auto& item : data.items) ids.push_back(item.id);
  const auto assignment = constrained_clustering(item_keys(setup, data.items), ids, setup.cluster);
  fs::create_directories(c.out);
  save_assignment(c.out / "assignment.json", assignment);
  std::size_t largest = 0, fallback = 0;
  for (const auto& cl : assignment.clusters) {
    largest = std::max(largest, cl.items.size());
    fallback += cl.fallback;
  }
  std::printf("items=%zu k=%zu ratio=%.4f largest=%zu fallback=%zu dir=%s\n", ids.size(), assignment.k(),
              static_cast<double>(assignment.k()) / static_cast<double>(ids.size()), largest, fallback,
              (c.out / "assignment.json").string().c_str());
  return 0;
}

int cmd_bench(const Context& c) {
  const Data data = load_data(c);
  const Checkpoint ck = load_model(c);
  const EditSetup setup = make_setup(c.cfg, ck.model, ck.tokenizer, data.items);
  std::optional<EditStore> store;
  if (fs::exists(c.store / "manifest.json"))
    store.emplace(EditStore::load(c.store));
  else
    store.emplace(build_individual(setup, data.items).store);
  std::vector<std::string> prompts;
  for (const auto& item : data.items) {
    if (prompts.size() >= c.cfg.study.bench_prompts) break;
    prompts.push_back(item.prompt);
  }
  print_study(bench_latency(setup, *store, prompts, c.cfg.study.repetitions, c.cfg.study.bench_tokens),
              c.out / "studies");
  return 0;
}

int cmd_study(const Context& c, const std::string& which) {
  const Data data = load_data(c);
  const Checkpoint ck = load_model(c);
  const EditSetup setup = make_setup(c.cfg, ck.model, ck.tokenizer, data.items);
  const auto& so = c.cfg.study;
  const std::uint64_t seed = c.cfg.seed;
  StudyResult result;
  if (which == "study-prop1") {
    result = study_prop1(setup, data.items, so.random_pairs, seed);
  } else if (which == "study-prop2") {
    result = study_prop2(setup, data.items, so.sample, seed);
  } else if (which == "sweep-layers") {
    std::vector<int> layers = so.layers;
    if (layers.empty())
      for (int l = 1; l <= ck.model.config().layers; ++l) layers.push_back(l);
    result = study_layers(setup, data.items, layers);
  } else if (which == "sweep-tau") {
    result = sweep_tau(setup, data.items, data.probes, so.taus);
  } else if (which == "study-vectors") {
    std::vector<std::string> ids;
    for (const auto& item : data.items) ids.push_back(item.id);
    const auto assignment = constrained_clustering(item_keys(setup, data.items), ids, setup.cluster);
    result = study_edit_vectors(setup, data.items, assignment, std::min(so.vector_sample, data.items.size()), seed);
  } else {
    result = study_robust(setup, data.items, so.robust_draws);
  }
  print_study(result, c.out / "studies");
  return 0;
}

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::usage: return 2;
    case ErrorKind::config: return 3;
    case ErrorKind::integrity:
    case ErrorKind::load: return 4;
    default: return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Lifelong knowledge editing on a small frozen transformer"};
  app.require_subcommand(1);
  app.fallthrough();
  Flags f;
  app.add_option("--config", f.config, "Run config (JSON); flags override it");
  app.add_option("--seed", f.seed, "Top-level seed");
  app.add_option("--layer", f.layer, "Edited layer (1-based, default L/2)");
  app.add_option("--rank", f.rank, "Intervention rank");
  app.add_option("--gate", f.gate, "Routing gate (minimum cosine)");
  app.add_option("--tau-sim", f.tau_sim, "Cluster similarity floor");
  app.add_option("--s-max", f.s_max, "Maximum cluster size");
  app.add_option("--mode", f.mode, "individual | shared");
  app.add_option("--out", f.out, "Output directory (default $RILKE_OUT, then rilke-out)");
  app.add_option("--checkpoints", f.checkpoints, "Comma-separated edit counts to evaluate at");
  app.add_option("--corpus", f.corpus, "Corpus directory (default <out>/corpus)");
  app.add_option("--checkpoint", f.checkpoint, "Model directory (default <out>/checkpoint)");
  app.add_option("--store", f.store, "Store directory (default <out>/store)");
  app.add_option("--limit", f.limit, "Use only the first N corpus items");
  app.add_option("--threads", f.threads, "Worker threads for independent training sessions");
  app.add_option("--max-new", f.max_new, "Generation length cap");

  const std::vector<std::pair<std::string, std::string>> commands{
      {"gen-corpus", "Write the synthetic corpus"},
      {"pretrain", "Pretrain the base model on the corpus text"},
      {"edit", "Train modules and write the edit store"},
      {"query", "Route a prompt and generate"},
      {"eval", "Sequential (or shared-mode) evaluation"},
      {"cluster", "Constrained clustering of item keys"},
      {"bench", "Base vs routed per-token latency"},
      {"study-prop1", "Paraphrase vs random key distances"},
      {"study-prop2", "Key similarity vs subspace alignment"},
      {"sweep-layers", "Edit quality per layer"},
      {"sweep-tau", "Shared mode across similarity floors"},
      {"study-vectors", "Individual vs batched edit vectors"},
      {"study-robust", "Robustness term ablation"},
  };
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, help] : commands) subs[name] = app.add_subcommand(name, help);
  subs["query"]->add_option("--prompt", f.prompt, "Prompt text")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const Context c = resolve(f);
    fs::create_directories(c.out);
    for (const auto& [name, sub] : subs) {
      if (!sub->parsed()) continue;
      if (name == "gen-corpus") return cmd_gen_corpus(c);
      if (name == "pretrain") return cmd_pretrain(c);
      if (name == "edit") return cmd_edit(c);
      if (name == "query") return cmd_query(c, f.prompt);
      if (name == "eval") return cmd_eval(c);
      if (name == "cluster") return cmd_cluster(c);
      if (name == "bench") return cmd_bench(c);
      return cmd_study(c, name);
    }
    return 2;
  } catch (const Error& e) {
    std::fprintf(stderr, "error[%s]: %s\n", std::string(to_string(e.kind())).c_str(), e.what());
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error[internal]: %s\n", e.what());
    return 1;
  }
}
