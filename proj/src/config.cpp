#include "rilke/config.hpp"

#include <functional>
#include <map>
#include <sstream>

#include "json.hpp"
#include "rilke/error.hpp"
#include "rilke/matrix.hpp"

namespace rilke {

using nlohmann::json;

namespace {

using Setter = std::function<void(const json&)>;

void read_object(const json& j, const std::string& where, const std::map<std::string, Setter>& fields) {
  require(j.is_object(), ErrorKind::config, where + " must be an object");
  for (const auto& [key, value] : j.items()) {
    const auto it = fields.find(key);
    require(it != fields.end(), ErrorKind::config, "unknown config key " + where + "." + key);
    try {
      it->second(value);
    } catch (const json::exception& e) {
      fail(ErrorKind::config, "config key " + where + "." + key + ": " + e.what());
    }
  }
}

template <typename T>
Setter into(T& field) {
  return [&field](const json& v) { field = v.get<T>(); };
}

std::string site_name(PerturbSite site) { return site == PerturbSite::prompt_final ? "prompt-final" : "all-prompt"; }

PerturbSite parse_site(const std::string& name) {
  if (name == "prompt-final") return PerturbSite::prompt_final;
  if (name == "all-prompt") return PerturbSite::all_prompt;
  fail(ErrorKind::config, "unknown perturbation site '" + name + "'");
}

}  // namespace

void RunConfig::set_seed(std::uint64_t s) {
  seed = s;
  model.seed = pretrain.seed = corpus.seed = robust.seed = s;
}

void RunConfig::validate() const {
  ModelConfig shape = model;
  if (shape.vocab == 0) shape.vocab = 2;  // filled in from the tokenizer at pretrain time
  shape.validate();
  const int l = resolved_layer();
  require(l >= 1 && l <= model.layers, ErrorKind::config, "layer " + std::to_string(l) + " out of range");
  require(rank >= 1 && rank <= static_cast<std::size_t>(model.width), ErrorKind::config, "rank out of range");
  require(gate >= 0 && gate <= 1, ErrorKind::config, "gate must lie in [0, 1]");
  require(!sigma || *sigma >= 0, ErrorKind::config, "sigma must be non-negative");
  require(sigma_scale >= 0, ErrorKind::config, "sigma_scale must be non-negative");
  require(max_new >= 1, ErrorKind::config, "max_new must be positive");
  require(corpus.items >= 1 && corpus.paraphrases >= 0, ErrorKind::config, "corpus sizes must be positive");
  require(study.repetitions >= 3, ErrorKind::config, "bench repetitions must be at least 3");
  for (int layer : study.layers)
    require(layer >= 1 && layer <= model.layers, ErrorKind::config, "study layer out of range");
  for (double tau : study.taus) require(tau > 0 && tau < 1, ErrorKind::config, "study tau must lie in (0, 1)");
  robust.validate();
  cluster.validate();
}

RunConfig parse_run_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::config, std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig c;
  if (j.contains("seed")) c.set_seed(j.at("seed").get<std::uint64_t>());
  std::string mode = to_string(c.mode), linkage = to_string(c.cluster.linkage), site = site_name(c.robust.site),
              scope = to_string(c.robust.scope), rouge = "f1";
  double sigma = -1;
  std::string corpus, checkpoint, store, out;

  read_object(j, "config", {
    {"seed", [](const json&) {}},
    {"model", [&](const json& v) {
      read_object(v, "model", {{"layers", into(c.model.layers)}, {"width", into(c.model.width)},
                               {"heads", into(c.model.heads)}, {"ffn", into(c.model.ffn)},
                               {"max_len", into(c.model.max_len)}});
    }},
    {"pretrain", [&](const json& v) {
      read_object(v, "pretrain", {{"steps", into(c.pretrain.steps)}, {"lr", into(c.pretrain.lr)},
                                  {"batch", into(c.pretrain.batch)},
                                  {"warmup_fraction", into(c.pretrain.warmup_fraction)},
                                  {"clip_norm", into(c.pretrain.clip_norm)}});
    }},
    {"corpus", [&](const json& v) {
      read_object(v, "corpus", {{"items", into(c.corpus.items)}, {"paraphrases", into(c.corpus.paraphrases)},
                                {"probe_families", into(c.corpus.probe_families)},
                                {"min_family", into(c.corpus.min_family)},
                                {"max_family", into(c.corpus.max_family)}});
    }},
    {"layer", into(c.layer)},
    {"rank", into(c.rank)},
    {"gate", into(c.gate)},
    {"mode", into(mode)},
    {"threads", into(c.threads)},
    {"max_new", into(c.max_new)},
    {"rouge", into(rouge)},
    {"checkpoints", into(c.checkpoints)},
    {"robust", [&](const json& v) {
      read_object(v, "robust", {{"sigma", into(sigma)}, {"sigma_scale", into(c.sigma_scale)},
                                {"lambda_robu", into(c.robust.lambda_robu)}, {"samples", into(c.robust.samples)},
                                {"lr", into(c.robust.lr)}, {"max_steps", into(c.robust.max_steps)},
                                {"target_loss", into(c.robust.target_loss)}, {"site", into(site)},
                                {"scope", into(scope)}});
    }},
    {"cluster", [&](const json& v) {
      read_object(v, "cluster", {{"tau_sim", into(c.cluster.tau_min)}, {"step", into(c.cluster.step)},
                                 {"s_max", into(c.cluster.s_max)}, {"linkage", into(linkage)},
                                 {"tau_cap", into(c.cluster.tau_cap)}});
    }},
    {"study", [&](const json& v) {
      read_object(v, "study", {{"random_pairs", into(c.study.random_pairs)}, {"sample", into(c.study.sample)},
                               {"vector_sample", into(c.study.vector_sample)}, {"layers", into(c.study.layers)},
                               {"taus", into(c.study.taus)}, {"repetitions", into(c.study.repetitions)},
                               {"bench_tokens", into(c.study.bench_tokens)},
                               {"bench_prompts", into(c.study.bench_prompts)},
                               {"robust_draws", into(c.study.robust_draws)}});
    }},
    {"paths", [&](const json& v) {
      read_object(v, "paths", {{"corpus", into(corpus)}, {"checkpoint", into(checkpoint)},
                               {"store", into(store)}, {"out", into(out)}});
    }},
  });

  try {
    c.mode = parse_mode(mode);
    c.cluster.linkage = parse_linkage(linkage);
    c.robust.scope = parse_scope(scope);
  } catch (const Error& e) {
    fail(ErrorKind::config, e.what());
  }
  c.robust.site = parse_site(site);
  require(rouge == "f1" || rouge == "recall", ErrorKind::config, "rouge must be f1 or recall");
  c.rouge = rouge == "f1" ? RougeVariant::f1 : RougeVariant::recall;
  if (sigma >= 0) c.sigma = sigma;
  c.paths = {corpus, checkpoint, store, out};
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  require(std::filesystem::exists(path), ErrorKind::config, "config file not found: " + path.string());
  return parse_run_config(read_file_text(path));
}

std::string dump_run_config(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["seed"] = c.seed;
  j["model"] = {{"layers", c.model.layers}, {"width", c.model.width}, {"heads", c.model.heads},
                {"ffn", c.model.ffn}, {"max_len", c.model.max_len}};
  j["pretrain"] = {{"steps", c.pretrain.steps}, {"lr", c.pretrain.lr}, {"batch", c.pretrain.batch},
                   {"warmup_fraction", c.pretrain.warmup_fraction}, {"clip_norm", c.pretrain.clip_norm}};
  j["corpus"] = {{"items", c.corpus.items}, {"paraphrases", c.corpus.paraphrases},
                 {"probe_families", c.corpus.probe_families}, {"min_family", c.corpus.min_family},
                 {"max_family", c.corpus.max_family}};
  j["layer"] = c.resolved_layer();
  j["rank"] = c.rank;
  j["gate"] = c.gate;
  j["mode"] = to_string(c.mode);
  j["threads"] = c.threads;
  j["max_new"] = c.max_new;
  j["rouge"] = c.rouge == RougeVariant::f1 ? "f1" : "recall";
  j["checkpoints"] = c.checkpoints;
  nlohmann::ordered_json robust = {{"sigma_scale", c.sigma_scale}, {"lambda_robu", c.robust.lambda_robu},
                                   {"samples", c.robust.samples}, {"lr", c.robust.lr},
                                   {"max_steps", c.robust.max_steps}, {"target_loss", c.robust.target_loss},
                                   {"site", site_name(c.robust.site)}, {"scope", to_string(c.robust.scope)}};
  if (c.sigma) robust["sigma"] = *c.sigma;
  j["robust"] = robust;
  j["cluster"] = {{"tau_sim", c.cluster.tau_min}, {"step", c.cluster.step}, {"s_max", c.cluster.s_max},
                  {"linkage", to_string(c.cluster.linkage)}, {"tau_cap", c.cluster.tau_cap}};
  j["study"] = {{"random_pairs", c.study.random_pairs}, {"sample", c.study.sample},
                {"vector_sample", c.study.vector_sample}, {"layers", c.study.layers}, {"taus", c.study.taus},
                {"repetitions", c.study.repetitions}, {"bench_tokens", c.study.bench_tokens},
                {"bench_prompts", c.study.bench_prompts}, {"robust_draws", c.study.robust_draws}};
  j["paths"] = {{"corpus", c.paths.corpus.string()}, {"checkpoint", c.paths.checkpoint.string()},
                {"store", c.paths.store.string()}, {"out", c.paths.out.string()}};
  return j.dump(2) + "\n";
}

std::vector<std::size_t> parse_checkpoints(const std::string& list) {
  std::vector<std::size_t> out;
  std::stringstream ss(list);
  std::string part;
  while (std::getline(ss, part, ',')) {
    std::size_t used = 0;
    long long v = 0;
    try {
      v = std::stoll(part, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    require(used == part.size() && !part.empty() && v >= 1, ErrorKind::config,
            "bad checkpoint '" + part + "' (expected positive integers separated by commas)");
    out.push_back(static_cast<std::size_t>(v));
  }
  require(!out.empty(), ErrorKind::config, "empty checkpoint list");
  return out;
}

EditSetup make_setup(const RunConfig& config, const BaseModel& model, const Tokenizer& tok,
                     const std::vector<KnowledgeItem>& items) {
  EditSetup s;
  s.model = &model;
  s.tok = &tok;
  s.layer = config.resolved_layer();
  s.rank = config.rank;
  s.gate = config.gate;
  s.robust = config.robust;
  s.cluster = config.cluster;
  s.scope = config.robust.scope;
  s.threads = config.threads;
  s.max_new = config.max_new;
  s.rouge = config.rouge;
  if (config.sigma) {
    s.robust.sigma = *config.sigma;
  } else {
    require(!items.empty(), ErrorKind::input, "cannot calibrate sigma without items");
    s.robust.sigma = calibrate_sigma(model, s.layer, encode_items(tok, items), config.sigma_scale);
  }
  s.validate();
  return s;
}

}  // namespace rilke
