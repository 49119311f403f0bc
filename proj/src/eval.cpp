#include "rilke/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"
#include "rilke/error.hpp"
#include "rilke/kernels.hpp"
#include "rilke/parallel.hpp"
#include "rilke/rng.hpp"

namespace rilke {

std::size_t lcs_length(const std::vector<int>& a, const std::vector<int>& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(const std::vector<int>& hyp, const std::vector<int>& ref, RougeVariant variant) {
  require(!ref.empty(), ErrorKind::input, "rouge_l: empty reference");
  if (hyp.empty()) return 0.0;
  const double lcs = static_cast<double>(lcs_length(hyp, ref));
  if (lcs == 0) return 0.0;
  const double r = lcs / static_cast<double>(ref.size());
  if (variant == RougeVariant::recall) return r;
  const double p = lcs / static_cast<double>(hyp.size());
  return 2 * p * r / (p + r);
}

bool exact_match(const std::vector<int>& hyp, const std::vector<int>& ref) { return hyp == ref; }

void EditSetup::validate() const {
  require(model != nullptr && tok != nullptr, ErrorKind::config, "edit setup needs a model and tokenizer");
  require(layer >= 1 && layer <= model->config().layers, ErrorKind::config,
          "layer " + std::to_string(layer) + " out of range");
  require(rank >= 1 && rank <= static_cast<std::size_t>(model->config().width), ErrorKind::config,
          "rank out of range");
  require(gate >= -1 && gate <= 1, ErrorKind::config, "gate must lie in [-1, 1]");
  require(max_new >= 1, ErrorKind::config, "max_new must be positive");
  robust.validate();
  cluster.validate();
}

void calibrate(EditSetup& setup, const std::vector<KnowledgeItem>& items) {
  require(setup.model && setup.tok, ErrorKind::config, "calibrate: setup has no model");
  setup.robust.sigma = calibrate_sigma(*setup.model, setup.layer, encode_items(*setup.tok, items));
}

std::string to_string(Split split) { return split == Split::original ? "original" : "paraphrase"; }

namespace {

RobustConfig train_config(const EditSetup& setup) {
  RobustConfig cfg = setup.robust;
  cfg.scope = setup.scope;
  return cfg;
}

std::vector<float> key_of(const EditSetup& setup, const std::vector<int>& tokens) {
  return hidden_at(*setup.model, tokens, setup.layer).vector;
}

struct Accumulator {
  double rouge = 0, exact = 0, rep = 0, routing = 0;
  std::size_t n = 0;

  void add(double r, bool e, double c, bool routed) {
    rouge += r;
    exact += e ? 1 : 0;
    rep += c;
    routing += routed ? 1 : 0;
    ++n;
  }

  MetricsRow row(Split split, std::size_t step) const {
    MetricsRow out;
    out.split = split;
    out.step = step;
    if (n == 0) return out;
    const double k = static_cast<double>(n);
    out.rouge = rouge / k;
    out.exact = exact / k;
    out.rep_cosine = rep / k;
    out.routing = routing / k;
    return out;
  }
};

double median(std::vector<double> v) {
  require(!v.empty(), ErrorKind::input, "median of an empty sample");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double quantile(std::vector<double> v, double q) {
  require(!v.empty(), ErrorKind::input, "quantile of an empty sample");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

double mean(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::vector<double> ranks(const std::vector<double>& x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) r[order[t]] = avg;
    i = j + 1;
  }
  return r;
}

std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min(k, n));
  return idx;
}

}  // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  require(x.size() == y.size() && x.size() >= 2, ErrorKind::input, "spearman needs two equal samples of size >= 2");
  const auto rx = ranks(x), ry = ranks(y);
  const double mx = mean(rx), my = mean(ry);
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0 || syy == 0) return std::nan("");
  return sxy / std::sqrt(sxx * syy);
}

StoreEvaluation evaluate_store(const EditSetup& setup, const EditStore& store,
                               const std::vector<KnowledgeItem>& items, const std::vector<ProbeItem>& probes,
                               std::size_t step) {
  setup.validate();
  require(store.layer() == setup.layer, ErrorKind::config, "store layer differs from the setup layer");
  const Tokenizer& tok = *setup.tok;
  const Engine engine(*setup.model, store);

  std::map<std::string, std::string> expected;
  for (const auto& e : store.entries())
    expected[e.item_id] = store.mode() == StoreMode::shared ? e.cluster_id.value_or(e.module_id) : e.module_id;

  auto score = [&](Accumulator& acc, const std::string& prompt, const std::vector<int>& ref,
                   const std::vector<float>& ref_key, const std::string& want) {
    const auto x = tok.encode(prompt);
    const Answer answer = engine.generate(x, setup.max_new);
    const bool routed = answer.route.matched &&
                        (store.mode() == StoreMode::shared ? answer.route.cluster_id.value_or("") == want
                                                           : answer.route.module_id == want);
    const double rep = answer.tokens.empty() ? 0.0 : cosine(key_of(setup, answer.tokens), ref_key);
    acc.add(rouge_l(answer.tokens, ref, setup.rouge), exact_match(answer.tokens, ref), rep, routed);
  };

  Accumulator ori, para;
  for (const auto& item : items) {
    const auto it = expected.find(item.id);
    require(it != expected.end(), ErrorKind::input, "item " + item.id + " is not in the store");
    const auto ref = tok.encode(item.target);
    const auto ref_key = key_of(setup, ref);
    score(ori, item.prompt, ref, ref_key, it->second);
    for (const auto& p : item.paraphrases) score(para, p, ref, ref_key, it->second);
  }

  StoreEvaluation out;
  out.original = ori.row(Split::original, step);
  out.paraphrase = para.row(Split::paraphrase, step);
  std::size_t base_hits = 0, edited_hits = 0;
  for (const auto& probe : probes) {
    const auto x = tok.encode(probe.prompt);
    const auto want = tok.encode(probe.expected);
    const auto base = generate(*setup.model, x, nullptr, setup.max_new, Tokenizer::kEos);
    const Answer edited = engine.generate(x, setup.max_new);
    if (edited.route.matched)
      ++out.probes_fired;
    else if (edited.tokens != base)
      out.probes_bit_identical = false;
    base_hits += base == want;
    edited_hits += edited.tokens == want;
  }
  if (!probes.empty()) {
    out.probe_exact_base = static_cast<double>(base_hits) / static_cast<double>(probes.size());
    out.probe_exact_edited = static_cast<double>(edited_hits) / static_cast<double>(probes.size());
  }
  out.original.utility_delta = out.paraphrase.utility_delta = out.probe_exact_edited - out.probe_exact_base;
  return out;
}

double perturbed_success(const EditSetup& setup, const std::vector<InterventionModule>& modules,
                         const std::vector<KnowledgeItem>& items, int draws, std::uint64_t seed) {
  setup.validate();
  require(modules.size() == items.size(), ErrorKind::dimension, "one module per item expected");
  require(draws >= 1, ErrorKind::config, "draws must be positive");
  const auto d = static_cast<std::size_t>(setup.model->config().width);
  std::size_t hits = 0, total = 0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto ex = encode_example(*setup.tok, items[i].prompt, items[i].target);
    std::vector<int> want(ex.target.begin(), ex.target.end() - 1);
    const std::size_t last = ex.prompt.size() - 1;
    const std::size_t only = setup.scope == Scope::prompt_final ? last : kAllPositions;
    const Intervention module_hook = as_intervention(modules[i], only);
    for (int s = 0; s < draws; ++s) {
      const auto eps = draw_perturbation(d, setup.robust.sigma, derive_seed(seed, static_cast<std::uint64_t>(i)), s);
      Intervention hook;
      hook.layer = setup.layer;
      hook.apply = [&, eps](std::span<float> state, std::size_t pos) {
        if (pos == last)
          for (std::size_t j = 0; j < state.size(); ++j) state[j] += eps[j];
        module_hook.apply(state, pos);
      };
      hits += generate(*setup.model, ex.prompt, &hook, setup.max_new, Tokenizer::kEos) == want;
      ++total;
    }
  }
  return total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
}

MatrixD item_keys(const EditSetup& setup, const std::vector<KnowledgeItem>& items) {
  setup.validate();
  MatrixD keys(items.size(), static_cast<std::size_t>(setup.model->config().width));
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto k = key_of(setup, setup.tok->encode(items[i].prompt));
    std::copy(k.begin(), k.end(), keys.row(i).begin());
  }
  return keys;
}

namespace {

void check_checkpoints(std::vector<std::size_t>& checkpoints, std::size_t n) {
  if (checkpoints.empty()) checkpoints.push_back(n);
  std::sort(checkpoints.begin(), checkpoints.end());
  checkpoints.erase(std::unique(checkpoints.begin(), checkpoints.end()), checkpoints.end());
  require(checkpoints.front() >= 1 && checkpoints.back() <= n, ErrorKind::config,
          "checkpoints must lie in [1, " + std::to_string(n) + "]");
}

SequentialRun sequential(const EditSetup& setup, const std::vector<KnowledgeItem>& items,
                         const std::vector<ProbeItem>& probes, std::vector<std::size_t> checkpoints,
                         const std::filesystem::path& store_dir, bool evaluate) {
  setup.validate();
  require(!items.empty(), ErrorKind::input, "no items to edit");
  if (evaluate) check_checkpoints(checkpoints, items.size());
  const auto d = static_cast<std::size_t>(setup.model->config().width);
  SequentialRun run{{}, {}, EditStore(StoreMode::individual, setup.layer, setup.rank, d, setup.gate, store_dir,
                                      setup.scope)};
  const RobustConfig cfg = train_config(setup);
  std::size_t next = 0;
  for (std::size_t t = 0; t < items.size(); ++t) {
    const auto ex = encode_example(*setup.tok, items[t].prompt, items[t].target);
    auto trained = train_edit(*setup.model, setup.layer, setup.rank, {ex}, cfg, cfg.seed, items[t].id);
    run.store.add_edit(trained.module, key_of(setup, ex.prompt), items[t].id);
    run.reports.push_back(std::move(trained.report));
    if (evaluate && next < checkpoints.size() && checkpoints[next] == t + 1) {
      const std::vector<KnowledgeItem> done(items.begin(), items.begin() + static_cast<std::ptrdiff_t>(t + 1));
      const auto eval = evaluate_store(setup, run.store, done, probes, t + 1);
      run.rows.push_back(eval.original);
      run.rows.push_back(eval.paraphrase);
      ++next;
    }
  }
  return run;
}

}  // namespace

SequentialRun evaluate_sequential(const EditSetup& setup, const std::vector<KnowledgeItem>& items,
                                  const std::vector<ProbeItem>& probes, std::vector<std::size_t> checkpoints,
                                  const std::filesystem::path& store_dir) {
  return sequential(setup, items, probes, std::move(checkpoints), store_dir, true);
}

SequentialRun build_individual(const EditSetup& setup, const std::vector<KnowledgeItem>& items,
                               const std::filesystem::path& store_dir) {
  return sequential(setup, items, {}, {}, store_dir, false);
}

SharedRun build_shared(const EditSetup& setup, const std::vector<KnowledgeItem>& items,
                       const std::filesystem::path& store_dir) {
  setup.validate();
  require(!items.empty(), ErrorKind::input, "no items to edit");
  const MatrixD keys = item_keys(setup, items);
  std::vector<std::string> ids;
  std::map<std::string, EditExample> examples;
  for (const auto& item : items) {
    ids.push_back(item.id);
    examples[item.id] = encode_example(*setup.tok, item.prompt, item.target);
  }
  const auto d = static_cast<std::size_t>(setup.model->config().width);
  SharedRun run{constrained_clustering(keys, ids, setup.cluster), {},
                EditStore(StoreMode::shared, setup.layer, setup.rank, d, setup.gate, store_dir, setup.scope)};
  auto trained = train_shared(*setup.model, setup.layer, setup.rank, run.assignment, examples, train_config(setup),
                              setup.threads);
  for (std::size_t i = 0; i < items.size(); ++i) {
    const std::string& cluster = run.assignment.kappa.at(items[i].id);
    std::vector<float> key(keys.row(i).begin(), keys.row(i).end());
    run.store.add_edit(trained.at(cluster).module, key, items[i].id, cluster);
  }
  for (auto& [id, result] : trained) run.reports[id] = std::move(result.report);
  return run;
}

double StudyResult::value(const std::string& key) const {
  const auto it = values.find(key);
  require(it != values.end(), ErrorKind::input, "study " + name + " has no value " + key);
  return it->second;
}

void write_study(const std::filesystem::path& dir, const StudyResult& result) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json j;
  j["study"] = result.name;
  j["values"] = result.values;
  j["series"] = result.series;
  write_file_atomic(dir / (result.name + ".json"), j.dump(2) + "\n");

  std::ostringstream table;
  table << std::setprecision(6);
  for (const auto& [k, v] : result.values) table << k << '\t' << v << '\n';
  write_file_atomic(dir / (result.name + ".txt"), table.str());

  if (!result.points.empty()) {
    std::ostringstream csv;
    csv << std::setprecision(8) << "label";
    for (const auto& c : result.point_columns) csv << ',' << c;
    csv << '\n';
    for (std::size_t i = 0; i < result.points.size(); ++i) {
      csv << (i < result.point_labels.size() ? result.point_labels[i] : std::to_string(i));
      for (double v : result.points[i]) csv << ',' << v;
      csv << '\n';
    }
    write_file_atomic(dir / (result.name + "_points.csv"), csv.str());
  }
}

StudyResult study_prop1(const EditSetup& setup, const std::vector<KnowledgeItem>& items, std::size_t random_pairs,
                        std::uint64_t seed) {
  setup.validate();
  require(items.size() >= 2, ErrorKind::input, "prop1 study needs at least two items");
  StudyResult out;
  out.name = "prop1";
  out.point_columns = {"l2", "paraphrase"};
  std::vector<std::vector<float>> keys;
  for (const auto& item : items) keys.push_back(key_of(setup, setup.tok->encode(item.prompt)));

  auto& para = out.series["paraphrase_l2"];
  for (std::size_t i = 0; i < items.size(); ++i)
    for (const auto& p : items[i].paraphrases) {
      para.push_back(std::sqrt(squared_l2(keys[i], key_of(setup, setup.tok->encode(p)))));
      out.points.push_back({para.back(), 1});
      out.point_labels.push_back(items[i].id);
    }
  require(!para.empty(), ErrorKind::input, "prop1 study needs paraphrases");

  auto& random = out.series["random_l2"];
  Rng rng(derive_seed(seed, "prop1"));
  std::uniform_int_distribution<std::size_t> pick(0, items.size() - 1);
  while (random.size() < random_pairs) {
    const std::size_t a = pick(rng), b = pick(rng);
    if (a == b) continue;
    random.push_back(std::sqrt(squared_l2(keys[a], keys[b])));
    out.points.push_back({random.back(), 0});
    out.point_labels.push_back(items[a].id + "~" + items[b].id);
  }
  require(!random.empty(), ErrorKind::input, "prop1 study needs random pairs");

  std::vector<double> sorted = random;
  std::sort(sorted.begin(), sorted.end());
  double at_least = 0;  // pairs (para, random) with para >= random
  for (double p : para)
    at_least += static_cast<double>(std::upper_bound(sorted.begin(), sorted.end(), p) - sorted.begin());
  out.values["overlap"] = at_least / (static_cast<double>(para.size()) * static_cast<double>(random.size()));
  for (const auto& [name, s] : std::vector<std::pair<std::string, const std::vector<double>*>>{
           {"paraphrase", &para}, {"random", &random}}) {
    out.values[name + "_mean"] = mean(*s);
    out.values[name + "_q1"] = quantile(*s, 0.25);
    out.values[name + "_median"] = quantile(*s, 0.5);
    out.values[name + "_q3"] = quantile(*s, 0.75);
    out.values[name + "_count"] = static_cast<double>(s->size());
  }
  return out;
}

namespace {

double max_residual(const TrainReport& r) {
  double m = 0;
  for (double x : r.residuals) m = std::max(m, x);
  return m;
}

void track_residual(StudyResult& out, const TrainReport& r) {
  auto& slot = out.values["max_residual"];
  slot = std::max(slot, max_residual(r));
}

}  // namespace

StudyResult study_prop2(const EditSetup& setup, const std::vector<KnowledgeItem>& items, std::size_t sample,
                        std::uint64_t seed) {
  setup.validate();
  require(items.size() >= 2 && sample >= 2, ErrorKind::input, "prop2 study needs at least two items");
  const auto chosen = sample_indices(items.size(), sample, derive_seed(seed, "prop2"));
  const RobustConfig cfg = train_config(setup);
  std::vector<TrainResult> trained(chosen.size());
  std::vector<std::vector<float>> keys(chosen.size());
  parallel_for(chosen.size(), setup.threads, [&](std::size_t i) {
    const auto& item = items[chosen[i]];
    const auto ex = encode_example(*setup.tok, item.prompt, item.target);
    keys[i] = key_of(setup, ex.prompt);
    trained[i] = train_edit(*setup.model, setup.layer, setup.rank, {ex}, cfg, cfg.seed, item.id);
  });

  StudyResult out;
  out.name = "prop2";
  out.point_columns = {"key_cosine", "subspace_similarity"};
  std::vector<std::size_t> ok;
  for (std::size_t i = 0; i < chosen.size(); ++i)
    if (!trained[i].report.failed) ok.push_back(i);
  out.values["failures"] = static_cast<double>(chosen.size() - ok.size());
  for (const auto& t : trained) track_residual(out, t.report);

  std::vector<std::pair<double, double>> pairs;
  for (std::size_t a = 0; a < ok.size(); ++a)
    for (std::size_t b = a + 1; b < ok.size(); ++b) {
      const double c = cosine(keys[ok[a]], keys[ok[b]]);
      const double s = subspace_similarity(trained[ok[a]].module.R, trained[ok[b]].module.R);
      pairs.emplace_back(c, s);
      out.points.push_back({c, s});
      out.point_labels.push_back(items[chosen[ok[a]]].id + "~" + items[chosen[ok[b]]].id);
    }
  require(!pairs.empty(), ErrorKind::training, "prop2 study: fewer than two modules trained");
  std::stable_sort(pairs.begin(), pairs.end(), [](const auto& x, const auto& y) { return x.first < y.first; });

  constexpr std::size_t kBuckets = 5;
  auto& cos_mean = out.series["bucket_cosine"];
  auto& sim_mean = out.series["bucket_similarity"];
  auto& counts = out.series["bucket_count"];
  for (std::size_t q = 0; q < kBuckets; ++q) {
    const std::size_t lo = q * pairs.size() / kBuckets, hi = (q + 1) * pairs.size() / kBuckets;
    if (lo == hi) continue;
    double c = 0, s = 0;
    for (std::size_t i = lo; i < hi; ++i) {
      c += pairs[i].first;
      s += pairs[i].second;
    }
    const double n = static_cast<double>(hi - lo);
    cos_mean.push_back(c / n);
    sim_mean.push_back(s / n);
    counts.push_back(n);
  }
  out.values["bottom_bucket"] = sim_mean.front();
  out.values["top_bucket"] = sim_mean.back();
  out.values["pairs"] = static_cast<double>(pairs.size());
  return out;
}

StudyResult study_robust(const EditSetup& setup, const std::vector<KnowledgeItem>& items, int draws) {
  setup.validate();
  StudyResult out;
  out.name = "robust";
  const std::vector<std::pair<std::string, double>> arms{{"lambda0", 0.0}, {"lambda", setup.robust.lambda_robu}};
  for (const auto& [tag, lambda] : arms) {
    EditSetup arm = setup;
    arm.robust.lambda_robu = lambda;
    auto run = build_individual(arm, items);
    for (const auto& r : run.reports) track_residual(out, r);
    const auto eval = evaluate_store(arm, run.store, items, {}, items.size());
    std::vector<InterventionModule> modules;
    for (const auto& item : items) modules.push_back(run.store.module(item.id));
    out.values["para_rouge_" + tag] = eval.paraphrase.rouge;
    out.values["para_exact_" + tag] = eval.paraphrase.exact;
    out.values["ori_rouge_" + tag] = eval.original.rouge;
    out.values["perturbed_" + tag] =
        perturbed_success(arm, modules, items, draws, derive_seed(setup.robust.seed, "perturbed-eval"));
  }
  out.values["lambda"] = setup.robust.lambda_robu;
  out.values["sigma"] = setup.robust.sigma;
  return out;
}

StudyResult study_layers(const EditSetup& setup, const std::vector<KnowledgeItem>& items,
                         const std::vector<int>& layers) {
  setup.validate();
  require(!layers.empty(), ErrorKind::input, "layer sweep needs at least one layer");
  StudyResult out;
  out.name = "layers";
  for (int layer : layers) {
    require(layer >= 1 && layer <= setup.model->config().layers, ErrorKind::config,
            "layer " + std::to_string(layer) + " out of range");
    EditSetup at = setup;
    at.layer = layer;
    calibrate(at, items);
    auto run = build_individual(at, items);
    for (const auto& r : run.reports) track_residual(out, r);
    const auto eval = evaluate_store(at, run.store, items, {}, items.size());
    out.series["layer"].push_back(layer);
    out.series["ori_rouge"].push_back(eval.original.rouge);
    out.series["para_rouge"].push_back(eval.paraphrase.rouge);
    out.series["para_routing"].push_back(eval.paraphrase.routing);
    const std::string tag = "@" + std::to_string(layer);
    out.values["ori_rouge" + tag] = eval.original.rouge;
    out.values["para_rouge" + tag] = eval.paraphrase.rouge;
  }
  return out;
}

StudyResult study_edit_vectors(const EditSetup& setup, const std::vector<KnowledgeItem>& items,
                               const ClusterAssignment& assignment, std::size_t sample, std::uint64_t seed) {
  setup.validate();
  require(sample >= 1 && sample <= items.size(), ErrorKind::input, "sample must lie in [1, corpus size]");
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < items.size(); ++i) index[items[i].id] = i;
  for (const auto& item : items)
    require(assignment.kappa.count(item.id) == 1, ErrorKind::input, "item " + item.id + " has no cluster");

  // Only items that share a cluster have a batched regime distinct from
  // individual training.
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < items.size(); ++i)
    if (assignment.cluster(assignment.kappa.at(items[i].id)).items.size() >= 2) eligible.push_back(i);
  std::vector<std::size_t> chosen;
  for (std::size_t j : sample_indices(eligible.size(), sample, derive_seed(seed, "edit-vectors")))
    chosen.push_back(eligible[j]);

  const RobustConfig cfg = train_config(setup);
  auto example = [&](std::size_t i) { return encode_example(*setup.tok, items[i].prompt, items[i].target); };
  auto train = [&](const std::vector<std::size_t>& group, const std::string& id) {
    std::vector<EditExample> batch;
    for (std::size_t g : group) batch.push_back(example(g));
    return train_edit(*setup.model, setup.layer, setup.rank, batch, cfg, cfg.seed, id);
  };

  struct Regimes {
    TrainResult individual, dissimilar, similar;
  };
  std::vector<Regimes> trained(chosen.size());
  parallel_for(chosen.size(), setup.threads, [&](std::size_t c) {
    const std::size_t i = chosen[c];
    const Cluster& cluster = assignment.cluster(assignment.kappa.at(items[i].id));
    std::vector<std::size_t> similar, others;
    for (const auto& id : cluster.items) similar.push_back(index.at(id));
    const std::set<std::size_t> members(similar.begin(), similar.end());
    for (std::size_t j = 0; j < items.size(); ++j)
      if (!members.count(j)) others.push_back(j);
    std::vector<std::size_t> dissimilar{i};
    for (std::size_t j : sample_indices(others.size(), similar.size() - 1, derive_seed(seed, std::uint64_t{i})))
      dissimilar.push_back(others[j]);
    trained[c] = {train({i}, items[i].id), train(dissimilar, items[i].id), train(similar, cluster.id)};
  });

  StudyResult out;
  out.name = "edit_vectors";
  std::size_t wins = 0, failures = 0;
  std::vector<std::vector<float>> vectors;
  std::vector<std::string> labels;
  auto& d_sim = out.series["similar_distance"];
  auto& d_dis = out.series["dissimilar_distance"];
  for (std::size_t c = 0; c < chosen.size(); ++c) {
    const auto& t = trained[c];
    for (const auto* r : {&t.individual.report, &t.dissimilar.report, &t.similar.report}) track_residual(out, *r);
    if (t.individual.report.failed || t.dissimilar.report.failed || t.similar.report.failed) {
      ++failures;
      continue;
    }
    const std::size_t i = chosen[c];
    const auto h = key_of(setup, setup.tok->encode(items[i].prompt));
    const auto vi = edit_vector(t.individual.module, h).vector;
    const auto vd = edit_vector(t.dissimilar.module, h).vector;
    const auto vs = edit_vector(t.similar.module, h).vector;
    d_sim.push_back(std::sqrt(squared_l2(vs, vi)));
    d_dis.push_back(std::sqrt(squared_l2(vd, vi)));
    wins += d_sim.back() < d_dis.back();
    for (const auto& [v, regime] : {std::pair{&vi, "individual"}, {&vd, "dissimilar"}, {&vs, "similar"}}) {
      vectors.push_back(*v);
      labels.push_back(items[i].id + ":" + regime);
    }
  }
  const std::size_t effective = chosen.size() - failures;
  out.values["sampled"] = static_cast<double>(chosen.size());
  out.values["eligible"] = static_cast<double>(eligible.size());
  out.values["failures"] = static_cast<double>(failures);
  out.values["effective"] = static_cast<double>(effective);
  out.values["wins"] = static_cast<double>(wins);
  out.values["win_rate"] = effective ? static_cast<double>(wins) / static_cast<double>(effective) : 0.0;

  if (vectors.size() >= 2) {
    MatrixD pts(vectors.size(), vectors.front().size());
    for (std::size_t r = 0; r < vectors.size(); ++r)
      for (std::size_t j = 0; j < vectors[r].size(); ++j) pts(r, j) = vectors[r][j];
    const MatrixD proj = pca_project(pts, 2);
    out.point_columns = {"pc1", "pc2"};
    for (std::size_t r = 0; r < proj.rows(); ++r) out.points.push_back({proj(r, 0), proj(r, 1)});
    out.point_labels = labels;
  }
  return out;
}

StudyResult bench_latency(const EditSetup& setup, const EditStore& store, const std::vector<std::string>& prompts,
                          int repetitions, int new_tokens) {
  setup.validate();
  require(repetitions >= 3, ErrorKind::config, "bench needs at least 3 repetitions");
  require(new_tokens >= 1 && !prompts.empty(), ErrorKind::config, "bench needs prompts and new_tokens >= 1");
  const Engine engine(*setup.model, store);
  std::vector<std::vector<int>> encoded;
  for (const auto& p : prompts) encoded.push_back(setup.tok->encode(p));

  using Clock = std::chrono::steady_clock;
  StudyResult out;
  out.name = "latency";
  auto& base = out.series["base_per_token_us"];
  auto& routed = out.series["routed_per_token_us"];
  std::size_t fired = 0;
  for (int rep = 0; rep < repetitions; ++rep) {
    std::size_t tokens = 0;
    auto t0 = Clock::now();
    for (const auto& x : encoded) tokens += generate(*setup.model, x, nullptr, new_tokens, -1).size();
    auto t1 = Clock::now();
    base.push_back(std::chrono::duration<double, std::micro>(t1 - t0).count() / static_cast<double>(tokens));
    tokens = 0;
    t0 = Clock::now();
    for (const auto& x : encoded) {
      const Answer a = engine.generate(x, new_tokens, -1);
      tokens += a.tokens.size();
      if (rep == 0) fired += a.route.matched;
    }
    t1 = Clock::now();
    routed.push_back(std::chrono::duration<double, std::micro>(t1 - t0).count() / static_cast<double>(tokens));
  }
  const double mb = median(base), mr = median(routed);
  out.values["base_median_us"] = mb;
  out.values["routed_median_us"] = mr;
  out.values["ratio"] = mr / mb;
  out.values["fired"] = static_cast<double>(fired);
  out.values["prompts"] = static_cast<double>(prompts.size());
  auto spread = [](const std::vector<double>& v, double m) {
    double worst = 0;
    for (double x : v) worst = std::max(worst, std::abs(x - m) / m);
    return worst;
  };
  out.values["base_spread"] = spread(base, mb);
  out.values["routed_spread"] = spread(routed, mr);
  return out;
}

StudyResult sweep_tau(const EditSetup& setup, const std::vector<KnowledgeItem>& items,
                      const std::vector<ProbeItem>& probes, const std::vector<double>& taus) {
  setup.validate();
  require(!taus.empty(), ErrorKind::input, "tau sweep needs at least one value");
  StudyResult out;
  out.name = "tau_sweep";
  for (double tau : taus) {
    require(tau > 0 && tau < 1, ErrorKind::config, "tau_sim must lie in (0, 1)");
    EditSetup at = setup;
    at.cluster.tau_min = tau;
    auto run = build_shared(at, items);
    for (const auto& [id, r] : run.reports) track_residual(out, r);
    const auto eval = evaluate_store(at, run.store, items, probes, items.size());
    const auto mem = run.store.memory_report();
    out.series["tau"].push_back(tau);
    out.series["k"].push_back(static_cast<double>(run.assignment.k()));
    out.series["params"].push_back(static_cast<double>(mem.module_params));
    out.series["ori_rouge"].push_back(eval.original.rouge);
    out.series["ori_exact"].push_back(eval.original.exact);
    out.series["para_rouge"].push_back(eval.paraphrase.rouge);
    out.series["para_routing"].push_back(eval.paraphrase.routing);
    out.series["utility_delta"].push_back(eval.original.utility_delta);
  }
  out.values["items"] = static_cast<double>(items.size());
  if (taus.size() >= 2) out.values["para_spearman"] = spearman(out.series["tau"], out.series["para_rouge"]);
  return out;
}

}  // namespace rilke
