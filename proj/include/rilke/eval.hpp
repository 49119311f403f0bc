#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rilke/cluster.hpp"
#include "rilke/corpus.hpp"
#include "rilke/engine.hpp"
#include "rilke/model.hpp"
#include "rilke/store.hpp"
#include "rilke/tokenizer.hpp"
#include "rilke/trainer.hpp"

namespace rilke {

enum class RougeVariant { f1, recall };

// LCS-based ROUGE-L. F1 by default; `recall` is the beta -> infinity limit.
double rouge_l(const std::vector<int>& hyp, const std::vector<int>& ref, RougeVariant variant = RougeVariant::f1);
std::size_t lcs_length(const std::vector<int>& a, const std::vector<int>& b);
bool exact_match(const std::vector<int>& hyp, const std::vector<int>& ref);

// Everything an edit pipeline needs besides the data.
struct EditSetup {
  const BaseModel* model = nullptr;
  const Tokenizer* tok = nullptr;
  int layer = 2;
  std::size_t rank = 4;
  double gate = 0.9;
  RobustConfig robust;
  ClusterConfig cluster;
  Scope scope = Scope::all_positions;
  unsigned threads = 1;
  int max_new = 24;
  RougeVariant rouge = RougeVariant::f1;

  void validate() const;
};

// Sets robust.sigma to 0.05 x the mean key norm over the items' prompts.
void calibrate(EditSetup& setup, const std::vector<KnowledgeItem>& items);

enum class Split { original, paraphrase };
std::string to_string(Split split);

struct MetricsRow {
  Split split = Split::original;
  std::size_t step = 0;  // number of edits T
  double rouge = 0;
  double exact = 0;
  double rep_cosine = 0;    // layer-l key cosine of output vs reference
  double routing = 0;       // gated dispatch to the expected module or cluster
  double utility_delta = 0; // probe exact match with store minus without
};

struct StoreEvaluation {
  MetricsRow original, paraphrase;
  double probe_exact_base = 0;
  double probe_exact_edited = 0;
  std::size_t probes_fired = 0;  // probes whose query passed the gate
  bool probes_bit_identical = true;  // every non-fired probe matched the base output
};

// Routed greedy evaluation of `items` (which must all be in the store).
StoreEvaluation evaluate_store(const EditSetup& setup, const EditStore& store,
                               const std::vector<KnowledgeItem>& items, const std::vector<ProbeItem>& probes,
                               std::size_t step);

struct SequentialRun {
  std::vector<MetricsRow> rows;
  std::vector<TrainReport> reports;  // one per edit, in order
  EditStore store;
};

// Perturbed-prompt success: share of (item, draw) pairs whose greedy output
// under the item's own module still equals the target when the prompt-final
// state is shifted by N(0, sigma^2 I).
double perturbed_success(const EditSetup& setup, const std::vector<InterventionModule>& modules,
                         const std::vector<KnowledgeItem>& items, int draws, std::uint64_t seed);

// Edits items one at a time (individual modules) and evaluates every edited
// item at each checkpoint T.
SequentialRun evaluate_sequential(const EditSetup& setup, const std::vector<KnowledgeItem>& items,
                                  const std::vector<ProbeItem>& probes, std::vector<std::size_t> checkpoints,
                                  const std::filesystem::path& store_dir = {});

// Individual store with all items (no evaluation).
SequentialRun build_individual(const EditSetup& setup, const std::vector<KnowledgeItem>& items,
                               const std::filesystem::path& store_dir = {});

struct SharedRun {
  ClusterAssignment assignment;
  std::map<std::string, TrainReport> reports;  // per cluster
  EditStore store;
};

// Clusters the items' keys, trains one module per cluster and stores them.
SharedRun build_shared(const EditSetup& setup, const std::vector<KnowledgeItem>& items,
                       const std::filesystem::path& store_dir = {});

MatrixD item_keys(const EditSetup& setup, const std::vector<KnowledgeItem>& items);

// Labeled numeric output of a study, plus point sets for plotting.
struct StudyResult {
  std::string name;
  std::map<std::string, std::vector<double>> series;
  std::map<std::string, double> values;
  std::vector<std::string> point_columns;
  std::vector<std::vector<double>> points;
  std::vector<std::string> point_labels;

  double value(const std::string& key) const;
};

void write_study(const std::filesystem::path& dir, const StudyResult& result);

// Key L2 distances of (prompt, paraphrase) pairs against (prompt, other
// prompt) pairs: means, quartiles and the overlap fraction P(para >= random).
StudyResult study_prop1(const EditSetup& setup, const std::vector<KnowledgeItem>& items, std::size_t random_pairs,
                        std::uint64_t seed);

// Trains individual modules for a sample of items and relates key cosine to
// subspace similarity, bucketed by key-cosine quintile.
StudyResult study_prop2(const EditSetup& setup, const std::vector<KnowledgeItem>& items, std::size_t sample,
                        std::uint64_t seed);

// Same items trained with lambda = 0 and with the configured lambda:
// paraphrase scores and perturbed-prompt success for both.
StudyResult study_robust(const EditSetup& setup, const std::vector<KnowledgeItem>& items, int draws);

// Full individual edit + route + eval per layer; sigma is recalibrated at
// each layer.
StudyResult study_layers(const EditSetup& setup, const std::vector<KnowledgeItem>& items,
                         const std::vector<int>& layers);

// Individual vs dissimilar-batched vs similar-batched edit vectors.
StudyResult study_edit_vectors(const EditSetup& setup, const std::vector<KnowledgeItem>& items,
                               const ClusterAssignment& assignment, std::size_t sample, std::uint64_t seed);

// Per-token generation time, base vs routed, medians over repetitions.
StudyResult bench_latency(const EditSetup& setup, const EditStore& store, const std::vector<std::string>& prompts,
                          int repetitions, int new_tokens);

// Shared pipeline per tau_sim: k, parameter total, Ori./Para. scores.
StudyResult sweep_tau(const EditSetup& setup, const std::vector<KnowledgeItem>& items,
                      const std::vector<ProbeItem>& probes, const std::vector<double>& taus);

double spearman(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace rilke
