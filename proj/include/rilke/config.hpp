#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "rilke/cluster.hpp"
#include "rilke/corpus.hpp"
#include "rilke/eval.hpp"
#include "rilke/model.hpp"
#include "rilke/store.hpp"
#include "rilke/trainer.hpp"

namespace rilke {

struct RunPaths {
  std::filesystem::path corpus;      // directory with items.jsonl / probes.jsonl
  std::filesystem::path checkpoint;  // model directory
  std::filesystem::path store;
  std::filesystem::path out;
};

struct StudyOptions {
  std::size_t random_pairs = 1000;
  std::size_t sample = 30;          // prop2
  std::size_t vector_sample = 50;   // edit-vector study
  std::vector<int> layers;  // empty = every layer
  std::vector<double> taus{0.8, 0.85, 0.9, 0.95};
  int repetitions = 5;
  int bench_tokens = 12;
  std::size_t bench_prompts = 20;
  int robust_draws = 3;
};

// Everything a command needs. Every seed below is the single top-level seed;
// components derive their own streams from it by name.
struct RunConfig {
  std::uint64_t seed = 0;
  ModelConfig model;
  PretrainOptions pretrain;
  CorpusOptions corpus;
  int layer = 0;  // 0 = L/2
  std::size_t rank = 4;
  double gate = 0.9;
  RobustConfig robust;
  std::optional<double> sigma;  // absolute; unset = sigma_scale x mean key norm
  double sigma_scale = 0.05;
  ClusterConfig cluster;
  StoreMode mode = StoreMode::individual;
  unsigned threads = 1;
  int max_new = 24;
  RougeVariant rouge = RougeVariant::f1;
  std::vector<std::size_t> checkpoints;
  StudyOptions study;
  RunPaths paths;

  int resolved_layer() const { return layer == 0 ? model.layers / 2 : layer; }
  void set_seed(std::uint64_t s);
  void validate() const;
};

// Unknown keys are config errors so a typo never silently falls back to a
// default.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::filesystem::path& path);
std::string dump_run_config(const RunConfig& config);

std::vector<std::size_t> parse_checkpoints(const std::string& list);

// Setup for `model`/`tok`; sigma is calibrated on `items` unless fixed.
EditSetup make_setup(const RunConfig& config, const BaseModel& model, const Tokenizer& tok,
                     const std::vector<KnowledgeItem>& items);

}  // namespace rilke
