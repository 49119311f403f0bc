#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "rilke/corpus.hpp"
#include "rilke/intervention.hpp"
#include "rilke/matrix.hpp"
#include "rilke/model.hpp"
#include "rilke/trainer.hpp"

namespace rilke {

enum class Linkage { average, complete, single };

Linkage parse_linkage(const std::string& name);
std::string to_string(Linkage linkage);

struct ClusterConfig {
  double tau_min = 0.9;
  double step = 0.01;
  std::size_t s_max = 32;
  Linkage linkage = Linkage::average;
  double tau_cap = 1.0 - 1e-6;

  void validate() const;
};

struct Cluster {
  std::string id;
  std::vector<std::string> items;
  double floor = 0;       // similarity floor of the pass that produced it
  bool fallback = false;  // produced by insertion-order chunking
};

struct ClusterAssignment {
  std::vector<Cluster> clusters;
  std::map<std::string, std::string> kappa;  // item id -> cluster id

  std::size_t k() const { return clusters.size(); }
  const Cluster& cluster(const std::string& id) const;
};

// Agglomerative clustering over cosine distance. Merges the closest pair while
// its linkage distance is strictly below d_thr; ties go to the lowest (i, j)
// position pair, where a merged cluster takes the position of its first part.
// Returns row-index groups, each sorted ascending, ordered by first member.
std::vector<std::vector<std::size_t>> hac(const MatrixD& keys, double d_thr, Linkage linkage);

struct IndexCluster {
  std::vector<std::size_t> members;
  double floor = 0;
  bool fallback = false;
};

// Raises the floor by `step` and re-clusters while a part exceeds s_max; past
// tau_cap the part is chunked in insertion order.
std::vector<IndexCluster> split_oversized(const std::vector<std::size_t>& cluster, double tau,
                                          const ClusterConfig& cfg, const MatrixD& keys);

ClusterAssignment constrained_clustering(const MatrixD& keys, const std::vector<std::string>& ids,
                                         const ClusterConfig& cfg);

// Whether every pair/average/chain in the cluster respects its floor under
// the linkage used: complete bounds every pair, average bounds the mean pair,
// single links every member to some other member.
bool respects_floor(const MatrixD& keys, const std::vector<std::size_t>& members, double floor,
                    Linkage linkage);

// One batched train_edit per cluster, in cluster order; every session uses
// cfg.seed so a singleton cluster reproduces individual training exactly.
std::map<std::string, TrainResult> train_shared(const BaseModel& model, int layer, std::size_t rank,
                                                const ClusterAssignment& assignment,
                                                const std::map<std::string, EditExample>& examples,
                                                const RobustConfig& cfg, unsigned threads = 1);

void save_assignment(const std::filesystem::path& path, const ClusterAssignment& assignment);
ClusterAssignment load_assignment(const std::filesystem::path& path);

}  // namespace rilke
