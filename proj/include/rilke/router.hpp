#pragma once

#include <filesystem>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "rilke/matrix.hpp"
#include "rilke/model.hpp"
#include "rilke/tokenizer.hpp"

namespace rilke {

struct RouterEntry {
  std::string item_id;
  std::string module_id;
  std::optional<std::string> cluster_id;
};

struct RouteDecision {
  bool matched = false;
  std::string item_id;  // empty unless matched
  std::string module_id;
  std::optional<std::string> cluster_id;
  std::size_t index = 0;  // nearest entry, valid whenever the index is non-empty
  double distance = 0;    // squared L2 to the nearest key
  double cosine = 0;
};

// Linear-scan nearest-key index. Dispatch is by squared L2 (ties go to the
// earliest entry); a match additionally needs cosine >= gate.
class RouterIndex {
 public:
  RouterIndex() = default;
  RouterIndex(int layer, std::size_t width, double gate);
  RouterIndex(const RouterIndex& other);
  RouterIndex& operator=(const RouterIndex& other);

  int layer() const { return layer_; }
  std::size_t width() const { return width_; }
  double gate() const { return gate_; }
  void set_gate(double gate);
  std::size_t size() const;
  bool empty() const { return size() == 0; }

  void insert(std::span<const float> key, RouterEntry entry);
  RouteDecision route(std::span<const float> query) const;
  RouteDecision route(std::span<const float> query, double gate) const;

  std::vector<RouterEntry> entries() const;
  Matrix keys() const;  // m x d
  const RouterEntry& entry(std::size_t i) const { return entries_.at(i); }
  std::span<const float> key(std::size_t i) const;

  std::size_t key_floats() const { return size() * width_; }

 private:
  int layer_ = 1;
  std::size_t width_ = 0;
  double gate_ = 0.9;
  std::vector<float> keys_;
  std::vector<double> norms_;
  std::vector<RouterEntry> entries_;
  std::unordered_set<std::string> ids_;
  mutable std::shared_mutex mutex_;
};

// One key per item from the uninterfered model, in input order.
RouterIndex build_index(const BaseModel& model, int layer, const Tokenizer& tok,
                        const std::vector<std::string>& prompts, std::vector<RouterEntry> entries,
                        double gate);

struct RoutingAccuracy {
  double ungated = 0;  // nearest entry has the expected id
  double gated = 0;    // ... and the gate fires
  std::size_t count = 0;
};

// `expected` names a module id, or a cluster id when `by_cluster` is set.
RoutingAccuracy routing_accuracy(const RouterIndex& index, const BaseModel& model, const Tokenizer& tok,
                                 const std::vector<std::pair<std::string, std::string>>& queries,
                                 bool by_cluster = false);

// Directory: index.json (layer, gate, entry table) + keys.rilk (m x d).
void save_index(const std::filesystem::path& dir, const RouterIndex& index);
RouterIndex load_index(const std::filesystem::path& dir);

}  // namespace rilke
