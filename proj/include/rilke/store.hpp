#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rilke/intervention.hpp"
#include "rilke/router.hpp"

namespace rilke {

enum class StoreMode { individual, shared };

StoreMode parse_mode(const std::string& name);
std::string to_string(StoreMode mode);

struct StoreEntry {
  std::string item_id;
  std::optional<std::string> cluster_id;
  std::string module_id;
  std::size_t key_offset = 0;  // row in the router index
};

struct MemoryReport {
  std::size_t module_params = 0;
  std::size_t key_floats = 0;
  std::map<std::string, std::size_t> per_module;
};

// Lifelong edit state: modules, router keys and the manifest tying them
// together. On disk every module has its own directory and every key its own
// blob, so appending never touches earlier files; the manifest is rewritten
// (atomically) last. A store without a directory lives in memory only.
class EditStore {
 public:
  EditStore(StoreMode mode, int layer, std::size_t rank, std::size_t width, double gate,
            std::filesystem::path dir = {}, Scope scope = Scope::all_positions);

  static EditStore load(const std::filesystem::path& dir);
  // Writes the whole store to `dir` (manifest last).
  void save(const std::filesystem::path& dir) const;

  // Individual mode: module id must be new and equal to item id. Shared mode:
  // the module for `cluster_id` is stored on first use, later entries for the
  // same cluster must carry identical parameters.
  void add_edit(const InterventionModule& module, std::span<const float> key, const std::string& item_id,
                std::optional<std::string> cluster_id = std::nullopt);

  StoreMode mode() const { return mode_; }
  Scope scope() const { return scope_; }
  int layer() const { return layer_; }
  std::size_t rank() const { return rank_; }
  std::size_t width() const { return width_; }
  double gate() const { return index_.gate(); }
  void set_gate(double gate) { index_.set_gate(gate); }
  const std::filesystem::path& dir() const { return dir_; }

  const RouterIndex& index() const { return index_; }
  const std::vector<StoreEntry>& entries() const { return entries_; }
  const InterventionModule& module(const std::string& id) const;
  const std::map<std::string, InterventionModule>& modules() const { return modules_; }
  std::size_t module_count() const { return modules_.size(); }

  MemoryReport memory_report() const;

 private:
  void write_manifest(const std::filesystem::path& dir) const;
  static std::string key_file(std::size_t offset);

  StoreMode mode_;
  Scope scope_;
  int layer_;
  std::size_t rank_, width_;
  std::filesystem::path dir_;
  RouterIndex index_;
  std::vector<StoreEntry> entries_;
  std::map<std::string, InterventionModule> modules_;
  std::vector<std::string> module_order_;
};

// Independent recount from blob headers on disk.
MemoryReport memory_report_from_disk(const std::filesystem::path& dir);

}  // namespace rilke
