#include "rilke/store.hpp"

#include <cstdio>

#include "json.hpp"

#include "rilke/error.hpp"

namespace rilke {

StoreMode parse_mode(const std::string& name) {
  if (name == "individual") return StoreMode::individual;
  if (name == "shared") return StoreMode::shared;
  fail(ErrorKind::config, "unknown mode \"" + name + "\" (expected individual or shared)");
}

std::string to_string(StoreMode mode) { return mode == StoreMode::shared ? "shared" : "individual"; }

namespace {

constexpr int kStoreVersion = 1;

std::string module_dir(std::size_t ordinal) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "modules/m%05zu", ordinal + 1);
  return buf;
}

}  // namespace

std::string EditStore::key_file(std::size_t offset) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "keys/k%05zu.rilk", offset + 1);
  return buf;
}

EditStore::EditStore(StoreMode mode, int layer, std::size_t rank, std::size_t width, double gate,
                     std::filesystem::path dir, Scope scope)
    : mode_(mode), scope_(scope), layer_(layer), rank_(rank), width_(width), dir_(std::move(dir)), index_(layer, width, gate) {
  require(rank >= 1 && rank <= width, ErrorKind::config, "store rank must be in [1, width]");
  if (!dir_.empty()) {
    std::filesystem::create_directories(dir_);
    write_manifest(dir_);
  }
}

const InterventionModule& EditStore::module(const std::string& id) const {
  auto it = modules_.find(id);
  require(it != modules_.end(), ErrorKind::input, "unknown module " + id);
  return it->second;
}

void EditStore::add_edit(const InterventionModule& module, std::span<const float> key, const std::string& item_id,
                         std::optional<std::string> cluster_id) {
  require(module.width() == width_ && module.rank() == rank_, ErrorKind::dimension,
          "module shape " + std::to_string(module.rank()) + "x" + std::to_string(module.width()) +
              " does not match store " + std::to_string(rank_) + "x" + std::to_string(width_));
  require(module.layer == layer_, ErrorKind::dimension, "module layer does not match store layer");
  require(key.size() == width_, ErrorKind::dimension, "key width does not match store");
  for (const auto& e : entries_) require(e.item_id != item_id, ErrorKind::input, "item id collision: " + item_id);
  if (mode_ == StoreMode::shared) {
    require(cluster_id.has_value(), ErrorKind::input, "shared store entries need a cluster id");
    require(module.id == *cluster_id, ErrorKind::input, "shared module id must equal its cluster id");
  } else {
    require(module.id == item_id, ErrorKind::input, "individual module id must equal its item id");
  }

  const bool new_module = !modules_.contains(module.id);
  if (!new_module) {
    require(mode_ == StoreMode::shared, ErrorKind::input, "module id collision: " + module.id);
    require(modules_.at(module.id) == module, ErrorKind::input,
            "cluster " + module.id + " already holds different parameters");
  }

  const std::size_t offset = entries_.size();
  if (!dir_.empty()) {
    if (new_module) save_module(dir_ / module_dir(module_order_.size()), module);
    std::filesystem::create_directories(dir_ / "keys");
    write_blob(dir_ / key_file(offset), Matrix(1, width_, std::vector<float>(key.begin(), key.end())));
  }
  index_.insert(key, {item_id, module.id, cluster_id});
  entries_.push_back({item_id, cluster_id, module.id, offset});
  if (new_module) {
    modules_.emplace(module.id, module);
    module_order_.push_back(module.id);
  }
  if (!dir_.empty()) write_manifest(dir_);
}

MemoryReport EditStore::memory_report() const {
  MemoryReport r;
  for (const auto& [id, m] : modules_) {
    r.per_module[id] = param_count(m);
    r.module_params += param_count(m);
  }
  r.key_floats = index_.key_floats();
  return r;
}

void EditStore::write_manifest(const std::filesystem::path& dir) const {
  nlohmann::ordered_json j;
  j["format"] = "rilke-store";
  j["version"] = kStoreVersion;
  j["mode"] = to_string(mode_);
  j["scope"] = to_string(scope_);
  j["layer"] = layer_;
  j["rank"] = rank_;
  j["width"] = width_;
  j["gate"] = index_.gate();
  j["modules"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < module_order_.size(); ++i)
    j["modules"].push_back({{"id", module_order_[i]}, {"dir", module_dir(i)}});
  j["entries"] = nlohmann::ordered_json::array();
  for (const auto& e : entries_) {
    nlohmann::ordered_json row;
    row["item"] = e.item_id;
    if (e.cluster_id) row["cluster"] = *e.cluster_id;
    row["module"] = e.module_id;
    row["key"] = key_file(e.key_offset);
    row["key_offset"] = e.key_offset;
    j["entries"].push_back(row);
  }
  write_file_atomic(dir / "manifest.json", j.dump(2) + "\n");
}

void EditStore::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir / "keys");
  for (std::size_t i = 0; i < module_order_.size(); ++i) save_module(dir / module_dir(i), modules_.at(module_order_[i]));
  for (const auto& e : entries_) {
    const auto k = index_.key(e.key_offset);
    write_blob(dir / key_file(e.key_offset), Matrix(1, width_, std::vector<float>(k.begin(), k.end())));
  }
  write_manifest(dir);
}

namespace {

nlohmann::json read_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  if (!std::filesystem::exists(path)) fail(ErrorKind::load, "store manifest missing: " + path.string());
  try {
    return nlohmann::json::parse(read_file_text(path));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::integrity, "store manifest " + path.string() + ": " + e.what());
  }
}

void require_file(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) fail(ErrorKind::load, "store references missing file " + path.string());
}

}  // namespace

EditStore EditStore::load(const std::filesystem::path& dir) {
  const auto j = read_manifest(dir);
  try {
    require(j.at("format") == "rilke-store", ErrorKind::load, "not a store manifest: " + dir.string());
    const int version = j.at("version").get<int>();
    require(version == kStoreVersion, ErrorKind::load,
            "store version " + std::to_string(version) + " is not supported (expected " +
                std::to_string(kStoreVersion) + ")");
    EditStore store(parse_mode(j.at("mode").get<std::string>()), j.at("layer").get<int>(),
                    j.at("rank").get<std::size_t>(), j.at("width").get<std::size_t>(), j.at("gate").get<double>(),
                    {}, parse_scope(j.at("scope").get<std::string>()));
    std::map<std::string, InterventionModule> loaded;
    for (const auto& row : j.at("modules")) {
      const auto mdir = dir / row.at("dir").get<std::string>();
      for (const char* f : {"module.json", "R.rilk", "A.rilk", "b.rilk"}) require_file(mdir / f);
      InterventionModule m = load_module(mdir);
      require(m.id == row.at("id").get<std::string>(), ErrorKind::integrity,
              "module id mismatch in " + mdir.string());
      loaded.emplace(m.id, std::move(m));
    }
    for (const auto& row : j.at("entries")) {
      const auto key_path = dir / row.at("key").get<std::string>();
      require_file(key_path);
      const Matrix key = read_blob(key_path);
      require(key.rows() == 1 && key.cols() == store.width_, ErrorKind::integrity,
              "key blob has the wrong shape: " + key_path.string());
      const auto module_id = row.at("module").get<std::string>();
      auto it = loaded.find(module_id);
      require(it != loaded.end(), ErrorKind::load, "entry references unknown module " + module_id);
      std::optional<std::string> cluster;
      if (row.contains("cluster")) cluster = row.at("cluster").get<std::string>();
      require(row.at("key_offset").get<std::size_t>() == store.entries_.size(), ErrorKind::integrity,
              "key offsets are not sequential in " + dir.string());
      store.add_edit(it->second, key.row(0), row.at("item").get<std::string>(), cluster);
    }
    require(store.modules_.size() == loaded.size(), ErrorKind::integrity, "manifest lists unreferenced modules");
    if (store.mode_ == StoreMode::individual)
      require(store.modules_.size() == store.entries_.size(), ErrorKind::integrity,
              "individual store needs one module per item");
    store.dir_ = dir;
    return store;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::integrity, "store manifest " + dir.string() + ": " + e.what());
  }
}

MemoryReport memory_report_from_disk(const std::filesystem::path& dir) {
  const auto j = read_manifest(dir);
  MemoryReport r;
  try {
    for (const auto& row : j.at("modules")) {
      const auto mdir = dir / row.at("dir").get<std::string>();
      std::size_t count = 0;
      for (const char* f : {"R.rilk", "A.rilk", "b.rilk"}) {
        const auto h = read_blob_header(mdir / f);
        count += h.rows * h.cols;
      }
      r.per_module[row.at("id").get<std::string>()] = count;
      r.module_params += count;
    }
    for (const auto& row : j.at("entries")) {
      const auto h = read_blob_header(dir / row.at("key").get<std::string>());
      r.key_floats += h.rows * h.cols;
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::integrity, "store manifest " + dir.string() + ": " + e.what());
  }
  return r;
}

}  // namespace rilke
