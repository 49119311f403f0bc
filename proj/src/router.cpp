#include "rilke/router.hpp"

#include <cmath>
#include <mutex>

#include "json.hpp"

#include "rilke/error.hpp"
#include "rilke/kernels.hpp"

namespace rilke {

namespace {

void check_gate(double gate) {
  require(gate >= 0 && gate <= 1, ErrorKind::config, "gate threshold must be in [0, 1]");
}

}  // namespace

RouterIndex::RouterIndex(int layer, std::size_t width, double gate)
    : layer_(layer), width_(width), gate_(gate) {
  require(layer >= 1, ErrorKind::config, "router layer must be >= 1");
  require(width >= 1, ErrorKind::dimension, "router width must be >= 1");
  check_gate(gate);
}

RouterIndex::RouterIndex(const RouterIndex& other) {
  std::shared_lock lock(other.mutex_);
  layer_ = other.layer_;
  width_ = other.width_;
  gate_ = other.gate_;
  keys_ = other.keys_;
  norms_ = other.norms_;
  entries_ = other.entries_;
  ids_ = other.ids_;
}

RouterIndex& RouterIndex::operator=(const RouterIndex& other) {
  if (this == &other) return *this;
  RouterIndex copy(other);
  std::unique_lock lock(mutex_);
  layer_ = copy.layer_;
  width_ = copy.width_;
  gate_ = copy.gate_;
  keys_ = std::move(copy.keys_);
  norms_ = std::move(copy.norms_);
  entries_ = std::move(copy.entries_);
  ids_ = std::move(copy.ids_);
  return *this;
}

void RouterIndex::set_gate(double gate) {
  check_gate(gate);
  std::unique_lock lock(mutex_);
  gate_ = gate;
}

std::size_t RouterIndex::size() const {
  std::shared_lock lock(mutex_);
  return entries_.size();
}

void RouterIndex::insert(std::span<const float> key, RouterEntry entry) {
  require(key.size() == width_, ErrorKind::dimension,
          "router key has length " + std::to_string(key.size()) + ", expected " + std::to_string(width_));
  for (float v : key) require(std::isfinite(v), ErrorKind::numeric, "router key must be finite");
  std::unique_lock lock(mutex_);
  require(!ids_.contains(entry.item_id), ErrorKind::input, "duplicate item id " + entry.item_id);
  keys_.insert(keys_.end(), key.begin(), key.end());
  norms_.push_back(norm(key));
  ids_.insert(entry.item_id);
  entries_.push_back(std::move(entry));
}

RouteDecision RouterIndex::route(std::span<const float> query) const {
  return route(query, gate());
}

RouteDecision RouterIndex::route(std::span<const float> query, double gate) const {
  require(query.size() == width_, ErrorKind::dimension,
          "query has length " + std::to_string(query.size()) + ", expected " + std::to_string(width_));
  std::shared_lock lock(mutex_);
  require(!entries_.empty(), ErrorKind::state, "route on an empty index");
  RouteDecision d;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const std::span<const float> k(keys_.data() + i * width_, width_);
    const double dist = squared_l2(query, k);
    if (dist < best) {
      best = dist;
      d.index = i;
    }
  }
  d.distance = best;
  const double qn = norm(query), kn = norms_[d.index];
  d.cosine = qn > 0 && kn > 0
                 ? dot(query, std::span<const float>(keys_.data() + d.index * width_, width_)) / (qn * kn)
                 : 0.0;
  d.matched = qn > 0 && kn > 0 && d.cosine >= gate;
  if (d.matched) {
    const auto& e = entries_[d.index];
    d.item_id = e.item_id;
    d.module_id = e.module_id;
    d.cluster_id = e.cluster_id;
  }
  return d;
}

std::vector<RouterEntry> RouterIndex::entries() const {
  std::shared_lock lock(mutex_);
  return entries_;
}

Matrix RouterIndex::keys() const {
  std::shared_lock lock(mutex_);
  return Matrix(entries_.size(), width_, keys_);
}

std::span<const float> RouterIndex::key(std::size_t i) const {
  require(i < entries_.size(), ErrorKind::input, "router entry out of range");
  return {keys_.data() + i * width_, width_};
}

RouterIndex build_index(const BaseModel& model, int layer, const Tokenizer& tok,
                        const std::vector<std::string>& prompts, std::vector<RouterEntry> entries,
                        double gate) {
  require(!prompts.empty(), ErrorKind::input, "build_index needs at least one item");
  require(prompts.size() == entries.size(), ErrorKind::input, "one entry per prompt");
  RouterIndex index(layer, static_cast<std::size_t>(model.config().width), gate);
  for (std::size_t i = 0; i < prompts.size(); ++i)
    index.insert(hidden_at(model, tok.encode(prompts[i]), layer).vector, std::move(entries[i]));
  return index;
}

RoutingAccuracy routing_accuracy(const RouterIndex& index, const BaseModel& model, const Tokenizer& tok,
                                 const std::vector<std::pair<std::string, std::string>>& queries,
                                 bool by_cluster) {
  require(!queries.empty(), ErrorKind::input, "routing accuracy needs at least one query");
  RoutingAccuracy acc;
  std::size_t hit = 0, fired = 0;
  for (const auto& [prompt, expected] : queries) {
    const auto key = hidden_at(model, tok.encode(prompt), index.layer()).vector;
    const RouteDecision d = index.route(key);
    const RouterEntry& e = index.entry(d.index);
    const std::string got = by_cluster ? e.cluster_id.value_or(e.module_id) : e.module_id;
    if (got == expected) {
      ++hit;
      if (d.matched) ++fired;
    }
  }
  acc.count = queries.size();
  acc.ungated = static_cast<double>(hit) / static_cast<double>(acc.count);
  acc.gated = static_cast<double>(fired) / static_cast<double>(acc.count);
  return acc;
}

void save_index(const std::filesystem::path& dir, const RouterIndex& index) {
  std::filesystem::create_directories(dir);
  write_blob(dir / "keys.rilk", index.keys());
  nlohmann::ordered_json j;
  j["format"] = "rilke-index";
  j["version"] = 1;
  j["layer"] = index.layer();
  j["width"] = index.width();
  j["gate"] = index.gate();
  j["entries"] = nlohmann::ordered_json::array();
  for (const auto& e : index.entries()) {
    nlohmann::ordered_json row;
    row["item"] = e.item_id;
    row["module"] = e.module_id;
    if (e.cluster_id) row["cluster"] = *e.cluster_id;
    j["entries"].push_back(row);
  }
  write_file_atomic(dir / "index.json", j.dump(2) + "\n");
}

RouterIndex load_index(const std::filesystem::path& dir) {
  try {
    const auto j = nlohmann::json::parse(read_file_text(dir / "index.json"));
    require(j.at("format") == "rilke-index", ErrorKind::integrity, "not a router index manifest");
    require(j.at("version") == 1, ErrorKind::load, "unsupported index version");
    RouterIndex index(j.at("layer").get<int>(), j.at("width").get<std::size_t>(), j.at("gate").get<double>());
    const Matrix keys = read_blob(dir / "keys.rilk");
    const auto& rows = j.at("entries");
    require(keys.rows() == rows.size() && (rows.empty() || keys.cols() == index.width()),
            ErrorKind::integrity, "keys.rilk disagrees with index.json in " + dir.string());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      RouterEntry e{rows[i].at("item").get<std::string>(), rows[i].at("module").get<std::string>(), {}};
      if (rows[i].contains("cluster")) e.cluster_id = rows[i].at("cluster").get<std::string>();
      index.insert(keys.row(i), std::move(e));
    }
    return index;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::integrity, "index manifest " + (dir / "index.json").string() + ": " + e.what());
  }
}

}  // namespace rilke
