#include "rilke/cluster.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "json.hpp"

#include "rilke/error.hpp"
#include "rilke/parallel.hpp"

namespace rilke {

Linkage parse_linkage(const std::string& name) {
  if (name == "average") return Linkage::average;
  if (name == "complete") return Linkage::complete;
  if (name == "single") return Linkage::single;
  fail(ErrorKind::config, "unknown linkage \"" + name + "\" (expected average, complete or single)");
}

std::string to_string(Linkage linkage) {
  switch (linkage) {
    case Linkage::average: return "average";
    case Linkage::complete: return "complete";
    case Linkage::single: return "single";
  }
  return "average";
}

void ClusterConfig::validate() const {
  require(tau_min > 0 && tau_min < 1, ErrorKind::config, "tau_min must be in (0, 1)");
  require(step > 0, ErrorKind::config, "tau step must be > 0");
  require(s_max >= 1, ErrorKind::config, "s_max must be >= 1");
  require(tau_min < tau_cap, ErrorKind::config, "tau_min must be below tau_cap");
}

const Cluster& ClusterAssignment::cluster(const std::string& id) const {
  for (const auto& c : clusters)
    if (c.id == id) return c;
  fail(ErrorKind::input, "unknown cluster " + id);
}

namespace {

// Cosine distances between all rows.
MatrixD cosine_distances(const MatrixD& keys) {
  const std::size_t m = keys.rows();
  std::vector<double> norms(m);
  for (std::size_t i = 0; i < m; ++i) {
    norms[i] = keys.map().row(static_cast<Eigen::Index>(i)).norm();
    require(norms[i] > 0, ErrorKind::numeric,
            "key " + std::to_string(i) + " has zero norm; cosine distance is undefined");
  }
  MatrixD dist(m, m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      if (i == j) continue;
      const double dotp = keys.map().row(static_cast<Eigen::Index>(i)).dot(keys.map().row(static_cast<Eigen::Index>(j)));
      dist(i, j) = 1.0 - dotp / (norms[i] * norms[j]);
    }
  return dist;
}

double linkage_distance(const MatrixD& dist, const std::vector<std::size_t>& a,
                        const std::vector<std::size_t>& b, Linkage linkage) {
  double acc = linkage == Linkage::single ? std::numeric_limits<double>::infinity()
               : linkage == Linkage::complete ? -std::numeric_limits<double>::infinity()
                                              : 0.0;
  for (std::size_t x : a)
    for (std::size_t y : b) {
      const double d = dist(x, y);
      if (linkage == Linkage::average) acc += d;
      else if (linkage == Linkage::complete) acc = std::max(acc, d);
      else acc = std::min(acc, d);
    }
  if (linkage == Linkage::average) acc /= static_cast<double>(a.size() * b.size());
  return acc;
}

// HAC over the rows `members` of a precomputed distance matrix.
std::vector<std::vector<std::size_t>> hac_subset(const MatrixD& dist, const std::vector<std::size_t>& members,
                                                 double d_thr, Linkage linkage) {
  std::vector<std::vector<std::size_t>> clusters;
  for (std::size_t i : members) clusters.push_back({i});
  const std::size_t n = clusters.size();
  std::vector<std::vector<double>> link(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) link[i][j] = linkage_distance(dist, clusters[i], clusters[j], linkage);

  while (clusters.size() > 1) {
    std::size_t bi = 0, bj = 0;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < clusters.size(); ++i)
      for (std::size_t j = i + 1; j < clusters.size(); ++j)
        if (link[i][j] < best) {
          best = link[i][j];
          bi = i;
          bj = j;
        }
    if (!(best < d_thr)) break;
    auto& target = clusters[bi];
    target.insert(target.end(), clusters[bj].begin(), clusters[bj].end());
    std::sort(target.begin(), target.end());
    clusters.erase(clusters.begin() + static_cast<std::ptrdiff_t>(bj));
    link.erase(link.begin() + static_cast<std::ptrdiff_t>(bj));
    for (auto& row : link) row.erase(row.begin() + static_cast<std::ptrdiff_t>(bj));
    for (std::size_t k = 0; k < clusters.size(); ++k) {
      if (k == bi) continue;
      const double d = linkage_distance(dist, clusters[std::min(k, bi)], clusters[std::max(k, bi)], linkage);
      link[std::min(k, bi)][std::max(k, bi)] = d;
    }
  }
  return clusters;
}

std::vector<IndexCluster> split_with(const MatrixD& dist, const std::vector<std::size_t>& cluster, double tau,
                                     const ClusterConfig& cfg) {
  if (cluster.size() <= cfg.s_max) return {{cluster, tau, false}};
  const double raised = tau + cfg.step;
  if (raised > cfg.tau_cap) {
    std::vector<IndexCluster> chunks;
    for (std::size_t i = 0; i < cluster.size(); i += cfg.s_max) {
      const auto end = std::min(cluster.size(), i + cfg.s_max);
      chunks.push_back({std::vector<std::size_t>(cluster.begin() + static_cast<std::ptrdiff_t>(i),
                                                 cluster.begin() + static_cast<std::ptrdiff_t>(end)),
                        tau, true});
    }
    return chunks;
  }
  std::vector<IndexCluster> out;
  for (const auto& part : hac_subset(dist, cluster, 1.0 - raised, cfg.linkage)) {
    auto pieces = split_with(dist, part, raised, cfg);
    out.insert(out.end(), pieces.begin(), pieces.end());
  }
  return out;
}

std::vector<std::size_t> all_rows(std::size_t m) {
  std::vector<std::size_t> rows(m);
  for (std::size_t i = 0; i < m; ++i) rows[i] = i;
  return rows;
}

}  // namespace

std::vector<std::vector<std::size_t>> hac(const MatrixD& keys, double d_thr, Linkage linkage) {
  require(keys.rows() >= 1, ErrorKind::input, "hac needs at least one key");
  require(d_thr >= 0, ErrorKind::config, "distance threshold must be >= 0");
  return hac_subset(cosine_distances(keys), all_rows(keys.rows()), d_thr, linkage);
}

std::vector<IndexCluster> split_oversized(const std::vector<std::size_t>& cluster, double tau,
                                          const ClusterConfig& cfg, const MatrixD& keys) {
  cfg.validate();
  require(!cluster.empty(), ErrorKind::input, "split_oversized on an empty cluster");
  for (std::size_t i : cluster) require(i < keys.rows(), ErrorKind::input, "cluster member out of range");
  return split_with(cosine_distances(keys), cluster, tau, cfg);
}

ClusterAssignment constrained_clustering(const MatrixD& keys, const std::vector<std::string>& ids,
                                         const ClusterConfig& cfg) {
  cfg.validate();
  require(keys.rows() == ids.size(), ErrorKind::input, "one id per key");
  require(!ids.empty(), ErrorKind::input, "clustering needs at least one key");
  require(std::set<std::string>(ids.begin(), ids.end()).size() == ids.size(), ErrorKind::input,
          "item ids must be unique");
  const MatrixD dist = cosine_distances(keys);
  std::vector<IndexCluster> parts;
  for (const auto& c : hac_subset(dist, all_rows(keys.rows()), 1.0 - cfg.tau_min, cfg.linkage)) {
    auto pieces = split_with(dist, c, cfg.tau_min, cfg);
    parts.insert(parts.end(), pieces.begin(), pieces.end());
  }
  std::stable_sort(parts.begin(), parts.end(),
                   [](const IndexCluster& a, const IndexCluster& b) { return a.members.front() < b.members.front(); });

  ClusterAssignment out;
  for (std::size_t c = 0; c < parts.size(); ++c) {
    Cluster cluster{"c" + std::to_string(c + 1), {}, parts[c].floor, parts[c].fallback};
    for (std::size_t i : parts[c].members) {
      cluster.items.push_back(ids[i]);
      out.kappa[ids[i]] = cluster.id;
    }
    out.clusters.push_back(std::move(cluster));
  }
  return out;
}

bool respects_floor(const MatrixD& keys, const std::vector<std::size_t>& members, double floor,
                    Linkage linkage) {
  if (members.size() < 2) return true;
  const MatrixD dist = cosine_distances(keys);
  const double limit = 1.0 - floor;
  switch (linkage) {
    case Linkage::complete:
      for (std::size_t a : members)
        for (std::size_t b : members)
          if (a != b && dist(a, b) > limit) return false;
      return true;
    case Linkage::average: {
      double sum = 0;
      std::size_t n = 0;
      for (std::size_t x = 0; x < members.size(); ++x)
        for (std::size_t y = x + 1; y < members.size(); ++y) {
          sum += dist(members[x], members[y]);
          ++n;
        }
      return sum / static_cast<double>(n) <= limit;
    }
    case Linkage::single:
      for (std::size_t a : members) {
        bool linked = false;
        for (std::size_t b : members) linked = linked || (a != b && dist(a, b) <= limit);
        if (!linked) return false;
      }
      return true;
  }
  return false;
}

std::map<std::string, TrainResult> train_shared(const BaseModel& model, int layer, std::size_t rank,
                                                const ClusterAssignment& assignment,
                                                const std::map<std::string, EditExample>& examples,
                                                const RobustConfig& cfg, unsigned threads) {
  std::vector<std::vector<EditExample>> batches;
  for (const auto& c : assignment.clusters) {
    auto& batch = batches.emplace_back();
    for (const auto& id : c.items) {
      auto it = examples.find(id);
      require(it != examples.end(), ErrorKind::input, "assignment names unknown item " + id);
      batch.push_back(it->second);
    }
  }
  std::vector<TrainResult> results(batches.size());
  parallel_for(batches.size(), threads, [&](std::size_t c) {
    results[c] = train_edit(model, layer, rank, batches[c], cfg, cfg.seed, assignment.clusters[c].id);
  });
  std::map<std::string, TrainResult> out;
  for (std::size_t c = 0; c < results.size(); ++c) out.emplace(assignment.clusters[c].id, std::move(results[c]));
  return out;
}

void save_assignment(const std::filesystem::path& path, const ClusterAssignment& assignment) {
  nlohmann::ordered_json j;
  j["format"] = "rilke-assignment";
  j["version"] = 1;
  j["k"] = assignment.k();
  j["clusters"] = nlohmann::ordered_json::array();
  for (const auto& c : assignment.clusters) {
    nlohmann::ordered_json row;
    row["id"] = c.id;
    row["floor"] = c.floor;
    row["fallback"] = c.fallback;
    row["items"] = c.items;
    j["clusters"].push_back(row);
  }
  write_file_atomic(path, j.dump(2) + "\n");
}

ClusterAssignment load_assignment(const std::filesystem::path& path) {
  try {
    const auto j = nlohmann::json::parse(read_file_text(path));
    require(j.at("format") == "rilke-assignment", ErrorKind::integrity, "not an assignment file");
    ClusterAssignment out;
    for (const auto& row : j.at("clusters")) {
      Cluster c{row.at("id").get<std::string>(), row.at("items").get<std::vector<std::string>>(),
                row.at("floor").get<double>(), row.at("fallback").get<bool>()};
      for (const auto& id : c.items) {
        require(!out.kappa.contains(id), ErrorKind::integrity, "item " + id + " appears in two clusters");
        out.kappa[id] = c.id;
      }
      out.clusters.push_back(std::move(c));
    }
    require(j.at("k").get<std::size_t>() == out.k(), ErrorKind::integrity, "cluster count mismatch");
    return out;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::integrity, "assignment " + path.string() + ": " + e.what());
  }
}

}  // namespace rilke
