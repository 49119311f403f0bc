#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>

#include "doctest.h"
#include "helpers.hpp"
#include "oracles.hpp"
#include "rilke/cluster.hpp"
#include "rilke/kernels.hpp"
#include "rilke/router.hpp"

using namespace rilke;

namespace {

RouterIndex random_index(std::size_t m, std::size_t d, std::uint64_t seed, double gate = 0.9) {
  RouterIndex index(2, d, gate);
  for (std::size_t i = 0; i < m; ++i)
    index.insert(testing::gaussian(d, seed * 1000 + i), {"k" + std::to_string(i), "k" + std::to_string(i), {}});
  return index;
}

}  // namespace

TEST_CASE("routing agrees with a brute-force nearest key") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const std::size_t m = 5 * seed, d = 8;
    const auto index = random_index(m, d, seed, 0.5);
    for (int q = 0; q < 20; ++q) {
      const auto query = testing::gaussian(d, seed * 7919 + static_cast<std::uint64_t>(q));
      std::size_t want = 0;
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < m; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < d; ++j) s += std::pow(double(query[j]) - index.key(i)[j], 2);
        if (s < best) {
          best = s;
          want = i;
        }
      }
      const auto got = index.route(query);
      CHECK(got.index == want);
      CHECK(got.distance == doctest::Approx(best));
      CHECK(got.matched == (cosine(query, index.key(want)) >= 0.5));
      if (got.matched) CHECK(got.item_id == "k" + std::to_string(want));
    }
  }
}

TEST_CASE("every stored key routes to itself") {
  const auto index = random_index(300, 16, 3);
  for (std::size_t i = 0; i < index.size(); ++i) {
    const auto d = index.route(index.key(i));
    CHECK(d.matched);
    CHECK(d.index == i);
    CHECK(d.distance == 0.0);
  }
}

TEST_CASE("ties go to the earliest entry and zero vectors never match") {
  RouterIndex index(1, 3, 0.9);
  index.insert(std::vector<float>{1, 0, 0}, {"a", "ma", {}});
  index.insert(std::vector<float>{1, 0, 0}, {"b", "mb", {}});
  index.insert(std::vector<float>{0, 0, 0}, {"z", "mz", {}});
  CHECK(index.route(std::vector<float>{1, 0, 0}).item_id == "a");
  CHECK(index.route(std::vector<float>{2, 0, 0}).item_id == "a");
  const auto zero = index.route(std::vector<float>{0, 0, 0});
  CHECK_FALSE(zero.matched);
  CHECK(zero.index == 2);
  CHECK_FALSE(index.route(std::vector<float>{0.01f, 0, 0}).matched);
  const auto off = index.route(std::vector<float>{1, 1, 0});
  CHECK_FALSE(off.matched);
  CHECK(index.route(std::vector<float>{1, 1, 0}, 0.7).matched);
}

TEST_CASE("index rejects bad inserts") {
  RouterIndex index(1, 3, 0.9);
  CHECK_THROWS_AS(index.route(std::vector<float>{1, 0, 0}), Error);
  index.insert(std::vector<float>{1, 0, 0}, {"a", "a", {}});
  CHECK_THROWS_AS(index.insert(std::vector<float>{0, 1, 0}, {"a", "a", {}}), Error);
  CHECK_THROWS_AS(index.insert(std::vector<float>{0, 1}, {"b", "b", {}}), Error);
  CHECK_THROWS_AS(index.insert(std::vector<float>{NAN, 1, 0}, {"c", "c", {}}), Error);
  CHECK_THROWS_AS(index.set_gate(1.5), Error);
  CHECK(index.size() == 1);
}

TEST_CASE("index copies are independent and persist") {
  auto index = random_index(10, 6, 8);
  RouterIndex copy = index;
  copy.insert(testing::gaussian(6, 99), {"extra", "extra", std::string("c9")});
  CHECK(index.size() == 10);
  CHECK(copy.size() == 11);

  const auto dir = testing::scratch_dir("index");
  save_index(dir, copy);
  const auto back = load_index(dir);
  CHECK(back.size() == 11);
  CHECK(back.keys() == copy.keys());
  CHECK(back.entry(10).cluster_id == std::optional<std::string>("c9"));
  for (std::size_t i = 0; i < 11; ++i) CHECK(back.route(copy.key(i)).item_id == copy.entry(i).item_id);
}

TEST_CASE("hac agrees with the brute-force oracle") {
  for (std::uint64_t seed = 1; seed <= 60; ++seed) {
    const std::size_t m = 1 + seed % 8;
    MatrixD keys = testing::clustered_keys(m, 5, seed, 0.4);
    if (seed % 5 == 0 && m > 2)
      for (std::size_t j = 0; j < 5; ++j) keys(m - 1, j) = keys(0, j);  // exact duplicate
    for (Linkage linkage : {Linkage::average, Linkage::complete, Linkage::single})
      for (double d_thr : {0.02, 0.1, 0.3, 0.8}) {
        INFO("seed " << seed << " linkage " << to_string(linkage) << " d_thr " << d_thr);
        CHECK(hac(keys, d_thr, linkage) == testing::oracle_hac(keys, d_thr, linkage));
      }
  }
}

TEST_CASE("hac edge cases") {
  MatrixD one(1, 3, 1.0);
  CHECK(hac(one, 0.5, Linkage::average) == std::vector<std::vector<std::size_t>>{{0}});
  MatrixD zero(2, 3);
  zero(0, 0) = 1;
  CHECK_THROWS_AS(hac(zero, 0.5, Linkage::average), Error);
  MatrixD same(3, 2, 1.0);
  // distance 0 is not below a threshold of 0
  CHECK(hac(same, 0.0, Linkage::average).size() == 3);
  CHECK(hac(same, 1e-9, Linkage::average).size() == 1);
}

TEST_CASE("constrained clustering respects size and floor") {
  for (std::uint64_t seed = 1; seed <= 25; ++seed) {
    const std::size_t m = 10 + seed * 3;
    const MatrixD keys = testing::clustered_keys(m, 6, seed, 0.3);
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < m; ++i) ids.push_back("i" + std::to_string(i));
    for (Linkage linkage : {Linkage::average, Linkage::complete, Linkage::single}) {
      ClusterConfig cfg;
      cfg.tau_min = 0.6 + 0.01 * static_cast<double>(seed % 30);
      cfg.s_max = 2 + seed % 6;
      cfg.linkage = linkage;
      const auto a = constrained_clustering(keys, ids, cfg);
      std::set<std::string> seen;
      std::size_t prev_first = 0;
      for (std::size_t c = 0; c < a.clusters.size(); ++c) {
        const auto& cl = a.clusters[c];
        CHECK(cl.id == "c" + std::to_string(c + 1));
        CHECK(!cl.items.empty());
        CHECK(cl.items.size() <= cfg.s_max);
        CHECK(cl.floor >= cfg.tau_min);
        std::vector<std::size_t> rows;
        for (const auto& id : cl.items) {
          CHECK(seen.insert(id).second);
          CHECK(a.kappa.at(id) == cl.id);
          rows.push_back(static_cast<std::size_t>(std::stoul(id.substr(1))));
        }
        CHECK(std::is_sorted(rows.begin(), rows.end()));
        if (c > 0) CHECK(rows.front() > prev_first);
        prev_first = rows.front();
        if (!cl.fallback) CHECK(respects_floor(keys, rows, cl.floor, linkage));
      }
      CHECK(seen.size() == m);
    }
  }
}

TEST_CASE("raising tau never reduces the number of clusters") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const MatrixD keys = testing::clustered_keys(40, 6, seed, 0.5);
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < 40; ++i) ids.push_back("i" + std::to_string(i));
    std::size_t prev = 0;
    for (double tau : {0.5, 0.7, 0.8, 0.9, 0.95, 0.99}) {
      ClusterConfig cfg;
      cfg.tau_min = tau;
      cfg.s_max = 100;
      const auto k = constrained_clustering(keys, ids, cfg).k();
      CHECK(k >= prev);
      prev = k;
    }
  }
}

TEST_CASE("identical keys fall back to insertion-order chunks") {
  MatrixD keys(7, 3, 1.0);
  std::vector<std::string> ids{"a", "b", "c", "d", "e", "f", "g"};
  ClusterConfig cfg;
  cfg.s_max = 3;
  const auto a = constrained_clustering(keys, ids, cfg);
  REQUIRE(a.k() == 3);
  CHECK(a.clusters[0].items == std::vector<std::string>{"a", "b", "c"});
  CHECK(a.clusters[2].items == std::vector<std::string>{"g"});
  for (const auto& c : a.clusters) CHECK(c.fallback);

  const auto split = split_oversized({0, 1, 2, 3, 4, 5, 6}, 0.9, cfg, keys);
  CHECK(split.size() == 3);
}

TEST_CASE("singletons and persistence") {
  MatrixD keys(3, 2);
  keys(0, 0) = 1;
  keys(1, 1) = 1;
  keys(2, 0) = -1;
  const auto a = constrained_clustering(keys, {"x", "y", "z"}, ClusterConfig{});
  CHECK(a.k() == 3);
  const auto dir = testing::scratch_dir("assign");
  save_assignment(dir / "a.json", a);
  const auto back = load_assignment(dir / "a.json");
  CHECK(back.kappa == a.kappa);
  CHECK(back.k() == 3);
  CHECK_THROWS_AS(constrained_clustering(keys, {"x", "x", "z"}, ClusterConfig{}), Error);
  ClusterConfig bad;
  bad.tau_min = 1.0;
  CHECK_THROWS_AS(bad.validate(), Error);
  CHECK(parse_linkage("single") == Linkage::single);
  CHECK_THROWS_AS(parse_linkage("ward"), Error);
}
