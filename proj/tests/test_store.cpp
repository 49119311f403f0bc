#include <fstream>
#include <iterator>
#include <map>

#include "doctest.h"
#include "helpers.hpp"
#include "rilke/store.hpp"

using namespace rilke;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::map<std::string, std::string> snapshot(const std::filesystem::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[std::filesystem::relative(e.path(), dir).string()] = slurp(e.path());
  return out;
}

InterventionModule module_for(const std::string& id, std::uint64_t seed) {
  auto m = new_module(2, 8, 2, seed, id);
  m.A = testing::gaussian_matrix(2, 8, seed + 1, 0.3);
  m.b = testing::gaussian_matrix(1, 2, seed + 2, 0.3);
  return m;
}

}  // namespace

TEST_CASE("individual store round trips through disk") {
  const auto dir = testing::scratch_dir("store-ind");
  EditStore store(StoreMode::individual, 2, 2, 8, 0.85, dir);
  for (int i = 0; i < 5; ++i) {
    const std::string id = "e" + std::to_string(i);
    store.add_edit(module_for(id, 10 * i + 1), testing::gaussian(8, 500 + i), id);
  }
  const auto back = EditStore::load(dir);
  CHECK(back.mode() == StoreMode::individual);
  CHECK(back.gate() == 0.85);
  CHECK(back.entries().size() == 5);
  CHECK(back.index().keys() == store.index().keys());
  for (const auto& [id, m] : store.modules()) CHECK(back.module(id) == m);

  const auto copy_dir = testing::scratch_dir("store-copy");
  back.save(copy_dir);
  const auto again = EditStore::load(copy_dir);
  CHECK(again.index().keys() == store.index().keys());
  CHECK(again.modules() == store.modules());
}

TEST_CASE("appending leaves earlier files untouched") {
  const auto dir = testing::scratch_dir("store-append");
  EditStore store(StoreMode::individual, 2, 2, 8, 0.9, dir);
  store.add_edit(module_for("a", 1), testing::gaussian(8, 1), "a");
  store.add_edit(module_for("b", 2), testing::gaussian(8, 2), "b");
  auto before = snapshot(dir);
  before.erase("manifest.json");

  auto reopened = EditStore::load(dir);
  reopened.add_edit(module_for("c", 3), testing::gaussian(8, 3), "c");
  const auto after = snapshot(dir);
  for (const auto& [name, bytes] : before) CHECK(after.at(name) == bytes);
  CHECK(after.size() > before.size() + 1);
  CHECK(EditStore::load(dir).entries().size() == 3);
}

TEST_CASE("store rejects collisions and shape mismatches") {
  EditStore store(StoreMode::individual, 2, 2, 8, 0.9);
  store.add_edit(module_for("a", 1), testing::gaussian(8, 1), "a");
  CHECK_THROWS_AS(store.add_edit(module_for("a", 5), testing::gaussian(8, 5), "a"), Error);
  CHECK_THROWS_AS(store.add_edit(module_for("x", 5), testing::gaussian(8, 5), "y"), Error);
  CHECK_THROWS_AS(store.add_edit(new_module(2, 8, 3, 1, "z"), testing::gaussian(8, 5), "z"), Error);
  CHECK_THROWS_AS(store.add_edit(new_module(1, 8, 2, 1, "z"), testing::gaussian(8, 5), "z"), Error);
  CHECK_THROWS_AS(store.add_edit(module_for("z", 5), testing::gaussian(7, 5), "z"), Error);
  CHECK(store.entries().size() == 1);
  CHECK_THROWS_AS(EditStore(StoreMode::individual, 2, 9, 8, 0.9), Error);
  CHECK_THROWS_AS(parse_mode("both"), Error);
}

TEST_CASE("shared store keeps one module per cluster") {
  const auto dir = testing::scratch_dir("store-shared");
  EditStore store(StoreMode::shared, 2, 2, 8, 0.9, dir);
  const auto c1 = module_for("c1", 1), c2 = module_for("c2", 2);
  store.add_edit(c1, testing::gaussian(8, 1), "a", "c1");
  store.add_edit(c1, testing::gaussian(8, 2), "b", "c1");
  store.add_edit(c2, testing::gaussian(8, 3), "c", "c2");
  CHECK_THROWS_AS(store.add_edit(module_for("c1", 9), testing::gaussian(8, 4), "d", "c1"), Error);
  CHECK_THROWS_AS(store.add_edit(c2, testing::gaussian(8, 4), "d"), Error);
  CHECK(store.module_count() == 2);

  const auto mem = store.memory_report();
  CHECK(mem.module_params == 2 * param_count(8, 2));
  CHECK(mem.key_floats == 3 * 8);
  const auto disk = memory_report_from_disk(dir);
  CHECK(disk.module_params == mem.module_params);
  CHECK(disk.key_floats == mem.key_floats);
  CHECK(disk.per_module == mem.per_module);

  const auto back = EditStore::load(dir);
  CHECK(back.entries()[1].cluster_id == std::optional<std::string>("c1"));
  CHECK(back.module_count() == 2);
}

TEST_CASE("damaged stores fail to load") {
  const auto dir = testing::scratch_dir("store-bad");
  try {
    EditStore::load(dir);
    FAIL("expected a load error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::load);
  }
  {
    EditStore store(StoreMode::individual, 2, 2, 8, 0.9, dir);
    store.add_edit(module_for("a", 1), testing::gaussian(8, 1), "a");
  }
  std::filesystem::remove(dir / "keys" / "k00001.rilk");
  try {
    EditStore::load(dir);
    FAIL("expected a load error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::load);
  }
  std::ofstream(dir / "manifest.json") << "{ not json";
  try {
    EditStore::load(dir);
    FAIL("expected an integrity error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::integrity);
  }
}
