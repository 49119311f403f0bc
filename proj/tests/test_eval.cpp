#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "rilke/config.hpp"
#include "rilke/engine.hpp"
#include "rilke/eval.hpp"
#include "rilke/kernels.hpp"

using namespace rilke;

TEST_CASE("rouge-l on hand examples") {
  const std::vector<int> ref{1, 2, 3, 4, 5, 6, 7};
  // LCS 6 of 7 against a 7-token hypothesis with one substitution
  const std::vector<int> hyp{1, 2, 3, 9, 5, 6, 7};
  CHECK(lcs_length(hyp, ref) == 6);
  CHECK(rouge_l(hyp, ref) == doctest::Approx(6.0 / 7.0));
  CHECK(rouge_l(ref, ref) == 1.0);
  CHECK(rouge_l({8, 9}, ref) == 0.0);
  CHECK(rouge_l({}, ref) == 0.0);
  // precision 1, recall 3/7
  CHECK(rouge_l({1, 2, 3}, ref) == doctest::Approx(2 * (3.0 / 7) / (1 + 3.0 / 7)));
  CHECK(rouge_l({1, 2, 3}, ref, RougeVariant::recall) == doctest::Approx(3.0 / 7));
  CHECK(lcs_length({1, 3, 2, 4}, {1, 2, 3, 4}) == 3);
  CHECK_THROWS_AS(rouge_l(ref, {}), Error);
  CHECK(exact_match(ref, ref));
  CHECK_FALSE(exact_match(hyp, ref));
}

TEST_CASE("rouge-l f1 is symmetric and bounded") {
  Rng rng(4);
  std::uniform_int_distribution<int> tok(0, 5), len(1, 9);
  for (int t = 0; t < 200; ++t) {
    std::vector<int> a(static_cast<std::size_t>(len(rng))), b(static_cast<std::size_t>(len(rng)));
    for (auto& x : a) x = tok(rng);
    for (auto& x : b) x = tok(rng);
    const double s = rouge_l(a, b);
    CHECK(s >= 0.0);
    CHECK(s <= 1.0);
    CHECK(s == doctest::Approx(rouge_l(b, a)));
    CHECK(rouge_l(a, b, RougeVariant::recall) <= 1.0);
  }
}

TEST_CASE("spearman with ties and constant series") {
  CHECK(spearman({1, 2, 3, 4}, {10, 20, 30, 40}) == doctest::Approx(1.0));
  CHECK(spearman({1, 2, 3, 4}, {4, 3, 2, 1}) == doctest::Approx(-1.0));
  // average ranks: y ranks 1.5 1.5 3 4, centred -1 -1 0.5 1.5
  const double want = (1.5 + 0.5 + 0.25 + 2.25) / std::sqrt(5.0 * 4.5);
  CHECK(spearman({1, 2, 3, 4}, {5, 5, 6, 7}) == doctest::Approx(want));
  CHECK(std::isnan(spearman({1, 2, 3}, {2, 2, 2})));
  CHECK_THROWS_AS(spearman({1}, {1}), Error);
}

TEST_CASE("engine output is the base model's when the gate does not fire") {
  const auto model = testing::tiny_model(9);
  const std::vector<int> edited{3, 8, 5}, other{12, 4, 19, 7};
  auto m = new_module(1, 16, 2, 4, "e1");
  m.A = testing::gaussian_matrix(2, 16, 5, 2.0);
  m.b = testing::gaussian_matrix(1, 2, 6, 2.0);
  EditStore store(StoreMode::individual, 1, 2, 16, 0.999);
  store.add_edit(m, hidden_at(model, edited, 1).vector, "e1");
  Engine engine(model, store);

  const auto miss = engine.generate(other, 8, -1);
  if (!miss.route.matched) CHECK(miss.tokens == generate(model, other, nullptr, 8, -1));

  const auto hit = engine.generate(edited, 8, -1);
  CHECK(hit.route.matched);
  CHECK(hit.route.item_id == "e1");
  const auto hook = as_intervention(m);
  CHECK(hit.tokens == generate(model, edited, &hook, 8, -1));

  store.set_gate(1.0);
  CHECK_FALSE(engine.route(other).matched);
}

TEST_CASE("run config parsing is strict") {
  const auto cfg = parse_run_config(R"({"seed": 5, "rank": 2, "cluster": {"tau_sim": 0.8}, "checkpoints": [1, 5]})");
  CHECK(cfg.seed == 5);
  CHECK(cfg.rank == 2);
  CHECK(cfg.cluster.tau_min == 0.8);
  CHECK(cfg.checkpoints == std::vector<std::size_t>{1, 5});
  CHECK(cfg.resolved_layer() == cfg.model.layers / 2);
  const auto again = parse_run_config(dump_run_config(cfg));
  CHECK(dump_run_config(again) == dump_run_config(cfg));

  for (const char* bad : {R"({"rnak": 2})", R"({"cluster": {"tau": 0.8}})", R"({"mode": "both"})", "{", R"({"rank": "x"})"}) {
    INFO(bad);
    try {
      parse_run_config(bad);
      FAIL("expected a config error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::config);
    }
  }
  CHECK(parse_checkpoints("1,10,100") == std::vector<std::size_t>{1, 10, 100});
  CHECK_THROWS_AS(parse_checkpoints("1,,3"), Error);
  CHECK_THROWS_AS(parse_checkpoints("0"), Error);
  CHECK_THROWS_AS(parse_checkpoints("2x"), Error);
}
