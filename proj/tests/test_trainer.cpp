#include <cmath>
#include <functional>

#include "doctest.h"
#include "helpers.hpp"
#include "rilke/cluster.hpp"
#include "rilke/detail/edit_objective.hpp"
#include "rilke/kernels.hpp"
#include "rilke/trainer.hpp"

using namespace rilke;

namespace {

using ModuleD = BasicIntervention<double>;

ModuleD random_module_d(int layer, std::size_t d, std::size_t r, std::uint64_t seed) {
  auto m = new_module(layer, d, r, seed).cast<double>();
  m.A = testing::gaussian_matrix(r, d, seed + 1, 0.3).cast<double>();
  m.b = testing::gaussian_matrix(1, r, seed + 2, 0.3).cast<double>();
  return m;
}

std::vector<double> flatten(const ModuleD& m) {
  std::vector<double> v(m.R.flat().begin(), m.R.flat().end());
  v.insert(v.end(), m.A.flat().begin(), m.A.flat().end());
  v.insert(v.end(), m.b.flat().begin(), m.b.flat().end());
  return v;
}

ModuleD unflatten(ModuleD m, std::span<const double> v) {
  std::size_t k = 0;
  for (auto* mat : {&m.R, &m.A, &m.b})
    for (auto& x : mat->flat()) x = v[k++];
  return m;
}

// A random tiny model has logits too flat for any edit to reach a low loss;
// a larger unembedding gives it a usable dynamic range.
BaseModel peaked_model(std::uint64_t seed) {
  const auto base = testing::tiny_model(seed);
  auto w = base.weights();
  for (auto& x : w.unembed.flat()) x *= 8.0f;
  return BaseModel(base.config(), w, true);
}

}  // namespace

TEST_CASE("edit objective gradients match finite differences") {
  for (std::uint64_t seed = 1; seed <= 8; ++seed) {
    auto cfg = testing::tiny_config(seed);
    const auto model = init_model(cfg).cast<double>();
    const std::size_t d = 16, r = 1 + seed % 2;
    const int layer = 1 + static_cast<int>(seed % 2);
    const auto m = random_module_d(layer, d, r, seed * 10);
    std::vector<detail::EditItem<double>> items;
    items.push_back(detail::make_edit_item(model, layer, {3, 7, 2}, {5, 9, 1}));
    items.push_back(detail::make_edit_item(model, layer, {4, 11}, {6, 1}));
    std::vector<std::vector<std::vector<double>>> eps(2);
    for (std::size_t i = 0; i < 2; ++i)
      for (int s = 0; s < 2; ++s) {
        const auto e = testing::gaussian(d, seed * 100 + i * 10 + static_cast<std::size_t>(s), 0.4);
        eps[i].emplace_back(e.begin(), e.end());
      }
    const bool all_prompt = seed % 3 == 0, final_only = seed % 4 == 1;
    const double lambda = 0.7;

    detail::ModuleGrad<double> grad(m);
    detail::evaluate_objective(model, m, items, eps, lambda, all_prompt, final_only, &grad);
    std::vector<double> analytic(grad.R.flat().begin(), grad.R.flat().end());
    analytic.insert(analytic.end(), grad.A.flat().begin(), grad.A.flat().end());
    analytic.insert(analytic.end(), grad.b.flat().begin(), grad.b.flat().end());

    const auto x0 = flatten(m);
    const auto numeric = finite_diff_grad(
        std::function<double(std::span<const double>)>([&](std::span<const double> x) {
          return detail::evaluate_objective<double>(model, unflatten(m, x), items, eps, lambda, all_prompt, final_only,
                                            nullptr)
              .total;
        }),
        x0, 1e-6);
    INFO("seed " << seed);
    CHECK(relative_error(analytic, numeric) <= 1e-4);
  }
}

TEST_CASE("cached-state objective agrees with hooked forward passes") {
  const auto model = testing::tiny_model(4);
  auto m = new_module(1, 16, 2, 3);
  m.A = testing::gaussian_matrix(2, 16, 8, 0.3);
  m.b = testing::gaussian_matrix(1, 2, 9, 0.3);
  const std::vector<int> x{3, 8, 5}, y{10, 12, 1};
  const double sigma = 0.5;
  for (Scope scope : {Scope::all_positions, Scope::prompt_final}) {
    std::vector<detail::EditItem<float>> items{detail::make_edit_item(model, 1, x, y)};
    std::vector<std::vector<std::vector<float>>> eps(1);
    for (int s = 0; s < 3; ++s) eps[0].push_back(draw_perturbation(16, sigma, 42, s));
    const auto v = detail::evaluate_objective<float>(model, m, items, eps, 1.0, false, scope == Scope::prompt_final, nullptr);
    CHECK(v.lm == doctest::Approx(lm_loss(model, m, x, y, scope)).epsilon(1e-4));
    CHECK(v.robust == doctest::Approx(robust_loss(model, m, x, y, sigma, 42, 3, scope)).epsilon(1e-3));
  }
  CHECK(robust_loss(model, m, x, y, 0.0, 1, 2) == 0.0);
}

TEST_CASE("perturbations are seeded gaussians") {
  const auto a = draw_perturbation(20000, 0.5, 7, 0);
  CHECK(a == draw_perturbation(20000, 0.5, 7, 0));
  CHECK(a != draw_perturbation(20000, 0.5, 7, 1));
  double s = 0, ss = 0;
  for (float v : a) {
    s += v;
    ss += static_cast<double>(v) * v;
  }
  const double mean = s / 20000, sd = std::sqrt(ss / 20000 - mean * mean);
  CHECK(std::abs(mean) < 0.02);
  CHECK(sd == doctest::Approx(0.5).epsilon(0.03));
  CHECK(draw_perturbation(4, 0.0, 1, 0) == std::vector<float>(4, 0.0f));
}

TEST_CASE("train_edit reaches the target and keeps R orthonormal") {
  const auto model = peaked_model(6);
  const EditExample ex{{3, 8, 5}, {10, 12, 7, Tokenizer::kEos}};
  RobustConfig cfg;
  cfg.sigma = 0.2;
  cfg.max_steps = 400;
  const auto res = train_edit(model, 1, 4, {ex}, cfg, cfg.seed, "k1");
  CHECK_FALSE(res.report.failed);
  CHECK(res.module.id == "k1");
  CHECK(res.report.lm_loss <= cfg.target_loss * 4);
  CHECK(res.report.residuals.size() == static_cast<std::size_t>(res.report.steps));
  for (double r : res.report.residuals) CHECK(r <= 1e-5);
  const auto hook = as_intervention(res.module);
  CHECK(generate(model, ex.prompt, &hook, 8, Tokenizer::kEos) == std::vector<int>{10, 12, 7});
  CHECK(lm_loss(model, res.module, ex.prompt, ex.target) == doctest::Approx(res.report.lm_loss).epsilon(1e-3));

  const auto again = train_edit(model, 1, 4, {ex}, cfg, cfg.seed, "k1");
  CHECK(again.module == res.module);
}

TEST_CASE("an exhausted budget is flagged") {
  const auto model = testing::tiny_model(6);
  const EditExample ex{{3, 8, 5}, {10, 12, 7, Tokenizer::kEos}};
  RobustConfig cfg;
  cfg.max_steps = 0;
  const auto res = train_edit(model, 1, 2, {ex}, cfg, 0);
  CHECK(res.report.failed);
  CHECK(res.report.steps == 0);
  CHECK(res.module == new_module(1, 16, 2, 0));
}

TEST_CASE("a singleton cluster trains exactly like an individual edit") {
  const auto model = testing::tiny_model(6);
  const EditExample ex{{3, 8, 5}, {10, 12, Tokenizer::kEos}};
  RobustConfig cfg;
  cfg.sigma = 0.3;
  cfg.seed = 17;
  ClusterAssignment a;
  a.clusters.push_back({"c1", {"k1"}, 0.9, false});
  a.kappa["k1"] = "c1";
  const auto shared = train_shared(model, 1, 2, a, {{"k1", ex}}, cfg);
  const auto single = train_edit(model, 1, 2, {ex}, cfg, cfg.seed);
  const auto& m = shared.at("c1").module;
  CHECK(m.id == "c1");
  CHECK(m.R == single.module.R);
  CHECK(m.A == single.module.A);
  CHECK(m.b == single.module.b);
}

TEST_CASE("sigma calibration is a scaled mean key norm") {
  const auto model = testing::tiny_model(2);
  const std::vector<EditExample> exs{{{3, 4}, {5, 1}}, {{6, 7, 8}, {9, 1}}};
  const double want =
      0.05 * 0.5 * (norm(hidden_at(model, exs[0].prompt, 1).vector) + norm(hidden_at(model, exs[1].prompt, 1).vector));
  CHECK(calibrate_sigma(model, 1, exs) == doctest::Approx(want));
}

TEST_CASE("robust config validation") {
  RobustConfig c;
  CHECK_NOTHROW(c.validate());
  c.samples = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = {};
  c.lr = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = {};
  c.sigma = -1;
  CHECK_THROWS_AS(c.validate(), Error);
  const auto model = testing::tiny_model();
  CHECK_THROWS_AS(train_edit(model, 3, 2, {{{3}, {4, 1}}}, RobustConfig{}, 0), Error);
  CHECK_THROWS_AS(train_edit(model, 1, 2, {}, RobustConfig{}, 0), Error);
  CHECK_THROWS_AS(train_edit(model, 1, 2, {{std::vector<int>(14, 3), {4, 5, 1}}}, RobustConfig{}, 0), Error);
}
