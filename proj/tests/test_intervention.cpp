#include <cmath>

#include <Eigen/Dense>

#include "doctest.h"
#include "helpers.hpp"
#include "rilke/intervention.hpp"
#include "rilke/kernels.hpp"

using namespace rilke;

namespace {

InterventionModule random_module(std::size_t d, std::size_t r, std::uint64_t seed) {
  auto m = new_module(2, d, r, seed, "m");
  m.A = testing::gaussian_matrix(r, d, seed + 100, 0.5);
  m.b = testing::gaussian_matrix(1, r, seed + 200, 0.5);
  return m;
}

// h + R^T (A h + b - R h), evaluated in double with Eigen.
Eigen::VectorXd oracle_apply(const InterventionModule& m, const std::vector<float>& h) {
  const Eigen::MatrixXd R = m.R.cast<double>().map(), A = m.A.cast<double>().map();
  const Eigen::VectorXd b = m.b.cast<double>().map().row(0).transpose();
  Eigen::VectorXd x(static_cast<Eigen::Index>(h.size()));
  for (std::size_t i = 0; i < h.size(); ++i) x(static_cast<Eigen::Index>(i)) = h[i];
  return x + R.transpose() * (A * x + b - R * x);
}

}  // namespace

TEST_CASE("fresh modules are an exact identity") {
  for (std::uint64_t seed = 1; seed <= 30; ++seed) {
    const auto m = new_module(1, 16, 1 + seed % 4, seed);
    CHECK(orthonormality_residual(m.R) <= 1e-6);
    CHECK(m.A == m.R);
    const auto h = testing::gaussian(16, seed + 7, 4.0);
    CHECK(m.apply(h) == h);
  }
}

TEST_CASE("apply matches the closed form") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto m = random_module(12, 3, seed);
    const auto h = testing::gaussian(12, seed + 50, 2.0);
    const auto got = m.apply(h);
    const auto want = oracle_apply(m, h);
    for (std::size_t i = 0; i < h.size(); ++i) CHECK(got[i] == doctest::Approx(want(static_cast<Eigen::Index>(i))).epsilon(1e-5));
    const auto v = edit_vector(m, h, "x");
    CHECK(v.item_id == "x");
    for (std::size_t i = 0; i < h.size(); ++i) CHECK(v.vector[i] == doctest::Approx(got[i] - h[i]).epsilon(1e-4));
  }
}

TEST_CASE("the edit is affine with slope I + R^T (A - R)") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto m = random_module(10, 2, seed);
    const auto h = testing::gaussian(10, seed + 1);
    const auto eps = testing::gaussian(10, seed + 2, 0.3);
    std::vector<float> he(10);
    for (std::size_t i = 0; i < 10; ++i) he[i] = h[i] + eps[i];
    const auto a = m.apply(h), b = m.apply(he);
    const Eigen::MatrixXd R = m.R.cast<double>().map(), A = m.A.cast<double>().map();
    Eigen::VectorXd e(10);
    for (int i = 0; i < 10; ++i) e(i) = eps[static_cast<std::size_t>(i)];
    const Eigen::VectorXd want = e + R.transpose() * (A - R) * e;
    for (int i = 0; i < 10; ++i) CHECK(std::abs((b[static_cast<std::size_t>(i)] - a[static_cast<std::size_t>(i)]) - want(i)) <= 1e-5);
  }
}

TEST_CASE("module construction validates shape") {
  CHECK_THROWS_AS(new_module(1, 8, 0, 1), Error);
  CHECK_THROWS_AS(new_module(1, 8, 9, 1), Error);
  CHECK_THROWS_AS(new_module(0, 8, 2, 1), Error);
  CHECK(param_count(new_module(1, 64, 4, 1)) == 2 * 4 * 64 + 4);
  CHECK(param_count(64, 4) == 516);
  const auto m = new_module(1, 8, 2, 1);
  CHECK_THROWS_AS(m.apply(std::vector<float>(7)), Error);
}

TEST_CASE("subspace similarity is basis invariant") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto a = new_module(1, 12, 3, seed).R;
    const Matrix q = orthonormalize_rows(testing::gaussian_matrix(3, 3, seed + 9));
    Matrix rotated(3, 12);
    rotated.map() = q.map() * a.map();
    CHECK(subspace_similarity(a, rotated) == doctest::Approx(1.0).epsilon(1e-5));
    CHECK(subspace_similarity(a, a) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(flattened_similarity(a, a) == doctest::Approx(1.0).epsilon(1e-6));
    const auto b = new_module(1, 12, 3, seed + 1000).R;
    const double s = subspace_similarity(a, b);
    CHECK(s >= 0.0);
    CHECK(s <= 1.0);
    CHECK(s == doctest::Approx(subspace_similarity(b, a)));
  }
  Matrix e1(1, 4), e2(1, 4);
  e1(0, 0) = 1;
  e2(0, 1) = 1;
  CHECK(subspace_similarity(e1, e2) == 0.0);
  CHECK_THROWS_AS(subspace_similarity(Matrix(1, 4), e1), Error);
}

TEST_CASE("hooks can target a single position") {
  const auto m = random_module(6, 2, 4);
  const auto hook = as_intervention(m, 2);
  auto h = testing::gaussian(6, 3);
  auto x = h;
  hook.apply(x, 1);
  CHECK(x == h);
  hook.apply(x, 2);
  CHECK(x == m.apply(h));
  const auto all = as_intervention(m);
  x = h;
  all.apply(x, 7);
  CHECK(x == m.apply(h));
}

TEST_CASE("modules persist and reject drift") {
  const auto dir = testing::scratch_dir("module");
  const auto m = random_module(8, 2, 5);
  save_module(dir / "m", m);
  CHECK(load_module(dir / "m") == m);

  auto drifted = m;
  drifted.R(0, 0) += 0.01f;
  save_module(dir / "d", drifted);
  try {
    load_module(dir / "d");
    FAIL("expected a load error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::load);
  }
  CHECK_NOTHROW(load_module(dir / "d", 1.0));

  write_blob(dir / "m" / "A.rilk", Matrix(3, 8));
  try {
    load_module(dir / "m");
    FAIL("expected an integrity error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::integrity);
  }
}

TEST_CASE("scope names") {
  CHECK(parse_scope("all") == Scope::all_positions);
  CHECK(parse_scope("prompt-final") == Scope::prompt_final);
  CHECK(to_string(Scope::prompt_final) == "prompt-final");
  CHECK_THROWS_AS(parse_scope("none"), Error);
}
