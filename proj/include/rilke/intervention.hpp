#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "rilke/error.hpp"
#include "rilke/matrix.hpp"
#include "rilke/model.hpp"

namespace rilke {

// Low-rank affine edit of one layer's residual state:
//   apply(h) = h + R^T (A h + b - R h)
// with R (r x d) kept row-orthonormal.
template <typename T>
struct BasicIntervention {
  std::string id;
  int layer = 1;
  BasicMatrix<T> R;  // r x d
  BasicMatrix<T> A;  // r x d
  BasicMatrix<T> b;  // 1 x r

  std::size_t rank() const { return R.rows(); }
  std::size_t width() const { return R.cols(); }

  // The subspace-local shift R^T (A h + b - R h), written into `out`.
  void shift(std::span<const T> h, std::span<T> out) const {
    const std::size_t r = rank(), d = width();
    require(h.size() == d && out.size() == d, ErrorKind::dimension,
            "intervention expects a " + std::to_string(d) + "-vector, got " +
                std::to_string(h.size()));
    std::fill(out.begin(), out.end(), T(0));
    for (std::size_t k = 0; k < r; ++k) {
      T ah = 0, rh = 0;
      for (std::size_t j = 0; j < d; ++j) {
        ah += A(k, j) * h[j];
        rh += R(k, j) * h[j];
      }
      const T s = ah + b(0, k) - rh;
      if (s == T(0)) continue;
      for (std::size_t j = 0; j < d; ++j) out[j] += R(k, j) * s;
    }
  }

  std::vector<T> apply(std::span<const T> h) const {
    std::vector<T> out(h.begin(), h.end());
    apply_inplace(out);
    return out;
  }

  void apply_inplace(std::span<T> h) const {
    std::vector<T> s(h.size());
    shift(h, s);
    for (std::size_t j = 0; j < h.size(); ++j)
      if (s[j] != T(0)) h[j] += s[j];
  }

  template <typename U>
  BasicIntervention<U> cast() const {
    return {id, layer, R.template cast<U>(), A.template cast<U>(), b.template cast<U>()};
  }

  friend bool operator==(const BasicIntervention&, const BasicIntervention&) = default;
};

using InterventionModule = BasicIntervention<float>;

struct EditVector {
  std::string item_id;
  std::vector<float> vector;
};

// Orthonormalized seeded Gaussian R, A = R, b = 0: an exact identity.
InterventionModule new_module(int layer, std::size_t d, std::size_t r, std::uint64_t seed,
                              std::string id = {});

void validate_module(const InterventionModule& m);

EditVector edit_vector(const InterventionModule& m, std::span<const float> h,
                       std::string item_id = {});

std::size_t param_count(const InterventionModule& m);
std::size_t param_count(std::size_t d, std::size_t r);

// Frobenius cosine of the projectors R1^T R1 and R2^T R2; basis invariant.
double subspace_similarity(const Matrix& r1, const Matrix& r2);
// Plain cosine of the flattened matrices; depends on the chosen basis.
double flattened_similarity(const Matrix& r1, const Matrix& r2);

// Which positions of the edited layer a module rewrites.
enum class Scope { all_positions, prompt_final };

Scope parse_scope(const std::string& name);
std::string to_string(Scope scope);

inline constexpr std::size_t kAllPositions = static_cast<std::size_t>(-1);

// Hooks the module into a forward pass, at every position by default or at a
// single position when `only_position` is given.
Intervention as_intervention(const InterventionModule& m, std::size_t only_position = kAllPositions);

// Directory: module.json + R.rilk, A.rilk, b.rilk.
void save_module(const std::filesystem::path& dir, const InterventionModule& m);
// Rejects modules whose R has drifted past `residual_tolerance` (load error).
InterventionModule load_module(const std::filesystem::path& dir, double residual_tolerance = 1e-4);

}  // namespace rilke
