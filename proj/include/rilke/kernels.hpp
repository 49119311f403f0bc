#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "rilke/matrix.hpp"

namespace rilke {

// Probability vector over the vocabulary; entries >= 0 summing to 1 within 1e-5.
class ProbVector {
 public:
  ProbVector() = default;
  // Validates the invariant; throws numeric error otherwise.
  static ProbVector from(std::vector<float> probs);

  std::span<const float> probs() const { return probs_; }
  std::size_t size() const { return probs_.size(); }
  float operator[](std::size_t i) const { return probs_[i]; }
  std::size_t argmax() const;  // lowest index on ties

 private:
  std::vector<float> probs_;
};

ProbVector softmax(std::span<const float> logits);

// In-place max-subtracted softmax for internal use at either precision.
template <typename T>
void softmax_inplace(std::span<T> v) {
  T mx = v[0];
  for (T x : v) mx = x > mx ? x : mx;
  T sum = 0;
  for (T& x : v) {
    x = std::exp(x - mx);
    sum += x;
  }
  const T inv = T(1) / sum;
  for (T& x : v) x *= inv;
}

inline constexpr double kKlFloor = 1e-12;

double kl_divergence(const ProbVector& p, const ProbVector& q);
double kl_divergence(std::span<const double> p, std::span<const double> q);

// Modified Gram-Schmidt in row order; rows divided by their (positive) residual
// norm. Throws rank error when a residual norm falls below 1e-9.
template <typename T>
BasicMatrix<T> orthonormalize_rows(const BasicMatrix<T>& m);

// ||M M^T - I||_F
template <typename T>
double orthonormality_residual(const BasicMatrix<T>& m);

struct EigenDecomposition {
  std::vector<double> values;    // descending
  MatrixD vectors;               // row i is the eigenvector for values[i]
};

// Cyclic Jacobi on a symmetric matrix until the off-diagonal Frobenius norm is
// below `tolerance`.
EigenDecomposition jacobi_eigen(const MatrixD& symmetric, double tolerance = 1e-10);

// Projects mean-centered points onto the top-k principal axes. Each axis is
// sign-fixed so that its largest-magnitude entry is positive.
MatrixD pca_project(const MatrixD& points, std::size_t k);

// Central differences, evaluated in double precision.
std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                     std::span<const double> x, double h);

double dot(std::span<const float> a, std::span<const float> b);
double norm(std::span<const float> a);
double cosine(std::span<const float> a, std::span<const float> b);  // 0 if either is zero
double squared_l2(std::span<const float> a, std::span<const float> b);

// Relative error ||a-b|| / max(||a||, ||b||, floor).
double relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-12);

}  // namespace rilke
