#include "rilke/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace rilke {

ProbVector ProbVector::from(std::vector<float> probs) {
  require(!probs.empty(), ErrorKind::dimension, "empty probability vector");
  double sum = 0.0;
  for (float p : probs) {
    require(std::isfinite(p) && p >= 0.0f, ErrorKind::numeric, "invalid probability entry");
    sum += p;
  }
  require(std::abs(sum - 1.0) <= 1e-5, ErrorKind::numeric, "probabilities do not sum to 1");
  ProbVector v;
  v.probs_ = std::move(probs);
  return v;
}

std::size_t ProbVector::argmax() const {
  return static_cast<std::size_t>(std::max_element(probs_.begin(), probs_.end()) - probs_.begin());
}

ProbVector softmax(std::span<const float> logits) {
  require(!logits.empty(), ErrorKind::dimension, "softmax of empty vector");
  for (float v : logits) require(std::isfinite(v), ErrorKind::numeric, "non-finite logit");
  std::vector<float> out(logits.begin(), logits.end());
  softmax_inplace<float>(out);
  return ProbVector::from(std::move(out));
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  require(p.size() == q.size(), ErrorKind::dimension, "kl_divergence: dimension mismatch");
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    sum += p[i] * std::log(p[i] / std::max(q[i], kKlFloor));
  }
  return std::max(sum, 0.0);
}

double kl_divergence(const ProbVector& p, const ProbVector& q) {
  require(p.size() == q.size(), ErrorKind::dimension, "kl_divergence: dimension mismatch");
  std::vector<double> pd(p.probs().begin(), p.probs().end());
  std::vector<double> qd(q.probs().begin(), q.probs().end());
  return kl_divergence(pd, qd);
}

template <typename T>
BasicMatrix<T> orthonormalize_rows(const BasicMatrix<T>& m) {
  const std::size_t r = m.rows();
  const std::size_t d = m.cols();
  require(r <= d, ErrorKind::dimension, "orthonormalize_rows: more rows than columns");
  require(m.all_finite(), ErrorKind::numeric, "orthonormalize_rows: non-finite input");
  MatrixD q = m.template cast<double>();
  for (std::size_t i = 0; i < r; ++i) {
    auto v = q.row(i);
    for (std::size_t j = 0; j < i; ++j) {
      auto u = q.row(j);
      double proj = 0.0;
      for (std::size_t c = 0; c < d; ++c) proj += v[c] * u[c];
      for (std::size_t c = 0; c < d; ++c) v[c] -= proj * u[c];
    }
    double nrm = 0.0;
    for (double x : v) nrm += x * x;
    nrm = std::sqrt(nrm);
    require(nrm >= 1e-9, ErrorKind::rank, "orthonormalize_rows: rank-deficient input");
    for (double& x : v) x /= nrm;
  }
  return q.template cast<T>();
}

template <typename T>
double orthonormality_residual(const BasicMatrix<T>& m) {
  double sum = 0.0;
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.rows(); ++j) {
      double g = 0.0;
      for (std::size_t c = 0; c < m.cols(); ++c)
        g += static_cast<double>(m(i, c)) * static_cast<double>(m(j, c));
      const double e = g - (i == j ? 1.0 : 0.0);
      sum += e * e;
    }
  }
  return std::sqrt(sum);
}

template BasicMatrix<float> orthonormalize_rows(const BasicMatrix<float>&);
template BasicMatrix<double> orthonormalize_rows(const BasicMatrix<double>&);
template double orthonormality_residual(const BasicMatrix<float>&);
template double orthonormality_residual(const BasicMatrix<double>&);

EigenDecomposition jacobi_eigen(const MatrixD& symmetric, double tolerance) {
  const std::size_t n = symmetric.rows();
  require(n == symmetric.cols(), ErrorKind::dimension, "jacobi_eigen: matrix not square");
  MatrixD a = symmetric;
  MatrixD v(n, n);
  for (std::size_t i = 0; i < n; ++i) v(i, i) = 1.0;

  auto off_norm = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) s += a(i, j) * a(i, j);
    return std::sqrt(s);
  };

  for (int sweep = 0; sweep < 100 && off_norm() > tolerance; ++sweep) {
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (std::abs(apq) < 1e-300) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return a(x, x) > a(y, y); });

  EigenDecomposition out;
  out.vectors = MatrixD(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t col = order[i];
    out.values.push_back(a(col, col));
    std::size_t arg = 0;
    for (std::size_t k = 1; k < n; ++k)
      if (std::abs(v(k, col)) > std::abs(v(arg, col))) arg = k;
    const double sign = v(arg, col) < 0 ? -1.0 : 1.0;
    for (std::size_t k = 0; k < n; ++k) out.vectors(i, k) = sign * v(k, col);
  }
  return out;
}

MatrixD pca_project(const MatrixD& points, std::size_t k) {
  const std::size_t n = points.rows();
  const std::size_t d = points.cols();
  require(n >= 1, ErrorKind::input, "pca_project: no points");
  require(k >= 1 && k <= d, ErrorKind::input, "pca_project: k must be in [1, d]");
  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) mean[c] += points(i, c);
  for (double& m : mean) m /= static_cast<double>(n);

  MatrixD centered(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) centered(i, c) = points(i, c) - mean[c];

  MatrixD cov(d, d);
  const double denom = n > 1 ? static_cast<double>(n - 1) : 1.0;
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = a; b < d; ++b) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += centered(i, a) * centered(i, b);
      cov(a, b) = cov(b, a) = s / denom;
    }

  const EigenDecomposition eig = jacobi_eigen(cov, 1e-10);
  MatrixD out(n, k);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += centered(i, c) * eig.vectors(j, c);
      out(i, j) = s;
    }
  return out;
}

std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                     std::span<const double> x, double h) {
  require(h > 0.0, ErrorKind::input, "finite_diff_grad: step must be positive");
  std::vector<double> probe(x.begin(), x.end());
  std::vector<double> grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double up = f(probe);
    probe[i] = x[i] - h;
    const double down = f(probe);
    probe[i] = x[i];
    require(std::isfinite(up) && std::isfinite(down), ErrorKind::numeric,
            "finite_diff_grad: non-finite function value");
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

double dot(std::span<const float> a, std::span<const float> b) {
  require(a.size() == b.size(), ErrorKind::dimension, "dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

double norm(std::span<const float> a) { return std::sqrt(dot(a, a)); }

double cosine(std::span<const float> a, std::span<const float> b) {
  const double na = norm(a);
  const double nb = norm(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

double squared_l2(std::span<const float> a, std::span<const float> b) {
  require(a.size() == b.size(), ErrorKind::dimension, "squared_l2: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    s += d * d;
  }
  return s;
}

double relative_error(std::span<const double> a, std::span<const double> b, double floor) {
  require(a.size() == b.size(), ErrorKind::dimension, "relative_error: length mismatch");
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

}  // namespace rilke
