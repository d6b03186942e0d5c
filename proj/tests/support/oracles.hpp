#pragma once

// Independent reference computations used by the tests. Nothing here calls
// into the library except to build inputs.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "sptn/affine.hpp"

namespace oracle {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Central differences of f at x with step h.
inline Vector central_gradient(const std::function<double(const Vector&)>& f, const Vector& x,
                               double h = 1e-5) {
  Vector g(x.size());
  Vector p = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double xi = p[i];
    p[i] = xi + h;
    const double up = f(p);
    p[i] = xi - h;
    const double down = f(p);
    p[i] = xi;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

/// max_i |a_i - b_i| / max(1, |b_i|): relative error with an absolute floor
/// so entries that vanish analytically do not divide by zero.
inline double relative_error(const Vector& a, const Vector& b) {
  double worst = 0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::abs(a[i] - b[i]) / std::max(1.0, std::abs(b[i])));
  }
  return worst;
}

inline Matrix gaussian_matrix(int rows, int cols, std::mt19937_64& rng, double std = 1.0) {
  std::normal_distribution<double> n(0.0, std);
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = n(rng);
  return m;
}

inline Vector gaussian_vector(int n, std::mt19937_64& rng, double std = 1.0) {
  return gaussian_matrix(n, 1, rng, std).col(0);
}

inline double determinant(const Matrix& m) { return Eigen::PartialPivLU<Matrix>(m).determinant(); }

/// Haar-distributed orthogonal matrix from the QR factorization of a Gaussian
/// matrix (R diagonal made positive); optionally forced to det +1.
inline Matrix random_orthogonal(int d, std::mt19937_64& rng, bool rotation = true) {
  const Matrix a = gaussian_matrix(d, d, rng);
  Eigen::HouseholderQR<Matrix> qr(a);
  Matrix q = qr.householderQ();
  const Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int i = 0; i < d; ++i)
    if (r(i, i) < 0) q.col(i) *= -1;
  if (rotation && determinant(q) < 0) q.col(0) *= -1;
  return q;
}

/// Dense Gaussian log-density by explicit LU; independent of the library's
/// Cholesky path.
inline double gaussian_logpdf(const Vector& x, const Vector& mean, const Matrix& cov) {
  Eigen::FullPivLU<Matrix> lu(cov);
  const Vector diff = x - mean;
  const double quad = diff.dot(lu.solve(diff));
  const double logdet = std::log(std::abs(lu.determinant()));
  return -0.5 * (static_cast<double>(x.size()) * std::log(2 * M_PI) + logdet + quad);
}

/// Adaptive Simpson on [a, b] with absolute tolerance `tol`.
inline double adaptive_simpson(const std::function<double(double)>& f, double a, double b, double tol,
                               int max_depth = 40) {
  struct Rec {
    const std::function<double(double)>& f;
    double run(double a, double b, double fa, double fm, double fb, double whole, double tol, int depth) const {
      const double m = 0.5 * (a + b);
      const double lm = 0.5 * (a + m);
      const double rm = 0.5 * (m + b);
      const double flm = f(lm);
      const double frm = f(rm);
      const double left = (m - a) / 6 * (fa + 4 * flm + fm);
      const double right = (b - m) / 6 * (fm + 4 * frm + fb);
      const double delta = left + right - whole;
      if (depth <= 0 || std::abs(delta) <= 15 * tol) return left + right + delta / 15;
      return run(a, m, fa, flm, fm, left, tol / 2, depth - 1) + run(m, b, fm, frm, fb, right, tol / 2, depth - 1);
    }
  } rec{f};
  const double fa = f(a);
  const double fb = f(b);
  const double fm = f(0.5 * (a + b));
  const double whole = (b - a) / 6 * (fa + 4 * fm + fb);
  return rec.run(a, b, fa, fm, fb, whole, tol, max_depth);
}

/// Iterated adaptive Simpson over a rectangle. The inner integral is split
/// into `pieces` panels so narrow peaks are not skipped by the first probe.
inline double adaptive_simpson_2d(const std::function<double(double, double)>& f, double ax, double bx,
                                  double ay, double by, double tol, int pieces = 16) {
  auto split = [pieces](const std::function<double(double)>& g, double a, double b, double t) {
    double total = 0;
    const double w = (b - a) / pieces;
    for (int k = 0; k < pieces; ++k) total += adaptive_simpson(g, a + k * w, a + (k + 1) * w, t / pieces, 30);
    return total;
  };
  auto inner = [&](double x) {
    return split([&](double y) { return f(x, y); }, ay, by, tol / (bx - ax));
  };
  return split(inner, ax, bx, tol);
}

/// AUC as the fraction of (anomaly, normal) pairs where the anomaly scores
/// higher, ties counting one half. O(n^2) by design.
inline double pairwise_auc(const Vector& scores, const Eigen::VectorXi& labels) {
  double wins = 0;
  double pairs = 0;
  for (Eigen::Index i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (Eigen::Index j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      pairs += 1;
      if (scores[i] > scores[j]) wins += 1;
      else if (scores[i] == scores[j]) wins += 0.5;
    }
  }
  return wins / pairs;
}

/// Two-sample-free Kolmogorov-Smirnov statistic of `xs` against a CDF.
inline double ks_statistic(std::vector<double> xs, const std::function<double(double)>& cdf) {
  std::sort(xs.begin(), xs.end());
  const double n = static_cast<double>(xs.size());
  double d = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double f = cdf(xs[i]);
    d = std::max({d, f - static_cast<double>(i) / n, static_cast<double>(i + 1) / n - f});
  }
  return d;
}

/// Two-sample Kolmogorov-Smirnov statistic.
inline double ks_two_sample(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::size_t i = 0, j = 0;
  double d = 0;
  while (i < a.size() && j < b.size()) {
    const double v = std::min(a[i], b[j]);
    while (i < a.size() && a[i] <= v) ++i;
    while (j < b.size() && b[j] <= v) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / a.size() - static_cast<double>(j) / b.size()));
  }
  return d;
}

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

/// Scalar that counts arithmetic performed on it.
struct Counter {
  static inline std::uint64_t mul = 0;
  static inline std::uint64_t add = 0;
  static void reset() { mul = add = 0; }
};

struct Counted {
  double v = 0;
};

inline Counted operator*(Counted a, double b) {
  ++Counter::mul;
  return {a.v * b};
}
inline Counted operator*(double a, Counted b) {
  ++Counter::mul;
  return {a * b.v};
}
inline Counted operator*(Counted a, Counted b) {
  ++Counter::mul;
  return {a.v * b.v};
}
inline Counted operator+(Counted a, Counted b) {
  ++Counter::add;
  return {a.v + b.v};
}
inline Counted operator-(Counted a, Counted b) {
  ++Counter::add;
  return {a.v - b.v};
}

/// Random invertible layer with the given factor kind and nonlinearity.
inline sptn::SvdAffine random_layer(int d, sptn::OrthogonalFactor::Kind kind, sptn::Nonlinearity nl,
                                    std::mt19937_64& rng) {
  auto factor = [&]() -> sptn::OrthogonalFactor {
    if (kind == sptn::OrthogonalFactor::Kind::givens) {
      return sptn::GivensParam(d, gaussian_vector(static_cast<int>(d * (d - 1) / 2), rng, 1.0));
    }
    return sptn::HouseholderParam(d, gaussian_matrix(d, d, rng));
  };
  std::uniform_real_distribution<double> mag(0.5, 2.0);
  std::bernoulli_distribution flip(0.3);
  Vector diag(d);
  for (int i = 0; i < d; ++i) diag[i] = (flip(rng) ? -1 : 1) * mag(rng);
  auto u = factor();
  auto v = factor();
  return sptn::SvdAffine(std::move(u), std::move(v), diag, gaussian_vector(d, rng, 0.5), nl);
}

}  // namespace oracle
