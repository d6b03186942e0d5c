#include "sptn/gaussian.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <limits>

#include "sptn/error.hpp"

namespace sptn {

Vector gaussian_logpdf(const Matrix& rows, const Vector& mean, const Matrix& cov) {
  const Eigen::Index k = mean.size();
  if (rows.cols() != k) throw DimensionError("gaussian_logpdf: columns", static_cast<long>(k), static_cast<long>(rows.cols()));
  if (cov.rows() != k || cov.cols() != k)
    throw DimensionError("gaussian_logpdf: covariance size", static_cast<long>(k), static_cast<long>(cov.rows()));
  if (k == 0) return Vector::Zero(rows.rows());
  Eigen::LLT<Matrix> llt(cov);
  if (llt.info() != Eigen::Success) throw DomainError("gaussian_logpdf: covariance is not positive definite");
  const Matrix& l = llt.matrixLLT();
  double log_det = 0.0;
  for (Eigen::Index i = 0; i < k; ++i) log_det += 2.0 * std::log(l(i, i));
  Matrix centered = (rows.rowwise() - mean.transpose()).transpose();
  llt.matrixL().solveInPlace(centered);
  Vector out = -0.5 * centered.colwise().squaredNorm().transpose();
  out.array() -= 0.5 * (static_cast<double>(k) * kLogTwoPi + log_det);
  return out;
}

Vector gaussian_marginal_logpdf(const Matrix& rows, const Vector& mean, const Matrix& cov,
                                std::span<const int> keep) {
  const auto m = static_cast<Eigen::Index>(keep.size());
  if (m == 0) return Vector::Zero(rows.rows());
  Matrix sub_rows(rows.rows(), m);
  Vector sub_mean(m);
  Matrix sub_cov(m, m);
  for (Eigen::Index a = 0; a < m; ++a) {
    sub_rows.col(a) = rows.col(keep[static_cast<std::size_t>(a)]);
    sub_mean[a] = mean[keep[static_cast<std::size_t>(a)]];
    for (Eigen::Index b = 0; b < m; ++b)
      sub_cov(a, b) = cov(keep[static_cast<std::size_t>(a)], keep[static_cast<std::size_t>(b)]);
  }
  return gaussian_logpdf(sub_rows, sub_mean, sub_cov);
}

double log_sum_exp(std::span<const double> v) {
  double hi = -std::numeric_limits<double>::infinity();
  for (double x : v) hi = std::max(hi, x);
  if (!std::isfinite(hi)) return hi;
  double s = 0.0;
  for (double x : v) s += std::exp(x - hi);
  return hi + std::log(s);
}

namespace {

template <typename Eval>
Vector mixture_reduce(const std::vector<MixtureComponent>& comps, Eigen::Index n, Eval&& eval) {
  if (comps.empty()) return Vector::Constant(n, -std::numeric_limits<double>::infinity());
  Matrix terms(static_cast<Eigen::Index>(comps.size()), n);
  for (std::size_t k = 0; k < comps.size(); ++k)
    terms.row(static_cast<Eigen::Index>(k)) = (eval(comps[k]).array() + comps[k].log_weight).transpose();
  Vector out(n);
  std::vector<double> col(comps.size());
  for (Eigen::Index j = 0; j < n; ++j) {
    for (std::size_t k = 0; k < comps.size(); ++k) col[k] = terms(static_cast<Eigen::Index>(k), j);
    out[j] = log_sum_exp(col);
  }
  return out;
}

}  // namespace

Vector GaussianMixture::logpdf(const Matrix& rows) const {
  return mixture_reduce(components, rows.rows(),
                        [&](const MixtureComponent& c) { return gaussian_logpdf(rows, c.mean, c.cov); });
}

Vector GaussianMixture::marginal_logpdf(const Matrix& rows, std::span<const int> keep) const {
  return mixture_reduce(components, rows.rows(), [&](const MixtureComponent& c) {
    return gaussian_marginal_logpdf(rows, c.mean, c.cov, keep);
  });
}

}  // namespace sptn
