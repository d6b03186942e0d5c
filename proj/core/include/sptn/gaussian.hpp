#pragma once

#include <Eigen/Core>

#include <span>
#include <vector>

#include "sptn/affine.hpp"

namespace sptn {

inline constexpr double kLogTwoPi = 1.8378770664093454835606594728112;

/// log N(x_j; mean, cov) for each row x_j of `rows` (n x k).
/// Throws DomainError if cov is not positive definite.
Vector gaussian_logpdf(const Matrix& rows, const Vector& mean, const Matrix& cov);

/// The same density restricted to the coordinates `keep` (indices into the
/// k columns of `rows` / entries of `mean`). Empty `keep` gives zeros.
Vector gaussian_marginal_logpdf(const Matrix& rows, const Vector& mean, const Matrix& cov,
                                std::span<const int> keep);

/// log(sum_k exp(v_k)) with max shift; -inf for an all -inf input.
double log_sum_exp(std::span<const double> v);

struct MixtureComponent {
  double log_weight;
  Vector mean;
  Matrix cov;
};

/// Explicit Gaussian mixture over the variables of a circuit.
struct GaussianMixture {
  std::vector<MixtureComponent> components;

  Vector logpdf(const Matrix& rows) const;
  /// Marginal density of the coordinates in `keep`.
  Vector marginal_logpdf(const Matrix& rows, std::span<const int> keep) const;
};

}  // namespace sptn
