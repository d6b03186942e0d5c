#pragma once

// Orthogonal matrices generated by products of Givens rotations or
// Householder reflections.
//
// All batch arguments are d x n matrices whose columns are the vectors.

#include <Eigen/Core>

#include <cstddef>
#include <span>
#include <vector>

#include "sptn/detail/kernels.hpp"

namespace sptn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Zero-based coordinate pair of one Givens rotation, r < s.
struct RotationPlane {
  int r;
  int s;

  friend bool operator==(const RotationPlane&, const RotationPlane&) = default;
};

/// Planes in canonical order: s ascending, then r ascending, i.e.
/// (0,1), (0,2), (1,2), (0,3), (1,3), (2,3), ...
std::vector<RotationPlane> canonical_planes(int dim);

/// d(d-1)/2.
std::size_t givens_angle_count(int dim);

/// U(theta) = G_1 G_2 ... G_m over the canonical planes, where G_k is the
/// rotation with entries (r,r)=(s,s)=cos, (r,s)=sin, (s,r)=-sin. Zero angles
/// give the identity; every matrix produced has determinant +1.
class GivensParam {
 public:
  /// Identity (all angles zero).
  explicit GivensParam(int dim);
  GivensParam(int dim, Vector theta);

  int dim() const noexcept { return dim_; }
  const Vector& theta() const noexcept { return theta_; }
  /// Mutable view of the angles; the length cannot change through it.
  std::span<double> values() noexcept { return {theta_.data(), size()}; }
  std::size_t size() const noexcept {
    return static_cast<std::size_t>(theta_.size());
  }

  /// Rotations in the order they act on a vector for U x (transpose=false)
  /// or U^T x (transpose=true).
  std::vector<detail::PlanarRotation> application_sequence(
      bool transpose) const;

 private:
  int dim_;
  Vector theta_;
};

/// Norm below which a Householder vector is treated as undefined.
inline constexpr double kHouseholderMinNorm = 1e-12;

/// U = P_d P_{d-1} ... P_1 with P_i = I - (2/|y_i|^2) y_i y_i^T.
/// Column i of vectors() is y_{i+1}.
class HouseholderParam {
 public:
  HouseholderParam(int dim, Matrix vectors);

  /// y_i = e_i for every i; generates -I.
  static HouseholderParam unit_vectors(int dim);

  int dim() const noexcept { return dim_; }
  const Matrix& vectors() const noexcept { return vectors_; }
  /// Column-major view of all vectors (d*d values).
  std::span<double> values() noexcept { return {vectors_.data(), size()}; }
  std::size_t size() const noexcept {
    return static_cast<std::size_t>(vectors_.size());
  }

  /// Throws DomainError if some |y_i| < kHouseholderMinNorm.
  void check_norms() const;
  /// Columns z_i = (2/|y_i|^2) y_i.
  Matrix scaled_vectors() const;

 private:
  int dim_;
  Matrix vectors_;
};

/// Gradients of a scalar loss with respect to the parameters (flattened in
/// the same layout as values()) and the input batch.
struct UnitaryGrad {
  Vector params;
  Matrix x;
};

Matrix givens_apply(const GivensParam& param, const Matrix& x,
                    bool transpose = false);
Matrix givens_materialize(const GivensParam& param);

/// Recovers angles with givens_materialize(result) == u. Requires
/// |U^T U - I|_max <= 1e-8 and det(U) > 0.
GivensParam givens_decompose(const Matrix& u);

/// Backpropagates `upstream` (cotangent of the output of givens_apply with
/// the same `transpose` flag). Intermediate states are recomputed from the
/// output by inverse rotations instead of being stored.
UnitaryGrad givens_grad(const GivensParam& param, const Matrix& x,
                        const Matrix& upstream, bool transpose = false);

Matrix householder_apply(const HouseholderParam& param, const Matrix& x,
                         bool transpose = false);
Matrix householder_materialize(const HouseholderParam& param);
UnitaryGrad householder_grad(const HouseholderParam& param, const Matrix& x,
                             const Matrix& upstream, bool transpose = false);

/// max_ij |U^T U - I|_ij.
double orthogonality_error(const Matrix& u);

}  // namespace sptn
