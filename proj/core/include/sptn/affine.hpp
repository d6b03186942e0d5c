#pragma once

// Invertible dense layer f(x) = sigma(U D V^T x + b) stored in SVD form.

#include <Eigen/Core>

#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <variant>

#include "sptn/unitary.hpp"

namespace sptn {

inline constexpr double kSeluLambda = 1.0507;
inline constexpr double kSeluAlpha = 1.6733;
inline constexpr double kLeakyReluDefaultSlope = 0.01;
/// Smallest admissible |d_ii|; enforced by project_diag after optimizer steps.
inline constexpr double kDiagFloor = 1e-6;

/// Strictly increasing elementwise activation with closed-form inverse.
class Nonlinearity {
 public:
  enum class Kind { identity, leaky_relu, selu };

  static Nonlinearity identity() { return Nonlinearity(Kind::identity, 0.0); }
  static Nonlinearity leaky_relu(double slope = kLeakyReluDefaultSlope);
  static Nonlinearity selu() { return Nonlinearity(Kind::selu, 0.0); }

  Kind kind() const noexcept { return kind_; }
  /// Negative-side slope of leaky-relu; 0 for the other kinds.
  double slope() const noexcept { return slope_; }
  bool is_identity() const noexcept { return kind_ == Kind::identity; }
  std::string name() const;

  double apply(double o) const;
  double derivative(double o) const;
  double log_derivative(double o) const;
  /// d/do log sigma'(o).
  double log_derivative_grad(double o) const;
  /// True iff y lies in the image of sigma. selu is bounded below by
  /// -lambda*alpha; the other kinds are onto.
  bool in_range(double y) const;
  /// Throws DomainError if !in_range(y).
  double inverse(double y) const;

  friend bool operator==(const Nonlinearity&, const Nonlinearity&) = default;

 private:
  Nonlinearity(Kind kind, double slope) : kind_(kind), slope_(slope) {}

  Kind kind_;
  double slope_;
};

/// Givens- or Householder-generated orthogonal factor.
class OrthogonalFactor {
 public:
  enum class Kind { givens, householder };

  OrthogonalFactor(GivensParam p) : param_(std::move(p)) {}        // NOLINT
  OrthogonalFactor(HouseholderParam p) : param_(std::move(p)) {}   // NOLINT

  Kind kind() const noexcept;
  int dim() const noexcept;
  std::size_t size() const noexcept;
  std::span<double> values() noexcept;
  std::span<const double> values() const noexcept;

  const GivensParam* givens() const noexcept { return std::get_if<GivensParam>(&param_); }
  const HouseholderParam* householder() const noexcept {
    return std::get_if<HouseholderParam>(&param_);
  }

  Matrix apply(const Matrix& x, bool transpose = false) const;
  UnitaryGrad grad(const Matrix& x, const Matrix& upstream, bool transpose = false) const;
  Matrix materialize() const;

 private:
  std::variant<GivensParam, HouseholderParam> param_;
};

/// Parameter layout: [U params | V params | diag | bias].
class SvdAffine {
 public:
  SvdAffine(OrthogonalFactor u, OrthogonalFactor v, Vector diag, Vector bias,
            Nonlinearity nonlinearity = Nonlinearity::identity());

  /// diag = 1, bias = 0, factor parameters perturbed by N(0, angle_std^2).
  /// The Householder start pairs equal vectors so U and V are each close to
  /// the same matrix and W = U V^T is close to I.
  static SvdAffine near_identity(int dim, OrthogonalFactor::Kind kind, Nonlinearity nonlinearity,
                                 std::mt19937_64& rng, double angle_std = 0.01,
                                 double bias_std = 0.0);

  int dim() const noexcept { return static_cast<int>(diag_.size()); }
  const OrthogonalFactor& u() const noexcept { return u_; }
  const OrthogonalFactor& v() const noexcept { return v_; }
  const Vector& diag() const noexcept { return diag_; }
  const Vector& bias() const noexcept { return bias_; }
  const Nonlinearity& nonlinearity() const noexcept { return nonlinearity_; }

  std::size_t parameter_count() const noexcept;
  void copy_parameters_to(std::span<double> out) const;
  /// Does not re-project the diagonal; call project_diag afterwards.
  void set_parameters(std::span<const double> in);
  /// Offset of the diag block inside the parameter layout.
  std::size_t diag_offset() const noexcept { return u_.size() + v_.size(); }

  /// Moves every |d_ii| < floor to sign(d_ii) * floor (sign(0) = +).
  void project_diag(double floor = kDiagFloor);
  /// Throws InvalidArgument if some |d_ii| < floor or a parameter is not finite.
  void check_invariants(double floor = kDiagFloor) const;

  /// W = U D V^T.
  Matrix weight() const;
  /// W^{-1} = V D^{-1} U^T.
  Matrix inverse_weight() const;

 private:
  OrthogonalFactor u_;
  OrthogonalFactor v_;
  Vector diag_;
  Vector bias_;
  Nonlinearity nonlinearity_;
};

struct AffineForward {
  Matrix o;  ///< pre-activation W x + b
  Matrix y;  ///< sigma(o)
};

AffineForward affine_forward(const SvdAffine& layer, const Matrix& x);
/// sum_i log|d_ii| + sum_i log sigma'(o_i), one value per column of o.
Vector affine_logdet(const SvdAffine& layer, const Matrix& o);
/// V D^{-1} U^T (sigma^{-1}(y) - b).
Matrix affine_inverse(const SvdAffine& layer, const Matrix& y);

struct AffineGrad {
  Vector u;
  Vector v;
  Vector diag;
  Vector bias;
  Matrix x;

  /// Concatenation in the SvdAffine parameter layout.
  Vector flat() const;
};

/// Gradient of sum_j (upstream_y_j . y_j + upstream_logdet_j * logdet_j).
AffineGrad affine_grad(const SvdAffine& layer, const Matrix& x, const Matrix& upstream_y,
                       const Vector& upstream_logdet);

struct Gaussian {
  Vector mean;
  Matrix cov;
};

/// Distribution of f(x) for x ~ N(mean, cov): N(W mean + b, W cov W^T).
/// Requires identity nonlinearity.
Gaussian transform_gaussian(const SvdAffine& layer, const Vector& mean, const Matrix& cov);

/// Distribution of x when f(x) ~ N(mean, cov), i.e. the density a
/// transformation node over a Gaussian child defines:
/// N(W^{-1}(mean - b), W^{-1} cov W^{-T}). Requires identity nonlinearity.
Gaussian pull_back_gaussian(const SvdAffine& layer, const Vector& mean, const Matrix& cov);

}  // namespace sptn
