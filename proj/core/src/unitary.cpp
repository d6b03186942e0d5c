#include "sptn/unitary.hpp"

#include <Eigen/LU>

#include <cmath>
#include <string>

#include "sptn/error.hpp"

namespace sptn {
namespace {

void check_dim(int dim) {
  if (dim < 1) throw InvalidArgument("orthogonal factor dimension must be >= 1");
}

void check_batch(const char* what, int dim, const Matrix& x) {
  if (x.rows() != dim) throw DimensionError(what, dim, static_cast<long>(x.rows()));
}

// Canonical angle index of each element of application_sequence().
std::vector<std::size_t> sequence_indices(std::size_t m, bool transpose) {
  std::vector<std::size_t> idx(m);
  for (std::size_t j = 0; j < m; ++j) idx[j] = transpose ? j : m - 1 - j;
  return idx;
}

std::vector<int> reflection_order(int dim, bool transpose) {
  std::vector<int> order(static_cast<std::size_t>(dim));
  for (int i = 0; i < dim; ++i) order[static_cast<std::size_t>(i)] = transpose ? dim - 1 - i : i;
  return order;
}

}  // namespace

std::vector<RotationPlane> canonical_planes(int dim) {
  std::vector<RotationPlane> planes;
  planes.reserve(givens_angle_count(dim));
  for (int s = 1; s < dim; ++s)
    for (int r = 0; r < s; ++r) planes.push_back({r, s});
  return planes;
}

std::size_t givens_angle_count(int dim) {
  return dim < 2 ? 0 : static_cast<std::size_t>(dim) * (dim - 1) / 2;
}

GivensParam::GivensParam(int dim)
    : GivensParam(dim, Vector::Zero(static_cast<Eigen::Index>(givens_angle_count(dim)))) {}

GivensParam::GivensParam(int dim, Vector theta) : dim_(dim), theta_(std::move(theta)) {
  check_dim(dim);
  const auto expected = static_cast<long>(givens_angle_count(dim));
  if (theta_.size() != expected)
    throw DimensionError("givens angle vector length", expected, static_cast<long>(theta_.size()));
}

std::vector<detail::PlanarRotation> GivensParam::application_sequence(bool transpose) const {
  const auto planes = canonical_planes(dim_);
  const std::size_t m = planes.size();
  std::vector<detail::PlanarRotation> seq(m);
  const auto idx = sequence_indices(m, transpose);
  for (std::size_t j = 0; j < m; ++j) {
    const std::size_t k = idx[j];
    const double angle = theta_[static_cast<Eigen::Index>(k)];
    const double sn = std::sin(angle);
    seq[j] = {planes[k].r, planes[k].s, std::cos(angle), transpose ? -sn : sn};
  }
  return seq;
}

Matrix givens_apply(const GivensParam& param, const Matrix& x, bool transpose) {
  check_batch("givens_apply: vector length", param.dim(), x);
  const auto seq = param.application_sequence(transpose);
  Matrix out = x;
  detail::apply_rotations_batch<double>(seq, out.data(), param.dim(), static_cast<std::size_t>(out.cols()));
  return out;
}

Matrix givens_materialize(const GivensParam& param) {
  return givens_apply(param, Matrix::Identity(param.dim(), param.dim()));
}

double orthogonality_error(const Matrix& u) {
  if (u.rows() != u.cols()) throw DimensionError("orthogonality_error: columns", static_cast<long>(u.rows()), static_cast<long>(u.cols()));
  return (u.transpose() * u - Matrix::Identity(u.rows(), u.cols())).cwiseAbs().maxCoeff();
}

GivensParam givens_decompose(const Matrix& u) {
  if (u.rows() != u.cols())
    throw DimensionError("givens_decompose: matrix must be square, columns", static_cast<long>(u.rows()), static_cast<long>(u.cols()));
  const int dim = static_cast<int>(u.rows());
  check_dim(dim);
  const double err = orthogonality_error(u);
  if (!(err <= 1e-8))
    throw InvalidArgument("givens_decompose: matrix is not orthogonal (|U^T U - I|_max = " + std::to_string(err) + ")");
  if (Eigen::PartialPivLU<Matrix>(u).determinant() < 0)
    throw InvalidArgument(
        "givens_decompose: det(U) < 0 is not reachable by rotations; flip the sign of one "
        "column and move the sign into the diagonal factor");

  const auto planes = canonical_planes(dim);
  Vector theta = Vector::Zero(static_cast<Eigen::Index>(planes.size()));
  Matrix m = u;
  // Peel off B_k = G(0,k-1) G(1,k-1) ... G(k-2,k-1) from the right, k = d..2.
  // The last row of B_k is (-sin t0, -cos t0 sin t1, ..., prod cos), so its
  // angles are the hyperspherical coordinates of the last row of the block.
  for (int k = dim; k >= 2; --k) {
    const int s = k - 1;
    const std::size_t base = givens_angle_count(k - 1);  // first plane with this s
    Vector w = m.row(s).head(k).transpose();
    std::vector<double> angles(static_cast<std::size_t>(s));
    for (int r = 0; r < s; ++r) {
      if (r == s - 1) {
        angles[static_cast<std::size_t>(r)] = std::atan2(-w[r], w[s]);
      } else {
        const double tail = w.segment(r + 1, k - r - 1).norm();
        angles[static_cast<std::size_t>(r)] = std::atan2(-w[r], tail);
      }
      theta[static_cast<Eigen::Index>(base + static_cast<std::size_t>(r))] = angles[static_cast<std::size_t>(r)];
    }
    // m <- m * B_k^T = m * G(s-1)^T ... G(0)^T: rotate each row by G(r)
    // for r = s-1 down to 0.
    for (int r = s - 1; r >= 0; --r) {
      const double c = std::cos(angles[static_cast<std::size_t>(r)]);
      const double sn = std::sin(angles[static_cast<std::size_t>(r)]);
      for (int i = 0; i < k; ++i) {
        const double a = m(i, r);
        const double b = m(i, s);
        m(i, r) = c * a + sn * b;
        m(i, s) = c * b - sn * a;
      }
    }
  }
  return GivensParam(dim, std::move(theta));
}

UnitaryGrad givens_grad(const GivensParam& param, const Matrix& x, const Matrix& upstream,
                        bool transpose) {
  check_batch("givens_grad: vector length", param.dim(), x);
  check_batch("givens_grad: upstream length", param.dim(), upstream);
  if (upstream.cols() != x.cols())
    throw DimensionError("givens_grad: upstream batch size", static_cast<long>(x.cols()), static_cast<long>(upstream.cols()));

  const auto seq = param.application_sequence(transpose);
  const auto idx = sequence_indices(seq.size(), transpose);
  const double sign = transpose ? -1.0 : 1.0;

  // Undo the rotations one by one from the output, carrying the adjoint.
  const auto n = static_cast<std::size_t>(x.cols());
  const std::size_t m = static_cast<std::size_t>(param.dim());
  Matrix z = x;
  detail::apply_rotations_batch<double>(seq, z.data(), param.dim(), n);
  Matrix lambda = upstream;
  UnitaryGrad g{Vector::Zero(static_cast<Eigen::Index>(param.size())), Matrix()};
  for (std::size_t j = seq.size(); j-- > 0;) {
    const auto& rot = seq[j];
    double* zr = z.data() + rot.r;
    double* zs = z.data() + rot.s;
    double* lr = lambda.data() + rot.r;
    double* ls = lambda.data() + rot.s;
    double acc = 0.0;
    for (std::size_t k = 0; k < n * m; k += m) {
      const double a = rot.c * zr[k] - rot.sn * zs[k];
      const double b = rot.sn * zr[k] + rot.c * zs[k];
      zr[k] = a;
      zs[k] = b;
      const double l_r = lr[k];
      const double l_s = ls[k];
      acc += l_r * (-rot.sn * a + rot.c * b) + l_s * (-rot.c * a - rot.sn * b);
      lr[k] = rot.c * l_r - rot.sn * l_s;
      ls[k] = rot.sn * l_r + rot.c * l_s;
    }
    g.params[static_cast<Eigen::Index>(idx[j])] += sign * acc;
  }
  g.x = std::move(lambda);
  return g;
}

HouseholderParam::HouseholderParam(int dim, Matrix vectors) : dim_(dim), vectors_(std::move(vectors)) {
  check_dim(dim);
  if (vectors_.rows() != dim) throw DimensionError("householder vector length", dim, static_cast<long>(vectors_.rows()));
  if (vectors_.cols() != dim) throw DimensionError("householder vector count", dim, static_cast<long>(vectors_.cols()));
}

HouseholderParam HouseholderParam::unit_vectors(int dim) {
  check_dim(dim);
  return HouseholderParam(dim, Matrix::Identity(dim, dim));
}

void HouseholderParam::check_norms() const {
  for (Eigen::Index i = 0; i < vectors_.cols(); ++i) {
    const double n = vectors_.col(i).norm();
    if (!(n >= kHouseholderMinNorm))
      throw DomainError("householder vector " + std::to_string(i) + " has norm " + std::to_string(n) +
                        " below the minimum " + std::to_string(kHouseholderMinNorm));
  }
}

Matrix HouseholderParam::scaled_vectors() const {
  check_norms();
  Matrix z = vectors_;
  for (Eigen::Index i = 0; i < z.cols(); ++i) z.col(i) *= 2.0 / vectors_.col(i).squaredNorm();
  return z;
}

Matrix householder_apply(const HouseholderParam& param, const Matrix& x, bool transpose) {
  check_batch("householder_apply: vector length", param.dim(), x);
  const Matrix z = param.scaled_vectors();
  const auto order = reflection_order(param.dim(), transpose);
  Matrix out = x;
  for (Eigen::Index j = 0; j < out.cols(); ++j)
    detail::apply_reflections<double>(param.vectors().data(), z.data(), param.dim(), order, out.col(j).data());
  return out;
}

Matrix householder_materialize(const HouseholderParam& param) {
  return householder_apply(param, Matrix::Identity(param.dim(), param.dim()));
}

UnitaryGrad householder_grad(const HouseholderParam& param, const Matrix& x, const Matrix& upstream,
                             bool transpose) {
  check_batch("householder_grad: vector length", param.dim(), x);
  check_batch("householder_grad: upstream length", param.dim(), upstream);
  if (upstream.cols() != x.cols())
    throw DimensionError("householder_grad: upstream batch size", static_cast<long>(x.cols()), static_cast<long>(upstream.cols()));

  const int d = param.dim();
  const Matrix& ys = param.vectors();
  const Matrix zs = param.scaled_vectors();
  const auto order = reflection_order(d, transpose);

  Matrix z = x;
  for (Eigen::Index col = 0; col < z.cols(); ++col)
    detail::apply_reflections<double>(ys.data(), zs.data(), d, order, z.col(col).data());
  Matrix lambda = upstream;
  UnitaryGrad g{Vector::Zero(static_cast<Eigen::Index>(param.size())), Matrix()};
  Eigen::Map<Matrix> gy(g.params.data(), d, d);
  for (std::size_t j = order.size(); j-- > 0;) {
    const int i = order[j];
    const auto y = ys.col(i);
    const auto t = zs.col(i);
    z.noalias() -= t * (y.transpose() * z);  // reflections are involutions: recover the input
    const double n2 = y.squaredNorm();
    const Eigen::RowVectorXd alpha = y.transpose() * z;
    const Eigen::RowVectorXd beta = y.transpose() * lambda;
    gy.col(i) += (-2.0 / n2) * (z * beta.transpose() + lambda * alpha.transpose()) +
                 (4.0 * alpha.dot(beta) / (n2 * n2)) * y;
    lambda.noalias() -= t * beta;
  }
  g.x = std::move(lambda);
  return g;
}

}  // namespace sptn
