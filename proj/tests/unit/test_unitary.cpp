#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "sptn/error.hpp"
#include "sptn/unitary.hpp"

using namespace sptn;

namespace {

double max_abs(const Matrix& m) { return m.cwiseAbs().maxCoeff(); }

GivensParam random_givens(int d, std::mt19937_64& rng) {
  return GivensParam(d, oracle::gaussian_vector(static_cast<int>(givens_angle_count(d)), rng, 2.0));
}

HouseholderParam random_householder(int d, std::mt19937_64& rng) {
  return HouseholderParam(d, oracle::gaussian_matrix(d, d, rng));
}

// Sum of upstream . apply(param, x) as a function of the flat parameters.
template <typename Param, typename Apply>
double contract(const Param& p, const Matrix& x, const Matrix& up, Apply apply) {
  return (apply(p, x).array() * up.array()).sum();
}

}  // namespace

TEST_SUITE("unitary") {
  TEST_CASE("canonical plane order is s ascending then r") {
    const auto planes = canonical_planes(4);
    const std::vector<RotationPlane> expected{{0, 1}, {0, 2}, {1, 2}, {0, 3}, {1, 3}, {2, 3}};
    CHECK(planes == expected);
    CHECK(givens_angle_count(1) == 0);
    CHECK(givens_angle_count(5) == 10);
  }

  TEST_CASE("givens parameter length is enforced") {
    CHECK_THROWS_AS(GivensParam(3, Vector::Zero(2)), DimensionError);
    CHECK_THROWS_AS(GivensParam(0), InvalidArgument);
    try {
      GivensParam(4, Vector::Zero(5));
    } catch (const DimensionError& e) {
      CHECK(e.expected() == 6);
      CHECK(e.actual() == 5);
    }
  }

  TEST_CASE("givens quarter turn in the plane") {
    GivensParam p(2, Vector::Constant(1, std::numbers::pi / 2));
    Matrix x(2, 1);
    x << 1, 0;
    const Matrix y = givens_apply(p, x);
    CHECK(y(0, 0) == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(y(1, 0) == doctest::Approx(-1.0));
    Matrix expected(2, 2);
    expected << 0, 1, -1, 0;
    CHECK(max_abs(givens_materialize(p) - expected) <= 1e-15);
  }

  TEST_CASE("zero angles give the identity exactly") {
    for (int d = 1; d <= 6; ++d) {
      GivensParam p(d);
      CHECK((givens_materialize(p).array() == Matrix::Identity(d, d).array()).all());
      std::mt19937_64 rng(d);
      const Matrix x = oracle::gaussian_matrix(d, 3, rng);
      CHECK((givens_apply(p, x).array() == x.array()).all());
    }
  }

  TEST_CASE("single angle on the (1,3) plane") {
    const double t = 0.7;
    Vector theta = Vector::Zero(6);
    theta[1] = t;  // plane (0, 2)
    GivensParam p(4, theta);
    Matrix e1 = Matrix::Zero(4, 1);
    e1(0, 0) = 1;
    const Matrix y = givens_apply(p, e1);
    CHECK(y(0, 0) == doctest::Approx(std::cos(t)));
    CHECK(y(1, 0) == 0.0);
    CHECK(y(2, 0) == doctest::Approx(-std::sin(t)));
    CHECK(y(3, 0) == 0.0);
  }

  TEST_CASE("givens transpose round trip and apply/materialize agreement") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 50; ++trial) {
      const int d = 1 + trial % 8;
      const auto p = random_givens(d, rng);
      const Matrix x = oracle::gaussian_matrix(d, 4, rng);
      CHECK(max_abs(givens_apply(p, givens_apply(p, x), true) - x) <= 1e-10);
      CHECK(max_abs(givens_apply(p, x) - givens_materialize(p) * x) <= 1e-12);
      CHECK(max_abs(givens_apply(p, x, true) - givens_materialize(p).transpose() * x) <= 1e-12);
    }
  }

  TEST_CASE("givens determinant is +1") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 20; ++trial) {
      const auto p = random_givens(5, rng);
      CHECK(oracle::determinant(givens_materialize(p)) == doctest::Approx(1.0).epsilon(1e-8));
    }
  }

  TEST_CASE("givens_apply rejects wrong vector length") {
    GivensParam p(3);
    CHECK_THROWS_AS(givens_apply(p, Matrix::Zero(2, 1)), DimensionError);
    CHECK_THROWS_AS(givens_grad(p, Matrix::Zero(3, 2), Matrix::Zero(3, 1)), DimensionError);
  }

  TEST_CASE("givens_decompose examples") {
    const auto id = givens_decompose(Matrix::Identity(4, 4));
    CHECK(id.theta().cwiseAbs().maxCoeff() <= 1e-15);
    Matrix quarter(2, 2);
    quarter << 0, 1, -1, 0;
    const auto q = givens_decompose(quarter);
    const double wrapped = std::remainder(q.theta()[0] - std::numbers::pi / 2, 2 * std::numbers::pi);
    CHECK(std::abs(wrapped) <= 1e-12);
  }

  TEST_CASE("givens_decompose recovers random rotations") {
    std::mt19937_64 rng(2024);
    for (int d = 1; d <= 8; ++d) {
      for (int trial = 0; trial < 10; ++trial) {
        const Matrix u = oracle::random_orthogonal(d, rng);
        CHECK(max_abs(givens_materialize(givens_decompose(u)) - u) <= 1e-8);
      }
    }
  }

  TEST_CASE("givens_decompose rejects bad input") {
    std::mt19937_64 rng(3);
    Matrix reflect = Matrix::Identity(3, 3);
    reflect(0, 0) = -1;
    CHECK_THROWS_AS(givens_decompose(reflect), InvalidArgument);
    CHECK_THROWS_AS(givens_decompose(oracle::gaussian_matrix(3, 3, rng)), InvalidArgument);
    CHECK_THROWS_AS(givens_decompose(Matrix::Identity(2, 3)), DimensionError);
    try {
      givens_decompose(reflect);
    } catch (const InvalidArgument& e) {
      CHECK(std::string(e.what()).find("diagonal") != std::string::npos);
    }
  }

  TEST_CASE("givens gradient at the identity") {
    GivensParam p(2);
    Matrix x(2, 1), up(2, 1);
    x << 1, 0;
    up << 0, 1;
    const auto g = givens_grad(p, x, up);
    CHECK(g.params[0] == doctest::Approx(-1.0).epsilon(1e-15));
  }

  TEST_CASE("zero upstream gives zero gradients") {
    std::mt19937_64 rng(8);
    const auto gp = random_givens(4, rng);
    const auto hp = random_householder(4, rng);
    const Matrix x = oracle::gaussian_matrix(4, 3, rng);
    const Matrix zero = Matrix::Zero(4, 3);
    for (bool t : {false, true}) {
      const auto gg = givens_grad(gp, x, zero, t);
      CHECK(gg.params.cwiseAbs().maxCoeff() == 0.0);
      CHECK(gg.x.cwiseAbs().maxCoeff() == 0.0);
      const auto hg = householder_grad(hp, x, zero, t);
      CHECK(hg.params.cwiseAbs().maxCoeff() == 0.0);
      CHECK(hg.x.cwiseAbs().maxCoeff() == 0.0);
    }
  }

  TEST_CASE("givens gradient matches finite differences") {
    std::mt19937_64 rng(6);
    for (int trial = 0; trial < 20; ++trial) {
      const int d = 2 + trial % 6;
      const bool transpose = trial % 2 == 1;
      const auto p = random_givens(d, rng);
      const Matrix x = oracle::gaussian_matrix(d, 3, rng);
      const Matrix up = oracle::gaussian_matrix(d, 3, rng);
      const auto g = givens_grad(p, x, up, transpose);
      auto apply = [&](const GivensParam& q, const Matrix& v) { return givens_apply(q, v, transpose); };
      const Vector num_theta = oracle::central_gradient(
          [&](const Vector& th) { return contract(GivensParam(d, th), x, up, apply); }, p.theta());
      CHECK(oracle::relative_error(g.params, num_theta) <= 1e-4);
      const Vector flat_x = x.reshaped();
      const Vector num_x = oracle::central_gradient(
          [&](const Vector& v) { return contract(p, v.reshaped(d, 3).eval(), up, apply); }, flat_x);
      CHECK(oracle::relative_error(g.x.reshaped(), num_x) <= 1e-4);
    }
  }

  TEST_CASE("householder unit vectors generate -I") {
    const auto p = HouseholderParam::unit_vectors(4);
    std::mt19937_64 rng(1);
    const Matrix x = oracle::gaussian_matrix(4, 2, rng);
    CHECK(max_abs(householder_apply(p, x) + x) <= 1e-15);
    CHECK(max_abs(householder_materialize(p) + Matrix::Identity(4, 4)) <= 1e-15);
  }

  TEST_CASE("equal householder vectors cancel") {
    HouseholderParam p(2, Matrix::Ones(2, 2));
    Matrix x(2, 1);
    x << 0.3, -1.7;
    CHECK(max_abs(householder_apply(p, x) - x) <= 1e-15);
  }

  TEST_CASE("householder product order is P_d ... P_1") {
    std::mt19937_64 rng(4);
    const Matrix ys = oracle::gaussian_matrix(3, 3, rng);
    Matrix expected = Matrix::Identity(3, 3);
    for (int i = 0; i < 3; ++i) {
      const Vector y = ys.col(i);
      const Matrix pi = Matrix::Identity(3, 3) - 2.0 / y.squaredNorm() * y * y.transpose();
      expected = pi * expected;
    }
    CHECK(max_abs(householder_materialize(HouseholderParam(3, ys)) - expected) <= 1e-12);
  }

  TEST_CASE("householder round trip and materialize agreement") {
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 50; ++trial) {
      const int d = 1 + trial % 8;
      const auto p = random_householder(d, rng);
      const Matrix x = oracle::gaussian_matrix(d, 4, rng);
      CHECK(max_abs(householder_apply(p, householder_apply(p, x), true) - x) <= 1e-10);
      CHECK(max_abs(householder_apply(p, x) - householder_materialize(p) * x) <= 1e-12);
    }
  }

  TEST_CASE("householder rejects near-zero vectors") {
    Matrix ys = Matrix::Identity(3, 3);
    ys.col(1).setConstant(1e-13);
    HouseholderParam p(3, ys);
    CHECK_THROWS_AS(p.check_norms(), DomainError);
    CHECK_THROWS_AS(householder_apply(p, Matrix::Zero(3, 1)), DomainError);
    CHECK_THROWS_AS(HouseholderParam(3, Matrix::Identity(3, 2)), DimensionError);
  }

  TEST_CASE("householder gradient matches finite differences") {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 20; ++trial) {
      const int d = 1 + trial % 6;
      const bool transpose = trial % 2 == 1;
      const auto p = random_householder(d, rng);
      const Matrix x = oracle::gaussian_matrix(d, 3, rng);
      const Matrix up = oracle::gaussian_matrix(d, 3, rng);
      const auto g = householder_grad(p, x, up, transpose);
      auto apply = [&](const HouseholderParam& q, const Matrix& v) { return householder_apply(q, v, transpose); };
      const Vector flat = p.vectors().reshaped();
      const Vector num = oracle::central_gradient(
          [&](const Vector& ys) { return contract(HouseholderParam(d, ys.reshaped(d, d)), x, up, apply); }, flat);
      CHECK(oracle::relative_error(g.params, num) <= 1e-4);
      const Vector num_x = oracle::central_gradient(
          [&](const Vector& v) { return contract(p, v.reshaped(d, 3).eval(), up, apply); }, x.reshaped());
      CHECK(oracle::relative_error(g.x.reshaped(), num_x) <= 1e-4);
    }
  }

  TEST_CASE("householder gradient is orthogonal to each vector") {
    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 10; ++trial) {
      const int d = 3;
      const auto p = random_householder(d, rng);
      const Matrix x = oracle::gaussian_matrix(d, 2, rng);
      const Matrix up = oracle::gaussian_matrix(d, 2, rng);
      const auto g = householder_grad(p, x, up);
      const Matrix gy = g.params.reshaped(d, d);
      for (int i = 0; i < d; ++i) CHECK(std::abs(gy.col(i).dot(p.vectors().col(i))) <= 1e-8);
      Matrix scaled = p.vectors();
      scaled.col(trial % d) *= 2;
      CHECK(max_abs(householder_apply(HouseholderParam(d, scaled), x) - householder_apply(p, x)) <= 1e-12);
    }
  }

  TEST_CASE("orthogonality holds for arbitrary parameters") {
    std::mt19937_64 rng(13);
    for (int trial = 0; trial < 200; ++trial) {
      const int d = 1 + trial % 10;
      CHECK(orthogonality_error(givens_materialize(random_givens(d, rng))) <= 1e-10);
      CHECK(orthogonality_error(householder_materialize(random_householder(d, rng))) <= 1e-10);
    }
  }
}
