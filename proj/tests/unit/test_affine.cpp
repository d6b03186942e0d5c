#include <cmath>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "sptn/affine.hpp"
#include "sptn/error.hpp"
#include "sptn/gaussian.hpp"

using namespace sptn;
using Kind = OrthogonalFactor::Kind;

namespace {

double max_abs(const Matrix& m) { return m.cwiseAbs().maxCoeff(); }

SvdAffine identity_layer(int d, Nonlinearity nl = Nonlinearity::identity()) {
  return SvdAffine(GivensParam(d), GivensParam(d), Vector::Ones(d), Vector::Zero(d), nl);
}

SvdAffine scalar_layer(double diag, double bias, Nonlinearity nl = Nonlinearity::identity()) {
  return SvdAffine(GivensParam(1), GivensParam(1), Vector::Constant(1, diag), Vector::Constant(1, bias), nl);
}

const Nonlinearity kAll[] = {Nonlinearity::identity(), Nonlinearity::leaky_relu(), Nonlinearity::leaky_relu(0.3),
                             Nonlinearity::selu()};

// sum(up_y . y) + up_ld . logdet for a layer rebuilt from flat parameters.
double layer_objective(const SvdAffine& proto, const Vector& flat, const Matrix& x, const Matrix& up_y,
                       const Vector& up_ld) {
  SvdAffine layer = proto;
  layer.set_parameters({flat.data(), static_cast<std::size_t>(flat.size())});
  const auto f = affine_forward(layer, x);
  return (f.y.array() * up_y.array()).sum() + up_ld.dot(affine_logdet(layer, f.o));
}

Vector flat_params(const SvdAffine& layer) {
  Vector v(static_cast<Eigen::Index>(layer.parameter_count()));
  layer.copy_parameters_to({v.data(), static_cast<std::size_t>(v.size())});
  return v;
}

}  // namespace

TEST_SUITE("affine") {
  TEST_CASE("nonlinearity definitions") {
    const auto lr = Nonlinearity::leaky_relu(0.01);
    CHECK(lr.apply(-1) == doctest::Approx(-0.01));
    CHECK(lr.apply(2) == 2);
    CHECK(Nonlinearity::leaky_relu().slope() == 0.01);
    const auto selu = Nonlinearity::selu();
    CHECK(selu.apply(1.0) == doctest::Approx(1.0507));
    CHECK(selu.apply(-1.0) == doctest::Approx(1.0507 * 1.6733 * (std::exp(-1.0) - 1)));
    CHECK_FALSE(selu.in_range(-1.0507 * 1.6733 - 1e-9));
    CHECK(selu.in_range(-1.0));
    CHECK_THROWS_AS(selu.inverse(-2.0), DomainError);
    CHECK_THROWS_AS(Nonlinearity::leaky_relu(0.0), InvalidArgument);
    CHECK_THROWS_AS(Nonlinearity::leaky_relu(-1.0), InvalidArgument);
  }

  TEST_CASE("nonlinearity inverse and derivatives") {
    std::mt19937_64 rng(1);
    std::normal_distribution<double> n(0, 3);
    for (const auto& nl : kAll) {
      for (int i = 0; i < 200; ++i) {
        const double o = n(rng);
        if (std::abs(o) < 1e-3) continue;
        const double y = nl.apply(o);
        CHECK(std::abs(nl.inverse(y) - o) <= 1e-12 * std::max(1.0, std::abs(o)));
        CHECK(std::abs(nl.apply(nl.inverse(y)) - y) <= 1e-12 * std::max(1.0, std::abs(y)));
        const double h = 1e-6;
        const double num = (nl.apply(o + h) - nl.apply(o - h)) / (2 * h);
        CHECK(std::abs(nl.derivative(o) - num) <= 1e-6);
        CHECK(nl.log_derivative(o) == doctest::Approx(std::log(nl.derivative(o))));
        const double num_ld = (nl.log_derivative(o + h) - nl.log_derivative(o - h)) / (2 * h);
        CHECK(std::abs(nl.log_derivative_grad(o) - num_ld) <= 1e-6);
      }
    }
  }

  TEST_CASE("identity layer is the identity") {
    std::mt19937_64 rng(2);
    const Matrix x = oracle::gaussian_matrix(3, 5, rng);
    const auto f = affine_forward(identity_layer(3), x);
    CHECK((f.y.array() == x.array()).all());
    CHECK((f.o.array() == x.array()).all());
    CHECK((affine_inverse(identity_layer(3), x).array() == x.array()).all());
  }

  TEST_CASE("scalar affine examples") {
    const auto layer = scalar_layer(2, 1);
    const auto f = affine_forward(layer, Matrix::Constant(1, 1, 3.0));
    CHECK(f.y(0, 0) == 7.0);
    CHECK(affine_inverse(layer, Matrix::Constant(1, 1, 7.0))(0, 0) == 3.0);
  }

  TEST_CASE("leaky relu forward") {
    const auto layer = identity_layer(2, Nonlinearity::leaky_relu(0.01));
    Matrix x(2, 1);
    x << -1, 2;
    const auto f = affine_forward(layer, x);
    CHECK(f.y(0, 0) == doctest::Approx(-0.01));
    CHECK(f.y(1, 0) == 2.0);
  }

  TEST_CASE("logdet examples") {
    std::mt19937_64 rng(3);
    SvdAffine rot(GivensParam(3, oracle::gaussian_vector(3, rng)), GivensParam(3, oracle::gaussian_vector(3, rng)),
                  Vector::Ones(3), Vector::Zero(3));
    const Matrix o = oracle::gaussian_matrix(3, 4, rng);
    CHECK(affine_logdet(rot, o).cwiseAbs().maxCoeff() <= 1e-15);
    SvdAffine scale(GivensParam(2), GivensParam(2), Vector{{2.0, 3.0}}, Vector::Zero(2));
    CHECK(affine_logdet(scale, Matrix::Zero(2, 1))[0] == doctest::Approx(std::log(6.0)));
    const auto leaky = scalar_layer(1, 0, Nonlinearity::leaky_relu(0.5));
    CHECK(affine_logdet(leaky, Matrix::Constant(1, 1, -1.0))[0] == doctest::Approx(std::log(0.5)));
  }

  TEST_CASE("logdet matches the numerical Jacobian") {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 12; ++trial) {
      const int d = 1 + trial % 4;
      const auto layer = oracle::random_layer(d, trial % 2 ? Kind::householder : Kind::givens, kAll[trial % 4], rng);
      const Vector x = oracle::gaussian_vector(d, rng);
      Matrix jac(d, d);
      const double h = 1e-6;
      for (int j = 0; j < d; ++j) {
        Vector xp = x, xm = x;
        xp[j] += h;
        xm[j] -= h;
        jac.col(j) = (affine_forward(layer, xp).y - affine_forward(layer, xm).y).col(0) / (2 * h);
      }
      const double expected = std::log(std::abs(oracle::determinant(jac)));
      const auto f = affine_forward(layer, x);
      CHECK(std::abs(affine_logdet(layer, f.o)[0] - expected) <= 1e-4);
    }
  }

  TEST_CASE("weight and inverse weight") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 20; ++trial) {
      const int d = 1 + trial % 8;
      const auto layer = oracle::random_layer(d, trial % 2 ? Kind::householder : Kind::givens, Nonlinearity::identity(), rng);
      CHECK(max_abs(layer.weight() * layer.inverse_weight() - Matrix::Identity(d, d)) <= 1e-8);
      const Matrix x = oracle::gaussian_matrix(d, 3, rng);
      const Matrix expected = (layer.weight() * x).colwise() + layer.bias();
      CHECK(max_abs(affine_forward(layer, x).o - expected) <= 1e-12);
    }
  }

  TEST_CASE("inverse round trip for every nonlinearity") {
    std::mt19937_64 rng(6);
    for (const auto& nl : kAll) {
      for (Kind kind : {Kind::givens, Kind::householder}) {
        const auto layer = oracle::random_layer(8, kind, nl, rng);
        const Matrix x = oracle::gaussian_matrix(8, 1000, rng, 2.0);
        const Matrix y = affine_forward(layer, x).y;
        CHECK(max_abs(affine_inverse(layer, y) - x) <= 1e-8);
        CHECK(max_abs(affine_forward(layer, affine_inverse(layer, y)).y - y) <= 1e-8);
      }
    }
  }

  TEST_CASE("parameter layout and projection") {
    std::mt19937_64 rng(7);
    auto layer = oracle::random_layer(3, Kind::givens, Nonlinearity::identity(), rng);
    CHECK(layer.parameter_count() == 3 + 3 + 3 + 3);
    CHECK(layer.diag_offset() == 6);
    Vector flat = flat_params(layer);
    flat.segment(6, 3) << 0.0, -1e-9, 2.0;
    layer.set_parameters({flat.data(), static_cast<std::size_t>(flat.size())});
    CHECK_THROWS_AS(layer.check_invariants(), InvalidArgument);
    layer.project_diag();
    CHECK(layer.diag()[0] == kDiagFloor);
    CHECK(layer.diag()[1] == -kDiagFloor);
    CHECK(layer.diag()[2] == 2.0);
    CHECK_NOTHROW(layer.check_invariants());
    CHECK_THROWS_AS(layer.set_parameters(std::span<const double>(flat.data(), 5)), DimensionError);

    auto house = oracle::random_layer(3, Kind::householder, Nonlinearity::identity(), rng);
    CHECK(house.parameter_count() == 9 + 9 + 3 + 3);
  }

  TEST_CASE("layer construction checks") {
    CHECK_THROWS_AS(SvdAffine(GivensParam(2), HouseholderParam::unit_vectors(2), Vector::Ones(2), Vector::Zero(2)),
                    InvalidArgument);
    CHECK_THROWS_AS(SvdAffine(GivensParam(2), GivensParam(3), Vector::Ones(2), Vector::Zero(2)), DimensionError);
    CHECK_THROWS_AS(SvdAffine(GivensParam(2), GivensParam(2), Vector::Ones(2), Vector::Zero(3)), DimensionError);
    CHECK_THROWS_AS(affine_forward(identity_layer(2), Matrix::Zero(3, 1)), DimensionError);
  }

  TEST_CASE("near identity initialization") {
    std::mt19937_64 rng(8);
    for (Kind kind : {Kind::givens, Kind::householder}) {
      const auto layer = SvdAffine::near_identity(4, kind, Nonlinearity::identity(), rng);
      CHECK(max_abs(layer.weight() - Matrix::Identity(4, 4)) <= 0.2);
      CHECK((layer.diag().array() == 1.0).all());
      CHECK((layer.bias().array() == 0.0).all());
    }
  }

  TEST_CASE("zero upstream gives zero gradient") {
    std::mt19937_64 rng(9);
    const auto layer = oracle::random_layer(3, Kind::givens, Nonlinearity::selu(), rng);
    const Matrix x = oracle::gaussian_matrix(3, 4, rng);
    const auto g = affine_grad(layer, x, Matrix::Zero(3, 4), Vector::Zero(4));
    CHECK(g.flat().cwiseAbs().maxCoeff() == 0.0);
    CHECK(g.x.cwiseAbs().maxCoeff() == 0.0);
  }

  TEST_CASE("logdet gradient with respect to the diagonal") {
    SvdAffine layer(GivensParam(2), GivensParam(2), Vector{{2.0, 3.0}}, Vector::Zero(2));
    const auto g = affine_grad(layer, Matrix::Zero(2, 1), Matrix::Zero(2, 1), Vector::Ones(1));
    CHECK(g.diag[0] == doctest::Approx(0.5));
    CHECK(g.diag[1] == doctest::Approx(1.0 / 3.0));
  }

  TEST_CASE("affine gradient matches finite differences") {
    std::mt19937_64 rng(10);
    for (int trial = 0; trial < 24; ++trial) {
      const int d = 1 + trial % 5;
      const auto nl = kAll[trial % 4];
      const auto layer = oracle::random_layer(d, trial % 3 == 0 ? Kind::householder : Kind::givens, nl, rng);
      const Matrix x = oracle::gaussian_matrix(d, 3, rng);
      const Matrix up_y = oracle::gaussian_matrix(d, 3, rng);
      const Vector up_ld = oracle::gaussian_vector(3, rng);
      const auto g = affine_grad(layer, x, up_y, up_ld);
      const Vector num = oracle::central_gradient(
          [&](const Vector& p) { return layer_objective(layer, p, x, up_y, up_ld); }, flat_params(layer));
      CHECK(oracle::relative_error(g.flat(), num) <= 1e-4);
      const Vector num_x = oracle::central_gradient(
          [&](const Vector& v) { return layer_objective(layer, flat_params(layer), v.reshaped(d, 3), up_y, up_ld); },
          x.reshaped());
      CHECK(oracle::relative_error(g.x.reshaped(), num_x) <= 1e-4);
    }
  }

  TEST_CASE("transform_gaussian examples") {
    const auto id = transform_gaussian(identity_layer(3), Vector::Zero(3), Matrix::Identity(3, 3));
    CHECK(max_abs(id.mean) == 0.0);
    CHECK(max_abs(id.cov - Matrix::Identity(3, 3)) <= 1e-15);

    std::mt19937_64 rng(11);
    const Vector b = oracle::gaussian_vector(3, rng);
    SvdAffine rot(GivensParam(3, oracle::gaussian_vector(3, rng)), GivensParam(3, oracle::gaussian_vector(3, rng)),
                  Vector::Ones(3), b);
    const auto r = transform_gaussian(rot, Vector::Zero(3), Matrix::Identity(3, 3));
    CHECK(max_abs(r.mean - b) <= 1e-14);
    CHECK(max_abs(r.cov - Matrix::Identity(3, 3)) <= 1e-12);

    CHECK_THROWS_AS(transform_gaussian(identity_layer(2, Nonlinearity::selu()), Vector::Zero(2), Matrix::Identity(2, 2)),
                    InvalidArgument);
  }

  TEST_CASE("transformed Gaussian density equals the change of variables") {
    std::mt19937_64 rng(12);
    // y = f(x), x ~ N(0, I): p_y(y) = N(f^{-1}(y); 0, I) - logdet(f^{-1}(y)).
    SvdAffine layer(GivensParam(2, Vector::Constant(1, 0.4)), GivensParam(2, Vector::Constant(1, -1.1)),
                    Vector{{2.0, 1.0}}, Vector{{1.0, 0.0}});
    const auto g = transform_gaussian(layer, Vector::Zero(2), Matrix::Identity(2, 2));
    for (int i = 0; i < 20; ++i) {
      const Vector y = oracle::gaussian_vector(2, rng, 2.0);
      const Matrix x = affine_inverse(layer, y);
      const auto f = affine_forward(layer, x);
      const double flow = -0.5 * (2 * std::log(2 * M_PI) + x.squaredNorm()) - affine_logdet(layer, f.o)[0];
      CHECK(std::abs(flow - oracle::gaussian_logpdf(y, g.mean, g.cov)) <= 1e-10);
    }
    const Vector x0 = oracle::gaussian_vector(2, rng);
    const auto pb = pull_back_gaussian(layer, Vector::Zero(2), Matrix::Identity(2, 2));
    const auto f0 = affine_forward(layer, x0);
    const double node = -0.5 * (2 * std::log(2 * M_PI) + f0.y.squaredNorm()) + affine_logdet(layer, f0.o)[0];
    CHECK(std::abs(node - oracle::gaussian_logpdf(x0, pb.mean, pb.cov)) <= 1e-10);
    CHECK(max_abs(g.cov - g.cov.transpose()) <= 1e-14);
  }
}
