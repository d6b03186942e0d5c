#include "sptn/affine.hpp"

#include <cmath>
#include <string>

#include "sptn/error.hpp"

namespace sptn {

// Nonlinearity ---------------------------------------------------------------

Nonlinearity Nonlinearity::leaky_relu(double slope) {
  if (!(slope > 0.0) || !std::isfinite(slope))
    throw InvalidArgument("leaky-relu slope must be a positive finite number");
  return Nonlinearity(Kind::leaky_relu, slope);
}

std::string Nonlinearity::name() const {
  switch (kind_) {
    case Kind::identity: return "identity";
    case Kind::leaky_relu: return "leaky_relu";
    case Kind::selu: return "selu";
  }
  return "unknown";
}

double Nonlinearity::apply(double o) const {
  switch (kind_) {
    case Kind::identity: return o;
    case Kind::leaky_relu: return o >= 0.0 ? o : slope_ * o;
    case Kind::selu: return o > 0.0 ? kSeluLambda * o : kSeluLambda * kSeluAlpha * std::expm1(o);
  }
  return o;
}

double Nonlinearity::derivative(double o) const {
  switch (kind_) {
    case Kind::identity: return 1.0;
    case Kind::leaky_relu: return o >= 0.0 ? 1.0 : slope_;
    case Kind::selu: return o > 0.0 ? kSeluLambda : kSeluLambda * kSeluAlpha * std::exp(o);
  }
  return 1.0;
}

double Nonlinearity::log_derivative(double o) const {
  switch (kind_) {
    case Kind::identity: return 0.0;
    case Kind::leaky_relu: return o >= 0.0 ? 0.0 : std::log(slope_);
    case Kind::selu: return o > 0.0 ? std::log(kSeluLambda) : std::log(kSeluLambda * kSeluAlpha) + o;
  }
  return 0.0;
}

double Nonlinearity::log_derivative_grad(double o) const {
  return kind_ == Kind::selu && o <= 0.0 ? 1.0 : 0.0;
}

bool Nonlinearity::in_range(double y) const {
  if (!std::isfinite(y)) return false;
  return kind_ != Kind::selu || y > -kSeluLambda * kSeluAlpha;
}

double Nonlinearity::inverse(double y) const {
  if (!in_range(y))
    throw DomainError(name() + " inverse: " + std::to_string(y) + " is outside the range of the activation");
  switch (kind_) {
    case Kind::identity: return y;
    case Kind::leaky_relu: return y >= 0.0 ? y : y / slope_;
    case Kind::selu: return y > 0.0 ? y / kSeluLambda : std::log1p(y / (kSeluLambda * kSeluAlpha));
  }
  return y;
}

// OrthogonalFactor -----------------------------------------------------------

OrthogonalFactor::Kind OrthogonalFactor::kind() const noexcept {
  return std::holds_alternative<GivensParam>(param_) ? Kind::givens : Kind::householder;
}

int OrthogonalFactor::dim() const noexcept {
  return std::visit([](const auto& p) { return p.dim(); }, param_);
}

std::size_t OrthogonalFactor::size() const noexcept {
  return std::visit([](const auto& p) { return p.size(); }, param_);
}

std::span<double> OrthogonalFactor::values() noexcept {
  return std::visit([](auto& p) { return p.values(); }, param_);
}

std::span<const double> OrthogonalFactor::values() const noexcept {
  if (const auto* g = givens()) return {g->theta().data(), g->size()};
  const auto* h = householder();
  return {h->vectors().data(), h->size()};
}

Matrix OrthogonalFactor::apply(const Matrix& x, bool transpose) const {
  if (const auto* g = givens()) return givens_apply(*g, x, transpose);
  return householder_apply(*householder(), x, transpose);
}

UnitaryGrad OrthogonalFactor::grad(const Matrix& x, const Matrix& upstream, bool transpose) const {
  if (const auto* g = givens()) return givens_grad(*g, x, upstream, transpose);
  return householder_grad(*householder(), x, upstream, transpose);
}

Matrix OrthogonalFactor::materialize() const {
  return apply(Matrix::Identity(dim(), dim()));
}

// SvdAffine ------------------------------------------------------------------

SvdAffine::SvdAffine(OrthogonalFactor u, OrthogonalFactor v, Vector diag, Vector bias,
                     Nonlinearity nonlinearity)
    : u_(std::move(u)), v_(std::move(v)), diag_(std::move(diag)), bias_(std::move(bias)),
      nonlinearity_(nonlinearity) {
  const long d = static_cast<long>(diag_.size());
  if (d < 1) throw InvalidArgument("affine layer dimension must be >= 1");
  if (u_.dim() != d) throw DimensionError("affine layer: U dimension", d, u_.dim());
  if (v_.dim() != d) throw DimensionError("affine layer: V dimension", d, v_.dim());
  if (bias_.size() != d) throw DimensionError("affine layer: bias length", d, static_cast<long>(bias_.size()));
  if (u_.kind() != v_.kind()) throw InvalidArgument("affine layer: U and V must use the same parametrization");
  check_invariants();
}

SvdAffine SvdAffine::near_identity(int dim, OrthogonalFactor::Kind kind, Nonlinearity nonlinearity,
                                   std::mt19937_64& rng, double angle_std, double bias_std) {
  std::normal_distribution<double> noise(0.0, 1.0);
  auto make_factor = [&]() -> OrthogonalFactor {
    if (kind == OrthogonalFactor::Kind::givens) {
      Vector theta(static_cast<Eigen::Index>(givens_angle_count(dim)));
      for (Eigen::Index i = 0; i < theta.size(); ++i) theta[i] = angle_std * noise(rng);
      return GivensParam(dim, std::move(theta));
    }
    Matrix ys = Matrix::Zero(dim, dim);
    for (int i = 0; i < dim; ++i) ys(i - i % 2, i) = 1.0;
    for (Eigen::Index i = 0; i < ys.size(); ++i) ys.data()[i] += angle_std * noise(rng);
    return HouseholderParam(dim, std::move(ys));
  };
  OrthogonalFactor u = make_factor();
  OrthogonalFactor v = make_factor();
  Vector bias(dim);
  for (int i = 0; i < dim; ++i) bias[i] = bias_std * noise(rng);
  return SvdAffine(std::move(u), std::move(v), Vector::Ones(dim), std::move(bias), nonlinearity);
}

std::size_t SvdAffine::parameter_count() const noexcept {
  return u_.size() + v_.size() + 2 * static_cast<std::size_t>(dim());
}

void SvdAffine::copy_parameters_to(std::span<double> out) const {
  if (out.size() != parameter_count())
    throw DimensionError("affine layer parameter buffer", static_cast<long>(parameter_count()), static_cast<long>(out.size()));
  auto it = out.begin();
  for (double x : u_.values()) *it++ = x;
  for (double x : v_.values()) *it++ = x;
  for (Eigen::Index i = 0; i < diag_.size(); ++i) *it++ = diag_[i];
  for (Eigen::Index i = 0; i < bias_.size(); ++i) *it++ = bias_[i];
}

void SvdAffine::set_parameters(std::span<const double> in) {
  if (in.size() != parameter_count())
    throw DimensionError("affine layer parameter buffer", static_cast<long>(parameter_count()), static_cast<long>(in.size()));
  auto it = in.begin();
  for (double& x : u_.values()) x = *it++;
  for (double& x : v_.values()) x = *it++;
  for (Eigen::Index i = 0; i < diag_.size(); ++i) diag_[i] = *it++;
  for (Eigen::Index i = 0; i < bias_.size(); ++i) bias_[i] = *it++;
}

void SvdAffine::project_diag(double floor) {
  for (Eigen::Index i = 0; i < diag_.size(); ++i)
    if (std::abs(diag_[i]) < floor) diag_[i] = diag_[i] < 0.0 ? -floor : floor;
}

void SvdAffine::check_invariants(double floor) const {
  for (Eigen::Index i = 0; i < diag_.size(); ++i)
    if (!(std::abs(diag_[i]) >= floor) || !std::isfinite(diag_[i]))
      throw InvalidArgument("affine layer: |d_" + std::to_string(i) + "| = " + std::to_string(std::abs(diag_[i])) +
                            " violates the invertibility floor " + std::to_string(floor));
  if (!bias_.allFinite()) throw InvalidArgument("affine layer: non-finite bias");
  for (double x : u_.values())
    if (!std::isfinite(x)) throw InvalidArgument("affine layer: non-finite U parameter");
  for (double x : v_.values())
    if (!std::isfinite(x)) throw InvalidArgument("affine layer: non-finite V parameter");
  if (const auto* h = u_.householder()) h->check_norms();
  if (const auto* h = v_.householder()) h->check_norms();
}

Matrix SvdAffine::weight() const {
  return u_.materialize() * diag_.asDiagonal() * v_.materialize().transpose();
}

Matrix SvdAffine::inverse_weight() const {
  return v_.materialize() * diag_.cwiseInverse().asDiagonal() * u_.materialize().transpose();
}

// Layer operations -----------------------------------------------------------

namespace {

void check_rows(const char* what, const SvdAffine& layer, const Matrix& x) {
  if (x.rows() != layer.dim()) throw DimensionError(what, layer.dim(), static_cast<long>(x.rows()));
}

}  // namespace

AffineForward affine_forward(const SvdAffine& layer, const Matrix& x) {
  check_rows("affine_forward: vector length", layer, x);
  Matrix c = layer.diag().asDiagonal() * layer.v().apply(x, /*transpose=*/true);
  AffineForward f;
  f.o = layer.u().apply(c);
  f.o.colwise() += layer.bias();
  if (layer.nonlinearity().is_identity()) {
    f.y = f.o;
  } else {
    const Nonlinearity& act = layer.nonlinearity();
    f.y = f.o.unaryExpr([&act](double v) { return act.apply(v); });
  }
  return f;
}

Vector affine_logdet(const SvdAffine& layer, const Matrix& o) {
  check_rows("affine_logdet: vector length", layer, o);
  const double diag_term = layer.diag().cwiseAbs().array().log().sum();
  Vector out = Vector::Constant(o.cols(), diag_term);
  const Nonlinearity& act = layer.nonlinearity();
  if (!act.is_identity()) {
    for (Eigen::Index j = 0; j < o.cols(); ++j) {
      double s = 0.0;
      for (Eigen::Index i = 0; i < o.rows(); ++i) s += act.log_derivative(o(i, j));
      out[j] += s;
    }
  }
  return out;
}

Matrix affine_inverse(const SvdAffine& layer, const Matrix& y) {
  check_rows("affine_inverse: vector length", layer, y);
  const Nonlinearity& act = layer.nonlinearity();
  Matrix o = act.is_identity() ? y : Matrix(y.unaryExpr([&act](double v) { return act.inverse(v); }));
  o.colwise() -= layer.bias();
  Matrix a = layer.diag().cwiseInverse().asDiagonal() * layer.u().apply(o, /*transpose=*/true);
  return layer.v().apply(a);
}

Vector AffineGrad::flat() const {
  Vector out(u.size() + v.size() + diag.size() + bias.size());
  out << u, v, diag, bias;
  return out;
}

AffineGrad affine_grad(const SvdAffine& layer, const Matrix& x, const Matrix& upstream_y,
                       const Vector& upstream_logdet) {
  check_rows("affine_grad: vector length", layer, x);
  check_rows("affine_grad: upstream length", layer, upstream_y);
  if (upstream_y.cols() != x.cols())
    throw DimensionError("affine_grad: upstream batch size", static_cast<long>(x.cols()), static_cast<long>(upstream_y.cols()));
  if (upstream_logdet.size() != x.cols())
    throw DimensionError("affine_grad: logdet upstream batch size", static_cast<long>(x.cols()), static_cast<long>(upstream_logdet.size()));

  const Matrix a = layer.v().apply(x, /*transpose=*/true);
  const Matrix c = layer.diag().asDiagonal() * a;
  const Nonlinearity& act = layer.nonlinearity();

  Matrix o_bar;
  if (act.is_identity()) {
    o_bar = upstream_y;
  } else {
    Matrix o = layer.u().apply(c);
    o.colwise() += layer.bias();
    o_bar.resize(o.rows(), o.cols());
    for (Eigen::Index j = 0; j < o.cols(); ++j)
      for (Eigen::Index i = 0; i < o.rows(); ++i)
        o_bar(i, j) = upstream_y(i, j) * act.derivative(o(i, j)) +
                      upstream_logdet[j] * act.log_derivative_grad(o(i, j));
  }

  AffineGrad g;
  g.bias = o_bar.rowwise().sum();
  UnitaryGrad gu = layer.u().grad(c, o_bar);
  g.u = std::move(gu.params);
  const Matrix& c_bar = gu.x;
  g.diag = (c_bar.cwiseProduct(a)).rowwise().sum() +
           upstream_logdet.sum() * layer.diag().cwiseInverse();
  const Matrix a_bar = layer.diag().asDiagonal() * c_bar;
  UnitaryGrad gv = layer.v().grad(x, a_bar, /*transpose=*/true);
  g.v = std::move(gv.params);
  g.x = std::move(gv.x);
  return g;
}

Gaussian transform_gaussian(const SvdAffine& layer, const Vector& mean, const Matrix& cov) {
  if (!layer.nonlinearity().is_identity())
    throw InvalidArgument("transform_gaussian: a " + layer.nonlinearity().name() +
                          " layer does not map Gaussians to Gaussians");
  if (mean.size() != layer.dim()) throw DimensionError("transform_gaussian: mean length", layer.dim(), static_cast<long>(mean.size()));
  if (cov.rows() != layer.dim() || cov.cols() != layer.dim())
    throw DimensionError("transform_gaussian: covariance size", layer.dim(), static_cast<long>(cov.rows()));
  const Matrix w = layer.weight();
  Gaussian g{w * mean + layer.bias(), w * cov * w.transpose()};
  g.cov = 0.5 * (g.cov + g.cov.transpose()).eval();
  return g;
}

Gaussian pull_back_gaussian(const SvdAffine& layer, const Vector& mean, const Matrix& cov) {
  if (!layer.nonlinearity().is_identity())
    throw InvalidArgument("pull_back_gaussian: a " + layer.nonlinearity().name() +
                          " layer does not map Gaussians to Gaussians");
  if (mean.size() != layer.dim()) throw DimensionError("pull_back_gaussian: mean length", layer.dim(), static_cast<long>(mean.size()));
  if (cov.rows() != layer.dim() || cov.cols() != layer.dim())
    throw DimensionError("pull_back_gaussian: covariance size", layer.dim(), static_cast<long>(cov.rows()));
  const Matrix w_inv = layer.inverse_weight();
  Gaussian g{w_inv * (mean - layer.bias()), w_inv * cov * w_inv.transpose()};
  g.cov = 0.5 * (g.cov + g.cov.transpose()).eval();
  return g;
}

}  // namespace sptn
