#include "sptn/ginfer.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "sptn/error.hpp"

namespace sptn {

// EvidenceMask ---------------------------------------------------------------

EvidenceMask::EvidenceMask(std::vector<bool> observed) : observed_(std::move(observed)) {
  if (observed_.empty()) throw InvalidArgument("evidence mask needs at least one variable");
  for (std::size_t i = 0; i < observed_.size(); ++i) (observed_[i] ? obs_ : marg_).push_back(static_cast<int>(i));
}

EvidenceMask EvidenceMask::parse(std::string_view text) {
  std::vector<bool> flags;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t end = std::min(text.find(',', start), text.size());
    std::string_view tok = text.substr(start, end - start);
    while (!tok.empty() && tok.front() == ' ') tok.remove_prefix(1);
    while (!tok.empty() && tok.back() == ' ') tok.remove_suffix(1);
    if (tok == "o") flags.push_back(true);
    else if (tok == "m") flags.push_back(false);
    else throw InvalidArgument("mask entry " + std::to_string(flags.size() + 1) + " is '" + std::string(tok) +
                               "'; expected 'o' (observed) or 'm' (marginalized)");
    start = end + 1;
  }
  return EvidenceMask(std::move(flags));
}

EvidenceMask EvidenceMask::all_observed(int dim) {
  if (dim < 1) throw InvalidArgument("mask dimension must be >= 1");
  return EvidenceMask(std::vector<bool>(static_cast<std::size_t>(dim), true));
}

EvidenceMask EvidenceMask::all_marginalized(int dim) {
  if (dim < 1) throw InvalidArgument("mask dimension must be >= 1");
  return EvidenceMask(std::vector<bool>(static_cast<std::size_t>(dim), false));
}

std::string EvidenceMask::to_string() const {
  std::string out;
  for (std::size_t i = 0; i < observed_.size(); ++i) {
    if (i) out += ',';
    out += observed_[i] ? 'o' : 'm';
  }
  return out;
}

std::string to_string(TractabilityReport::Kind kind) {
  switch (kind) {
    case TractabilityReport::Kind::fully: return "fully";
    case TractabilityReport::Kind::with_expansion: return "with_expansion";
    case TractabilityReport::Kind::no: return "no";
  }
  return "unknown";
}

// Pending-affine recursion ---------------------------------------------------

namespace {

constexpr double kBlockTolerance = 1e-12;
constexpr double kNullEvidence = -700.0;

// Distribution of the scope variables at a node is that of A v + c where v
// follows the node's own density.
struct Pending {
  Matrix a;
  Vector c;
};

class PushDown {
 public:
  // x == nullptr runs a structural pass that only records expansion sizes.
  PushDown(const Circuit& c, const Matrix* x, const EvidenceMask& mask, const InferenceOptions& opts)
      : c_(c), x_(x), mask_(mask), opts_(opts), n_(x ? x->rows() : 0), w_inv_(c.layer_count()) {}

  Vector run() {
    const auto d = c_.dim();
    return eval(*c_.root(), {Matrix::Identity(d, d), Vector::Zero(d)});
  }

  std::uint64_t max_expansion() const noexcept { return max_expansion_; }

 private:
  Vector eval(NodeId id, const Pending& p) {
    const Node& node = c_.node(id);
    if (std::holds_alternative<LeafNode>(node)) return gaussian(c_.scope(id), p.c, p.a * p.a.transpose());

    if (const auto* s = std::get_if<SumNode>(&node)) {
      const Vector lw = c_.log_weights(id);
      Matrix terms(static_cast<Eigen::Index>(s->children.size()), n_);
      for (std::size_t k = 0; k < s->children.size(); ++k)
        terms.row(static_cast<Eigen::Index>(k)) = (eval(s->children[k], p).array() + lw[static_cast<Eigen::Index>(k)]).transpose();
      return reduce(terms);
    }

    if (const auto* t = std::get_if<TransformNode>(&node)) {
      const SvdAffine& layer = c_.layer(t->layer);
      auto& w_inv = w_inv_[t->layer.index];
      if (!w_inv) w_inv = layer.inverse_weight();
      Pending q;
      q.a = p.a * *w_inv;
      q.c = p.c - q.a * layer.bias();
      return eval(t->child, q);
    }

    const auto& prod = std::get<ProductNode>(node);
    const auto& sc = c_.scope(id);
    std::vector<int> owner(sc.size());
    std::vector<std::vector<Eigen::Index>> pos(prod.children.size());
    for (std::size_t k = 0; k < prod.children.size(); ++k) {
      for (int v : c_.scope(prod.children[k])) {
        const auto i = std::lower_bound(sc.begin(), sc.end(), v) - sc.begin();
        owner[static_cast<std::size_t>(i)] = static_cast<int>(k);
        pos[k].push_back(i);
      }
    }
    bool aligned = true;
    for (Eigen::Index i = 0; i < p.a.rows() && aligned; ++i)
      for (Eigen::Index j = 0; j < p.a.cols(); ++j)
        if (owner[static_cast<std::size_t>(i)] != owner[static_cast<std::size_t>(j)] && std::abs(p.a(i, j)) > kBlockTolerance) {
          aligned = false;
          break;
        }

    if (aligned) {
      Vector total = Vector::Zero(n_);
      for (std::size_t k = 0; k < prod.children.size(); ++k) {
        const auto m = static_cast<Eigen::Index>(pos[k].size());
        Pending q{Matrix(m, m), Vector(m)};
        for (Eigen::Index a = 0; a < m; ++a) {
          q.c[a] = p.c[pos[k][static_cast<std::size_t>(a)]];
          for (Eigen::Index b = 0; b < m; ++b) q.a(a, b) = p.a(pos[k][static_cast<std::size_t>(a)], pos[k][static_cast<std::size_t>(b)]);
        }
        total += eval(prod.children[k], q);
      }
      return total;
    }

    // Mixing map across the product's children: expand the sub-circuit into
    // its explicit mixture and push each component through the map.
    const std::uint64_t count = count_induced_trees(c_, id);
    max_expansion_ = std::max(max_expansion_, count);
    if (!x_) {
      // Structural pass: the subtree is absorbed by the expansion.
      return Vector();
    }
    const GaussianMixture gmm = to_gmm(c_, id, opts_.expansion_cap);
    Matrix terms(static_cast<Eigen::Index>(gmm.components.size()), n_);
    for (std::size_t k = 0; k < gmm.components.size(); ++k) {
      const auto& comp = gmm.components[k];
      Matrix cov = p.a * comp.cov * p.a.transpose();
      cov = 0.5 * (cov + cov.transpose()).eval();
      terms.row(static_cast<Eigen::Index>(k)) = (gaussian(sc, p.a * comp.mean + p.c, cov).array() + comp.log_weight).transpose();
    }
    return reduce(terms);
  }

  Vector gaussian(const std::vector<int>& scope, const Vector& mean, const Matrix& cov) const {
    if (!x_) return Vector();
    std::vector<int> keep;
    for (std::size_t i = 0; i < scope.size(); ++i)
      if (mask_.observed(scope[i])) keep.push_back(static_cast<int>(i));
    if (keep.empty()) return Vector::Zero(n_);
    Matrix rows(n_, static_cast<Eigen::Index>(scope.size()));
    for (std::size_t i = 0; i < scope.size(); ++i) rows.col(static_cast<Eigen::Index>(i)) = x_->col(scope[i]);
    return gaussian_marginal_logpdf(rows, mean, cov, keep);
  }

  Vector reduce(const Matrix& terms) const {
    Vector out(n_);
    std::vector<double> col(static_cast<std::size_t>(terms.rows()));
    for (Eigen::Index j = 0; j < n_; ++j) {
      for (Eigen::Index k = 0; k < terms.rows(); ++k) col[static_cast<std::size_t>(k)] = terms(k, j);
      out[j] = log_sum_exp(col);
    }
    return out;
  }

  const Circuit& c_;
  const Matrix* x_;
  const EvidenceMask& mask_;
  const InferenceOptions& opts_;
  Eigen::Index n_;
  std::vector<std::optional<Matrix>> w_inv_;
  std::uint64_t max_expansion_ = 0;
};

std::optional<NodeId> first_nonlinear(const Circuit& c) {
  for (NodeId id : c.topological_order())
    if (const auto* t = std::get_if<TransformNode>(&c.node(id)))
      if (!c.layer(t->layer).nonlinearity().is_identity()) return id;
  return std::nullopt;
}

void require_tractable(const Circuit& c) {
  if (auto bad = first_nonlinear(c)) {
    const auto& t = std::get<TransformNode>(c.node(*bad));
    throw NotTractable("node " + std::to_string(bad->index) + " applies a " + c.layer(t.layer).nonlinearity().name() +
                           " nonlinearity; exact marginals need identity nonlinearities throughout",
                       bad->index);
  }
}

}  // namespace

TractabilityReport is_tractable(const Circuit& circuit) {
  if (!circuit.validated()) throw NotValidated();
  TractabilityReport report;
  if (auto bad = first_nonlinear(circuit)) {
    const auto& t = std::get<TransformNode>(circuit.node(*bad));
    report.kind = TractabilityReport::Kind::no;
    report.offending_node = bad->index;
    report.message = "node " + std::to_string(bad->index) + " applies a " +
                     circuit.layer(t.layer).nonlinearity().name() + " nonlinearity";
    return report;
  }
  const auto& topo = circuit.topological_order();
  const bool has_product = std::any_of(topo.begin(), topo.end(), [&](NodeId id) {
    return std::holds_alternative<ProductNode>(circuit.node(id));
  });
  if (!has_product) {
    report.message = "no product nodes; every transformation acts on a Gaussian mixture directly";
    return report;
  }
  const EvidenceMask mask = EvidenceMask::all_observed(circuit.dim());
  const InferenceOptions opts;
  PushDown pass(circuit, nullptr, mask, opts);
  pass.run();
  if (pass.max_expansion() == 0) {
    report.message = "all products see block-aligned affine maps";
    return report;
  }
  report.kind = TractabilityReport::Kind::with_expansion;
  report.components = pass.max_expansion();
  report.message = "products under mixing transformations need local expansion into up to " +
                   std::to_string(report.components) + " Gaussian components";
  return report;
}

Vector marginal_logpdf(const Circuit& circuit, const Matrix& x, const EvidenceMask& mask,
                       const InferenceOptions& options) {
  if (!circuit.validated()) throw NotValidated();
  if (mask.dim() != circuit.dim()) throw DimensionError("marginal_logpdf: mask length", circuit.dim(), mask.dim());
  if (x.cols() != circuit.dim()) throw DimensionError("marginal_logpdf: input columns", circuit.dim(), static_cast<long>(x.cols()));
  require_tractable(circuit);
  for (int v : mask.observed_indices())
    if (!x.col(v).allFinite()) throw DomainError("marginal_logpdf: observed column " + std::to_string(v) + " has non-finite values");
  if (mask.observed_indices().empty()) return Vector::Zero(x.rows());
  if (mask.marginalized_indices().empty()) return logpdf(circuit, x);
  if (x.rows() == 0) return Vector();
  return PushDown(circuit, &x, mask, options).run();
}

Vector marginal_logpdf(const Circuit& circuit, const EvidenceQuery& query, const InferenceOptions& options) {
  return marginal_logpdf(circuit, query.values, query.mask, options);
}

Vector conditional_logpdf(const Circuit& circuit, const Matrix& x, const EvidenceMask& joint,
                          const EvidenceMask& evidence, const InferenceOptions& options) {
  if (joint.dim() != circuit.dim() || evidence.dim() != circuit.dim())
    throw DimensionError("conditional_logpdf: mask length", circuit.dim(),
                         joint.dim() != circuit.dim() ? joint.dim() : evidence.dim());
  for (int v : evidence.observed_indices())
    if (!joint.observed(v))
      throw InvalidArgument("conditional_logpdf: evidence variable " + std::to_string(v) +
                            " is not part of the joint observation");
  const Vector num = marginal_logpdf(circuit, x, joint, options);
  const Vector den = marginal_logpdf(circuit, x, evidence, options);
  for (Eigen::Index j = 0; j < den.size(); ++j)
    if (!(den[j] >= kNullEvidence))
      throw DomainError("conditional_logpdf: row " + std::to_string(j) +
                        " conditions on evidence of (numerically) zero density");
  return num - den;
}

}  // namespace sptn
