#include "sptn/circuit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <unordered_map>

#include "sptn/error.hpp"

namespace sptn {
namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

std::span<const NodeId> children_of(const Node& node) {
  return std::visit(overloaded{
                        [](const SumNode& s) { return std::span<const NodeId>(s.children); },
                        [](const ProductNode& p) { return std::span<const NodeId>(p.children); },
                        [](const TransformNode& t) { return std::span<const NodeId>(&t.child, 1); },
                        [](const LeafNode&) { return std::span<const NodeId>(); },
                    },
                    node);
}

std::string node_name(NodeId id) { return "node " + std::to_string(id.index); }

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

Vector log_softmax(const Vector& logits) {
  std::vector<double> v(logits.data(), logits.data() + logits.size());
  return logits.array() - log_sum_exp(v);
}

std::uint64_t sat_add(std::uint64_t a, std::uint64_t b) {
  return a > std::numeric_limits<std::uint64_t>::max() - b ? std::numeric_limits<std::uint64_t>::max() : a + b;
}

std::uint64_t sat_mul(std::uint64_t a, std::uint64_t b) {
  if (a == 0 || b == 0) return 0;
  return a > std::numeric_limits<std::uint64_t>::max() / b ? std::numeric_limits<std::uint64_t>::max() : a * b;
}

struct Layout {
  std::vector<std::size_t> sum_offset;    // per node; npos for non-sums
  std::vector<std::size_t> layer_offset;  // per layer
  std::size_t total = 0;
};

constexpr std::size_t kNoOffset = std::numeric_limits<std::size_t>::max();

// Gathers rows `scope` of a d x n matrix.
Matrix gather_rows(const Matrix& m, const std::vector<int>& scope) {
  Matrix out(static_cast<Eigen::Index>(scope.size()), m.cols());
  for (std::size_t i = 0; i < scope.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(scope[i]);
  return out;
}

void check_evaluable(const Circuit& c) {
  if (!c.validated()) throw NotValidated();
}

void check_batch(const Circuit& c, const Matrix& x) {
  check_evaluable(c);
  if (x.cols() != c.dim()) throw DimensionError("circuit input columns", c.dim(), static_cast<long>(x.cols()));
  if (!x.allFinite()) throw DomainError("circuit input contains non-finite values");
}

}  // namespace

// ValidationReport -----------------------------------------------------------

bool ValidationReport::has(Violation::Kind kind) const noexcept {
  return std::any_of(violations.begin(), violations.end(), [kind](const Violation& v) { return v.kind == kind; });
}

std::string ValidationReport::summary() const {
  std::ostringstream os;
  for (std::size_t i = 0; i < violations.size(); ++i) {
    if (i) os << "; ";
    os << violations[i].message;
  }
  return os.str();
}

// Circuit --------------------------------------------------------------------

Circuit::Circuit(int dim) : dim_(dim) {
  if (dim < 1) throw InvalidArgument("circuit dimension must be >= 1");
}

NodeId Circuit::add_node(Node node) {
  invalidate();
  nodes_.push_back(std::move(node));
  return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

NodeId Circuit::add_leaf(std::vector<int> scope) { return add_node(LeafNode{std::move(scope)}); }

NodeId Circuit::add_sum(std::vector<NodeId> children) {
  Vector logits = Vector::Zero(static_cast<Eigen::Index>(children.size()));
  return add_node(SumNode{std::move(children), std::move(logits)});
}

NodeId Circuit::add_sum(std::vector<NodeId> children, Vector logits) {
  return add_node(SumNode{std::move(children), std::move(logits)});
}

NodeId Circuit::add_product(std::vector<NodeId> children) { return add_node(ProductNode{std::move(children)}); }

NodeId Circuit::add_transform(NodeId child, LayerId layer) { return add_node(TransformNode{child, layer}); }

LayerId Circuit::add_layer(SvdAffine layer) {
  invalidate();
  layers_.push_back(std::move(layer));
  return LayerId{static_cast<std::uint32_t>(layers_.size() - 1)};
}

void Circuit::set_root(NodeId root) {
  invalidate();
  root_ = root;
}

const Node& Circuit::node(NodeId id) const {
  if (id.index >= nodes_.size()) throw InvalidArgument("unknown " + node_name(id));
  return nodes_[id.index];
}

const SvdAffine& Circuit::layer(LayerId id) const {
  if (id.index >= layers_.size()) throw InvalidArgument("unknown layer " + std::to_string(id.index));
  return layers_[id.index];
}

const std::vector<int>& Circuit::scope(NodeId id) const {
  check_evaluable(*this);
  if (id.index >= scopes_.size()) throw InvalidArgument("unknown " + node_name(id));
  return scopes_[id.index];
}

const std::vector<NodeId>& Circuit::topological_order() const {
  check_evaluable(*this);
  return topo_;
}

ValidationReport Circuit::validate() {
  validated_ = false;
  topo_.clear();
  const std::size_t n = nodes_.size();
  scopes_.assign(n, {});
  ValidationReport report;
  auto violate = [&report](Violation::Kind kind, std::vector<NodeId> ids, std::string msg) {
    report.violations.push_back({kind, std::move(ids), std::move(msg)});
  };

  if (!root_ || root_->index >= n) violate(Violation::Kind::missing_root, {}, "circuit has no valid root");

  bool dangling = false;
  for (std::size_t i = 0; i < n; ++i) {
    const NodeId id{static_cast<std::uint32_t>(i)};
    for (NodeId ch : children_of(nodes_[i])) {
      if (ch.index >= n) {
        violate(Violation::Kind::dangling_child, {id}, node_name(id) + " references missing child " + std::to_string(ch.index));
        dangling = true;
      }
    }
    if (const auto* s = std::get_if<SumNode>(&nodes_[i]); s && s->children.empty())
      violate(Violation::Kind::empty_node, {id}, node_name(id) + ": sum node without children");
    if (const auto* p = std::get_if<ProductNode>(&nodes_[i]); p && p->children.empty())
      violate(Violation::Kind::empty_node, {id}, node_name(id) + ": product node without children");
  }
  if (dangling) return report;

  // Iterative DFS over the whole table; colours detect back edges.
  enum : std::uint8_t { white, grey, black };
  std::vector<std::uint8_t> colour(n, white);
  std::vector<NodeId> postorder;
  postorder.reserve(n);
  bool cyclic = false;
  for (std::size_t start = 0; start < n && !cyclic; ++start) {
    if (colour[start] != white) continue;
    std::vector<std::pair<std::uint32_t, std::size_t>> stack{{static_cast<std::uint32_t>(start), 0}};
    colour[start] = grey;
    while (!stack.empty() && !cyclic) {
      auto& [cur, next] = stack.back();
      const auto kids = children_of(nodes_[cur]);
      if (next < kids.size()) {
        const NodeId ch = kids[next++];
        if (colour[ch.index] == grey) {
          violate(Violation::Kind::cycle, {NodeId{cur}, ch},
                  "cycle: " + node_name(NodeId{cur}) + " -> " + node_name(ch) + " closes a loop");
          cyclic = true;
        } else if (colour[ch.index] == white) {
          colour[ch.index] = grey;
          stack.push_back({ch.index, 0});
        }
      } else {
        colour[cur] = black;
        postorder.push_back(NodeId{cur});
        stack.pop_back();
      }
    }
  }
  if (cyclic) return report;

  std::vector<bool> scope_ok(n, true);
  for (NodeId id : postorder) {
    auto& sc = scopes_[id.index];
    const Node& node = nodes_[id.index];
    const auto kids = children_of(node);
    const bool kids_ok = std::all_of(kids.begin(), kids.end(), [&](NodeId ch) { return scope_ok[ch.index]; });
    if (!kids_ok) {
      scope_ok[id.index] = false;
      continue;
    }
    std::visit(overloaded{
                   [&](const LeafNode& leaf) {
                     sc = leaf.scope;
                     std::sort(sc.begin(), sc.end());
                     const bool in_range = std::all_of(sc.begin(), sc.end(), [&](int v) { return v >= 0 && v < dim_; });
                     const bool unique = std::adjacent_find(sc.begin(), sc.end()) == sc.end();
                     if (sc.empty() || !in_range || !unique) {
                       violate(Violation::Kind::leaf_scope, {id},
                               node_name(id) + ": leaf scope must be non-empty, distinct and within [0, " +
                                   std::to_string(dim_) + ")");
                       scope_ok[id.index] = false;
                     }
                   },
                   [&](const SumNode& s) {
                     if (s.children.empty()) {
                       scope_ok[id.index] = false;
                       return;
                     }
                     sc = scopes_[s.children.front().index];
                     for (NodeId ch : s.children) {
                       if (scopes_[ch.index] != sc) {
                         violate(Violation::Kind::completeness, {id, ch},
                                 node_name(id) + ": children do not share one scope (completeness), " +
                                     node_name(ch) + " differs");
                         break;
                       }
                     }
                     if (s.logits.size() != static_cast<Eigen::Index>(s.children.size()) || !s.logits.allFinite())
                       violate(Violation::Kind::weights, {id},
                               node_name(id) + ": needs one finite logit per child (" +
                                   std::to_string(s.children.size()) + " children, " +
                                   std::to_string(s.logits.size()) + " logits)");
                   },
                   [&](const ProductNode& p) {
                     if (p.children.empty()) {
                       scope_ok[id.index] = false;
                       return;
                     }
                     std::vector<int> all;
                     for (NodeId ch : p.children) all.insert(all.end(), scopes_[ch.index].begin(), scopes_[ch.index].end());
                     std::sort(all.begin(), all.end());
                     if (std::adjacent_find(all.begin(), all.end()) != all.end()) {
                       std::vector<NodeId> ids{id};
                       ids.insert(ids.end(), p.children.begin(), p.children.end());
                       violate(Violation::Kind::decomposability, std::move(ids),
                               node_name(id) + ": children scopes overlap (decomposability)");
                       all.erase(std::unique(all.begin(), all.end()), all.end());
                     }
                     sc = std::move(all);
                   },
                   [&](const TransformNode& t) {
                     sc = scopes_[t.child.index];
                     if (t.layer.index >= layers_.size()) {
                       violate(Violation::Kind::transform_layer, {id},
                               node_name(id) + ": references missing layer " + std::to_string(t.layer.index));
                       return;
                     }
                     const SvdAffine& layer = layers_[t.layer.index];
                     if (static_cast<std::size_t>(layer.dim()) != sc.size()) {
                       violate(Violation::Kind::transform_layer, {id},
                               node_name(id) + ": layer dimension " + std::to_string(layer.dim()) +
                                   " differs from scope size " + std::to_string(sc.size()));
                       return;
                     }
                     try {
                       layer.check_invariants();
                     } catch (const Error& e) {
                       violate(Violation::Kind::transform_layer, {id}, node_name(id) + ": " + e.what());
                     }
                   },
               },
               node);
  }

  if (root_ && root_->index < n && scope_ok[root_->index]) {
    std::vector<int> all(static_cast<std::size_t>(dim_));
    std::iota(all.begin(), all.end(), 0);
    if (scopes_[root_->index] != all)
      violate(Violation::Kind::root_scope, {*root_}, "root scope does not cover all " + std::to_string(dim_) + " variables");
  }
  if (!report.ok()) return report;

  // Reachable nodes in postorder from the root.
  std::vector<bool> seen(n, false);
  std::vector<std::pair<std::uint32_t, std::size_t>> stack{{root_->index, 0}};
  seen[root_->index] = true;
  while (!stack.empty()) {
    auto& [cur, next] = stack.back();
    const auto kids = children_of(nodes_[cur]);
    if (next < kids.size()) {
      const NodeId ch = kids[next++];
      if (!seen[ch.index]) {
        seen[ch.index] = true;
        stack.push_back({ch.index, 0});
      }
    } else {
      topo_.push_back(NodeId{cur});
      stack.pop_back();
    }
  }
  validated_ = true;
  return report;
}

ValidationReport validate(Circuit& circuit) { return circuit.validate(); }

namespace {

Layout make_layout(const Circuit& c) {
  Layout l;
  l.sum_offset.assign(c.node_count(), kNoOffset);
  for (std::size_t i = 0; i < c.node_count(); ++i) {
    if (const auto* s = std::get_if<SumNode>(&c.node(NodeId{static_cast<std::uint32_t>(i)}))) {
      l.sum_offset[i] = l.total;
      l.total += static_cast<std::size_t>(s->logits.size());
    }
  }
  l.layer_offset.resize(c.layer_count());
  for (std::size_t i = 0; i < c.layer_count(); ++i) {
    l.layer_offset[i] = l.total;
    l.total += c.layer(LayerId{static_cast<std::uint32_t>(i)}).parameter_count();
  }
  return l;
}

}  // namespace

std::vector<ParamBlock> Circuit::parameter_blocks() const {
  std::vector<ParamBlock> blocks;
  std::size_t off = 0;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (const auto* s = std::get_if<SumNode>(&nodes_[i])) {
      const auto sz = static_cast<std::size_t>(s->logits.size());
      blocks.push_back({"sum[" + std::to_string(i) + "].logits", off, sz});
      off += sz;
    }
  }
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const SvdAffine& l = layers_[i];
    const std::string p = "layer[" + std::to_string(i) + "].";
    const auto d = static_cast<std::size_t>(l.dim());
    blocks.push_back({p + "u", off, l.u().size()});
    off += l.u().size();
    blocks.push_back({p + "v", off, l.v().size()});
    off += l.v().size();
    blocks.push_back({p + "diag", off, d});
    off += d;
    blocks.push_back({p + "bias", off, d});
    off += d;
  }
  return blocks;
}

std::size_t Circuit::parameter_count() const { return make_layout(*this).total; }

Vector Circuit::parameters() const {
  const Layout l = make_layout(*this);
  Vector out(static_cast<Eigen::Index>(l.total));
  for (std::size_t i = 0; i < nodes_.size(); ++i)
    if (const auto* s = std::get_if<SumNode>(&nodes_[i]))
      out.segment(static_cast<Eigen::Index>(l.sum_offset[i]), s->logits.size()) = s->logits;
  for (std::size_t i = 0; i < layers_.size(); ++i)
    layers_[i].copy_parameters_to({out.data() + l.layer_offset[i], layers_[i].parameter_count()});
  return out;
}

void Circuit::set_parameters(const Vector& values) {
  const Layout l = make_layout(*this);
  if (static_cast<std::size_t>(values.size()) != l.total)
    throw DimensionError("circuit parameter vector", static_cast<long>(l.total), static_cast<long>(values.size()));
  for (std::size_t i = 0; i < nodes_.size(); ++i)
    if (auto* s = std::get_if<SumNode>(&nodes_[i]))
      s->logits = values.segment(static_cast<Eigen::Index>(l.sum_offset[i]), s->logits.size());
  for (std::size_t i = 0; i < layers_.size(); ++i)
    layers_[i].set_parameters({values.data() + l.layer_offset[i], layers_[i].parameter_count()});
}

void Circuit::project_parameters(double diag_floor) {
  for (auto& l : layers_) l.project_diag(diag_floor);
}

Vector Circuit::log_weights(NodeId sum) const {
  const auto* s = std::get_if<SumNode>(&node(sum));
  if (!s) throw InvalidArgument(node_name(sum) + " is not a sum node");
  return log_softmax(s->logits);
}

std::size_t Circuit::sum_parameter_offset(NodeId sum) const {
  if (!std::holds_alternative<SumNode>(node(sum))) throw InvalidArgument(node_name(sum) + " is not a sum node");
  return make_layout(*this).sum_offset[sum.index];
}

std::size_t Circuit::layer_parameter_offset(LayerId layer) const {
  this->layer(layer);
  return make_layout(*this).layer_offset[layer.index];
}

// Evaluation -----------------------------------------------------------------

namespace {

// Each transformation node evaluated on some input opens a new frame holding
// the transformed input of its sub-circuit. Activations are memoised per
// (node, frame); a shared node reached through different transformations is
// evaluated once per distinct input.
class Evaluation {
 public:
  Evaluation(const Circuit& c, const Matrix& rows, bool record)
      : c_(c), n_(rows.rows()), record_(record), log_w_(c.node_count()) {
    frames_.push_back({rows.transpose(), -1, -1});
    for (NodeId id : c.topological_order())
      if (const auto* s = std::get_if<SumNode>(&c.node(id))) log_w_[id.index] = log_softmax(s->logits);
    root_ = eval(*c.root(), 0);
  }

  const Vector& value() const { return acts_[static_cast<std::size_t>(root_)].value; }

  Vector backward(const Vector& root_adj) {
    const Layout layout = make_layout(c_);
    Vector grad = Vector::Zero(static_cast<Eigen::Index>(layout.total));
    std::vector<Vector> adj(acts_.size());
    std::vector<Matrix> frame_adj(frames_.size());
    auto frame_adj_at = [&](int f) -> Matrix& {
      auto& m = frame_adj[static_cast<std::size_t>(f)];
      if (m.size() == 0) m = Matrix::Zero(c_.dim(), n_);
      return m;
    };
    auto add = [&](int a, const auto& v) {
      auto& dst = adj[static_cast<std::size_t>(a)];
      if (dst.size() == 0) dst = v;
      else dst += v;
    };
    adj[static_cast<std::size_t>(root_)] = root_adj;

    for (auto e = events_.rbegin(); e != events_.rend(); ++e) {
      if (*e < 0) {
        close_frame(-1 - *e, layout, adj, frame_adj, frame_adj_at, grad);
        continue;
      }
      const auto& act = acts_[static_cast<std::size_t>(*e)];
      const Vector& a = adj[static_cast<std::size_t>(*e)];
      if (a.size() == 0) continue;
      std::visit(overloaded{
                     [&](const LeafNode&) {
                       Matrix& fa = frame_adj_at(act.frame);
                       const Matrix& x = frames_[static_cast<std::size_t>(act.frame)].x;
                       for (int v : c_.scope(act.node)) fa.row(v) -= a.transpose().cwiseProduct(x.row(v));
                     },
                     [&](const SumNode&) {
                       const Vector& lw = log_w_[act.node.index];
                       const std::size_t off = layout.sum_offset[act.node.index];
                       const double a_total = a.sum();
                       for (std::size_t k = 0; k < act.kids.size(); ++k) {
                         const Vector& ch = acts_[static_cast<std::size_t>(act.kids[k])].value;
                         const Eigen::ArrayXd r = (act.value.array() == kNegInf)
                                                      .select(0.0, (ch.array() + lw[static_cast<Eigen::Index>(k)] - act.value.array()).exp());
                         const Vector ar = (a.array() * r).matrix();
                         add(act.kids[k], ar);
                         grad[static_cast<Eigen::Index>(off + k)] +=
                             ar.sum() - std::exp(lw[static_cast<Eigen::Index>(k)]) * a_total;
                       }
                     },
                     [&](const ProductNode&) {
                       for (int k : act.kids) add(k, a);
                     },
                     [&](const TransformNode&) { add(act.kids.front(), a); },
                 },
                 c_.node(act.node));
    }
    return grad;
  }

 private:
  struct Frame {
    Matrix x;  // dim x n; rows outside the creator's scope are inherited
    int parent;
    int creator;
  };

  struct Activation {
    NodeId node;
    int frame;
    Vector value;
    std::vector<int> kids;
    Matrix x_scope;  // transformation input, recorded for the backward pass
  };

  template <typename FrameAdjAt>
  void close_frame(int f, const Layout& layout, const std::vector<Vector>& adj, std::vector<Matrix>& frame_adj,
                   FrameAdjAt&& frame_adj_at, Vector& grad) {
    const Frame& fr = frames_[static_cast<std::size_t>(f)];
    const Activation& t = acts_[static_cast<std::size_t>(fr.creator)];
    const auto& tn = std::get<TransformNode>(c_.node(t.node));
    const std::vector<int>& sc = c_.scope(t.node);
    const Vector& a = adj[static_cast<std::size_t>(fr.creator)];
    const Matrix& fa = frame_adj[static_cast<std::size_t>(f)];
    if (a.size() == 0 && fa.size() == 0) return;
    const Matrix y_adj = fa.size() == 0 ? Matrix::Zero(static_cast<Eigen::Index>(sc.size()), n_) : gather_rows(fa, sc);
    const Vector ld_adj = a.size() == 0 ? Vector::Zero(n_) : a;
    const SvdAffine& layer = c_.layer(tn.layer);
    const AffineGrad g = affine_grad(layer, t.x_scope, y_adj, ld_adj);
    grad.segment(static_cast<Eigen::Index>(layout.layer_offset[tn.layer.index]),
                 static_cast<Eigen::Index>(layer.parameter_count())) += g.flat();
    Matrix& pa = frame_adj_at(fr.parent);
    for (std::size_t i = 0; i < sc.size(); ++i) pa.row(sc[i]) += g.x.row(static_cast<Eigen::Index>(i));
  }

  int eval(NodeId id, int frame) {
    const std::uint64_t key = (static_cast<std::uint64_t>(frame) << 32) | id.index;
    if (auto it = memo_.find(key); it != memo_.end()) return it->second;

    Activation act{id, frame, Vector(), {}, Matrix()};
    std::visit(overloaded{
                   [&](const LeafNode&) {
                     const Matrix& x = frames_[static_cast<std::size_t>(frame)].x;
                     const std::vector<int>& sc = c_.scope(id);
                     act.value = Vector::Constant(n_, -0.5 * kLogTwoPi * static_cast<double>(sc.size()));
                     for (int v : sc) act.value -= 0.5 * x.row(v).transpose().cwiseAbs2();
                   },
                   [&](const SumNode& s) {
                     for (NodeId ch : s.children) act.kids.push_back(eval(ch, frame));
                     const Vector& lw = log_w_[id.index];
                     auto term = [&](std::size_t k) {
                       return acts_[static_cast<std::size_t>(act.kids[k])].value.array() + lw[static_cast<Eigen::Index>(k)];
                     };
                     Eigen::ArrayXd hi = Eigen::ArrayXd::Constant(n_, kNegInf);
                     for (std::size_t k = 0; k < act.kids.size(); ++k) hi = hi.max(term(k));
                     hi = hi.isFinite().select(hi, 0.0);
                     Eigen::ArrayXd acc = Eigen::ArrayXd::Zero(n_);
                     for (std::size_t k = 0; k < act.kids.size(); ++k) acc += (term(k) - hi).exp();
                     act.value = (hi + acc.log()).matrix();
                   },
                   [&](const ProductNode& p) {
                     act.value = Vector::Zero(n_);
                     for (NodeId ch : p.children) {
                       act.kids.push_back(eval(ch, frame));
                       act.value += acts_[static_cast<std::size_t>(act.kids.back())].value;
                     }
                   },
                   [&](const TransformNode& t) {
                     const std::vector<int>& sc = c_.scope(id);
                     const SvdAffine& layer = c_.layer(t.layer);
                     Matrix xs = gather_rows(frames_[static_cast<std::size_t>(frame)].x, sc);
                     const AffineForward f = affine_forward(layer, xs);
                     const Vector logdet = affine_logdet(layer, f.o);
                     Matrix child_x = frames_[static_cast<std::size_t>(frame)].x;
                     for (std::size_t i = 0; i < sc.size(); ++i) child_x.row(sc[i]) = f.y.row(static_cast<Eigen::Index>(i));
                     const int child_frame = static_cast<int>(frames_.size());
                     // Creator index is known once this activation is pushed.
                     frames_.push_back({std::move(child_x), frame, -1});
                     if (record_) {
                       events_.push_back(-1 - child_frame);
                       act.x_scope = std::move(xs);
                     }
                     act.kids.push_back(eval(t.child, child_frame));
                     act.value = acts_[static_cast<std::size_t>(act.kids.back())].value + logdet;
                   },
               },
               c_.node(id));

    const int index = static_cast<int>(acts_.size());
    if (std::holds_alternative<TransformNode>(c_.node(id)))
      frames_[static_cast<std::size_t>(acts_[static_cast<std::size_t>(act.kids.front())].frame)].creator = index;
    acts_.push_back(std::move(act));
    if (record_) events_.push_back(index);
    memo_.emplace(key, index);
    if (!record_ && std::holds_alternative<TransformNode>(c_.node(id))) {
      // Forward-only: the child frame is no longer needed.
      auto& fr = frames_[static_cast<std::size_t>(acts_[static_cast<std::size_t>(acts_.back().kids.front())].frame)];
      fr.x.resize(0, 0);
    }
    return index;
  }

  const Circuit& c_;
  Eigen::Index n_;
  bool record_;
  std::vector<Vector> log_w_;
  std::vector<Frame> frames_;
  std::vector<Activation> acts_;
  std::vector<int> events_;  // >= 0: activation; < 0: opening of frame (-1 - e)
  std::unordered_map<std::uint64_t, int> memo_;
  int root_ = -1;
};

}  // namespace

Vector logpdf(const Circuit& circuit, const Matrix& x) {
  check_batch(circuit, x);
  if (x.rows() == 0) return Vector();
  return Evaluation(circuit, x, /*record=*/false).value();
}

LogpdfAndGrad logpdf_and_grad(const Circuit& circuit, const Matrix& x, const Vector* row_weights) {
  check_batch(circuit, x);
  if (row_weights && row_weights->size() != x.rows())
    throw DimensionError("logpdf_and_grad: row weights", static_cast<long>(x.rows()), static_cast<long>(row_weights->size()));
  if (x.rows() == 0) return {Vector(), Vector::Zero(static_cast<Eigen::Index>(circuit.parameter_count()))};
  Evaluation ev(circuit, x, /*record=*/true);
  LogpdfAndGrad out;
  out.logpdf = ev.value();
  out.gradient = ev.backward(row_weights ? *row_weights : Vector::Ones(x.rows()));
  return out;
}

Vector grad(const Circuit& circuit, const Matrix& x) { return logpdf_and_grad(circuit, x).gradient; }

// Sampling -------------------------------------------------------------------

namespace {

constexpr int kMaxRangeRetries = 10000;

class Sampler {
 public:
  Sampler(const Circuit& c, std::mt19937_64& rng, std::size_t n)
      : c_(c), rng_(rng), x_(Matrix::Zero(c.dim(), static_cast<Eigen::Index>(n))), latent_(x_),
        choices_(Eigen::MatrixXi::Constant(static_cast<Eigen::Index>(c.node_count()), static_cast<Eigen::Index>(n), -1)) {
    std::vector<int> cols(n);
    std::iota(cols.begin(), cols.end(), 0);
    if (n > 0) draw(*c.root(), cols);
  }

  SampleTrace result() && { return {x_.transpose(), latent_.transpose(), std::move(choices_)}; }

 private:
  void draw(NodeId id, const std::vector<int>& cols) {
    std::visit(overloaded{
                   [&](const LeafNode&) {
                     const auto& sc = c_.scope(id);
                     for (int col : cols)
                       for (int v : sc) {
                         const double z = normal_(rng_);
                         x_(v, col) = z;
                         latent_(v, col) = z;
                       }
                   },
                   [&](const SumNode& s) {
                     const Vector w = c_.log_weights(id).array().exp();
                     std::vector<std::vector<int>> groups(s.children.size());
                     for (int col : cols) {
                       const double u = uniform_(rng_);
                       std::size_t k = 0;
                       double acc = w[0];
                       while (k + 1 < s.children.size() && u >= acc) acc += w[static_cast<Eigen::Index>(++k)];
                       choices_(id.index, col) = static_cast<int>(k);
                       groups[k].push_back(col);
                     }
                     for (std::size_t k = 0; k < groups.size(); ++k)
                       if (!groups[k].empty()) draw(s.children[k], groups[k]);
                   },
                   [&](const ProductNode& p) {
                     for (NodeId ch : p.children) draw(ch, cols);
                   },
                   [&](const TransformNode& t) {
                     const auto& sc = c_.scope(id);
                     const SvdAffine& layer = c_.layer(t.layer);
                     const Nonlinearity& act = layer.nonlinearity();
                     std::vector<int> pending = cols;
                     for (int attempt = 0; !pending.empty(); ++attempt) {
                       if (attempt == kMaxRangeRetries)
                         throw DomainError("sample: child draws of node " + std::to_string(id.index) +
                                           " keep falling outside the range of its " + act.name() + " layer");
                       draw(t.child, pending);
                       std::vector<int> rejected;
                       for (int col : pending)
                         for (int v : sc)
                           if (!act.in_range(x_(v, col))) {
                             rejected.push_back(col);
                             break;
                           }
                       pending = std::move(rejected);
                     }
                     Matrix z(static_cast<Eigen::Index>(sc.size()), static_cast<Eigen::Index>(cols.size()));
                     for (std::size_t j = 0; j < cols.size(); ++j)
                       for (std::size_t i = 0; i < sc.size(); ++i) z(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = x_(sc[i], cols[j]);
                     const Matrix xs = affine_inverse(layer, z);
                     for (std::size_t j = 0; j < cols.size(); ++j)
                       for (std::size_t i = 0; i < sc.size(); ++i) x_(sc[i], cols[j]) = xs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
                   },
               },
               c_.node(id));
  }

  const Circuit& c_;
  std::mt19937_64& rng_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
  Matrix x_;
  Matrix latent_;
  Eigen::MatrixXi choices_;
};

void encode(const Circuit& c, NodeId id, Vector& x, const Eigen::Ref<const Eigen::VectorXi>& choices, Vector& latent) {
  std::visit(overloaded{
                 [&](const LeafNode&) {
                   for (int v : c.scope(id)) latent[v] = x[v];
                 },
                 [&](const SumNode& s) {
                   const int k = choices[id.index];
                   if (k < 0 || static_cast<std::size_t>(k) >= s.children.size())
                     throw InvalidArgument("latent_of: no valid choice recorded for sum " + node_name(id));
                   encode(c, s.children[static_cast<std::size_t>(k)], x, choices, latent);
                 },
                 [&](const ProductNode& p) {
                   for (NodeId ch : p.children) encode(c, ch, x, choices, latent);
                 },
                 [&](const TransformNode& t) {
                   const auto& sc = c.scope(id);
                   Matrix xs(static_cast<Eigen::Index>(sc.size()), 1);
                   for (std::size_t i = 0; i < sc.size(); ++i) xs(static_cast<Eigen::Index>(i), 0) = x[sc[i]];
                   const AffineForward f = affine_forward(c.layer(t.layer), xs);
                   Vector y = x;
                   for (std::size_t i = 0; i < sc.size(); ++i) y[sc[i]] = f.y(static_cast<Eigen::Index>(i), 0);
                   encode(c, t.child, y, choices, latent);
                 },
             },
             c.node(id));
}

}  // namespace

Matrix sample(const Circuit& circuit, std::mt19937_64& rng, std::size_t n) {
  return sample_traced(circuit, rng, n).x;
}

SampleTrace sample_traced(const Circuit& circuit, std::mt19937_64& rng, std::size_t n) {
  check_evaluable(circuit);
  return Sampler(circuit, rng, n).result();
}

Vector latent_of(const Circuit& circuit, const Vector& x, const Eigen::Ref<const Eigen::VectorXi>& choices) {
  check_evaluable(circuit);
  if (x.size() != circuit.dim()) throw DimensionError("latent_of: sample length", circuit.dim(), static_cast<long>(x.size()));
  if (choices.size() != static_cast<Eigen::Index>(circuit.node_count()))
    throw DimensionError("latent_of: choice vector length", static_cast<long>(circuit.node_count()), static_cast<long>(choices.size()));
  Vector work = x;
  Vector latent = Vector::Zero(circuit.dim());
  encode(circuit, *circuit.root(), work, choices, latent);
  return latent;
}

// Induced trees and mixture expansion ---------------------------------------

namespace {

std::uint64_t count_trees(const Circuit& c, NodeId id, std::vector<std::optional<std::uint64_t>>& memo) {
  if (memo[id.index]) return *memo[id.index];
  const std::uint64_t n = std::visit(overloaded{
                                         [](const LeafNode&) -> std::uint64_t { return 1; },
                                         [&](const SumNode& s) {
                                           std::uint64_t total = 0;
                                           for (NodeId ch : s.children) total = sat_add(total, count_trees(c, ch, memo));
                                           return total;
                                         },
                                         [&](const ProductNode& p) {
                                           std::uint64_t total = 1;
                                           for (NodeId ch : p.children) total = sat_mul(total, count_trees(c, ch, memo));
                                           return total;
                                         },
                                         [&](const TransformNode& t) { return count_trees(c, t.child, memo); },
                                     },
                                     c.node(id));
  memo[id.index] = n;
  return n;
}

using Components = std::vector<MixtureComponent>;

const Components& expand(const Circuit& c, NodeId id, std::vector<std::optional<Components>>& memo,
                         std::vector<std::optional<Matrix>>& inverse_weights) {
  if (memo[id.index]) return *memo[id.index];
  Components out;
  std::visit(overloaded{
                 [&](const LeafNode&) {
                   const auto k = static_cast<Eigen::Index>(c.scope(id).size());
                   out.push_back({0.0, Vector::Zero(k), Matrix::Identity(k, k)});
                 },
                 [&](const SumNode& s) {
                   const Vector lw = c.log_weights(id);
                   for (std::size_t k = 0; k < s.children.size(); ++k) {
                     for (const auto& comp : expand(c, s.children[k], memo, inverse_weights)) {
                       out.push_back(comp);
                       out.back().log_weight += lw[static_cast<Eigen::Index>(k)];
                     }
                   }
                 },
                 [&](const ProductNode& p) {
                   const auto& sc = c.scope(id);
                   const auto m = static_cast<Eigen::Index>(sc.size());
                   out.push_back({0.0, Vector::Zero(m), Matrix::Zero(m, m)});
                   for (NodeId ch : p.children) {
                     const auto& csc = c.scope(ch);
                     std::vector<Eigen::Index> pos(csc.size());
                     for (std::size_t i = 0; i < csc.size(); ++i)
                       pos[i] = std::lower_bound(sc.begin(), sc.end(), csc[i]) - sc.begin();
                     const Components& kids = expand(c, ch, memo, inverse_weights);
                     Components next;
                     next.reserve(out.size() * kids.size());
                     for (const auto& acc : out) {
                       for (const auto& comp : kids) {
                         MixtureComponent joined = acc;
                         joined.log_weight += comp.log_weight;
                         for (std::size_t a = 0; a < pos.size(); ++a) {
                           joined.mean[pos[a]] = comp.mean[static_cast<Eigen::Index>(a)];
                           for (std::size_t b = 0; b < pos.size(); ++b)
                             joined.cov(pos[a], pos[b]) = comp.cov(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
                         }
                         next.push_back(std::move(joined));
                       }
                     }
                     out = std::move(next);
                   }
                 },
                 [&](const TransformNode& t) {
                   const SvdAffine& layer = c.layer(t.layer);
                   if (!layer.nonlinearity().is_identity())
                     throw NotTractable(node_name(id) + " applies a " + layer.nonlinearity().name() +
                                            " nonlinearity; closed-form mixture expansion needs affine transformations",
                                        id.index);
                   auto& w_inv = inverse_weights[t.layer.index];
                   if (!w_inv) w_inv = layer.inverse_weight();
                   for (const auto& comp : expand(c, t.child, memo, inverse_weights)) {
                     MixtureComponent pulled{comp.log_weight, *w_inv * (comp.mean - layer.bias()),
                                             *w_inv * comp.cov * w_inv->transpose()};
                     pulled.cov = 0.5 * (pulled.cov + pulled.cov.transpose()).eval();
                     out.push_back(std::move(pulled));
                   }
                 },
             },
             c.node(id));
  memo[id.index] = std::move(out);
  return *memo[id.index];
}

}  // namespace

std::uint64_t count_induced_trees(const Circuit& circuit) {
  check_evaluable(circuit);
  return count_induced_trees(circuit, *circuit.root());
}

std::uint64_t count_induced_trees(const Circuit& circuit, NodeId node) {
  check_evaluable(circuit);
  std::vector<std::optional<std::uint64_t>> memo(circuit.node_count());
  return count_trees(circuit, node, memo);
}

GaussianMixture to_gmm(const Circuit& circuit, std::uint64_t cap) {
  check_evaluable(circuit);
  return to_gmm(circuit, *circuit.root(), cap);
}

GaussianMixture to_gmm(const Circuit& circuit, NodeId node, std::uint64_t cap) {
  check_evaluable(circuit);
  // Reject nonlinear layers before sizing the expansion.
  for (NodeId id : circuit.topological_order())
    if (const auto* t = std::get_if<TransformNode>(&circuit.node(id)))
      if (!circuit.layer(t->layer).nonlinearity().is_identity())
        throw NotTractable(node_name(id) + " applies a " + circuit.layer(t->layer).nonlinearity().name() +
                               " nonlinearity; closed-form mixture expansion needs affine transformations",
                           id.index);
  const std::uint64_t trees = count_induced_trees(circuit, node);
  if (trees > cap) throw ExpansionCapExceeded(trees, cap);
  std::vector<std::optional<Components>> memo(circuit.node_count());
  std::vector<std::optional<Matrix>> inverse_weights(circuit.layer_count());
  GaussianMixture gmm;
  gmm.components = expand(circuit, node, memo, inverse_weights);
  return gmm;
}

// Unsharing ------------------------------------------------------------------

Circuit unshared_copy(const Circuit& circuit, std::vector<std::size_t>* param_origin) {
  check_evaluable(circuit);
  Circuit out(circuit.dim());
  std::vector<std::uint32_t> sum_origin;    // new node -> original node (sums only)
  std::vector<std::uint32_t> layer_origin;  // new layer -> original layer
  std::vector<std::uint32_t> node_origin;

  auto copy = [&](auto& self, NodeId id) -> NodeId {
    const Node& node = circuit.node(id);
    NodeId result = std::visit(overloaded{
                                   [&](const LeafNode& l) { return out.add_leaf(l.scope); },
                                   [&](const SumNode& s) {
                                     std::vector<NodeId> kids;
                                     for (NodeId ch : s.children) kids.push_back(self(self, ch));
                                     return out.add_sum(std::move(kids), s.logits);
                                   },
                                   [&](const ProductNode& p) {
                                     std::vector<NodeId> kids;
                                     for (NodeId ch : p.children) kids.push_back(self(self, ch));
                                     return out.add_product(std::move(kids));
                                   },
                                   [&](const TransformNode& t) {
                                     const NodeId kid = self(self, t.child);
                                     const LayerId l = out.add_layer(circuit.layer(t.layer));
                                     layer_origin.push_back(t.layer.index);
                                     return out.add_transform(kid, l);
                                   },
                               },
                               node);
    node_origin.resize(out.node_count());
    node_origin[result.index] = id.index;
    return result;
  };
  out.set_root(copy(copy, *circuit.root()));
  const ValidationReport report = out.validate();
  if (!report.ok()) throw Error("unshared_copy produced an invalid circuit: " + report.summary());

  if (param_origin) {
    param_origin->assign(out.parameter_count(), 0);
    for (std::size_t i = 0; i < out.node_count(); ++i) {
      const NodeId id{static_cast<std::uint32_t>(i)};
      if (const auto* s = std::get_if<SumNode>(&out.node(id))) {
        const std::size_t dst = out.sum_parameter_offset(id);
        const std::size_t src = circuit.sum_parameter_offset(NodeId{node_origin[i]});
        for (Eigen::Index k = 0; k < s->logits.size(); ++k)
          (*param_origin)[dst + static_cast<std::size_t>(k)] = src + static_cast<std::size_t>(k);
      }
    }
    for (std::size_t i = 0; i < out.layer_count(); ++i) {
      const std::size_t dst = out.layer_parameter_offset(LayerId{static_cast<std::uint32_t>(i)});
      const std::size_t src = circuit.layer_parameter_offset(LayerId{layer_origin[i]});
      for (std::size_t k = 0; k < out.layer(LayerId{static_cast<std::uint32_t>(i)}).parameter_count(); ++k)
        (*param_origin)[dst + k] = src + k;
    }
  }
  return out;
}

}  // namespace sptn
