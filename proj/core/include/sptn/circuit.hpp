#pragma once

// Sum-product-transform circuits: a rooted DAG of sum, product,
// transformation and standard-normal leaf nodes.
//
// Data batches passed to circuit-level operations are n x dim matrices with
// one sample per row.

#include <Eigen/Core>

#include <compare>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "sptn/affine.hpp"
#include "sptn/gaussian.hpp"

namespace sptn {

struct NodeId {
  std::uint32_t index;
  friend auto operator<=>(const NodeId&, const NodeId&) = default;
};

struct LayerId {
  std::uint32_t index;
  friend auto operator<=>(const LayerId&, const LayerId&) = default;
};

/// Mixture of children; weights are softmax(logits).
struct SumNode {
  std::vector<NodeId> children;
  Vector logits;
};

struct ProductNode {
  std::vector<NodeId> children;
};

/// Density child(g(x)) |det J_g(x)| where g is the referenced layer. Several
/// transformation nodes may reference the same layer.
struct TransformNode {
  NodeId child;
  LayerId layer;
};

/// N(0, I) over `scope`.
struct LeafNode {
  std::vector<int> scope;
};

using Node = std::variant<SumNode, ProductNode, TransformNode, LeafNode>;

inline constexpr std::uint64_t kDefaultExpansionCap = 100000;

struct Violation {
  enum class Kind {
    missing_root,
    dangling_child,
    cycle,
    empty_node,
    leaf_scope,
    completeness,
    decomposability,
    weights,
    transform_layer,
    root_scope,
  };
  Kind kind;
  std::vector<NodeId> nodes;
  std::string message;
};

struct ValidationReport {
  std::vector<Violation> violations;

  bool ok() const noexcept { return violations.empty(); }
  bool has(Violation::Kind kind) const noexcept;
  std::string summary() const;
};

/// Named slice of the flat parameter vector.
struct ParamBlock {
  std::string name;
  std::size_t offset;
  std::size_t size;
};

class Circuit {
 public:
  explicit Circuit(int dim);

  int dim() const noexcept { return dim_; }

  NodeId add_leaf(std::vector<int> scope);
  /// Uniform weights.
  NodeId add_sum(std::vector<NodeId> children);
  NodeId add_sum(std::vector<NodeId> children, Vector logits);
  NodeId add_product(std::vector<NodeId> children);
  NodeId add_transform(NodeId child, LayerId layer);
  NodeId add_node(Node node);
  LayerId add_layer(SvdAffine layer);
  void set_root(NodeId root);

  std::size_t node_count() const noexcept { return nodes_.size(); }
  std::size_t layer_count() const noexcept { return layers_.size(); }
  const Node& node(NodeId id) const;
  const SvdAffine& layer(LayerId id) const;
  std::optional<NodeId> root() const noexcept { return root_; }

  /// Checks acyclicity, scopes, completeness, decomposability, weights and
  /// transformation arity. On success the circuit becomes evaluable until the
  /// next structural change.
  ValidationReport validate();
  bool validated() const noexcept { return validated_; }
  /// Sorted variable indices; requires validation.
  const std::vector<int>& scope(NodeId id) const;
  /// Nodes reachable from the root, children before parents; requires
  /// validation.
  const std::vector<NodeId>& topological_order() const;

  /// Layout: logits of every sum node (by id), then the parameters of every
  /// layer (by id). Shared nodes and layers appear once.
  std::vector<ParamBlock> parameter_blocks() const;
  std::size_t parameter_count() const;
  Vector parameters() const;
  /// Structural validation is preserved.
  void set_parameters(const Vector& values);
  /// Re-establishes |d_ii| >= floor in every layer.
  void project_parameters(double diag_floor = kDiagFloor);
  Vector log_weights(NodeId sum) const;

  std::size_t sum_parameter_offset(NodeId sum) const;
  std::size_t layer_parameter_offset(LayerId layer) const;

 private:
  void invalidate() noexcept { validated_ = false; }

  int dim_;
  std::vector<Node> nodes_;
  std::vector<SvdAffine> layers_;
  std::optional<NodeId> root_;
  bool validated_ = false;
  std::vector<std::vector<int>> scopes_;
  std::vector<NodeId> topo_;
};

ValidationReport validate(Circuit& circuit);

/// log p(x) per row. Requires a validated circuit and finite input.
Vector logpdf(const Circuit& circuit, const Matrix& x);

struct LogpdfAndGrad {
  Vector logpdf;
  /// d/dtheta sum_j w_j log p(x_j) in the Circuit parameter layout.
  Vector gradient;
};

/// Reverse-mode pass over the evaluation. `row_weights` defaults to ones.
LogpdfAndGrad logpdf_and_grad(const Circuit& circuit, const Matrix& x,
                              const Vector* row_weights = nullptr);

/// Gradient of sum_j log p(x_j).
Vector grad(const Circuit& circuit, const Matrix& x);

Matrix sample(const Circuit& circuit, std::mt19937_64& rng, std::size_t n);

/// Sampling record: the leaf draws behind each sample and the child chosen at
/// every visited sum node (row = node index, -1 where not visited).
struct SampleTrace {
  Matrix x;       ///< n x dim samples
  Matrix latent;  ///< n x dim standard-normal leaf draws
  Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic> choices;  ///< node_count x n
};

SampleTrace sample_traced(const Circuit& circuit, std::mt19937_64& rng, std::size_t n);

/// Maps one sample forward along the induced tree selected by `choices`
/// (a column of SampleTrace::choices) back to its leaf values.
Vector latent_of(const Circuit& circuit, const Vector& x,
                 const Eigen::Ref<const Eigen::VectorXi>& choices);

/// Saturates at UINT64_MAX.
std::uint64_t count_induced_trees(const Circuit& circuit);
std::uint64_t count_induced_trees(const Circuit& circuit, NodeId node);

/// Explicit mixture over induced trees. Requires identity nonlinearities.
GaussianMixture to_gmm(const Circuit& circuit, std::uint64_t cap = kDefaultExpansionCap);
/// Mixture for the sub-circuit rooted at `node`, in the coordinates of
/// scope(node).
GaussianMixture to_gmm(const Circuit& circuit, NodeId node, std::uint64_t cap = kDefaultExpansionCap);

/// Deep copy in which every shared node and layer is duplicated per parent.
/// `param_origin[i]` receives the index in `circuit`'s layout that parameter
/// i of the copy was cloned from. The result is validated.
Circuit unshared_copy(const Circuit& circuit, std::vector<std::size_t>* param_origin = nullptr);

}  // namespace sptn
