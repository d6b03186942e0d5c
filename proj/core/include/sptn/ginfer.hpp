#pragma once

// Exact marginals and conditionals of circuits built from Gaussian leaves and
// affine transformations. Affine maps are pushed down to the leaves, where
// marginalization drops rows and columns of each Gaussian.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "sptn/circuit.hpp"

namespace sptn {

/// Which variables carry an observed value; the rest are integrated out.
class EvidenceMask {
 public:
  explicit EvidenceMask(std::vector<bool> observed);

  /// Comma-separated per-variable flags: 'o' observed, 'm' marginalized.
  static EvidenceMask parse(std::string_view text);
  static EvidenceMask all_observed(int dim);
  static EvidenceMask all_marginalized(int dim);

  int dim() const noexcept { return static_cast<int>(observed_.size()); }
  bool observed(int var) const { return observed_.at(static_cast<std::size_t>(var)); }
  const std::vector<int>& observed_indices() const noexcept { return obs_; }
  const std::vector<int>& marginalized_indices() const noexcept { return marg_; }
  std::string to_string() const;

  friend bool operator==(const EvidenceMask& a, const EvidenceMask& b) { return a.observed_ == b.observed_; }

 private:
  std::vector<bool> observed_;
  std::vector<int> obs_;
  std::vector<int> marg_;
};

/// Batch of queries sharing one mask. Marginalized columns of `values` are
/// ignored.
struct EvidenceQuery {
  EvidenceMask mask;
  Matrix values;  ///< n x dim
};

struct InferenceOptions {
  std::uint64_t expansion_cap = kDefaultExpansionCap;
};

struct TractabilityReport {
  enum class Kind { fully, with_expansion, no };
  Kind kind = Kind::fully;
  /// Largest local mixture expansion required (with_expansion only).
  std::uint64_t components = 0;
  /// First node with a nonlinear layer (no only).
  std::optional<std::uint32_t> offending_node;
  std::string message;
};

std::string to_string(TractabilityReport::Kind kind);

TractabilityReport is_tractable(const Circuit& circuit);

/// log of the density of the observed variables, per row.
Vector marginal_logpdf(const Circuit& circuit, const Matrix& x, const EvidenceMask& mask,
                       const InferenceOptions& options = {});
Vector marginal_logpdf(const Circuit& circuit, const EvidenceQuery& query,
                       const InferenceOptions& options = {});

/// log p(x_A | x_B) where A u B are the observed variables of `joint` and B
/// those of `evidence`. B must be a subset of A u B.
Vector conditional_logpdf(const Circuit& circuit, const Matrix& x, const EvidenceMask& joint,
                          const EvidenceMask& evidence, const InferenceOptions& options = {});

}  // namespace sptn
