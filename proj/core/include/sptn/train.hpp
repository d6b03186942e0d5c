#pragma once

// Maximum-likelihood training with Adam, random architectures over the model
// grids, and validation-based model selection.

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "sptn/circuit.hpp"

namespace sptn {

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 100;
  std::size_t iterations = 10000;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  /// Non-finite batches tolerated before training aborts.
  std::size_t failure_budget = 10;

  /// Throws InvalidArgument on out-of-range settings.
  void check() const;
};

struct AdamState {
  Vector m;
  Vector v;
  std::uint64_t t = 0;

  AdamState() = default;
  explicit AdamState(std::size_t n) : m(Vector::Zero(static_cast<Eigen::Index>(n))), v(m) {}
};

/// Mean of -logpdf over the rows of `batch`.
double nll_loss(const Circuit& circuit, const Matrix& batch);

/// One bias-corrected Adam update of `params` in place.
void adam_update(AdamState& state, Vector& params, const Vector& grads, const TrainConfig& config);

/// Adam update of all circuit parameters followed by the diagonal-floor
/// projection. `grads` is the gradient of the loss being minimised. Throws
/// DomainError naming the parameter block that holds a non-finite entry.
void adam_step(AdamState& state, Circuit& circuit, const Vector& grads, const TrainConfig& config);

struct TrainResult {
  /// Minibatch loss per iteration (non-finite entries mark skipped batches).
  std::vector<double> loss_trace;
  std::size_t skipped_batches = 0;
};

/// Minibatch Adam on `data` (n x dim), reshuffled every epoch. Batches with a
/// non-finite loss or gradient are skipped; exceeding the failure budget
/// throws Error.
TrainResult train(Circuit& circuit, const Matrix& data, const TrainConfig& config);

// Architectures --------------------------------------------------------------

enum class Family { gmm, spn, gsptn };
enum class Sharing { none, transform_only, sum_and_transform };

std::string to_string(Family f);
std::string to_string(Sharing s);
std::string to_string(OrthogonalFactor::Kind k);
std::string to_string(Nonlinearity::Kind k);
Family parse_family(std::string_view s);
Sharing parse_sharing(std::string_view s);
OrthogonalFactor::Kind parse_parametrization(std::string_view s);
Nonlinearity::Kind parse_nonlinearity(std::string_view s);
Nonlinearity make_nonlinearity(Nonlinearity::Kind k);

struct ArchSpec {
  Family family = Family::gmm;
  /// GMM components or sum-node children.
  int children = 2;
  /// SPN only: blocks per product node.
  int partitions = 1;
  /// SPN and GSPTN depth.
  int layers = 1;
  Sharing sharing = Sharing::none;
  OrthogonalFactor::Kind parametrization = OrthogonalFactor::Kind::givens;
  Nonlinearity::Kind nonlinearity = Nonlinearity::Kind::identity;
  std::uint64_t permutation_seed = 0;
  std::uint64_t init_seed = 0;

  std::string describe() const;
  friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

/// Initial bias spread; zero biases would leave every component identical.
inline constexpr double kInitBiasStd = 1.0;
inline constexpr double kInitAngleStd = 0.01;

/// Fixes any of the sampled options and bounds the model size.
struct ArchConstraints {
  std::optional<Sharing> sharing;
  std::optional<OrthogonalFactor::Kind> parametrization;
  std::optional<Nonlinearity::Kind> nonlinearity;
  std::optional<std::size_t> max_params;
  std::size_t max_nodes = 100000;
};

/// Grid values per family.
const std::vector<int>& gmm_component_grid();
const std::vector<int>& gsptn_children_grid();

struct ArchSize {
  double nodes = 0;
  double params = 0;
};

/// Node and free-parameter counts of build_circuit(spec, dim) without
/// building it.
ArchSize estimate_size(const ArchSpec& spec, int dim);

/// Deterministic in `spec`. The result is validated.
Circuit build_circuit(const ArchSpec& spec, int dim);

struct SampledArchitecture {
  ArchSpec spec;
  Circuit circuit;
};

/// Uniform draw over the family grid, redrawn until the constraints and the
/// data dimension admit it. Throws InvalidArgument if no admissible
/// architecture turns up.
SampledArchitecture sample_architecture(Family family, int dim, std::mt19937_64& rng,
                                        const ArchConstraints& constraints = {});
ArchSpec sample_spec(Family family, int dim, std::mt19937_64& rng, const ArchConstraints& constraints = {});

// Random search --------------------------------------------------------------

enum class Criterion { valid_loglik, valid_auc };
std::string to_string(Criterion c);
Criterion parse_criterion(std::string_view s);

struct SearchBudget {
  std::size_t max_architectures = 100;
  std::optional<std::chrono::steady_clock::duration> wall_clock;
};

struct SearchConfig {
  SearchBudget budget;
  Criterion criterion = Criterion::valid_loglik;
  TrainConfig train;
  ArchConstraints constraints;
  std::uint64_t seed = 0;
  unsigned threads = 0;  ///< 0: worker_threads()
};

struct SearchEntry {
  std::size_t index = 0;
  ArchSpec spec;
  std::size_t parameter_count = 0;
  bool ok = false;
  std::string error;
  double criterion = 0;
  double train_loglik = 0;
  double valid_loglik = 0;
  std::optional<double> valid_auc;
  double final_loss = 0;
  double seconds = 0;
};

struct SearchResult {
  Circuit best;
  SearchEntry best_entry;
  TrainResult best_train;
  /// Sorted by criterion, best first; failed runs last.
  std::vector<SearchEntry> leaderboard;
};

/// Trains `budget.max_architectures` sampled architectures (in parallel) on
/// `train_x` and ranks them on the validation split. valid_auc needs labels
/// with both classes. Deterministic given the seed unless the wall-clock
/// budget cuts the search short.
SearchResult random_search(Family family, const Matrix& train_x, const Matrix& valid_x,
                           const std::optional<Eigen::VectorXi>& valid_labels, const SearchConfig& config);

}  // namespace sptn
