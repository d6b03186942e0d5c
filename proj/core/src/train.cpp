#include "sptn/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include "sptn/error.hpp"
#include "sptn/metrics.hpp"
#include "sptn/parallel.hpp"

namespace sptn {

void TrainConfig::check() const {
  if (batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
  if (iterations < 1) throw InvalidArgument("iterations must be >= 1");
  if (!(learning_rate > 0) || !std::isfinite(learning_rate)) throw InvalidArgument("learning rate must be positive");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw InvalidArgument("Adam betas must lie in [0, 1)");
  if (!(epsilon > 0)) throw InvalidArgument("Adam epsilon must be positive");
}

double nll_loss(const Circuit& circuit, const Matrix& batch) {
  if (batch.rows() == 0) throw InvalidArgument("nll_loss: empty batch");
  return -logpdf(circuit, batch).mean();
}

void adam_update(AdamState& state, Vector& params, const Vector& grads, const TrainConfig& config) {
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw DimensionError("adam state size", static_cast<long>(params.size()), static_cast<long>(state.m.size()));
  if (grads.size() != params.size())
    throw DimensionError("adam gradient size", static_cast<long>(params.size()), static_cast<long>(grads.size()));
  ++state.t;
  state.m = config.beta1 * state.m + (1.0 - config.beta1) * grads;
  state.v = config.beta2 * state.v + (1.0 - config.beta2) * grads.cwiseAbs2();
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.t));
  params.array() -= config.learning_rate * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + config.epsilon);
}

void adam_step(AdamState& state, Circuit& circuit, const Vector& grads, const TrainConfig& config) {
  if (!grads.allFinite()) {
    for (const ParamBlock& b : circuit.parameter_blocks())
      if (b.offset + b.size <= static_cast<std::size_t>(grads.size()) &&
          !grads.segment(static_cast<Eigen::Index>(b.offset), static_cast<Eigen::Index>(b.size)).allFinite())
        throw DomainError("adam_step: non-finite gradient in parameter block " + b.name);
    throw DomainError("adam_step: non-finite gradient");
  }
  Vector params = circuit.parameters();
  if (state.m.size() == 0 && state.t == 0) state = AdamState(static_cast<std::size_t>(params.size()));
  adam_update(state, params, grads, config);
  circuit.set_parameters(params);
  circuit.project_parameters();
}

TrainResult train(Circuit& circuit, const Matrix& data, const TrainConfig& config) {
  config.check();
  if (data.rows() == 0) throw InvalidArgument("train: empty dataset");
  if (!circuit.validated()) throw NotValidated();
  const auto n = static_cast<std::size_t>(data.rows());
  const std::size_t bs = std::min(config.batch_size, n);
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = n;  // forces a shuffle before the first batch

  TrainResult result;
  result.loss_trace.reserve(config.iterations);
  AdamState state(circuit.parameter_count());
  Matrix batch(static_cast<Eigen::Index>(bs), data.cols());
  for (std::size_t it = 0; it < config.iterations; ++it) {
    if (bs == n) {
      batch = data;
    } else {
      if (cursor + bs > n) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      for (std::size_t i = 0; i < bs; ++i) batch.row(static_cast<Eigen::Index>(i)) = data.row(static_cast<Eigen::Index>(order[cursor + i]));
      cursor += bs;
    }
    LogpdfAndGrad lg = logpdf_and_grad(circuit, batch);
    const double loss = -lg.logpdf.mean();
    result.loss_trace.push_back(loss);
    if (!std::isfinite(loss) || !lg.gradient.allFinite()) {
      if (++result.skipped_batches > config.failure_budget)
        throw Error("training aborted after " + std::to_string(result.skipped_batches) + " non-finite batches");
      continue;
    }
    lg.gradient *= -1.0 / static_cast<double>(bs);
    adam_step(state, circuit, lg.gradient, config);
  }
  return result;
}

// Names ----------------------------------------------------------------------

namespace {

template <typename E, std::size_t N>
E parse_enum(std::string_view s, const std::pair<std::string_view, E> (&table)[N], std::string_view what) {
  for (const auto& [name, value] : table)
    if (name == s) return value;
  std::string options;
  for (const auto& [name, value] : table) options += (options.empty() ? "" : ", ") + std::string(name);
  throw InvalidArgument("unknown " + std::string(what) + " '" + std::string(s) + "' (expected one of: " + options + ")");
}

constexpr std::pair<std::string_view, Family> kFamilies[] = {{"gmm", Family::gmm}, {"spn", Family::spn}, {"gsptn", Family::gsptn}};
constexpr std::pair<std::string_view, Sharing> kSharings[] = {
    {"none", Sharing::none}, {"transform_only", Sharing::transform_only}, {"sum_and_transform", Sharing::sum_and_transform}};
constexpr std::pair<std::string_view, OrthogonalFactor::Kind> kParametrizations[] = {
    {"givens", OrthogonalFactor::Kind::givens}, {"householder", OrthogonalFactor::Kind::householder}};
constexpr std::pair<std::string_view, Nonlinearity::Kind> kNonlinearities[] = {
    {"identity", Nonlinearity::Kind::identity}, {"leaky_relu", Nonlinearity::Kind::leaky_relu}, {"selu", Nonlinearity::Kind::selu}};
constexpr std::pair<std::string_view, Criterion> kCriteria[] = {
    {"valid_loglik", Criterion::valid_loglik}, {"valid_auc", Criterion::valid_auc}};

template <typename E, std::size_t N>
std::string name_of(E v, const std::pair<std::string_view, E> (&table)[N]) {
  for (const auto& [name, value] : table)
    if (value == v) return std::string(name);
  return "unknown";
}

}  // namespace

std::string to_string(Family f) { return name_of(f, kFamilies); }
std::string to_string(Sharing s) { return name_of(s, kSharings); }
std::string to_string(OrthogonalFactor::Kind k) { return name_of(k, kParametrizations); }
std::string to_string(Nonlinearity::Kind k) { return name_of(k, kNonlinearities); }
std::string to_string(Criterion c) { return name_of(c, kCriteria); }
Family parse_family(std::string_view s) { return parse_enum(s, kFamilies, "family"); }
Sharing parse_sharing(std::string_view s) { return parse_enum(s, kSharings, "sharing"); }
OrthogonalFactor::Kind parse_parametrization(std::string_view s) { return parse_enum(s, kParametrizations, "parametrization"); }
Nonlinearity::Kind parse_nonlinearity(std::string_view s) {
  if (s == "leaky-relu") return Nonlinearity::Kind::leaky_relu;
  return parse_enum(s, kNonlinearities, "nonlinearity");
}
Criterion parse_criterion(std::string_view s) { return parse_enum(s, kCriteria, "criterion"); }

Nonlinearity make_nonlinearity(Nonlinearity::Kind k) {
  switch (k) {
    case Nonlinearity::Kind::identity: return Nonlinearity::identity();
    case Nonlinearity::Kind::leaky_relu: return Nonlinearity::leaky_relu();
    case Nonlinearity::Kind::selu: return Nonlinearity::selu();
  }
  throw InvalidArgument("unknown nonlinearity");
}

std::string ArchSpec::describe() const {
  std::ostringstream os;
  os << to_string(family) << "(children=" << children;
  if (family == Family::spn) os << ", partitions=" << partitions;
  if (family != Family::gmm) os << ", layers=" << layers;
  if (family == Family::gsptn) os << ", sharing=" << to_string(sharing) << ", nonlinearity=" << to_string(nonlinearity);
  os << ", parametrization=" << to_string(parametrization) << ")";
  return os.str();
}

// Grids and sizes ------------------------------------------------------------

const std::vector<int>& gmm_component_grid() {
  static const std::vector<int> grid{2, 4, 8, 16, 32, 64, 128, 256, 512};
  return grid;
}

const std::vector<int>& gsptn_children_grid() {
  static const std::vector<int> grid{2, 4, 8, 16};
  return grid;
}

namespace {

constexpr int kSpnChildrenMin = 2, kSpnChildrenMax = 128;
constexpr int kSpnPartitionsMax = 32;
constexpr int kSpnLayersMax = 5;
constexpr int kGsptnLayersMax = 3;
constexpr int kMaxDraws = 10000;

double layer_params(int dim, OrthogonalFactor::Kind kind) {
  const double d = dim;
  const double factor = kind == OrthogonalFactor::Kind::givens ? d * (d - 1) / 2 : d * d;
  return 2 * factor + 2 * d;
}

// Contiguous blocks of near-equal size covering `count` entries.
std::vector<int> block_sizes(int count, int blocks) {
  std::vector<int> out(static_cast<std::size_t>(blocks), count / blocks);
  for (int i = 0; i < count % blocks; ++i) ++out[static_cast<std::size_t>(i)];
  return out;
}

struct SpnSizer {
  const ArchSpec& spec;
  std::map<std::pair<int, int>, ArchSize> memo;

  // Sub-circuit over `size` variables starting at SPN level `depth`.
  ArchSize level(int size, int depth) {
    if (auto it = memo.find({size, depth}); it != memo.end()) return it->second;
    const int b = std::min(spec.partitions, size);
    ArchSize child;
    if (b > 1) child.nodes += 1;
    for (int bs : block_sizes(size, b)) {
      ArchSize blk = depth + 1 == spec.layers ? ArchSize{2, layer_params(bs, spec.parametrization)} : level(bs, depth + 1);
      child.nodes += blk.nodes;
      child.params += blk.params;
    }
    ArchSize out{1 + spec.children * child.nodes, spec.children + spec.children * child.params};
    memo[{size, depth}] = out;
    return out;
  }
};

}  // namespace

ArchSize estimate_size(const ArchSpec& spec, int dim) {
  const double n = spec.children;
  const double lp = layer_params(dim, spec.parametrization);
  switch (spec.family) {
    case Family::gmm:
      return {1 + 2 * n, n + n * lp};
    case Family::spn: {
      SpnSizer sizer{spec, {}};
      return sizer.level(dim, 0);
    }
    case Family::gsptn: {
      double sums_tree = 0;  // sum nodes of the unshared tree
      for (int k = 0; k < spec.layers; ++k) sums_tree += std::pow(n, k);
      const double leaves_tree = std::pow(n, spec.layers);
      switch (spec.sharing) {
        case Sharing::none:
          return {sums_tree * (1 + n) + leaves_tree, n * sums_tree + n * sums_tree * lp};
        case Sharing::transform_only:
          return {sums_tree * (1 + n) + leaves_tree, n * sums_tree + spec.layers * n * lp};
        case Sharing::sum_and_transform:
          return {spec.layers * (1 + n) + 1, spec.layers * n + spec.layers * n * lp};
      }
    }
  }
  return {};
}

// Construction ---------------------------------------------------------------

namespace {

class Builder {
 public:
  Builder(const ArchSpec& spec, int dim)
      : spec_(spec), dim_(dim), c_(dim), init_(spec.init_seed), perm_(spec.permutation_seed),
        nl_(make_nonlinearity(spec.nonlinearity)) {}

  Circuit build() && {
    std::vector<int> all(static_cast<std::size_t>(dim_));
    std::iota(all.begin(), all.end(), 0);
    switch (spec_.family) {
      case Family::gmm: {
        std::vector<NodeId> kids;
        for (int k = 0; k < spec_.children; ++k) kids.push_back(gaussian_leaf(all, Nonlinearity::identity()));
        c_.set_root(c_.add_sum(kids));
        break;
      }
      case Family::spn:
        c_.set_root(spn_level(all, 0));
        break;
      case Family::gsptn:
        c_.set_root(gsptn(all));
        break;
    }
    const ValidationReport report = c_.validate();
    if (!report.ok()) throw Error("build_circuit produced an invalid circuit: " + report.summary());
    return std::move(c_);
  }

 private:
  LayerId layer(int dim, const Nonlinearity& nl) {
    return c_.add_layer(SvdAffine::near_identity(dim, spec_.parametrization, nl, init_, kInitAngleStd, kInitBiasStd));
  }

  NodeId gaussian_leaf(const std::vector<int>& scope, const Nonlinearity& nl) {
    const NodeId leaf = c_.add_leaf(scope);
    return c_.add_transform(leaf, layer(static_cast<int>(scope.size()), nl));
  }

  NodeId spn_level(const std::vector<int>& scope, int depth) {
    const int b = std::min<int>(spec_.partitions, static_cast<int>(scope.size()));
    std::vector<NodeId> kids;
    for (int k = 0; k < spec_.children; ++k) {
      std::vector<int> order = scope;
      std::shuffle(order.begin(), order.end(), perm_);
      std::vector<NodeId> blocks;
      std::size_t start = 0;
      for (int bs : block_sizes(static_cast<int>(scope.size()), b)) {
        std::vector<int> block(order.begin() + static_cast<std::ptrdiff_t>(start),
                               order.begin() + static_cast<std::ptrdiff_t>(start + static_cast<std::size_t>(bs)));
        std::sort(block.begin(), block.end());
        start += static_cast<std::size_t>(bs);
        blocks.push_back(depth + 1 == spec_.layers ? gaussian_leaf(block, Nonlinearity::identity()) : spn_level(block, depth + 1));
      }
      kids.push_back(blocks.size() == 1 ? blocks.front() : c_.add_product(blocks));
    }
    return c_.add_sum(kids);
  }

  NodeId gsptn(const std::vector<int>& all) {
    const int n = spec_.children;
    switch (spec_.sharing) {
      case Sharing::none:
      case Sharing::transform_only: {
        // Per-depth layer table; transform_only reuses entry (depth, position).
        std::vector<std::vector<LayerId>> shared(static_cast<std::size_t>(spec_.layers));
        if (spec_.sharing == Sharing::transform_only)
          for (auto& row : shared)
            for (int k = 0; k < n; ++k) row.push_back(layer(dim_, nl_));
        auto level = [&](auto& self, int depth) -> NodeId {
          if (depth == spec_.layers) return c_.add_leaf(all);
          std::vector<NodeId> kids;
          for (int k = 0; k < n; ++k) {
            const NodeId child = self(self, depth + 1);
            const LayerId l = spec_.sharing == Sharing::transform_only
                                  ? shared[static_cast<std::size_t>(depth)][static_cast<std::size_t>(k)]
                                  : layer(dim_, nl_);
            kids.push_back(c_.add_transform(child, l));
          }
          return c_.add_sum(kids);
        };
        return level(level, 0);
      }
      case Sharing::sum_and_transform: {
        NodeId below = c_.add_leaf(all);
        for (int depth = spec_.layers - 1; depth >= 0; --depth) {
          std::vector<NodeId> kids;
          for (int k = 0; k < n; ++k) kids.push_back(c_.add_transform(below, layer(dim_, nl_)));
          below = c_.add_sum(kids);
        }
        return below;
      }
    }
    throw InvalidArgument("unknown sharing mode");
  }

  const ArchSpec& spec_;
  int dim_;
  Circuit c_;
  std::mt19937_64 init_;
  std::mt19937_64 perm_;
  Nonlinearity nl_;
};

template <typename T>
T pick(const std::vector<T>& v, std::mt19937_64& rng) {
  return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
}

int pick_int(int lo, int hi, std::mt19937_64& rng) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

}  // namespace

Circuit build_circuit(const ArchSpec& spec, int dim) {
  if (dim < 1) throw InvalidArgument("build_circuit: dimension must be >= 1");
  if (spec.children < 1 || spec.layers < 1 || spec.partitions < 1)
    throw InvalidArgument("build_circuit: children, layers and partitions must be >= 1");
  return Builder(spec, dim).build();
}

ArchSpec sample_spec(Family family, int dim, std::mt19937_64& rng, const ArchConstraints& constraints) {
  for (int draw = 0; draw < kMaxDraws; ++draw) {
    ArchSpec s;
    s.family = family;
    switch (family) {
      case Family::gmm:
        s.children = pick(gmm_component_grid(), rng);
        break;
      case Family::spn:
        s.children = pick_int(kSpnChildrenMin, kSpnChildrenMax, rng);
        s.partitions = pick_int(1, kSpnPartitionsMax, rng);
        s.layers = pick_int(1, kSpnLayersMax, rng);
        break;
      case Family::gsptn:
        s.layers = pick_int(1, kGsptnLayersMax, rng);
        s.children = pick(gsptn_children_grid(), rng);
        s.sharing = pick(std::vector<Sharing>{Sharing::none, Sharing::transform_only, Sharing::sum_and_transform}, rng);
        s.nonlinearity = pick(std::vector<Nonlinearity::Kind>{Nonlinearity::Kind::identity, Nonlinearity::Kind::leaky_relu,
                                                            Nonlinearity::Kind::selu},
                              rng);
        break;
    }
    s.parametrization = pick(std::vector<OrthogonalFactor::Kind>{OrthogonalFactor::Kind::givens,
                                                                 OrthogonalFactor::Kind::householder},
                             rng);
    s.permutation_seed = rng();
    s.init_seed = rng();
    if (family == Family::gsptn && constraints.sharing) s.sharing = *constraints.sharing;
    if (family == Family::gsptn && constraints.nonlinearity) s.nonlinearity = *constraints.nonlinearity;
    if (constraints.parametrization) s.parametrization = *constraints.parametrization;

    if (family == Family::spn && s.partitions > dim) continue;
    const ArchSize size = estimate_size(s, dim);
    if (size.nodes > static_cast<double>(constraints.max_nodes)) continue;
    if (constraints.max_params && size.params > static_cast<double>(*constraints.max_params)) continue;
    return s;
  }
  throw InvalidArgument("no admissible " + to_string(family) + " architecture for dimension " + std::to_string(dim) +
                        " under the given constraints");
}

SampledArchitecture sample_architecture(Family family, int dim, std::mt19937_64& rng, const ArchConstraints& constraints) {
  ArchSpec spec = sample_spec(family, dim, rng, constraints);
  Circuit c = build_circuit(spec, dim);
  return {spec, std::move(c)};
}

// Search ---------------------------------------------------------------------

SearchResult random_search(Family family, const Matrix& train_x, const Matrix& valid_x,
                           const std::optional<Eigen::VectorXi>& valid_labels, const SearchConfig& config) {
  config.train.check();
  if (config.budget.max_architectures < 1) throw InvalidArgument("search budget must allow at least one architecture");
  if (train_x.rows() == 0 || valid_x.rows() == 0) throw InvalidArgument("random_search needs non-empty train and valid splits");
  if (train_x.cols() != valid_x.cols()) throw DimensionError("random_search: valid columns", static_cast<long>(train_x.cols()), static_cast<long>(valid_x.cols()));
  if (config.criterion == Criterion::valid_auc) {
    if (!valid_labels) throw InvalidArgument("valid_auc criterion needs labels on the validation split");
    const auto pos = (valid_labels->array() == 1).count();
    if (pos == 0 || pos == valid_labels->size()) throw InvalidArgument("valid_auc criterion needs both classes in the validation split");
  }
  const int dim = static_cast<int>(train_x.cols());
  std::mt19937_64 master(config.seed);
  const std::size_t count = config.budget.max_architectures;
  std::vector<ArchSpec> specs;
  std::vector<std::uint64_t> train_seeds;
  for (std::size_t i = 0; i < count; ++i) {
    specs.push_back(sample_spec(family, dim, master, config.constraints));
    train_seeds.push_back(master());
  }

  const auto start = std::chrono::steady_clock::now();
  std::vector<SearchEntry> entries(count);
  std::vector<std::optional<Circuit>> models(count);
  std::vector<TrainResult> traces(count);
  parallel_for(
      count,
      [&](std::size_t i) {
        SearchEntry& e = entries[i];
        e.index = i;
        e.spec = specs[i];
        if (config.budget.wall_clock && std::chrono::steady_clock::now() - start > *config.budget.wall_clock) {
          e.error = "skipped: wall-clock budget exhausted";
          return;
        }
        const auto t0 = std::chrono::steady_clock::now();
        try {
          Circuit c = build_circuit(specs[i], dim);
          e.parameter_count = c.parameter_count();
          TrainConfig tc = config.train;
          tc.seed = train_seeds[i];
          traces[i] = train(c, train_x, tc);
          e.final_loss = traces[i].loss_trace.back();
          e.train_loglik = mean_loglik(logpdf(c, train_x));
          const Vector lv = logpdf(c, valid_x);
          e.valid_loglik = mean_loglik(lv);
          if (valid_labels) {
            const auto pos = (valid_labels->array() == 1).count();
            if (pos > 0 && pos < valid_labels->size() && lv.allFinite()) e.valid_auc = auc(-lv, *valid_labels);
          }
          e.criterion = config.criterion == Criterion::valid_auc ? e.valid_auc.value_or(-1.0) : e.valid_loglik;
          e.ok = std::isfinite(e.criterion);
          if (!e.ok) e.error = "non-finite validation criterion";
          else models[i] = std::move(c);
        } catch (const std::exception& ex) {
          e.error = ex.what();
        }
        e.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      },
      config.threads ? config.threads : worker_threads());

  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (entries[a].ok != entries[b].ok) return entries[a].ok;
    return entries[a].ok && entries[a].criterion > entries[b].criterion;
  });
  if (!entries[order.front()].ok)
    throw Error("random_search: no architecture trained successfully (first error: " + entries[order.front()].error + ")");
  SearchResult result{std::move(*models[order.front()]), entries[order.front()], std::move(traces[order.front()]), {}};
  for (std::size_t i : order) result.leaderboard.push_back(entries[i]);
  return result;
}

}  // namespace sptn
