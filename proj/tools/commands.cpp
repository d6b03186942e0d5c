#include "commands.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "sptn/data.hpp"
#include "sptn/error.hpp"
#include "sptn/ginfer.hpp"
#include "sptn/metrics.hpp"
#include "sptn/model_io.hpp"
#include "sptn/train.hpp"

namespace sptn::cli {
namespace {

using nlohmann::json;
using nlohmann::ordered_json;

struct Options {
  std::string data;
  std::string labels_col;
  std::string model;
  std::string out;
  std::string metrics;
  std::uint64_t seed = 0;
  std::size_t iterations = 10000;
  std::size_t batch_size = 100;
  double lr = 1e-3;
  std::string family = "gsptn";
  int children = 4;
  int layers = 2;
  int partitions = 1;
  std::size_t budget = 100;
  std::string criterion = "valid_loglik";
  std::string sharing;
  std::string parametrization;
  std::string nonlinearity;
  std::size_t max_params = 0;
  std::string mask;
  std::string bounds = "-5,5,-5,5";
  std::string resolution = "100";
  std::size_t n = 20000;
  int petals = 9;
};

// Derived seeds so that one --seed drives every random choice.
struct Seeds {
  std::uint64_t split, init, permutation, train, search;
  explicit Seeds(std::uint64_t seed) {
    std::mt19937_64 r(seed);
    split = r();
    init = r();
    permutation = r();
    train = r();
    search = r();
  }
};

class Emitter {
 public:
  Emitter(std::ostream& out) : out_(out) {}  // NOLINT

  /// Writes to `path` atomically, or to stdout when path is empty.
  void write(const std::string& path, const std::string& text) const {
    if (path.empty() || path == "-") out_ << text;
    else write_file_atomic(path, text);
  }

 private:
  std::ostream& out_;
};

std::optional<std::string> opt(const std::string& s) { return s.empty() ? std::nullopt : std::optional<std::string>(s); }

Dataset load_data(const Options& o) {
  if (o.data.empty()) throw InvalidArgument("--data is required");
  return load_csv(o.data, opt(o.labels_col));
}

Matrix require_columns(const Dataset& d, const Model& m) {
  if (d.dim() != m.dim())
    throw DimensionError("data columns (excluding labels) vs model dimension", m.dim(), d.dim());
  return d.features;
}

std::string column_csv(const std::string& header, const Vector& v) {
  std::string s = header + "\n";
  for (Eigen::Index i = 0; i < v.size(); ++i) s += format_double(v[i]) + "\n";
  return s;
}

ordered_json arch_summary(const ArchSpec& spec) {
  return {{"family", to_string(spec.family)},
          {"children", spec.children},
          {"partitions", spec.partitions},
          {"layers", spec.layers},
          {"sharing", to_string(spec.sharing)},
          {"parametrization", to_string(spec.parametrization)},
          {"nonlinearity", to_string(spec.nonlinearity)},
          {"description", spec.describe()}};
}

// Finite numbers only; JSON has no representation for inf/nan.
json num(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

ordered_json split_report(const Model& model, const Splits& raw) {
  ordered_json ll;
  ordered_json auc_j;
  for (const auto& [name, d] : {std::pair<const char*, const Dataset*>{"train", &raw.train},
                                {"valid", &raw.valid},
                                {"test", &raw.test}}) {
    if (d->rows() == 0) {
      ll[name] = nullptr;
      continue;
    }
    const Vector lp = model.logpdf(d->features);
    ll[name] = num(mean_loglik(lp));
    if (d->labels) {
      const auto pos = (d->labels->array() == 1).count();
      if (pos > 0 && pos < d->labels->size() && lp.allFinite()) auc_j[name] = auc(-lp, *d->labels);
    }
  }
  ordered_json r{{"mean_loglik", ll}};
  if (!auc_j.empty()) r["auc"] = auc_j;
  return r;
}

ordered_json header(const std::string& command) {
  return {{"schema_version", kMetricsSchemaVersion}, {"command", command}};
}

void emit_metrics(const Options& o, const Emitter& emit, const ordered_json& m) {
  const std::string text = m.dump(2) + "\n";
  emit.write("", text);
  if (!o.metrics.empty()) write_file_atomic(o.metrics, text);
}

ArchConstraints constraints_from(const Options& o) {
  ArchConstraints c;
  if (!o.sharing.empty()) c.sharing = parse_sharing(o.sharing);
  if (!o.parametrization.empty()) c.parametrization = parse_parametrization(o.parametrization);
  if (!o.nonlinearity.empty()) c.nonlinearity = parse_nonlinearity(o.nonlinearity);
  if (o.max_params > 0) c.max_params = o.max_params;
  return c;
}

TrainConfig train_config_from(const Options& o, const Seeds& s) {
  TrainConfig t;
  t.learning_rate = o.lr;
  t.batch_size = o.batch_size;
  t.iterations = o.iterations;
  t.seed = s.train;
  t.check();
  return t;
}

struct Prepared {
  Splits raw;
  Splits standardized;
};

Prepared prepare(const Options& o, const Seeds& seeds) {
  Dataset d = load_data(o);
  SplitSpec spec;
  spec.seed = seeds.split;
  Prepared p{split(d, spec), {}};
  p.standardized = p.raw;
  standardize(p.standardized);
  return p;
}

Model finish_model(Circuit c, const Prepared& p, const Options& o, const ArchSpec& spec, const TrainConfig& tc,
                   const Dataset& source_cols) {
  Model m(std::move(c));
  m.standardization = p.standardized.train.standardization;
  m.arch = spec;
  m.train_config = tc;
  m.seed = o.seed;
  m.columns = source_cols.columns;
  return m;
}

void warn_constant(std::ostream& err, const Prepared& p) {
  for (int j : p.standardized.train.standardization->constant_features)
    err << json{{"warning", "constant_feature"}, {"column", j},
                {"message", "feature has zero variance on the training split; std floored at 1e-9"}}.dump()
        << "\n";
}

int cmd_train(const Options& o, const Emitter& emit, std::ostream& err) {
  const Seeds seeds(o.seed);
  const Prepared p = prepare(o, seeds);
  warn_constant(err, p);
  ArchSpec spec;
  spec.family = parse_family(o.family);
  spec.children = o.children;
  spec.layers = o.layers;
  spec.partitions = o.partitions;
  if (!o.sharing.empty()) spec.sharing = parse_sharing(o.sharing);
  if (!o.parametrization.empty()) spec.parametrization = parse_parametrization(o.parametrization);
  if (!o.nonlinearity.empty()) spec.nonlinearity = parse_nonlinearity(o.nonlinearity);
  spec.init_seed = seeds.init;
  spec.permutation_seed = seeds.permutation;
  const TrainConfig tc = train_config_from(o, seeds);
  Circuit c = build_circuit(spec, p.standardized.train.dim());
  const TrainResult tr = train(c, p.standardized.train.features, tc);
  Model m = finish_model(std::move(c), p, o, spec, tc, p.raw.train);
  if (!o.model.empty()) save_model(o.model, m);

  ordered_json metrics = header("train");
  metrics["arch"] = arch_summary(spec);
  metrics["parameter_count"] = m.circuit.parameter_count();
  metrics["splits"] = {{"train", p.raw.train.rows()}, {"valid", p.raw.valid.rows()}, {"test", p.raw.test.rows()}};
  metrics["evaluation"] = split_report(m, p.raw);
  metrics["skipped_batches"] = tr.skipped_batches;
  json trace = json::array();
  for (double l : tr.loss_trace) trace.push_back(num(l));
  metrics["loss_trace"] = trace;
  emit_metrics(o, emit, metrics);
  return kOk;
}

int cmd_search(const Options& o, const Emitter& emit, std::ostream& err) {
  const Seeds seeds(o.seed);
  const Prepared p = prepare(o, seeds);
  warn_constant(err, p);
  SearchConfig sc;
  sc.budget.max_architectures = o.budget;
  sc.criterion = parse_criterion(o.criterion);
  sc.train = train_config_from(o, seeds);
  sc.constraints = constraints_from(o);
  sc.seed = seeds.search;
  const Family family = parse_family(o.family);
  SearchResult r = random_search(family, p.standardized.train.features, p.standardized.valid.features,
                                 p.standardized.valid.labels, sc);
  TrainConfig tc = sc.train;
  Model m = finish_model(std::move(r.best), p, o, r.best_entry.spec, tc, p.raw.train);
  if (!o.model.empty()) save_model(o.model, m);

  // Validation log-likelihoods in the raw data scale.
  const double shift = m.standardization->log_jacobian();
  ordered_json board = ordered_json::array();
  for (const SearchEntry& e : r.leaderboard) {
    ordered_json row{{"index", e.index}, {"arch", arch_summary(e.spec)}, {"parameter_count", e.parameter_count},
                     {"ok", e.ok}};
    if (e.ok) {
      row["criterion"] = sc.criterion == Criterion::valid_auc ? num(e.criterion) : num(e.criterion + shift);
      row["train_loglik"] = num(e.train_loglik + shift);
      row["valid_loglik"] = num(e.valid_loglik + shift);
      if (e.valid_auc) row["valid_auc"] = *e.valid_auc;
      row["final_loss"] = num(e.final_loss);
    } else {
      row["error"] = e.error;
    }
    board.push_back(std::move(row));
  }
  ordered_json metrics = header("search");
  metrics["family"] = to_string(family);
  metrics["criterion"] = to_string(sc.criterion);
  metrics["budget"] = o.budget;
  metrics["best"] = {{"index", r.best_entry.index}, {"arch", arch_summary(r.best_entry.spec)},
                     {"parameter_count", r.best_entry.parameter_count}};
  metrics["evaluation"] = split_report(m, p.raw);
  metrics["leaderboard"] = board;
  emit_metrics(o, emit, metrics);
  return kOk;
}

Model load_model_opt(const Options& o) {
  if (o.model.empty()) throw InvalidArgument("--model is required");
  return load_model(o.model);
}

int cmd_eval(const Options& o, const Emitter& emit) {
  const Model m = load_model_opt(o);
  const Dataset d = load_data(o);
  const Matrix x = require_columns(d, m);
  const Vector lp = m.logpdf(x);
  if (!o.out.empty()) write_file_atomic(o.out, column_csv("logpdf", lp));
  ordered_json metrics = header("eval");
  metrics["rows"] = d.rows();
  metrics["rejected_rows"] = d.rejected_rows;
  if (d.rows() > 0) metrics["mean_loglik"] = num(mean_loglik(lp));
  if (d.rows() >= 5) {
    // Same partition as training when the data file and seed match.
    SplitSpec spec;
    spec.seed = Seeds(m.seed).split;
    metrics["splits"] = split_report(m, split(d, spec));
  }
  emit_metrics(o, emit, metrics);
  return kOk;
}

int cmd_marginal(const Options& o, const Emitter& emit) {
  const Model m = load_model_opt(o);
  const Dataset d = load_data(o);
  const EvidenceMask mask = EvidenceMask::parse(o.mask);
  const Vector lp = m.marginal_logpdf(require_columns(d, m), mask);
  emit.write(o.out, column_csv("logpdf", lp));
  return kOk;
}

int cmd_conditional(const Options& o, const Emitter& emit) {
  const Model m = load_model_opt(o);
  const Dataset d = load_data(o);
  std::vector<bool> joint, evidence;
  {
    std::stringstream ss(o.mask);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      tok.erase(std::remove(tok.begin(), tok.end(), ' '), tok.end());
      if (tok == "q") joint.push_back(true), evidence.push_back(false);
      else if (tok == "e") joint.push_back(true), evidence.push_back(true);
      else if (tok == "m") joint.push_back(false), evidence.push_back(false);
      else throw InvalidArgument("conditional mask entry '" + tok + "'; expected q (query), e (evidence) or m (marginalized)");
    }
  }
  if (joint.empty()) throw InvalidArgument("--mask is required");
  const Vector lp = m.conditional_logpdf(require_columns(d, m), EvidenceMask(joint), EvidenceMask(evidence));
  emit.write(o.out, column_csv("logpdf", lp));
  return kOk;
}

int cmd_score(const Options& o, const Emitter& emit) {
  if (o.labels_col.empty()) throw InvalidArgument("score needs --labels-col");
  const Model m = load_model_opt(o);
  const Dataset d = load_data(o);
  const Vector lp = m.logpdf(require_columns(d, m));
  const Vector scores = -lp;
  if (!o.out.empty()) write_file_atomic(o.out, column_csv("score", scores));
  ordered_json metrics = header("score");
  metrics["rows"] = d.rows();
  metrics["auc"] = auc(scores, *d.labels);
  if (d.rows() > 0) metrics["mean_loglik"] = num(mean_loglik(lp));
  if (d.rows() >= 5) {
    SplitSpec spec;
    spec.seed = Seeds(m.seed).split;
    metrics["splits"] = split_report(m, split(d, spec));
  }
  emit_metrics(o, emit, metrics);
  return kOk;
}

std::vector<double> parse_list(const std::string& s, const std::string& what) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw InvalidArgument(what + ": '" + tok + "' is not a number");
    }
  }
  return out;
}

int cmd_grid(const Options& o, const Emitter& emit) {
  const Model m = load_model_opt(o);
  if (m.dim() != 2) throw InvalidArgument("grid needs a 2-dimensional model, this one has dimension " + std::to_string(m.dim()));
  const auto b = parse_list(o.bounds, "--bounds");
  if (b.size() != 4 || !(b[0] < b[1]) || !(b[2] < b[3])) throw InvalidArgument("--bounds must be xmin,xmax,ymin,ymax with min < max");
  auto r = parse_list(o.resolution, "--resolution");
  if (r.size() == 1) r.push_back(r[0]);
  if (r.size() != 2 || r[0] < 1 || r[1] < 1 || r[0] != std::floor(r[0]) || r[1] != std::floor(r[1]))
    throw InvalidArgument("--resolution must be N or NX,NY with positive integers");
  const auto nx = static_cast<Eigen::Index>(r[0]), ny = static_cast<Eigen::Index>(r[1]);
  auto coord = [](double lo, double hi, Eigen::Index k, Eigen::Index n) {
    return n == 1 ? 0.5 * (lo + hi) : lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(n - 1);
  };
  Matrix pts(nx * ny, 2);
  for (Eigen::Index iy = 0; iy < ny; ++iy)
    for (Eigen::Index ix = 0; ix < nx; ++ix) pts.row(iy * nx + ix) << coord(b[0], b[1], ix, nx), coord(b[2], b[3], iy, ny);
  const Vector lp = m.logpdf(pts);
  std::string text = "#bounds=" + format_double(b[0]) + "," + format_double(b[1]) + "," + format_double(b[2]) + "," +
                     format_double(b[3]) + " resolution=" + std::to_string(nx) + "," + std::to_string(ny) + "\n";
  text += "x\ty\tlogpdf\n";
  for (Eigen::Index i = 0; i < pts.rows(); ++i)
    text += format_double(pts(i, 0)) + "\t" + format_double(pts(i, 1)) + "\t" + format_double(lp[i]) + "\n";
  emit.write(o.out, text);
  return kOk;
}

std::string matrix_csv(const std::vector<std::string>& columns, const Matrix& x) {
  std::string text;
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    if (j) text += ',';
    text += static_cast<std::size_t>(j) < columns.size() ? columns[static_cast<std::size_t>(j)] : "x" + std::to_string(j);
  }
  text += '\n';
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      if (j) text += ',';
      text += format_double(x(i, j));
    }
    text += '\n';
  }
  return text;
}

int cmd_sample(const Options& o, const Emitter& emit) {
  const Model m = load_model_opt(o);
  std::mt19937_64 rng(o.seed);
  const Matrix x = m.sample(rng, o.n);
  std::vector<std::string> cols = m.columns;
  if (cols.size() != static_cast<std::size_t>(m.dim())) cols.clear();
  emit.write(o.out, matrix_csv(cols, x));
  return kOk;
}

int cmd_flower(const Options& o, const Emitter& emit) {
  FlowerSpec spec;
  spec.petals = o.petals;
  const Dataset d = make_flower(o.n, o.seed, spec);
  emit.write(o.out, matrix_csv(d.columns, d.features));
  return kOk;
}

std::string error_line(const std::string& kind, const std::string& message) {
  return json{{"error", kind}, {"message", message}}.dump() + "\n";
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"Sum-product-transform networks: training, inference and evaluation", "sptn"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  auto data_opts = [&](CLI::App* c, bool labels) {
    c->add_option("--data", o.data, "CSV file with a header row (comma or tab separated)")->required();
    if (labels) c->add_option("--labels-col", o.labels_col, "Name of the 0/1 anomaly label column");
  };
  auto train_opts = [&](CLI::App* c) {
    c->add_option("--seed", o.seed, "Seed for splits, initialization and batching");
    c->add_option("--iterations", o.iterations, "Adam iterations")->check(CLI::PositiveNumber);
    c->add_option("--batch-size", o.batch_size, "Minibatch size")->check(CLI::PositiveNumber);
    c->add_option("--lr", o.lr, "Adam learning rate")->check(CLI::PositiveNumber);
    c->add_option("--family", o.family, "gmm, spn or gsptn");
    c->add_option("--sharing", o.sharing, "none, transform_only or sum_and_transform");
    c->add_option("--parametrization", o.parametrization, "givens or householder");
    c->add_option("--nonlinearity", o.nonlinearity, "identity, leaky_relu or selu");
    c->add_option("--model", o.model, "Output model file");
    c->add_option("--metrics", o.metrics, "Also write the metrics JSON to this file");
  };

  CLI::App* train_c = app.add_subcommand("train", "Train one architecture");
  data_opts(train_c, true);
  train_opts(train_c);
  train_c->add_option("--children", o.children, "Components (gmm) or sum-node children")->check(CLI::PositiveNumber);
  train_c->add_option("--layers", o.layers, "Depth (spn, gsptn)")->check(CLI::PositiveNumber);
  train_c->add_option("--partitions", o.partitions, "Blocks per product node (spn)")->check(CLI::PositiveNumber);

  CLI::App* search_c = app.add_subcommand("search", "Random architecture search with validation-based selection");
  data_opts(search_c, true);
  train_opts(search_c);
  search_c->add_option("--budget", o.budget, "Number of sampled architectures")->check(CLI::PositiveNumber);
  search_c->add_option("--criterion", o.criterion, "valid_loglik or valid_auc");
  search_c->add_option("--max-params", o.max_params, "Upper bound on free parameters of sampled architectures");

  CLI::App* eval_c = app.add_subcommand("eval", "Mean log-likelihood of a data file under a model");
  data_opts(eval_c, true);
  eval_c->add_option("--model", o.model, "Model file")->required();
  eval_c->add_option("--out", o.out, "Write per-row log-densities to this CSV");
  eval_c->add_option("--metrics", o.metrics, "Also write the metrics JSON to this file");

  CLI::App* marginal_c = app.add_subcommand("marginal", "Per-row marginal log-densities");
  data_opts(marginal_c, false);
  marginal_c->add_option("--model", o.model, "Model file")->required();
  marginal_c->add_option("--mask", o.mask, "Per-column o (observed) or m (marginalized), e.g. o,m")->required();
  marginal_c->add_option("--out", o.out, "Output CSV (default stdout)");

  CLI::App* cond_c = app.add_subcommand("conditional", "Per-row conditional log-densities log p(query | evidence)");
  data_opts(cond_c, false);
  cond_c->add_option("--model", o.model, "Model file")->required();
  cond_c->add_option("--mask", o.mask, "Per-column q (query), e (evidence) or m (marginalized), e.g. q,e,m")->required();
  cond_c->add_option("--out", o.out, "Output CSV (default stdout)");

  CLI::App* score_c = app.add_subcommand("score", "Anomaly scores (negative log-likelihood) and AUC");
  data_opts(score_c, true);
  score_c->add_option("--model", o.model, "Model file")->required();
  score_c->add_option("--out", o.out, "Write per-row scores to this CSV");
  score_c->add_option("--metrics", o.metrics, "Also write the metrics JSON to this file");

  CLI::App* grid_c = app.add_subcommand("grid", "Log-density on a uniform 2-D grid (TSV)");
  grid_c->add_option("--model", o.model, "Model file")->required();
  grid_c->add_option("--bounds", o.bounds, "xmin,xmax,ymin,ymax");
  grid_c->add_option("--resolution", o.resolution, "Points per axis: N or NX,NY");
  grid_c->add_option("--out", o.out, "Output TSV (default stdout)");

  CLI::App* sample_c = app.add_subcommand("sample", "Draw samples in the data scale (CSV)");
  sample_c->add_option("--model", o.model, "Model file")->required();
  sample_c->add_option("--n", o.n, "Number of samples")->required();
  sample_c->add_option("--seed", o.seed, "Sampling seed");
  sample_c->add_option("--out", o.out, "Output CSV (default stdout)");

  CLI::App* flower_c = app.add_subcommand("flower", "Generate the 2-D flower dataset (CSV)");
  flower_c->add_option("--n", o.n, "Number of samples");
  flower_c->add_option("--petals", o.petals, "Number of petals")->check(CLI::PositiveNumber);
  flower_c->add_option("--seed", o.seed, "Generator seed");
  flower_c->add_option("--out", o.out, "Output CSV (default stdout)");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << error_line("usage", e.what());
    return kUsage;
  }

  const Emitter emit(out);
  try {
    if (*train_c) return cmd_train(o, emit, err);
    if (*search_c) return cmd_search(o, emit, err);
    if (*eval_c) return cmd_eval(o, emit);
    if (*marginal_c) return cmd_marginal(o, emit);
    if (*cond_c) return cmd_conditional(o, emit);
    if (*score_c) return cmd_score(o, emit);
    if (*grid_c) return cmd_grid(o, emit);
    if (*sample_c) return cmd_sample(o, emit);
    if (*flower_c) return cmd_flower(o, emit);
  } catch (const NotTractable& e) {
    err << json{{"error", "not_tractable"}, {"node", e.node()}, {"message", e.what()}}.dump() << "\n";
    return kNotTractable;
  } catch (const IoError& e) {
    err << error_line("io", e.what());
    return kIo;
  } catch (const ParseError& e) {
    err << error_line("parse", e.what());
    return kIo;
  } catch (const InvalidArgument& e) {
    err << error_line("invalid_argument", e.what());
    return kUsage;
  } catch (const std::exception& e) {
    err << error_line("failure", e.what());
    return kFailure;
  }
  err << error_line("usage", "no subcommand given");
  return kUsage;
}

}  // namespace sptn::cli
