#include "sptn/model_io.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"

#include "sptn/error.hpp"

namespace sptn {

using nlohmann::json;

// Raw-scale evaluation -------------------------------------------------------

namespace {

double jacobian_over(const std::optional<Standardization>& s, const std::vector<int>& vars) {
  if (!s) return 0.0;
  double out = 0.0;
  for (int v : vars) out -= std::log(s->std[v]);
  return out;
}

}  // namespace

Matrix Model::to_model_space(const Matrix& raw) const {
  if (raw.cols() != dim()) throw DimensionError("model input columns", dim(), static_cast<long>(raw.cols()));
  return standardization ? standardization->apply(raw) : raw;
}

Matrix Model::to_data_space(const Matrix& z) const { return standardization ? standardization->invert(z) : z; }

Vector Model::logpdf(const Matrix& raw) const {
  Vector out = sptn::logpdf(circuit, to_model_space(raw));
  if (standardization) out.array() += standardization->log_jacobian();
  return out;
}

Vector Model::marginal_logpdf(const Matrix& raw, const EvidenceMask& mask, const InferenceOptions& opts) const {
  Vector out = sptn::marginal_logpdf(circuit, to_model_space(raw), mask, opts);
  out.array() += jacobian_over(standardization, mask.observed_indices());
  return out;
}

Vector Model::conditional_logpdf(const Matrix& raw, const EvidenceMask& joint, const EvidenceMask& evidence,
                                 const InferenceOptions& opts) const {
  Vector out = sptn::conditional_logpdf(circuit, to_model_space(raw), joint, evidence, opts);
  std::vector<int> query;
  for (int v : joint.observed_indices())
    if (!evidence.observed(v)) query.push_back(v);
  out.array() += jacobian_over(standardization, query);
  return out;
}

Matrix Model::sample(std::mt19937_64& rng, std::size_t n) const { return to_data_space(sptn::sample(circuit, rng, n)); }

// Serialization --------------------------------------------------------------

namespace {

json vec_json(const Vector& v) { return json(std::vector<double>(v.data(), v.data() + v.size())); }

Vector json_vec(const json& j, const std::string& what) {
  if (!j.is_array()) throw ParseError("model: '" + what + "' must be an array of numbers");
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw ParseError("model: '" + what + "' must be an array of numbers");
    v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
  }
  return v;
}

json factor_json(const OrthogonalFactor& f) {
  if (const auto* g = f.givens()) return {{"kind", "givens"}, {"theta", vec_json(g->theta())}};
  const auto* h = f.householder();
  json cols = json::array();
  for (Eigen::Index i = 0; i < h->vectors().cols(); ++i) cols.push_back(vec_json(h->vectors().col(i)));
  return {{"kind", "householder"}, {"vectors", cols}};
}

OrthogonalFactor json_factor(const json& j, int dim) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "givens") {
    Vector theta = json_vec(j.at("theta"), "theta");
    if (static_cast<std::size_t>(theta.size()) != givens_angle_count(dim))
      throw ParseError("model: givens factor of dimension " + std::to_string(dim) + " needs " +
                       std::to_string(givens_angle_count(dim)) + " angles");
    return GivensParam(dim, std::move(theta));
  }
  if (kind == "householder") {
    const json& cols = j.at("vectors");
    if (!cols.is_array() || cols.size() != static_cast<std::size_t>(dim))
      throw ParseError("model: householder factor needs " + std::to_string(dim) + " vectors");
    Matrix ys(dim, dim);
    for (int i = 0; i < dim; ++i) {
      Vector y = json_vec(cols[static_cast<std::size_t>(i)], "vectors");
      if (y.size() != dim) throw ParseError("model: householder vector of wrong length");
      ys.col(i) = y;
    }
    return HouseholderParam(dim, std::move(ys));
  }
  throw ParseError("model: unknown orthogonal factor kind '" + kind + "'");
}

json nonlinearity_json(const Nonlinearity& nl) {
  json j{{"kind", to_string(nl.kind())}};
  if (nl.kind() == Nonlinearity::Kind::leaky_relu) j["slope"] = nl.slope();
  return j;
}

Nonlinearity json_nonlinearity(const json& j) {
  const auto kind = parse_nonlinearity(j.at("kind").get<std::string>());
  if (kind == Nonlinearity::Kind::leaky_relu) return Nonlinearity::leaky_relu(j.value("slope", kLeakyReluDefaultSlope));
  return make_nonlinearity(kind);
}

json ids_json(const std::vector<NodeId>& ids) {
  json out = json::array();
  for (NodeId id : ids) out.push_back(id.index);
  return out;
}

std::vector<NodeId> json_ids(const json& j) {
  std::vector<NodeId> out;
  for (const auto& e : j) out.push_back(NodeId{e.get<std::uint32_t>()});
  return out;
}

json arch_json(const ArchSpec& a) {
  return {{"family", to_string(a.family)},
          {"children", a.children},
          {"partitions", a.partitions},
          {"layers", a.layers},
          {"sharing", to_string(a.sharing)},
          {"parametrization", to_string(a.parametrization)},
          {"nonlinearity", to_string(a.nonlinearity)},
          {"permutation_seed", a.permutation_seed},
          {"init_seed", a.init_seed}};
}

ArchSpec json_arch(const json& j) {
  ArchSpec a;
  a.family = parse_family(j.at("family").get<std::string>());
  a.children = j.at("children").get<int>();
  a.partitions = j.at("partitions").get<int>();
  a.layers = j.at("layers").get<int>();
  a.sharing = parse_sharing(j.at("sharing").get<std::string>());
  a.parametrization = parse_parametrization(j.at("parametrization").get<std::string>());
  a.nonlinearity = parse_nonlinearity(j.at("nonlinearity").get<std::string>());
  a.permutation_seed = j.at("permutation_seed").get<std::uint64_t>();
  a.init_seed = j.at("init_seed").get<std::uint64_t>();
  return a;
}

json train_json(const TrainConfig& t) {
  return {{"learning_rate", t.learning_rate}, {"batch_size", t.batch_size}, {"iterations", t.iterations},
          {"seed", t.seed},                   {"beta1", t.beta1},           {"beta2", t.beta2},
          {"epsilon", t.epsilon}};
}

TrainConfig json_train(const json& j) {
  TrainConfig t;
  t.learning_rate = j.at("learning_rate").get<double>();
  t.batch_size = j.at("batch_size").get<std::size_t>();
  t.iterations = j.at("iterations").get<std::size_t>();
  t.seed = j.at("seed").get<std::uint64_t>();
  t.beta1 = j.at("beta1").get<double>();
  t.beta2 = j.at("beta2").get<double>();
  t.epsilon = j.at("epsilon").get<double>();
  return t;
}

}  // namespace

std::string serialize_model(const Model& model) {
  const Circuit& c = model.circuit;
  json nodes = json::array();
  for (std::size_t i = 0; i < c.node_count(); ++i) {
    const Node& node = c.node(NodeId{static_cast<std::uint32_t>(i)});
    json j;
    if (const auto* s = std::get_if<SumNode>(&node)) j = {{"type", "sum"}, {"children", ids_json(s->children)}, {"logits", vec_json(s->logits)}};
    else if (const auto* p = std::get_if<ProductNode>(&node)) j = {{"type", "product"}, {"children", ids_json(p->children)}};
    else if (const auto* t = std::get_if<TransformNode>(&node)) j = {{"type", "transform"}, {"child", t->child.index}, {"layer", t->layer.index}};
    else j = {{"type", "leaf"}, {"scope", std::get<LeafNode>(node).scope}};
    nodes.push_back(std::move(j));
  }
  json layers = json::array();
  for (std::size_t i = 0; i < c.layer_count(); ++i) {
    const SvdAffine& l = c.layer(LayerId{static_cast<std::uint32_t>(i)});
    layers.push_back({{"dim", l.dim()},
                      {"u", factor_json(l.u())},
                      {"v", factor_json(l.v())},
                      {"diag", vec_json(l.diag())},
                      {"bias", vec_json(l.bias())},
                      {"nonlinearity", nonlinearity_json(l.nonlinearity())}});
  }
  json doc{{"format_version", kModelFormatVersion},
           {"dim", c.dim()},
           {"root", c.root() ? json(c.root()->index) : json(nullptr)},
           {"nodes", nodes},
           {"layers", layers},
           {"seed", model.seed},
           {"columns", model.columns}};
  if (model.standardization)
    doc["standardization"] = {{"mean", vec_json(model.standardization->mean)}, {"std", vec_json(model.standardization->std)}};
  if (model.arch) doc["arch_spec"] = arch_json(*model.arch);
  if (model.train_config) doc["train_config"] = train_json(*model.train_config);
  return doc.dump(1) + "\n";
}

Model parse_model(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("model: invalid JSON: ") + e.what());
  }
  try {
    if (!doc.contains("format_version") || !doc["format_version"].is_number_integer())
      throw ParseError("model: missing format_version");
    const int version = doc["format_version"].get<int>();
    if (version != kModelFormatVersion)
      throw ParseError("model: unsupported format_version " + std::to_string(version) + " (this build reads " +
                       std::to_string(kModelFormatVersion) + ")");
    const int dim = doc.at("dim").get<int>();
    Circuit c(dim);
    for (const auto& l : doc.at("layers")) {
      const int ld = l.at("dim").get<int>();
      c.add_layer(SvdAffine(json_factor(l.at("u"), ld), json_factor(l.at("v"), ld), json_vec(l.at("diag"), "diag"),
                            json_vec(l.at("bias"), "bias"), json_nonlinearity(l.at("nonlinearity"))));
    }
    for (const auto& n : doc.at("nodes")) {
      const std::string type = n.at("type").get<std::string>();
      if (type == "sum") c.add_sum(json_ids(n.at("children")), json_vec(n.at("logits"), "logits"));
      else if (type == "product") c.add_product(json_ids(n.at("children")));
      else if (type == "transform") c.add_transform(NodeId{n.at("child").get<std::uint32_t>()}, LayerId{n.at("layer").get<std::uint32_t>()});
      else if (type == "leaf") c.add_leaf(n.at("scope").get<std::vector<int>>());
      else throw ParseError("model: unknown node type '" + type + "'");
    }
    if (!doc.at("root").is_null()) c.set_root(NodeId{doc["root"].get<std::uint32_t>()});
    const ValidationReport report = c.validate();
    if (!report.ok()) throw ParseError("model: invalid circuit: " + report.summary());
    Model m(std::move(c));
    m.seed = doc.value("seed", std::uint64_t{0});
    if (doc.contains("columns")) m.columns = doc["columns"].get<std::vector<std::string>>();
    if (doc.contains("standardization")) {
      Standardization s;
      s.mean = json_vec(doc["standardization"].at("mean"), "standardization.mean");
      s.std = json_vec(doc["standardization"].at("std"), "standardization.std");
      if (s.mean.size() != dim || s.std.size() != dim) throw ParseError("model: standardization length differs from dim");
      m.standardization = std::move(s);
    }
    if (doc.contains("arch_spec")) m.arch = json_arch(doc["arch_spec"]);
    if (doc.contains("train_config")) m.train_config = json_train(doc["train_config"]);
    return m;
  } catch (const json::exception& e) {
    throw ParseError(std::string("model: malformed document: ") + e.what());
  } catch (const ParseError&) {
    throw;
  } catch (const Error& e) {
    throw ParseError(std::string("model: ") + e.what());
  }
}

void save_model(const std::filesystem::path& path, const Model& model) { write_file_atomic(path, serialize_model(model)); }

Model load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open model file '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_model(buf.str());
}

}  // namespace sptn
