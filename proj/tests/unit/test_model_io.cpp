#include <cmath>
#include <filesystem>
#include <random>
#include <string>

#include "circuits.hpp"
#include "doctest.h"
#include "oracles.hpp"
#include "sptn/error.hpp"
#include "sptn/model_io.hpp"

using namespace sptn;
namespace fs = std::filesystem;

namespace {

fs::path tmp_path(const std::string& name) {
  fs::create_directories(SPTN_TEST_TMP);
  return fs::path(SPTN_TEST_TMP) / name;
}

Model trained_like(const Circuit& c) {
  Model m(c);
  Standardization s;
  s.mean = Vector::LinSpaced(c.dim(), -1.0, 2.0);
  s.std = Vector::LinSpaced(c.dim(), 0.5, 3.0);
  m.standardization = s;
  ArchSpec a;
  a.family = Family::gsptn;
  a.children = 2;
  a.layers = 2;
  a.sharing = Sharing::transform_only;
  a.init_seed = 12345678901234567ULL;
  m.arch = a;
  TrainConfig t;
  t.seed = 99;
  m.train_config = t;
  m.seed = 7;
  for (int i = 0; i < c.dim(); ++i) m.columns.push_back("c" + std::to_string(i));
  return m;
}

std::string replace_once(std::string s, const std::string& from, const std::string& to) {
  const auto pos = s.find(from);
  REQUIRE(pos != std::string::npos);
  s.replace(pos, from.size(), to);
  return s;
}

}  // namespace

TEST_SUITE("model_io") {
  TEST_CASE("round trip preserves densities and metadata") {
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 10; ++trial) {
      oracle::RandomCircuitOptions opts;
      if (trial % 3 == 1) opts.nonlinearity = Nonlinearity::leaky_relu(0.05);
      if (trial % 3 == 2) opts.nonlinearity = Nonlinearity::selu();
      const Circuit c = oracle::random_circuit(1 + trial % 4, rng, opts);
      const Model m = trained_like(c);
      const auto path = tmp_path("model-" + std::to_string(trial) + ".json");
      save_model(path, m);
      const Model back = load_model(path);
      const Matrix x = oracle::gaussian_matrix(30, c.dim(), rng, 2.0);
      CHECK((back.logpdf(x) - m.logpdf(x)).cwiseAbs().maxCoeff() <= 1e-12);
      CHECK(back.circuit.parameters() == c.parameters());
      CHECK(back.circuit.layer_count() == c.layer_count());
      CHECK(back.circuit.node_count() == c.node_count());
      CHECK(*back.arch == *m.arch);
      CHECK(back.train_config->seed == 99);
      CHECK(back.seed == 7);
      CHECK(back.columns == m.columns);
      CHECK(back.standardization->std == m.standardization->std);
      CHECK(serialize_model(back) == serialize_model(m));
    }
  }

  TEST_CASE("shared layers are stored once") {
    ArchSpec s;
    s.family = Family::gsptn;
    s.layers = 2;
    s.children = 2;
    s.sharing = Sharing::sum_and_transform;
    const Circuit c = build_circuit(s, 2);
    const Model back = parse_model(serialize_model(Model(c)));
    CHECK(back.circuit.layer_count() == 4);
    CHECK(back.circuit.parameter_count() == c.parameter_count());
    CHECK(count_induced_trees(back.circuit) == 4);
  }

  TEST_CASE("unknown format version and malformed documents are rejected") {
    std::mt19937_64 rng(2);
    const std::string text = serialize_model(Model(oracle::gmm_circuit(2, 2, rng)));
    CHECK_THROWS_AS(parse_model(replace_once(text, "\"format_version\": 1", "\"format_version\": 2")), ParseError);
    CHECK_THROWS_AS(parse_model(replace_once(text, "\"format_version\": 1,", "")), ParseError);
    CHECK_THROWS_AS(parse_model("{"), ParseError);
    CHECK_THROWS_AS(parse_model(replace_once(text, "\"type\": \"leaf\"", "\"type\": \"tree\"")), ParseError);
    CHECK_THROWS_AS(parse_model(replace_once(text, "\"kind\": \"givens\"", "\"kind\": \"qr\"")), ParseError);
    CHECK_THROWS_AS(load_model(tmp_path("missing-model.json")), IoError);
  }

  TEST_CASE("raw-scale densities include the standardization Jacobian") {
    std::mt19937_64 rng(3);
    const Circuit c = oracle::gmm_circuit(2, 3, rng);
    const Model m = trained_like(c);
    const Matrix raw = oracle::gaussian_matrix(10, 2, rng);
    const Vector z = logpdf(c, m.standardization->apply(raw));
    CHECK((m.logpdf(raw) - (z.array() + m.standardization->log_jacobian()).matrix()).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK((m.to_data_space(m.to_model_space(raw)) - raw).cwiseAbs().maxCoeff() <= 1e-12);

    const auto mask = EvidenceMask::parse("o,m");
    const Vector marg = m.marginal_logpdf(raw, mask);
    const Vector zm = marginal_logpdf(c, m.standardization->apply(raw), mask);
    CHECK((marg - (zm.array() - std::log(m.standardization->std[0])).matrix()).cwiseAbs().maxCoeff() <= 1e-12);

    const Vector cond = m.conditional_logpdf(raw, EvidenceMask::all_observed(2), EvidenceMask::parse("m,o"));
    CHECK((cond + m.marginal_logpdf(raw, EvidenceMask::parse("m,o")) - m.logpdf(raw)).cwiseAbs().maxCoeff() <= 1e-10);
  }

  TEST_CASE("raw-scale samples") {
    Circuit c(1);
    c.set_root(c.add_leaf({0}));
    c.validate();
    Model m(c);
    Standardization s;
    s.mean = Vector::Constant(1, 10.0);
    s.std = Vector::Constant(1, 2.0);
    m.standardization = s;
    std::mt19937_64 rng(4);
    const Matrix x = m.sample(rng, 100000);
    CHECK(x.mean() == doctest::Approx(10.0).epsilon(0.003));
    const double sd = std::sqrt((x.array() - x.mean()).square().mean());
    CHECK(sd == doctest::Approx(2.0).epsilon(0.01));
  }
}
