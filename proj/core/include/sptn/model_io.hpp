#pragma once

// Trained model bundle and its JSON file format.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "sptn/circuit.hpp"
#include "sptn/data.hpp"
#include "sptn/ginfer.hpp"
#include "sptn/train.hpp"

namespace sptn {

inline constexpr int kModelFormatVersion = 1;

/// A circuit over standardized inputs together with the standardization and
/// provenance needed to use it on raw data.
struct Model {
  Circuit circuit;
  std::optional<Standardization> standardization;
  std::optional<ArchSpec> arch;
  std::optional<TrainConfig> train_config;
  std::uint64_t seed = 0;
  std::vector<std::string> columns;

  explicit Model(Circuit c) : circuit(std::move(c)) {}

  int dim() const noexcept { return circuit.dim(); }
  Matrix to_model_space(const Matrix& raw) const;
  Matrix to_data_space(const Matrix& z) const;

  /// Densities in the raw data scale (standardization Jacobian included).
  Vector logpdf(const Matrix& raw) const;
  Vector marginal_logpdf(const Matrix& raw, const EvidenceMask& mask, const InferenceOptions& opts = {}) const;
  Vector conditional_logpdf(const Matrix& raw, const EvidenceMask& joint, const EvidenceMask& evidence,
                            const InferenceOptions& opts = {}) const;
  /// Samples in the raw data scale.
  Matrix sample(std::mt19937_64& rng, std::size_t n) const;
};

/// Shared layers are stored once in a layer table and referenced by index.
std::string serialize_model(const Model& model);
/// Throws ParseError on malformed documents or an unknown format_version.
Model parse_model(const std::string& text);

void save_model(const std::filesystem::path& path, const Model& model);
Model load_model(const std::filesystem::path& path);

}  // namespace sptn
