#pragma once

// Datasets: CSV ingestion, train/valid/test splits, standardization and the
// synthetic flower generator.

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "sptn/unitary.hpp"

namespace sptn {

inline constexpr double kStdFloor = 1e-9;

/// Per-feature affine map (x - mean) / std.
struct Standardization {
  Vector mean;
  Vector std;
  /// Features whose std was floored.
  std::vector<int> constant_features;

  /// Row-wise on an n x d matrix.
  Matrix apply(const Matrix& x) const;
  Matrix invert(const Matrix& z) const;
  /// log|det| of the map, i.e. -sum log std; add to standardized log-densities
  /// to obtain densities in the original scale.
  double log_jacobian() const;
};

struct Dataset {
  Matrix features;  ///< n x d
  /// 1 = anomaly.
  std::optional<Eigen::VectorXi> labels;
  std::string name;
  std::vector<std::string> columns;
  std::optional<Standardization> standardization;
  /// Rows dropped during ingestion because of NaN or infinite values.
  std::size_t rejected_rows = 0;

  std::size_t rows() const noexcept { return static_cast<std::size_t>(features.rows()); }
  int dim() const noexcept { return static_cast<int>(features.cols()); }
  Dataset subset(const std::vector<std::size_t>& rows) const;
};

/// Header row required; comma or tab delimiter chosen from the header.
/// Throws ParseError (with line number) on ragged rows or non-numeric cells
/// and IoError if the file cannot be read.
Dataset load_csv(const std::filesystem::path& path, const std::optional<std::string>& label_column = std::nullopt);
Dataset parse_csv(const std::string& text, const std::optional<std::string>& label_column = std::nullopt,
                  const std::string& name = "");

/// Writes features (and labels as column `label_column`) with 17 significant
/// digits. Atomic: temp file + rename.
void save_csv(const std::filesystem::path& path, const Dataset& data, const std::string& label_column = "label");

/// Shortest round-trip decimal form, locale independent.
std::string format_double(double v);

/// Writes `contents` to a sibling temp file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

struct SplitSpec {
  double train = 0.64;
  double valid = 0.16;
  double test = 0.20;
  std::uint64_t seed = 0;
};

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> valid;
  std::vector<std::size_t> test;
};

struct Splits {
  Dataset train;
  Dataset valid;
  Dataset test;
  SplitIndices indices;
};

/// Normals are split by floor(fraction * count) with the remainder going to
/// test; anomalies are routed to valid and test only, in the ratio
/// valid : test.
SplitIndices split_indices(const Dataset& data, const SplitSpec& spec);
Splits split(const Dataset& data, const SplitSpec& spec);

/// Population mean and std per feature, std floored at kStdFloor.
Standardization fit_standardization(const Matrix& train);
/// Fits on `splits.train` and applies the map to all three splits.
void standardize(Splits& splits);

struct FlowerSpec {
  int petals = 9;
  double radius = 3.0;
  double radial_std = 0.8;
  double tangential_std = 0.15;
};

/// 2-D petal mixture invariant under rotation by 2 pi / petals.
Dataset make_flower(std::size_t n, std::uint64_t seed, const FlowerSpec& spec = {});

}  // namespace sptn
