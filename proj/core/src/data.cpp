#include "sptn/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>
#include <system_error>

#include "sptn/error.hpp"

namespace sptn {

Matrix Standardization::apply(const Matrix& x) const {
  if (x.cols() != mean.size()) throw DimensionError("standardization: columns", static_cast<long>(mean.size()), static_cast<long>(x.cols()));
  return (x.rowwise() - mean.transpose()).array().rowwise() / std.transpose().array();
}

Matrix Standardization::invert(const Matrix& z) const {
  if (z.cols() != mean.size()) throw DimensionError("standardization: columns", static_cast<long>(mean.size()), static_cast<long>(z.cols()));
  return (z.array().rowwise() * std.transpose().array()).matrix().rowwise() + mean.transpose();
}

double Standardization::log_jacobian() const { return -std.array().log().sum(); }

Dataset Dataset::subset(const std::vector<std::size_t>& rows) const {
  Dataset out;
  out.name = name;
  out.columns = columns;
  out.standardization = standardization;
  out.features.resize(static_cast<Eigen::Index>(rows.size()), features.cols());
  if (labels) out.labels = Eigen::VectorXi(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= this->rows()) throw InvalidArgument("subset: row " + std::to_string(rows[i]) + " out of range");
    out.features.row(static_cast<Eigen::Index>(i)) = features.row(static_cast<Eigen::Index>(rows[i]));
    if (labels) (*out.labels)[static_cast<Eigen::Index>(i)] = (*labels)[static_cast<Eigen::Index>(rows[i])];
  }
  return out;
}

// CSV ------------------------------------------------------------------------

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split_fields(std::string_view line, char delim) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t end = line.find(delim, start);
    out.push_back(trim(line.substr(start, end == std::string_view::npos ? std::string_view::npos : end - start)));
    if (end == std::string_view::npos) break;
    start = end + 1;
  }
  return out;
}

bool parse_number(std::string_view s, double& out) {
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  if (s.empty()) return false;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

}  // namespace

Dataset parse_csv(const std::string& text, const std::optional<std::string>& label_column, const std::string& name) {
  std::vector<std::string_view> lines;
  {
    std::string_view rest(text);
    while (!rest.empty()) {
      const std::size_t nl = rest.find('\n');
      lines.push_back(rest.substr(0, nl));
      if (nl == std::string_view::npos) break;
      rest.remove_prefix(nl + 1);
    }
  }
  if (lines.empty() || trim(lines.front()).empty()) throw ParseError(name + ": line 1: missing header row");
  const char delim = lines.front().find('\t') != std::string_view::npos ? '\t' : ',';
  const auto header = split_fields(lines.front(), delim);
  int label_idx = -1;
  Dataset data;
  data.name = name;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (label_column && header[i] == *label_column) label_idx = static_cast<int>(i);
    else data.columns.emplace_back(header[i]);
  }
  if (label_column && label_idx < 0) throw ParseError(name + ": line 1: no column named '" + *label_column + "'");
  if (data.columns.empty()) throw ParseError(name + ": line 1: no feature columns");

  std::vector<double> values;
  std::vector<int> labels;
  std::vector<double> row(header.size());
  for (std::size_t ln = 1; ln < lines.size(); ++ln) {
    if (trim(lines[ln]).empty()) continue;
    const auto fields = split_fields(lines[ln], delim);
    const std::string where = name + ": line " + std::to_string(ln + 1) + ": ";
    if (fields.size() != header.size())
      throw ParseError(where + "expected " + std::to_string(header.size()) + " fields, got " + std::to_string(fields.size()));
    bool finite = true;
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (!parse_number(fields[i], row[i]))
        throw ParseError(where + "field " + std::to_string(i + 1) + " ('" + std::string(fields[i]) + "') is not a number");
      finite = finite && std::isfinite(row[i]);
    }
    if (!finite) {
      ++data.rejected_rows;
      continue;
    }
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (static_cast<int>(i) == label_idx) {
        if (row[i] != 0.0 && row[i] != 1.0) throw ParseError(where + "label must be 0 or 1");
        labels.push_back(static_cast<int>(row[i]));
      } else {
        values.push_back(row[i]);
      }
    }
  }
  const auto d = static_cast<Eigen::Index>(data.columns.size());
  const auto n = static_cast<Eigen::Index>(values.size()) / d;
  data.features = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(values.data(), n, d);
  if (label_idx >= 0) data.labels = Eigen::Map<const Eigen::VectorXi>(labels.data(), n);
  return data;
}

Dataset load_csv(const std::filesystem::path& path, const std::optional<std::string>& label_column) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::ostringstream buf;
  buf << in.rdbuf();
  if (in.bad()) throw IoError("error reading '" + path.string() + "'");
  return parse_csv(buf.str(), label_column, path.string());
}

std::string format_double(double v) {
  char buf[32];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc()) throw Error("format_double: conversion failed");
  return std::string(buf, ptr);
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
    out << contents;
    out.flush();
    if (!out) throw IoError("error writing '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw IoError("cannot move output into place at '" + path.string() + "'");
  }
}

void save_csv(const std::filesystem::path& path, const Dataset& data, const std::string& label_column) {
  std::string out;
  for (int j = 0; j < data.dim(); ++j) {
    if (j) out += ',';
    out += j < static_cast<int>(data.columns.size()) ? data.columns[static_cast<std::size_t>(j)] : "x" + std::to_string(j);
  }
  if (data.labels) out += "," + label_column;
  out += '\n';
  for (Eigen::Index i = 0; i < data.features.rows(); ++i) {
    for (Eigen::Index j = 0; j < data.features.cols(); ++j) {
      if (j) out += ',';
      out += format_double(data.features(i, j));
    }
    if (data.labels) out += "," + std::to_string((*data.labels)[i]);
    out += '\n';
  }
  write_file_atomic(path, out);
}

// Splits ---------------------------------------------------------------------

SplitIndices split_indices(const Dataset& data, const SplitSpec& spec) {
  if (spec.train < 0 || spec.valid < 0 || spec.test < 0 || std::abs(spec.train + spec.valid + spec.test - 1.0) > 1e-9)
    throw InvalidArgument("split fractions must be non-negative and sum to 1");
  const std::size_t n = data.rows();
  if (n < 5) throw InvalidArgument("split needs at least 5 rows, got " + std::to_string(n));
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(spec.seed);
  std::shuffle(perm.begin(), perm.end(), rng);

  std::vector<std::size_t> normals, anomalies;
  for (std::size_t i : perm) ((data.labels && (*data.labels)[static_cast<Eigen::Index>(i)] == 1) ? anomalies : normals).push_back(i);
  if (normals.empty()) throw InvalidArgument("split: every row is labelled as an anomaly; nothing to train on");

  SplitIndices out;
  const auto nn = static_cast<double>(normals.size());
  const auto n_train = static_cast<std::size_t>(std::floor(spec.train * nn));
  const auto n_valid = static_cast<std::size_t>(std::floor(spec.valid * nn));
  out.train.assign(normals.begin(), normals.begin() + static_cast<std::ptrdiff_t>(n_train));
  out.valid.assign(normals.begin() + static_cast<std::ptrdiff_t>(n_train),
                   normals.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid));
  out.test.assign(normals.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid), normals.end());

  const double held_out = spec.valid + spec.test;
  const auto a_valid = held_out > 0 ? static_cast<std::size_t>(std::floor(static_cast<double>(anomalies.size()) * spec.valid / held_out)) : 0;
  out.valid.insert(out.valid.end(), anomalies.begin(), anomalies.begin() + static_cast<std::ptrdiff_t>(a_valid));
  out.test.insert(out.test.end(), anomalies.begin() + static_cast<std::ptrdiff_t>(a_valid), anomalies.end());
  return out;
}

Splits split(const Dataset& data, const SplitSpec& spec) {
  SplitIndices idx = split_indices(data, spec);
  Splits out{data.subset(idx.train), data.subset(idx.valid), data.subset(idx.test), {}};
  out.train.name = data.name + "/train";
  out.valid.name = data.name + "/valid";
  out.test.name = data.name + "/test";
  out.indices = std::move(idx);
  return out;
}

Standardization fit_standardization(const Matrix& train) {
  if (train.rows() == 0) throw InvalidArgument("fit_standardization: empty training set");
  Standardization s;
  s.mean = train.colwise().mean().transpose();
  s.std = ((train.rowwise() - s.mean.transpose()).colwise().squaredNorm().transpose() / static_cast<double>(train.rows()))
              .cwiseSqrt();
  for (Eigen::Index j = 0; j < s.std.size(); ++j) {
    if (!(s.std[j] >= kStdFloor)) {
      s.std[j] = kStdFloor;
      s.constant_features.push_back(static_cast<int>(j));
    }
  }
  return s;
}

void standardize(Splits& splits) {
  const Standardization s = fit_standardization(splits.train.features);
  for (Dataset* d : {&splits.train, &splits.valid, &splits.test}) {
    d->features = s.apply(d->features);
    d->standardization = s;
  }
}

// Flower ---------------------------------------------------------------------

Dataset make_flower(std::size_t n, std::uint64_t seed, const FlowerSpec& spec) {
  if (spec.petals < 1) throw InvalidArgument("make_flower: petals must be >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> petal(0, spec.petals - 1);
  std::normal_distribution<double> radial(spec.radius, spec.radial_std);
  std::normal_distribution<double> tangential(0.0, spec.tangential_std);
  Dataset data;
  data.name = "flower";
  data.columns = {"x", "y"};
  data.features.resize(static_cast<Eigen::Index>(n), 2);
  for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(n); ++i) {
    const double phi = 2.0 * std::numbers::pi * petal(rng) / spec.petals;
    const double r = radial(rng);
    const double t = tangential(rng);
    data.features(i, 0) = r * std::cos(phi) - t * std::sin(phi);
    data.features(i, 1) = r * std::sin(phi) + t * std::cos(phi);
  }
  return data;
}

}  // namespace sptn
