#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace cfr {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using IntVector = Eigen::VectorXi;
using IndexList = std::vector<Eigen::Index>;

/// Covariates, binary treatments and factual outcomes, with optional ground
/// truth: expected potential outcomes (mu0, mu1) and the true propensity (e).
///
/// Rows of `x` are units. Ground truth is present for synthetic data; the
/// propensity alone is present for randomized cohorts.
struct ObservationalDataset {
  Matrix x;
  IntVector t;
  Vector y;
  std::optional<Vector> mu0;
  std::optional<Vector> mu1;
  std::optional<Vector> e;
  std::vector<std::string> feature_names;

  Eigen::Index size() const { return x.rows(); }
  Eigen::Index dim() const { return x.cols(); }
  bool has_truth() const { return mu0.has_value() && mu1.has_value(); }

  /// mu1 - mu0. Throws DataError when ground truth is absent.
  Vector true_cate() const;

  /// Rows `indices` in the given order; optional fields are carried along.
  ObservationalDataset subset(std::span<const Eigen::Index> indices) const;

  /// Throws ValidationError on any violated invariant.
  void validate() const;
};

/// Column mapping for CSV ingestion. Every column not named here is a
/// covariate.
struct CsvSchema {
  std::string t_col = "t";
  std::string y_col = "y";
  std::optional<std::string> mu0_col = "mu0";
  std::optional<std::string> mu1_col = "mu1";
  std::optional<std::string> e_col = "e";
  // Ground-truth columns named above are only required when this is set.
  bool require_truth = false;
};

ObservationalDataset load_dataset(const std::string& path, const CsvSchema& schema = {});

/// Writes covariates first, then t, y and any present ground-truth columns,
/// using 17 significant digits so that load_dataset reproduces every value.
void save_dataset(const ObservationalDataset& ds, const std::string& path);

struct DatasetSplit {
  IndexList train;
  IndexList valid;
  IndexList test;
  std::array<double, 3> ratios{1.0, 0.0, 0.0};
  std::uint64_t seed = 0;
};

/// Seeded random split. Valid and test sizes are floor(n * ratio); the
/// remainder goes to train. Each list is sorted ascending.
DatasetSplit split_dataset(Eigen::Index n, std::array<double, 3> ratios, std::uint64_t seed);
inline DatasetSplit split_dataset(const ObservationalDataset& ds, std::array<double, 3> ratios,
                                  std::uint64_t seed) {
  return split_dataset(ds.size(), ratios, seed);
}

/// Per-feature affine standardization with population standard deviation.
/// Constant features get deviation 1.
struct Standardizer {
  Vector mean;
  Vector stddev;

  static Standardizer fit(const Matrix& x, std::span<const Eigen::Index> rows);
  Matrix transform(const Matrix& x) const;
  Matrix inverse_transform(const Matrix& z) const;
};

struct StandardizeResult {
  ObservationalDataset dataset;
  Standardizer standardizer;
};

StandardizeResult standardize(const ObservationalDataset& ds, std::span<const Eigen::Index> fit_rows);

struct TreatmentGroups {
  IndexList control;
  IndexList treated;
};

TreatmentGroups treatment_groups(const ObservationalDataset& ds);
TreatmentGroups treatment_groups(const IntVector& t);

}  // namespace cfr
