#pragma once

#include <optional>

#include "cfr/data.hpp"

namespace cfr {

/// Gaussian RBF kernel k(x, x') = exp(-|x - x'|^2 / (2 sigma^2)).
struct KernelConfig {
  // Used when `median` is false.
  double bandwidth = 1.0;
  // Median pairwise distance of the pooled clouds, recomputed per call.
  bool median = true;

  static KernelConfig fixed(double sigma) { return {sigma, false}; }
  static KernelConfig median_heuristic() { return {1.0, true}; }
};

struct KernelMatrix {
  Matrix values;
  double bandwidth = 1.0;
  // Set when the median heuristic hit a zero median and fell back to 1.
  bool bandwidth_fallback = false;
};

/// Median over all distinct pairs of the pooled rows of `a` and `b`.
double median_pairwise_distance(const Matrix& a, const Matrix& b);

KernelMatrix rbf_kernel_matrix(const Matrix& a, const Matrix& b, const KernelConfig& cfg);

/// A distance between two point clouds and its derivatives.
///
/// `grad_a` / `grad_b` are derivatives of `value` with respect to the rows of
/// the clouds. When weights or marginals were supplied, `grad_weights_a` /
/// `grad_weights_b` are derivatives with respect to those raw (unnormalized)
/// inputs; otherwise they are empty.
struct IpmEstimate {
  double value = 0.0;      // max(raw_value, 0)
  double raw_value = 0.0;  // unbiased MMD^2 may be negative
  Matrix grad_a;
  Matrix grad_b;
  Vector grad_weights_a;
  Vector grad_weights_b;
  std::optional<Matrix> transport;
  bool biased = false;
  double bandwidth = 0.0;
  bool bandwidth_fallback = false;
};

enum class MmdForm {
  // U-statistic when both weight vectors are empty or constant, weighted
  // V-statistic otherwise.
  kAuto,
  kUnbiased,
  kWeighted,
};

/// Quadratic-time MMD^2. The unbiased form excludes the within-cloud
/// diagonals; the weighted form is the plug-in V-statistic between the
/// weight-normalized empirical measures. Gradients use the resolved bandwidth
/// as a constant.
IpmEstimate mmd2_quadratic(const Matrix& a, const Matrix& b, const Vector& weights_a, const Vector& weights_b,
                           const KernelConfig& cfg, MmdForm form = MmdForm::kAuto);

inline IpmEstimate mmd2_quadratic(const Matrix& a, const Matrix& b, const KernelConfig& cfg) {
  return mmd2_quadratic(a, b, Vector(), Vector(), cfg, MmdForm::kUnbiased);
}

/// Linear-time MMD^2 over consecutive pairs. Both clouds are truncated to
/// the largest common even length.
IpmEstimate mmd2_linear(const Matrix& a, const Matrix& b, const KernelConfig& cfg);

enum class SinkhornGradient {
  // Transport plan held fixed; derivative of <T, M> through M only.
  kFixedPlan,
  // Reverse-mode through every fixed-point iteration; exact derivative of
  // the returned value.
  kUnrolled,
};

struct SinkhornConfig {
  double entropy_scale = 10.0;  // lambda in K = exp(-lambda M)
  int iterations = 10;
  SinkhornGradient gradient = SinkhornGradient::kFixedPlan;
};

/// Entropic optimal transport with Euclidean ground cost. Marginals may be
/// empty (uniform) or nonnegative weights, normalized internally to sum 1.
///
/// Iterates v = b ./ (K^T u), u = a ./ (K v) from u = 1, then finishes with a
/// final v update so that T = diag(u) K diag(v) has exact column marginals.
/// Marginal gradients are always taken through the iterations; the point
/// gradients follow `cfg.gradient`.
IpmEstimate sinkhorn_distance(const Matrix& a, const Matrix& b, const Vector& marginals_a, const Vector& marginals_b,
                              const SinkhornConfig& cfg);

/// Pairwise Euclidean distances between rows.
Matrix euclidean_distances(const Matrix& a, const Matrix& b);

}  // namespace cfr
