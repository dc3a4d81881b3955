#pragma once

#include <utility>

#include "cfr/data.hpp"

namespace cfr {

enum class OutcomeLink { kLinear, kLogistic };

/// Linear (or logistic-link) outcome regression. For an S-learner the
/// treatment enters as one extra feature with coefficient `treatment_coef`.
struct LinearModel {
  Vector coefficients;
  double intercept = 0.0;
  double treatment_coef = 0.0;
  bool uses_treatment = false;
  OutcomeLink link = OutcomeLink::kLinear;
  // Set when the design matrix was rank deficient and a 1e-8 ridge was used.
  bool ridge_fallback = false;

  Vector predict(const Matrix& x, int t) const;
};

struct TLearner {
  LinearModel control;
  LinearModel treated;
};

/// Least squares on [1, x, t].
LinearModel fit_ols_s(const ObservationalDataset& ds);
/// Separate least squares per treatment arm.
TLearner fit_ols_t(const ObservationalDataset& ds);

/// Logistic regression on [1, x, t] (binary outcomes).
LinearModel fit_logistic_s(const ObservationalDataset& ds);
TLearner fit_logistic_t(const ObservationalDataset& ds);

/// Predicted CATE. For a linear S-learner this is the treatment coefficient
/// at every query point.
Vector predict_cate(const LinearModel& s_learner, const Matrix& x);
Vector predict_cate(const TLearner& t_learner, const Matrix& x);

/// Least squares with a rank check; falls back to a 1e-8 ridge. Exposed for
/// reuse by other estimators.
struct LeastSquaresResult {
  Vector beta;
  bool ridge_fallback = false;
};
LeastSquaresResult least_squares(const Matrix& design, const Vector& target);

/// For each query row: mean outcome of its k nearest treated units minus
/// that of its k nearest controls (Euclidean distance; ties to the lowest
/// index). Covariates are expected to be standardized already.
Vector knn_cate(const ObservationalDataset& ds, int k, const Matrix& queries);

/// k-NN counterfactual imputation for the units of `ds` themselves: the
/// factual outcome is kept, the counterfactual is the mean of the k nearest
/// opposite-arm outcomes.
Vector knn_cate_in_sample(const ObservationalDataset& ds, int k);

/// k-NN imputation for out-of-sample rows, where no factual outcome is used.
inline Vector knn_cate_out_of_sample(const ObservationalDataset& train, int k, const Matrix& queries) {
  return knn_cate(train, k, queries);
}

/// Indices of the k rows of `candidates` closest to `point` among `pool`,
/// ordered by (distance, index).
IndexList nearest_neighbors(const Matrix& candidates, const IndexList& pool, const Eigen::RowVectorXd& point, int k);

struct PropensityModel {
  Vector coefficients;
  double intercept = 0.0;
  int iterations = 0;
  double gradient_norm = 0.0;

  /// Strictly inside (0,1); clamped to [1e-12, 1 - 1e-12].
  Vector predict(const Matrix& x) const;
};

/// Penalized maximum-likelihood logistic regression of t on x (L2 penalty on
/// the slopes). Newton iterations with backtracking until the gradient norm
/// drops below `tolerance` or `max_iterations` is reached.
PropensityModel fit_logistic(const Matrix& x, const Vector& labels, double l2_penalty = 1e-6,
                             int max_iterations = 500, double tolerance = 1e-8);

PropensityModel fit_propensity(const ObservationalDataset& ds);

struct BalancingWeights {
  Vector raw;         // p(T = t_i) / p(T = t_i | x_i)
  Vector normalized;  // raw rescaled to mean 1 within each arm
};

/// Inverse-propensity balancing weights with empirical arm fractions.
BalancingWeights balancing_weights(const Vector& eta, const IntVector& t);

}  // namespace cfr
