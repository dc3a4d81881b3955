#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cfr/data.hpp"
#include "cfr/error.hpp"
#include "cfr/ipm.hpp"
#include "cfr/nnet.hpp"

namespace cfr {

/// Mean over rows of (tau - tau_hat)^2 against mu1 - mu0.
double mse_cate(const Vector& tau_hat, const ObservationalDataset& ds);

/// Mean squared error of one potential-outcome prediction against its truth.
double mse_potential(const Vector& prediction, const Vector& truth);

struct AteAttError {
  double mse_ate = 0.0;
  double mse_att = 0.0;
};

/// Squared error of mean(tau_hat) against mean(tau), over all rows and over
/// the treated rows.
AteAttError error_ate_att(const Vector& tau_hat, const ObservationalDataset& ds);

enum class PolicyRiskForm {
  // Inverse-propensity weights in numerator and denominator.
  kSelfNormalized,
  // Inverse-propensity weights in the numerator only, count in the
  // denominator.
  kLiteral,
};

struct PolicyRiskResult {
  double risk = 0.0;
  Eigen::Index effective_n = 0;  // rows where the policy agrees with t
  double std_error = 0.0;
  double inclusion_rate = 0.0;  // fraction of rows the policy treats
};

class UndefinedRiskError : public NumericError {
 public:
  UndefinedRiskError() : NumericError("policy agrees with no observed treatment; risk is undefined (count 0)") {}
};

/// Rejection-sampling estimate of one minus the expected outcome under a
/// deterministic policy, using the true propensities in `ds.e`.
PolicyRiskResult policy_risk_for_decisions(const IntVector& decisions, const ObservationalDataset& ds,
                                           PolicyRiskForm form = PolicyRiskForm::kSelfNormalized);

/// Policy: treat iff yhat1 - yhat0 > threshold.
PolicyRiskResult policy_risk(const Vector& yhat0, const Vector& yhat1, const ObservationalDataset& ds,
                             double threshold, PolicyRiskForm form = PolicyRiskForm::kSelfNormalized);

struct PolicyCurvePoint {
  double rate = 0.0;
  double risk = 0.0;
  Eigen::Index effective_n = 0;
  double std_error = 0.0;
};

/// For each inclusion rate r, treats the round(r n) rows with the largest
/// predicted effect (ties to the lower index).
std::vector<PolicyCurvePoint> policy_curve(const Vector& yhat0, const Vector& yhat1, const ObservationalDataset& ds,
                                           const std::vector<double>& rates,
                                           PolicyRiskForm form = PolicyRiskForm::kSelfNormalized);

/// Index of the nearest opposite-arm row for every row (ties to the lowest
/// index).
IndexList nearest_counterfactual_neighbors(const ObservationalDataset& ds);

/// (1 - 2 t_i)(y_j(i) - y_i) for every row i.
Vector nn_imputed_effects(const ObservationalDataset& ds);

/// Mean of (imputed effect - tau_hat)^2.
double surrogate_mse_nn(const Vector& tau_hat, const ObservationalDataset& ds);
double surrogate_mse_nn(const CfrModel& model, const ObservationalDataset& ds);

/// Empirical terms of the finite-sample risk bound for one arm. Theory
/// constants are not computed; the composed value is indicative only.
struct BoundDiagnostics {
  int arm = 1;
  double pi_t = 0.0;
  double weighted_factual_risk = 0.0;
  double ipm_term = 0.0;  // MMD (root of the clamped squared estimate)
  double variance_term_v = 0.0;
  double user_constant_b = 0.0;
  double noise_floor_sigma2 = 0.0;
  double composed_upper_value = 0.0;
  std::string label = "diagnostic, not a certified bound";
};

/// `weights` holds one weight per row of `ds`; only the rows of arm `t` are
/// used. The weighted risk uses the blend pi_t + (1 - pi_t) w. The IPM is
/// between the representations of arm 1-t and the w-weighted representations
/// of arm t. V is the larger of the root mean of (blend * loss)^2 with the
/// observed loss and with the expected loss (f - mu_t)^2 + sigma2 when
/// ground truth is present.
BoundDiagnostics bound_diagnostics(const CfrModel& model, const ObservationalDataset& ds, const Vector& weights,
                                   double b_constant, double sigma2, int t,
                                   const KernelConfig& kernel = KernelConfig::median_heuristic());

/// Spearman rank correlation with average ranks for ties.
double spearman_correlation(const Vector& a, const Vector& b);

struct ThresholdPoint {
  double threshold = 0.0;
  double inclusion_rate = 0.0;
  double risk = 0.0;
  Eigen::Index effective_n = 0;
};

struct EvaluationReport {
  std::string sample_scope;  // "within-sample" or "out-of-sample"
  Eigen::Index n = 0;
  std::optional<double> mse_cate;
  std::optional<double> rmse_cate;
  std::optional<double> mse_ate;
  std::optional<double> mse_att;
  std::optional<double> policy_risk;  // at threshold 0
  std::vector<ThresholdPoint> policy_risk_at_threshold;
  std::optional<double> surrogate_mse_nn;
  std::optional<BoundDiagnostics> bound;

  nlohmann::json to_json() const;
};

/// Every metric that the available ground truth allows: CATE/ATE/ATT error
/// with mu0/mu1, policy risk with e and outcomes in [0,1], and the NN
/// surrogate when both arms are present.
EvaluationReport evaluate_predictions(const PotentialOutcomes& pred, const ObservationalDataset& ds,
                                      const std::string& scope, const std::vector<double>& thresholds = {});

}  // namespace cfr
