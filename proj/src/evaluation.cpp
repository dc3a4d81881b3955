#include "cfr/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cfr/baselines.hpp"
#include "cfr/error.hpp"

namespace cfr {

namespace {

void require_truth(const ObservationalDataset& ds, const char* what) {
  if (!ds.has_truth()) throw DataError(std::string(what) + " needs mu0 and mu1");
}

void require_length(const Vector& v, Eigen::Index n, const char* what) {
  if (v.size() != n)
    throw SizeError(std::string(what) + " has length " + std::to_string(v.size()) + ", expected " +
                    std::to_string(n));
}

nlohmann::json optional_number(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

Vector average_ranks(const Vector& v) {
  const auto n = v.size();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return v(a) < v(b); });
  Vector ranks(n);
  for (Eigen::Index i = 0; i < n;) {
    Eigen::Index j = i;
    while (j + 1 < n && v(order[j + 1]) == v(order[i])) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (Eigen::Index k = i; k <= j; ++k) ranks(order[k]) = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double mse_cate(const Vector& tau_hat, const ObservationalDataset& ds) {
  require_truth(ds, "mse_cate");
  require_length(tau_hat, ds.size(), "tau_hat");
  if (ds.size() == 0) throw SizeError("mse_cate on an empty dataset");
  return (ds.true_cate() - tau_hat).squaredNorm() / static_cast<double>(ds.size());
}

double mse_potential(const Vector& prediction, const Vector& truth) {
  require_length(prediction, truth.size(), "prediction");
  if (truth.size() == 0) throw SizeError("mse_potential on an empty vector");
  return (prediction - truth).squaredNorm() / static_cast<double>(truth.size());
}

AteAttError error_ate_att(const Vector& tau_hat, const ObservationalDataset& ds) {
  require_truth(ds, "error_ate_att");
  require_length(tau_hat, ds.size(), "tau_hat");
  if (ds.size() == 0) throw SizeError("error_ate_att on an empty dataset");
  const Vector tau = ds.true_cate();
  AteAttError out;
  const double ate = tau.mean() - tau_hat.mean();
  out.mse_ate = ate * ate;
  const auto treated = treatment_groups(ds).treated;
  if (treated.empty()) throw DataError("ATT needs at least one treated unit");
  double gap = 0.0;
  for (auto i : treated) gap += tau(i) - tau_hat(i);
  gap /= static_cast<double>(treated.size());
  out.mse_att = gap * gap;
  return out;
}

PolicyRiskResult policy_risk_for_decisions(const IntVector& decisions, const ObservationalDataset& ds,
                                           PolicyRiskForm form) {
  if (!ds.e) throw DataError("policy risk needs true propensities (column e)");
  if (decisions.size() != ds.size()) throw SizeError("decision vector length does not match dataset");
  const Vector& e = *ds.e;
  const auto n = ds.size();
  PolicyRiskResult out;
  if (n > 0) out.inclusion_rate = decisions.cast<double>().sum() / static_cast<double>(n);

  std::vector<double> v, y;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (decisions(i) != ds.t(i)) continue;
    const double p = ds.t(i) == 1 ? e(i) : 1.0 - e(i);
    if (!(p > 0.0)) throw ValidationError("propensity of the observed treatment is 0 at row " + std::to_string(i));
    v.push_back(1.0 / p);
    y.push_back(ds.y(i));
  }
  const auto m = v.size();
  out.effective_n = static_cast<Eigen::Index>(m);
  if (m == 0) throw UndefinedRiskError();

  if (form == PolicyRiskForm::kSelfNormalized) {
    double sv = 0.0, svy = 0.0;
    for (std::size_t k = 0; k < m; ++k) {
      sv += v[k];
      svy += v[k] * y[k];
    }
    const double mean = svy / sv;
    double s2 = 0.0;
    for (std::size_t k = 0; k < m; ++k) s2 += v[k] * v[k] * (y[k] - mean) * (y[k] - mean);
    out.risk = 1.0 - mean;
    out.std_error = std::sqrt(s2) / sv;
  } else {
    double total = 0.0;
    for (std::size_t k = 0; k < m; ++k) total += v[k] * y[k];
    const double mean = total / static_cast<double>(m);
    double s2 = 0.0;
    for (std::size_t k = 0; k < m; ++k) s2 += (v[k] * y[k] - mean) * (v[k] * y[k] - mean);
    out.risk = 1.0 - mean;
    out.std_error = m > 1 ? std::sqrt(s2 / static_cast<double>(m - 1) / static_cast<double>(m)) : 0.0;
  }
  return out;
}

PolicyRiskResult policy_risk(const Vector& yhat0, const Vector& yhat1, const ObservationalDataset& ds,
                             double threshold, PolicyRiskForm form) {
  require_length(yhat0, ds.size(), "yhat0");
  require_length(yhat1, ds.size(), "yhat1");
  IntVector decisions(ds.size());
  for (Eigen::Index i = 0; i < ds.size(); ++i) decisions(i) = yhat1(i) - yhat0(i) > threshold ? 1 : 0;
  return policy_risk_for_decisions(decisions, ds, form);
}

std::vector<PolicyCurvePoint> policy_curve(const Vector& yhat0, const Vector& yhat1, const ObservationalDataset& ds,
                                           const std::vector<double>& rates, PolicyRiskForm form) {
  require_length(yhat0, ds.size(), "yhat0");
  require_length(yhat1, ds.size(), "yhat1");
  const auto n = ds.size();
  const Vector tau = yhat1 - yhat0;
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return tau(a) > tau(b); });

  std::vector<PolicyCurvePoint> curve;
  for (double rate : rates) {
    if (!(rate >= 0.0 && rate <= 1.0)) throw ConfigError("inclusion rate must lie in [0,1]");
    const auto k = static_cast<Eigen::Index>(std::llround(rate * static_cast<double>(n)));
    IntVector decisions = IntVector::Zero(n);
    for (Eigen::Index r = 0; r < k; ++r) decisions(order[static_cast<std::size_t>(r)]) = 1;
    const auto res = policy_risk_for_decisions(decisions, ds, form);
    curve.push_back({rate, res.risk, res.effective_n, res.std_error});
  }
  return curve;
}

IndexList nearest_counterfactual_neighbors(const ObservationalDataset& ds) {
  const auto groups = treatment_groups(ds);
  if (groups.control.empty() || groups.treated.empty())
    throw DataError("nearest counterfactual neighbors need both treatment arms");
  IndexList out(static_cast<std::size_t>(ds.size()));
  for (Eigen::Index i = 0; i < ds.size(); ++i) {
    const auto& opposite = ds.t(i) == 1 ? groups.control : groups.treated;
    out[static_cast<std::size_t>(i)] = nearest_neighbors(ds.x, opposite, ds.x.row(i), 1).front();
  }
  return out;
}

Vector nn_imputed_effects(const ObservationalDataset& ds) {
  const auto j = nearest_counterfactual_neighbors(ds);
  Vector out(ds.size());
  for (Eigen::Index i = 0; i < ds.size(); ++i)
    out(i) = (1.0 - 2.0 * ds.t(i)) * (ds.y(j[static_cast<std::size_t>(i)]) - ds.y(i));
  return out;
}

double surrogate_mse_nn(const Vector& tau_hat, const ObservationalDataset& ds) {
  require_length(tau_hat, ds.size(), "tau_hat");
  return (nn_imputed_effects(ds) - tau_hat).squaredNorm() / static_cast<double>(ds.size());
}

double surrogate_mse_nn(const CfrModel& model, const ObservationalDataset& ds) {
  return surrogate_mse_nn(model.predict_cate(ds.x), ds);
}

BoundDiagnostics bound_diagnostics(const CfrModel& model, const ObservationalDataset& ds, const Vector& weights,
                                   double b_constant, double sigma2, int t, const KernelConfig& kernel) {
  if (t != 0 && t != 1) throw ConfigError("bound diagnostics arm must be 0 or 1");
  require_length(weights, ds.size(), "weights");
  if (!(b_constant >= 0.0) || !(sigma2 >= 0.0)) throw ConfigError("B and sigma2 must be nonnegative");
  const auto groups = treatment_groups(ds);
  const auto& arm = t == 1 ? groups.treated : groups.control;
  const auto& other = t == 1 ? groups.control : groups.treated;
  if (arm.empty() || other.empty()) throw DataError("bound diagnostics need both treatment arms");

  BoundDiagnostics out;
  out.arm = t;
  out.user_constant_b = b_constant;
  out.noise_floor_sigma2 = sigma2;
  out.pi_t = static_cast<double>(arm.size()) / static_cast<double>(ds.size());

  const Matrix z = model.forward_representation(ds.x);
  Matrix za(static_cast<Eigen::Index>(other.size()), z.cols());
  Matrix zb(static_cast<Eigen::Index>(arm.size()), z.cols());
  Matrix xb(static_cast<Eigen::Index>(arm.size()), ds.dim());
  Vector wb(static_cast<Eigen::Index>(arm.size()));
  for (std::size_t k = 0; k < other.size(); ++k) za.row(static_cast<Eigen::Index>(k)) = z.row(other[k]);
  for (std::size_t k = 0; k < arm.size(); ++k) {
    const auto r = static_cast<Eigen::Index>(k);
    zb.row(r) = z.row(arm[k]);
    wb(r) = weights(arm[k]);
    if (!(wb(r) >= 0.0) || !std::isfinite(wb(r)))
      throw ValidationError("weight at row " + std::to_string(arm[k]) + " is negative or not finite");
  }
  const Vector f = model.head_output(zb, t);

  const auto m = static_cast<double>(arm.size());
  double risk = 0.0, v_emp = 0.0, v_pop = 0.0;
  for (std::size_t k = 0; k < arm.size(); ++k) {
    const auto r = static_cast<Eigen::Index>(k);
    const double blend = out.pi_t + (1.0 - out.pi_t) * wb(r);
    const double diff = f(r) - ds.y(arm[k]);
    const double loss = diff * diff;
    risk += blend * loss;
    v_emp += blend * blend * loss * loss;
    if (ds.has_truth()) {
      const double mu = t == 1 ? (*ds.mu1)(arm[k]) : (*ds.mu0)(arm[k]);
      const double expected = (f(r) - mu) * (f(r) - mu) + sigma2;
      v_pop += blend * blend * expected * expected;
    }
  }
  out.weighted_factual_risk = risk / m;
  out.variance_term_v = std::max(std::sqrt(v_emp / m), std::sqrt(v_pop / m));

  const auto ipm = mmd2_quadratic(za, zb, Vector(), wb, kernel, MmdForm::kAuto);
  out.ipm_term = std::sqrt(std::max(ipm.value, 0.0));
  out.composed_upper_value = out.weighted_factual_risk + b_constant * (1.0 - out.pi_t) * out.ipm_term +
                             out.variance_term_v + sigma2;
  return out;
}

double spearman_correlation(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) throw SizeError("spearman inputs differ in length");
  if (a.size() < 2) throw SizeError("spearman needs at least two points");
  const Vector ra = average_ranks(a);
  const Vector rb = average_ranks(b);
  const Vector ca = ra.array() - ra.mean();
  const Vector cb = rb.array() - rb.mean();
  const double denom = std::sqrt(ca.squaredNorm() * cb.squaredNorm());
  if (denom == 0.0) throw NumericError("spearman correlation undefined for constant input");
  return ca.dot(cb) / denom;
}

nlohmann::json EvaluationReport::to_json() const {
  nlohmann::json j;
  j["sample_scope"] = sample_scope;
  j["n"] = n;
  j["mse_cate"] = optional_number(mse_cate);
  j["rmse_cate"] = optional_number(rmse_cate);
  j["mse_ate"] = optional_number(mse_ate);
  j["mse_att"] = optional_number(mse_att);
  j["policy_risk"] = optional_number(policy_risk);
  j["surrogate_mse_nn"] = optional_number(surrogate_mse_nn);
  auto& curve = j["policy_risk_at_threshold"] = nlohmann::json::array();
  for (const auto& p : policy_risk_at_threshold)
    curve.push_back({{"threshold", p.threshold},
                     {"inclusion_rate", p.inclusion_rate},
                     {"risk", p.risk},
                     {"effective_n", p.effective_n}});
  if (bound) {
    j["bound"] = {{"arm", bound->arm},
                  {"pi_t", bound->pi_t},
                  {"weighted_factual_risk", bound->weighted_factual_risk},
                  {"ipm_term", bound->ipm_term},
                  {"variance_term_v", bound->variance_term_v},
                  {"user_constant_b", bound->user_constant_b},
                  {"noise_floor_sigma2", bound->noise_floor_sigma2},
                  {"composed_upper_value", bound->composed_upper_value},
                  {"label", bound->label}};
  } else {
    j["bound"] = nullptr;
  }
  return j;
}

EvaluationReport evaluate_predictions(const PotentialOutcomes& pred, const ObservationalDataset& ds,
                                      const std::string& scope, const std::vector<double>& thresholds) {
  require_length(pred.y0, ds.size(), "y0 prediction");
  require_length(pred.y1, ds.size(), "y1 prediction");
  EvaluationReport r;
  r.sample_scope = scope;
  r.n = ds.size();
  const Vector tau_hat = pred.y1 - pred.y0;
  if (ds.has_truth() && ds.size() > 0) {
    r.mse_cate = mse_cate(tau_hat, ds);
    r.rmse_cate = std::sqrt(*r.mse_cate);
    const auto groups = treatment_groups(ds);
    r.mse_ate = error_ate_att(tau_hat, ds).mse_ate;
    if (!groups.treated.empty()) r.mse_att = error_ate_att(tau_hat, ds).mse_att;
  }
  const bool bounded_outcome = ds.size() > 0 && ds.y.minCoeff() >= 0.0 && ds.y.maxCoeff() <= 1.0;
  if (ds.e && bounded_outcome) {
    try {
      r.policy_risk = policy_risk(pred.y0, pred.y1, ds, 0.0).risk;
    } catch (const UndefinedRiskError&) {
    }
    std::vector<double> sorted = thresholds;
    std::sort(sorted.begin(), sorted.end());
    for (double lambda : sorted) {
      ThresholdPoint p;
      p.threshold = lambda;
      try {
        const auto res = policy_risk(pred.y0, pred.y1, ds, lambda);
        p.risk = res.risk;
        p.effective_n = res.effective_n;
        p.inclusion_rate = res.inclusion_rate;
      } catch (const UndefinedRiskError&) {
        // Thresholds whose policy matches no unit are left out of the report.
        continue;
      }
      r.policy_risk_at_threshold.push_back(p);
    }
  }
  const auto arms = treatment_groups(ds);
  if (!arms.control.empty() && !arms.treated.empty()) r.surrogate_mse_nn = surrogate_mse_nn(tau_hat, ds);
  return r;
}

}  // namespace cfr
