#include "cfr/baselines.hpp"

#include <algorithm>
#include <cmath>

#include "cfr/error.hpp"

namespace cfr {

namespace {

Matrix design_matrix(const Matrix& x, const IntVector* t) {
  const auto extra = t ? 2 : 1;
  Matrix d(x.rows(), x.cols() + extra);
  d.col(0).setOnes();
  d.middleCols(1, x.cols()) = x;
  if (t) d.col(x.cols() + 1) = t->cast<double>();
  return d;
}

double sigmoid(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

double softplus(double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); }

LinearModel unpack(const Vector& beta, Eigen::Index d, bool with_t, OutcomeLink link, bool ridge) {
  LinearModel m;
  m.intercept = beta(0);
  m.coefficients = beta.segment(1, d);
  m.uses_treatment = with_t;
  if (with_t) m.treatment_coef = beta(d + 1);
  m.link = link;
  m.ridge_fallback = ridge;
  return m;
}

TLearner fit_per_arm(const ObservationalDataset& ds, OutcomeLink link) {
  const auto groups = treatment_groups(ds);
  if (groups.control.empty() || groups.treated.empty())
    throw SizeError("T-learner needs both treatment arms to be nonempty");
  TLearner out;
  LinearModel* targets[2] = {&out.control, &out.treated};
  const IndexList* rows[2] = {&groups.control, &groups.treated};
  for (int g = 0; g < 2; ++g) {
    const auto arm = ds.subset(*rows[g]);
    if (link == OutcomeLink::kLinear) {
      const auto ls = least_squares(design_matrix(arm.x, nullptr), arm.y);
      *targets[g] = unpack(ls.beta, ds.dim(), false, link, ls.ridge_fallback);
    } else {
      const auto lr = fit_logistic(arm.x, arm.y);
      LinearModel m;
      m.intercept = lr.intercept;
      m.coefficients = lr.coefficients;
      m.link = link;
      *targets[g] = m;
    }
  }
  return out;
}

}  // namespace

Vector LinearModel::predict(const Matrix& x, int t) const {
  Vector score = (x * coefficients).array() + intercept;
  if (uses_treatment) score.array() += treatment_coef * t;
  if (link == OutcomeLink::kLogistic) score = score.unaryExpr([](double v) { return sigmoid(v); });
  return score;
}

LeastSquaresResult least_squares(const Matrix& design, const Vector& target) {
  if (design.rows() != target.size()) throw SizeError("design rows do not match target length");
  Eigen::ColPivHouseholderQR<Matrix> qr(design);
  if (qr.rank() == design.cols()) return {qr.solve(target), false};
  const Matrix gram = design.transpose() * design + 1e-8 * Matrix::Identity(design.cols(), design.cols());
  return {gram.ldlt().solve(design.transpose() * target), true};
}

LinearModel fit_ols_s(const ObservationalDataset& ds) {
  const auto ls = least_squares(design_matrix(ds.x, &ds.t), ds.y);
  return unpack(ls.beta, ds.dim(), true, OutcomeLink::kLinear, ls.ridge_fallback);
}

TLearner fit_ols_t(const ObservationalDataset& ds) { return fit_per_arm(ds, OutcomeLink::kLinear); }

LinearModel fit_logistic_s(const ObservationalDataset& ds) {
  Matrix xt(ds.size(), ds.dim() + 1);
  xt << ds.x, ds.t.cast<double>();
  const auto lr = fit_logistic(xt, ds.y);
  LinearModel m;
  m.intercept = lr.intercept;
  m.coefficients = lr.coefficients.head(ds.dim());
  m.treatment_coef = lr.coefficients(ds.dim());
  m.uses_treatment = true;
  m.link = OutcomeLink::kLogistic;
  return m;
}

TLearner fit_logistic_t(const ObservationalDataset& ds) { return fit_per_arm(ds, OutcomeLink::kLogistic); }

Vector predict_cate(const LinearModel& s, const Matrix& x) { return s.predict(x, 1) - s.predict(x, 0); }

Vector predict_cate(const TLearner& t, const Matrix& x) { return t.treated.predict(x, 1) - t.control.predict(x, 0); }

IndexList nearest_neighbors(const Matrix& candidates, const IndexList& pool, const Eigen::RowVectorXd& point, int k) {
  if (k < 1) throw ConfigError("k must be at least 1");
  if (static_cast<std::size_t>(k) > pool.size())
    throw SizeError("k=" + std::to_string(k) + " exceeds group size " + std::to_string(pool.size()));
  std::vector<std::pair<double, Eigen::Index>> d;
  d.reserve(pool.size());
  for (auto i : pool) d.emplace_back((candidates.row(i) - point).squaredNorm(), i);
  std::partial_sort(d.begin(), d.begin() + k, d.end());
  IndexList out;
  for (int j = 0; j < k; ++j) out.push_back(d[static_cast<std::size_t>(j)].second);
  return out;
}

Vector knn_cate(const ObservationalDataset& ds, int k, const Matrix& queries) {
  if (queries.cols() != ds.dim()) throw SizeError("query dimension does not match dataset");
  const auto groups = treatment_groups(ds);
  Vector tau(queries.rows());
  for (Eigen::Index q = 0; q < queries.rows(); ++q) {
    const Eigen::RowVectorXd point = queries.row(q);
    double m1 = 0.0, m0 = 0.0;
    for (auto i : nearest_neighbors(ds.x, groups.treated, point, k)) m1 += ds.y(i);
    for (auto i : nearest_neighbors(ds.x, groups.control, point, k)) m0 += ds.y(i);
    tau(q) = (m1 - m0) / k;
  }
  return tau;
}

Vector knn_cate_in_sample(const ObservationalDataset& ds, int k) {
  const auto groups = treatment_groups(ds);
  Vector tau(ds.size());
  for (Eigen::Index i = 0; i < ds.size(); ++i) {
    const auto& opposite = ds.t(i) == 1 ? groups.control : groups.treated;
    double m = 0.0;
    for (auto j : nearest_neighbors(ds.x, opposite, ds.x.row(i), k)) m += ds.y(j);
    m /= k;
    tau(i) = ds.t(i) == 1 ? ds.y(i) - m : m - ds.y(i);
  }
  return tau;
}

Vector PropensityModel::predict(const Matrix& x) const {
  const Vector score = (x * coefficients).array() + intercept;
  return score.unaryExpr([](double v) { return std::clamp(sigmoid(v), 1e-12, 1.0 - 1e-12); });
}

PropensityModel fit_logistic(const Matrix& x, const Vector& labels, double l2_penalty, int max_iterations,
                             double tolerance) {
  const auto n = x.rows();
  if (labels.size() != n) throw SizeError("label length does not match rows");
  if (n < 1) throw SizeError("logistic regression needs data");
  if ((labels.array() == labels(0)).all() && (labels(0) == 0.0 || labels(0) == 1.0))
    throw DataError("logistic regression needs both classes to be present");

  const Matrix design = design_matrix(x, nullptr);
  const auto p = design.cols();
  const double inv_n = 1.0 / static_cast<double>(n);
  Vector penalty = Vector::Constant(p, l2_penalty);
  penalty(0) = 0.0;

  auto objective = [&](const Vector& beta) {
    const Vector s = design * beta;
    double f = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) f += labels(i) * softplus(-s(i)) + (1.0 - labels(i)) * softplus(s(i));
    return f * inv_n + 0.5 * beta.cwiseProduct(penalty).dot(beta);
  };

  Vector beta = Vector::Zero(p);
  double f = objective(beta);
  PropensityModel model;
  int it = 0;
  double gnorm = 0.0;
  for (; it < max_iterations; ++it) {
    const Vector s = design * beta;
    const Vector mu = s.unaryExpr([](double v) { return sigmoid(v); });
    const Vector grad = inv_n * design.transpose() * (mu - labels) + penalty.cwiseProduct(beta);
    gnorm = grad.norm();
    if (gnorm < tolerance) break;
    const Vector w = mu.cwiseProduct(Vector::Ones(n) - mu);
    Matrix hess = inv_n * design.transpose() * w.asDiagonal() * design;
    hess.diagonal() += penalty;
    hess.diagonal().array() += 1e-12;
    const Vector step = hess.ldlt().solve(grad);
    double scale = 1.0;
    Vector candidate = beta - step;
    double fc = objective(candidate);
    while (!(fc <= f) && scale > 1e-10) {
      scale *= 0.5;
      candidate = beta - scale * step;
      fc = objective(candidate);
    }
    if (!(fc <= f)) break;
    beta = candidate;
    f = fc;
  }
  model.intercept = beta(0);
  model.coefficients = beta.tail(p - 1);
  model.iterations = it;
  model.gradient_norm = gnorm;
  return model;
}

PropensityModel fit_propensity(const ObservationalDataset& ds) {
  const auto groups = treatment_groups(ds);
  if (groups.control.empty() || groups.treated.empty())
    throw DataError("propensity model needs both treatment arms to be nonempty");
  return fit_logistic(ds.x, ds.t.cast<double>());
}

BalancingWeights balancing_weights(const Vector& eta, const IntVector& t) {
  if (eta.size() != t.size()) throw SizeError("propensity and treatment lengths differ");
  const auto n = t.size();
  if (n == 0) throw SizeError("balancing weights need data");
  const double pi1 = t.cast<double>().mean();
  const double pi0 = 1.0 - pi1;
  BalancingWeights w;
  w.raw.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double e = eta(i);
    if (!(e > 0.0 && e < 1.0)) throw ValidationError("propensity at row " + std::to_string(i) + " is not in (0,1)");
    w.raw(i) = t(i) == 1 ? pi1 / e : pi0 / (1.0 - e);
  }
  w.normalized = w.raw;
  const auto groups = treatment_groups(t);
  for (const auto* rows : {&groups.control, &groups.treated}) {
    if (rows->empty()) continue;
    // Equal raw weights normalize to exactly 1, which keeps the fixed-weight
    // objective bitwise equal to the uniform one.
    const double first = w.raw((*rows)[0]);
    if (std::all_of(rows->begin(), rows->end(), [&](Eigen::Index i) { return w.raw(i) == first; })) {
      for (auto i : *rows) w.normalized(i) = 1.0;
      continue;
    }
    double total = 0.0;
    for (auto i : *rows) total += w.raw(i);
    const double scale = static_cast<double>(rows->size()) / total;
    for (auto i : *rows) w.normalized(i) = w.raw(i) * scale;
  }
  return w;
}

}  // namespace cfr
