#include "cfr/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <random>

#include "cfr/error.hpp"
#include "cfr/evaluation.hpp"

namespace cfr {

namespace {

Matrix gather(const Matrix& m, const IndexList& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = m.row(rows[k]);
  return out;
}

Vector gather(const Vector& v, const IndexList& rows) {
  Vector out(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t k = 0; k < rows.size(); ++k) out(static_cast<Eigen::Index>(k)) = v(rows[k]);
  return out;
}

void scatter_add(Matrix& dst, const IndexList& rows, const Matrix& src, double scale) {
  for (std::size_t k = 0; k < rows.size(); ++k) dst.row(rows[k]) += scale * src.row(static_cast<Eigen::Index>(k));
}

void scatter_add(Vector& dst, const IndexList& rows, const Vector& src, double scale) {
  for (std::size_t k = 0; k < rows.size(); ++k) dst(rows[k]) += scale * src(static_cast<Eigen::Index>(k));
}

IpmEstimate batch_ipm(const Matrix& za, const Matrix& zb, const Vector& wa, const Vector& wb,
                      const ObjectiveConfig& cfg) {
  switch (cfg.ipm) {
    case IpmKind::kMmdQuadratic:
      if (wa.size() == 0) return mmd2_quadratic(za, zb, Vector(), Vector(), cfg.kernel, MmdForm::kUnbiased);
      return mmd2_quadratic(za, zb, wa, wb, cfg.kernel,
                            cfg.weighting == Weighting::kLearned ? MmdForm::kWeighted : MmdForm::kAuto);
    case IpmKind::kMmdLinear:
      return mmd2_linear(za, zb, cfg.kernel);
    case IpmKind::kSinkhorn:
      return sinkhorn_distance(za, zb, wa, wb, cfg.sinkhorn);
  }
  throw ConfigError("unknown IPM kind");
}

bool all_finite(const Vector& v) { return v.allFinite(); }

}  // namespace

void ObjectiveConfig::validate() const {
  if (!(alpha >= 0.0) || !(lambda_h >= 0.0) || !(lambda_w >= 0.0))
    throw ConfigError("alpha, lambda_h and lambda_w must be nonnegative");
  if (ipm == IpmKind::kMmdLinear && weighting == Weighting::kLearned)
    throw ConfigError("the linear-time MMD does not support learned weights");
  if (!kernel.median && !(kernel.bandwidth > 0.0)) throw ConfigError("kernel bandwidth must be positive");
  if (!(sinkhorn.entropy_scale > 0.0) || sinkhorn.iterations < 1)
    throw ConfigError("sinkhorn needs a positive entropy scale and at least one iteration");
}

void TrainConfig::validate() const {
  if (batch_size < 4) throw ConfigError("batch_size must be at least 4");
  if (max_epochs < 1) throw ConfigError("max_epochs must be at least 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (early_stop_patience < 1) throw ConfigError("early_stop_patience must be at least 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) || !(epsilon > 0.0))
    throw ConfigError("invalid Adam coefficients");
}

Batch make_batch(const ObservationalDataset& ds, const IndexList& rows, const Vector& fixed_weights) {
  Batch b;
  b.x = gather(ds.x, rows);
  b.t = IntVector(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t k = 0; k < rows.size(); ++k) b.t(static_cast<Eigen::Index>(k)) = ds.t(rows[k]);
  b.y = gather(ds.y, rows);
  if (fixed_weights.size() > 0) {
    if (fixed_weights.size() != ds.size()) throw SizeError("fixed weights need one entry per dataset row");
    b.weights = gather(fixed_weights, rows);
  }
  return b;
}

double factual_weighted_risk(const Vector& yhat, const Vector& y, const Vector& weights) {
  if (yhat.size() != y.size()) throw SizeError("prediction and outcome lengths differ");
  if (y.size() == 0) throw SizeError("factual risk of an empty batch");
  if (weights.size() > 0 && weights.size() != y.size()) throw SizeError("weight length does not match batch");
  const Vector sq = (yhat - y).array().square();
  // Uniform weights go through the same reduction so both paths agree bitwise.
  const Vector w = weights.size() > 0 ? weights : Vector(Vector::Ones(y.size()));
  const double total = sq.cwiseProduct(w).sum();
  return total / static_cast<double>(y.size());
}

double factual_weighted_risk(const CfrModel& model, const Batch& batch, const Vector& weights) {
  const Vector yhat = model.forward_hypothesis(model.forward_representation(batch.x), batch.t);
  return factual_weighted_risk(yhat, batch.y, weights);
}

ObjectiveTerms total_objective(const CfrModel& model, const Batch& batch, const ObjectiveConfig& cfg,
                               bool with_gradient) {
  cfg.validate();
  const auto n = batch.x.rows();
  if (n == 0) throw SizeError("objective of an empty batch");
  const bool learned = cfg.weighting == Weighting::kLearned;
  if (cfg.weighting == Weighting::kFixed && batch.weights.size() != n)
    throw ConfigError("fixed weighting needs one weight per batch row");
  const auto groups = treatment_groups(batch.t);
  if (groups.control.empty() || groups.treated.empty())
    throw SizeError("objective needs both treatment groups in the batch");

  const BatchPass pass = model.forward(batch.x, batch.t, learned);
  const double inv_n = 1.0 / static_cast<double>(n);
  ObjectiveTerms out;
  out.weights = learned ? pass.weights
                        : (cfg.weighting == Weighting::kFixed ? batch.weights : Vector(Vector::Ones(n)));

  const Vector resid = pass.yhat - batch.y;
  out.risk = factual_weighted_risk(pass.yhat, batch.y, out.weights);

  Vector d_yhat, d_weights;
  Matrix d_z;
  if (with_gradient) {
    d_yhat = (2.0 * inv_n) * out.weights.cwiseProduct(resid);
    if (learned) d_weights = inv_n * resid.array().square().matrix();
  }

  double head_term = 0.0;
  const auto hb = model.head_block();
  const auto theta = model.parameters().segment(hb.offset, hb.size);
  out.head_norm = theta.norm();
  const double head_coef = cfg.lambda_h / std::sqrt(static_cast<double>(n));
  if (cfg.lambda_h > 0.0) head_term = head_coef * out.head_norm;

  double ipm_term = 0.0;
  {
    const Matrix za = gather(pass.z, groups.control);
    const Matrix zb = gather(pass.z, groups.treated);
    Vector wa, wb;
    if (cfg.weighting != Weighting::kUniform) {
      wa = gather(out.weights, groups.control);
      wb = gather(out.weights, groups.treated);
    }
    IpmEstimate est;
    bool have = true;
    try {
      est = batch_ipm(za, zb, wa, wb, cfg);
    } catch (const NumericError&) {
      // The IPM is only reported when it does not enter the objective.
      if (cfg.alpha > 0.0) throw;
      have = false;
    }
    if (have) {
      out.ipm = est.value;
      out.ipm_raw = est.raw_value;
    } else {
      out.ipm = out.ipm_raw = std::numeric_limits<double>::quiet_NaN();
    }
    if (cfg.alpha > 0.0) {
      ipm_term = cfg.alpha * est.value;
      // The clamp at 0 has zero gradient on the negative side.
      if (with_gradient && est.raw_value > 0.0) {
        d_z = Matrix::Zero(n, pass.z.cols());
        scatter_add(d_z, groups.control, est.grad_a, cfg.alpha);
        scatter_add(d_z, groups.treated, est.grad_b, cfg.alpha);
        if (learned) {
          if (est.grad_weights_a.size() > 0) scatter_add(d_weights, groups.control, est.grad_weights_a, cfg.alpha);
          if (est.grad_weights_b.size() > 0) scatter_add(d_weights, groups.treated, est.grad_weights_b, cfg.alpha);
        }
      }
    }
  }

  double weight_term = 0.0;
  if (learned) {
    const double wn = out.weights.norm();
    out.weight_norm = wn * inv_n;
    if (cfg.lambda_w > 0.0) {
      weight_term = cfg.lambda_w * out.weight_norm;
      if (with_gradient && wn > 0.0) d_weights += (cfg.lambda_w * inv_n / wn) * out.weights;
    }
  }

  out.total = out.risk + head_term + ipm_term + weight_term;
  if (with_gradient) {
    out.gradient = model.backward(pass, d_yhat, d_z, learned ? d_weights : Vector());
    if (cfg.lambda_h > 0.0 && out.head_norm > 0.0)
      out.gradient.segment(hb.offset, hb.size) += (head_coef / out.head_norm) * theta;
  }
  return out;
}

double representation_ipm(const CfrModel& model, const ObservationalDataset& ds, const IndexList& rows,
                          const ObjectiveConfig& cfg) {
  const Batch b = make_batch(ds, rows);
  const auto groups = treatment_groups(b.t);
  if (groups.control.empty() || groups.treated.empty())
    throw SizeError("representation IPM needs both treatment groups");
  const Matrix z = model.forward_representation(b.x);
  ObjectiveConfig uniform = cfg;
  uniform.weighting = Weighting::kUniform;
  return batch_ipm(gather(z, groups.control), gather(z, groups.treated), Vector(), Vector(), uniform).value;
}

std::vector<IndexList> stratified_batches(const IntVector& t, const IndexList& rows, int batch_size, Rng& rng) {
  if (batch_size < 4) throw ConfigError("batch_size must be at least 4");
  IndexList control, treated;
  for (auto i : rows) (t(i) == 1 ? treated : control).push_back(i);
  if (control.size() < 2 || treated.size() < 2)
    throw SizeError("stratified batching needs at least two units of each treatment group");
  std::shuffle(control.begin(), control.end(), rng);
  std::shuffle(treated.begin(), treated.end(), rng);
  const std::size_t n = rows.size();
  std::size_t count = (n + static_cast<std::size_t>(batch_size) - 1) / static_cast<std::size_t>(batch_size);
  count = std::min({count, control.size() / 2, treated.size() / 2});
  count = std::max<std::size_t>(count, 1);
  std::vector<IndexList> batches(count);
  for (std::size_t b = 0; b < count; ++b) {
    for (const auto* group : {&control, &treated}) {
      const std::size_t lo = b * group->size() / count;
      const std::size_t hi = (b + 1) * group->size() / count;
      batches[b].insert(batches[b].end(), group->begin() + static_cast<std::ptrdiff_t>(lo),
                        group->begin() + static_cast<std::ptrdiff_t>(hi));
    }
  }
  return batches;
}

void TrainHistory::write_csv(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw Error("cannot write history to " + path);
  out << "epoch,risk,ipm,wnorm,objective_train,objective_valid,criterion\n";
  char buf[512];
  for (const auto& r : epochs) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.epoch, r.risk, r.ipm, r.wnorm,
                  r.objective_train, r.objective_valid, r.criterion);
    out << buf;
  }
}

TrainResult train(CfrModel model, const ObservationalDataset& ds, const DatasetSplit& split,
                  const ObjectiveConfig& ocfg, const TrainConfig& tcfg, const Vector& fixed_weights) {
  ocfg.validate();
  tcfg.validate();
  if (split.train.empty() || split.valid.empty()) throw SizeError("training needs nonempty train and valid splits");
  if (model.architecture().input_dim != ds.dim())
    throw SizeError("model input dimension " + std::to_string(model.architecture().input_dim) +
                    " does not match dataset dimension " + std::to_string(ds.dim()));
  if (ocfg.weighting == Weighting::kFixed && fixed_weights.size() != ds.size())
    throw ConfigError("fixed weighting needs one weight per dataset row");
  if (ocfg.weighting == Weighting::kLearned && !model.architecture().has_weight_head())
    throw ConfigError("learned weighting needs a model with a weight head");

  const Vector& w = ocfg.weighting == Weighting::kFixed ? fixed_weights : Vector();
  const Batch valid_batch = make_batch(ds, split.valid, w);
  const ObservationalDataset valid_ds = ds.subset(split.valid);
  Vector valid_imputed;
  if (tcfg.validation == ValidationCriterion::kSurrogateMse) valid_imputed = nn_imputed_effects(valid_ds);
  if (tcfg.validation == ValidationCriterion::kPolicyRisk && !valid_ds.e)
    throw DataError("policy-risk early stopping needs true propensities");

  Rng rng = make_rng(tcfg.seed, "batching");
  const auto p = model.parameter_count();
  Vector m = Vector::Zero(p), v = Vector::Zero(p);
  double b1t = 1.0, b2t = 1.0;

  TrainResult result;
  auto& history = result.history;
  Vector best = model.parameters();
  double best_crit = std::numeric_limits<double>::infinity();
  int since_best = 0;

  for (int epoch = 1; epoch <= tcfg.max_epochs; ++epoch) {
    const auto batches = stratified_batches(ds.t, split.train, tcfg.batch_size, rng);
    EpochRecord rec;
    rec.epoch = epoch;
    double count = 0.0;
    for (const auto& rows : batches) {
      const Batch batch = make_batch(ds, rows, w);
      ObjectiveTerms terms;
      try {
        terms = total_objective(model, batch, ocfg, true);
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " (epoch " + std::to_string(epoch) + ", last finite epoch " +
                           std::to_string(epoch - 1) + ")");
      }
      if (!std::isfinite(terms.total) || !all_finite(terms.gradient))
        throw NumericError("training diverged at epoch " + std::to_string(epoch) + "; last finite epoch " +
                           std::to_string(epoch - 1));
      const double nb = static_cast<double>(rows.size());
      rec.risk += nb * terms.risk;
      rec.ipm += nb * terms.ipm;
      rec.wnorm += nb * terms.weight_norm;
      rec.objective_train += nb * terms.total;
      count += nb;

      b1t *= tcfg.beta1;
      b2t *= tcfg.beta2;
      m = tcfg.beta1 * m + (1.0 - tcfg.beta1) * terms.gradient;
      v = tcfg.beta2 * v + (1.0 - tcfg.beta2) * terms.gradient.cwiseAbs2();
      const double step = tcfg.learning_rate * std::sqrt(1.0 - b2t) / (1.0 - b1t);
      model.parameters().array() -= step * m.array() / (v.array().sqrt() + tcfg.epsilon);
    }
    rec.risk /= count;
    rec.ipm /= count;
    rec.wnorm /= count;
    rec.objective_train /= count;

    const auto valid_groups = treatment_groups(valid_batch.t);
    if (!valid_groups.control.empty() && !valid_groups.treated.empty()) {
      rec.objective_valid = total_objective(model, valid_batch, ocfg, false).total;
    } else {
      rec.objective_valid = factual_weighted_risk(model, valid_batch);
    }
    switch (tcfg.validation) {
      case ValidationCriterion::kObjective:
        rec.criterion = rec.objective_valid;
        break;
      case ValidationCriterion::kSurrogateMse:
        rec.criterion = (valid_imputed - model.predict_cate(valid_ds.x)).squaredNorm() /
                        static_cast<double>(valid_ds.size());
        break;
      case ValidationCriterion::kPolicyRisk: {
        const auto po = model.predict_potential_outcomes(valid_ds.x);
        try {
          rec.criterion = policy_risk(po.y0, po.y1, valid_ds, 0.0).risk;
        } catch (const UndefinedRiskError&) {
          rec.criterion = std::numeric_limits<double>::infinity();
        }
        break;
      }
    }
    if (!std::isfinite(rec.objective_valid))
      throw NumericError("validation objective is not finite at epoch " + std::to_string(epoch) +
                         "; last finite epoch " + std::to_string(epoch - 1));
    history.epochs.push_back(rec);

    if (rec.criterion < best_crit) {
      best_crit = rec.criterion;
      best = model.parameters();
      history.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= tcfg.early_stop_patience) {
      break;
    }
  }
  history.best_criterion = best_crit;
  model.set_parameters(best);
  result.model = std::move(model);
  return result;
}

std::vector<double> table_alpha_grid() {
  std::vector<double> grid;
  for (int k = -10; k <= 6; ++k) grid.push_back(std::pow(10.0, 0.5 * k));
  return grid;
}

std::vector<AlphaSweepEntry> alpha_sweep(const ObservationalDataset& ds, const DatasetSplit& split,
                                         const std::vector<double>& grid, const Architecture& arch,
                                         const ObjectiveConfig& ocfg, const TrainConfig& tcfg,
                                         const Vector& fixed_weights) {
  if (grid.empty()) throw ConfigError("alpha grid must be nonempty");
  const CfrModel initial = CfrModel::init(arch, tcfg.seed);
  const ObservationalDataset valid_ds = ds.subset(split.valid);
  std::vector<AlphaSweepEntry> out;
  for (double alpha : grid) {
    ObjectiveConfig cfg = ocfg;
    cfg.alpha = alpha;
    AlphaSweepEntry entry;
    entry.alpha = alpha;
    entry.result = train(initial, ds, split, cfg, tcfg, fixed_weights);
    entry.surrogate_valid = surrogate_mse_nn(entry.result.model, valid_ds);
    entry.ipm_train = representation_ipm(entry.result.model, ds, split.train, cfg);
    out.push_back(std::move(entry));
  }
  return out;
}

std::vector<GradcheckCase> gradient_check_suite(std::uint64_t seed, double step) {
  constexpr int d = 3, n = 12;
  Rng rng = make_rng(seed, "gradcheck");
  std::normal_distribution<double> normal(0.0, 1.0);
  Batch batch;
  batch.x = Matrix(n, d);
  batch.t = IntVector(n);
  batch.y = Vector(n);
  for (int i = 0; i < n; ++i) {
    batch.t(i) = i % 3 == 0 ? 1 : 0;
    for (int j = 0; j < d; ++j) batch.x(i, j) = normal(rng) + (batch.t(i) ? 1.0 : 0.0);
    batch.y(i) = normal(rng);
  }

  std::vector<GradcheckCase> cases;
  auto add = [&](int reps, int heads, bool weighted, IpmKind ipm) {
    GradcheckCase c;
    c.arch = Architecture::standard(d, reps, 4, heads, 3, weighted ? 1 : -1, weighted ? 3 : 0);
    c.objective.alpha = 1.5;
    c.objective.lambda_h = 0.1;
    c.objective.ipm = ipm;
    c.objective.kernel = KernelConfig::fixed(1.5);
    c.objective.sinkhorn = {5.0, 20, SinkhornGradient::kUnrolled};
    if (weighted) {
      c.objective.weighting = Weighting::kLearned;
      c.objective.lambda_w = 0.5;
    }
    c.name = std::string(weighted ? "eq17" : "eq16") + "-" + to_string(ipm) + "-rep" + std::to_string(reps) +
             "-head" + std::to_string(heads + 1);
    cases.push_back(std::move(c));
  };
  for (int reps = 1; reps <= 3; ++reps)
    for (int heads = 0; heads <= 1; ++heads)
      for (auto ipm : {IpmKind::kMmdQuadratic, IpmKind::kSinkhorn}) add(reps, heads, false, ipm);
  for (int reps = 1; reps <= 3; ++reps) add(reps, 1, true, reps == 2 ? IpmKind::kSinkhorn : IpmKind::kMmdQuadratic);

  for (std::size_t k = 0; k < cases.size(); ++k) {
    auto& c = cases[k];
    const CfrModel model = CfrModel::init(c.arch, mix_seed(seed + k));
    const auto terms = total_objective(model, batch, c.objective, true);
    auto objective = [&](const Vector& p) {
      CfrModel m = model;
      m.set_parameters(p);
      return total_objective(m, batch, c.objective, false).total;
    };
    c.report = check_gradient(objective, model.parameters(), terms.gradient, model.blocks(), step);
  }
  return cases;
}

std::string to_string(IpmKind kind) {
  switch (kind) {
    case IpmKind::kMmdQuadratic: return "mmd";
    case IpmKind::kMmdLinear: return "mmd-linear";
    case IpmKind::kSinkhorn: return "wass";
  }
  return "?";
}

std::string to_string(Weighting w) {
  switch (w) {
    case Weighting::kUniform: return "uniform";
    case Weighting::kFixed: return "fixed";
    case Weighting::kLearned: return "learned";
  }
  return "?";
}

std::string to_string(ValidationCriterion c) {
  switch (c) {
    case ValidationCriterion::kObjective: return "objective";
    case ValidationCriterion::kSurrogateMse: return "surrogate";
    case ValidationCriterion::kPolicyRisk: return "policy-risk";
  }
  return "?";
}

IpmKind parse_ipm_kind(const std::string& s) {
  if (s == "mmd" || s == "mmd-quadratic") return IpmKind::kMmdQuadratic;
  if (s == "mmd-linear") return IpmKind::kMmdLinear;
  if (s == "wass" || s == "sinkhorn") return IpmKind::kSinkhorn;
  throw ConfigError("unknown ipm '" + s + "' (expected mmd, mmd-linear or wass)");
}

Weighting parse_weighting(const std::string& s) {
  if (s == "uniform") return Weighting::kUniform;
  if (s == "fixed") return Weighting::kFixed;
  if (s == "learned") return Weighting::kLearned;
  throw ConfigError("unknown weighting '" + s + "' (expected uniform, fixed or learned)");
}

ValidationCriterion parse_validation_criterion(const std::string& s) {
  if (s == "objective") return ValidationCriterion::kObjective;
  if (s == "surrogate") return ValidationCriterion::kSurrogateMse;
  if (s == "policy-risk") return ValidationCriterion::kPolicyRisk;
  throw ConfigError("unknown validation criterion '" + s + "' (expected objective, surrogate or policy-risk)");
}

}  // namespace cfr
