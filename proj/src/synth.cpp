#include "cfr/synth.hpp"

#include <algorithm>
#include <cmath>

#include "cfr/baselines.hpp"
#include "cfr/error.hpp"
#include "cfr/rng.hpp"

namespace cfr {

namespace {

double sigmoid(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

Matrix standard_normal(Eigen::Index n, Eigen::Index d, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix x(n, d);
  // Row-major fill so that a prefix of rows does not depend on n.
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j) x(i, j) = normal(rng);
  return x;
}

std::vector<std::string> default_names(int d) {
  std::vector<std::string> names;
  for (int j = 0; j < d; ++j) names.push_back("x" + std::to_string(j + 1));
  return names;
}

}  // namespace

void IhdpLikeConfig::validate() const {
  if (n < 4) throw ConfigError("IHDP-like generator needs n >= 4");
  if (d < 1) throw ConfigError("IHDP-like generator needs d >= 1");
  if (!(sparsity >= 0.0 && sparsity <= 1.0)) throw ConfigError("sparsity must lie in [0,1]");
  if (!(noise_std >= 0.0)) throw ConfigError("noise_std must be nonnegative");
  if (coefficient_levels.empty()) throw ConfigError("coefficient_levels must be nonempty");
  if (!(treated_fraction > 0.0 && treated_fraction < 1.0)) throw ConfigError("treated_fraction must lie in (0,1)");
}

IhdpLikeDraw generate_ihdp_like_draw(const IhdpLikeConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng cov_rng = make_rng(seed, "covariates");
  Rng coef_rng = make_rng(seed, "coefficients");
  Rng assign_rng = make_rng(seed, "assignment");
  Rng noise_rng = make_rng(seed, "noise");

  IhdpLikeDraw draw;
  auto& ds = draw.dataset;
  ds.x = standard_normal(cfg.n, cfg.d, cov_rng);
  ds.feature_names = default_names(cfg.d);

  std::bernoulli_distribution zero(cfg.sparsity);
  std::uniform_int_distribution<std::size_t> level(0, cfg.coefficient_levels.size() - 1);
  draw.beta = Vector::Zero(cfg.d);
  for (int j = 0; j < cfg.d; ++j) {
    const bool is_zero = zero(coef_rng);
    const double v = cfg.coefficient_levels[level(coef_rng)];
    draw.beta(j) = is_zero ? 0.0 : v;
  }

  std::normal_distribution<double> normal(0.0, 1.0);
  draw.assignment_direction = Vector(cfg.d);
  for (int j = 0; j < cfg.d; ++j) draw.assignment_direction(j) = normal(assign_rng);
  draw.assignment_direction.normalize();
  const double logit0 = std::log(cfg.treated_fraction / (1.0 - cfg.treated_fraction));

  const Vector score = ds.x * draw.assignment_direction;
  ds.e = Vector(cfg.n);
  ds.t = IntVector(cfg.n);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (int i = 0; i < cfg.n; ++i) {
    const double p = sigmoid(cfg.confounding_strength * score(i) + logit0);
    (*ds.e)(i) = p;
    ds.t(i) = unif(assign_rng) < p ? 1 : 0;
  }
  const auto groups = treatment_groups(ds.t);
  if (groups.treated.empty())
    throw DataError("no treated units were sampled; use a different seed or a larger n");

  const Vector linear = ds.x * draw.beta;
  const Vector expo = ((ds.x.array() + cfg.offset).matrix() * draw.beta).array().exp();
  // Mean over treated of (exp - linear) fixes omega.
  double gap = 0.0;
  for (auto i : groups.treated) gap += expo(i) - linear(i);
  gap /= static_cast<double>(groups.treated.size());
  if (!cfg.swap_arms) {
    draw.omega = cfg.target_att - gap;
    ds.mu1 = expo;
    ds.mu0 = (linear.array() - draw.omega).matrix();
  } else {
    draw.omega = -gap - cfg.target_att;
    ds.mu0 = expo;
    ds.mu1 = (linear.array() - draw.omega).matrix();
  }

  ds.y = Vector(cfg.n);
  for (int i = 0; i < cfg.n; ++i) {
    const double mean = ds.t(i) == 1 ? (*ds.mu1)(i) : (*ds.mu0)(i);
    const double eps = normal(noise_rng);
    ds.y(i) = cfg.noise_std > 0.0 ? mean + cfg.noise_std * eps : mean;
  }
  ds.validate();
  return draw;
}

const std::vector<std::string>& rct_effect_names() {
  static const std::vector<std::string> names{"zero", "linear", "exp", "step"};
  return names;
}

ObservationalDataset generate_rct(const RctConfig& cfg, std::uint64_t seed) {
  if (cfg.n < 2 || cfg.d < 1) throw ConfigError("RCT generator needs n >= 2 and d >= 1");
  const auto& names = rct_effect_names();
  if (std::find(names.begin(), names.end(), cfg.effect) == names.end())
    throw ConfigError("unknown effect function '" + cfg.effect + "'");
  if (!(cfg.noise_std >= 0.0)) throw ConfigError("noise_std must be nonnegative");

  Rng cov_rng = make_rng(seed, "covariates");
  Rng assign_rng = make_rng(seed, "assignment");
  Rng noise_rng = make_rng(seed, "noise");

  ObservationalDataset ds;
  ds.x = standard_normal(cfg.n, cfg.d, cov_rng);
  ds.feature_names = default_names(cfg.d);
  ds.t = IntVector(cfg.n);
  ds.e = Vector::Constant(cfg.n, 0.5);
  ds.mu0 = Vector(cfg.n);
  ds.mu1 = Vector(cfg.n);
  ds.y = Vector(cfg.n);

  std::bernoulli_distribution coin(0.5);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (int i = 0; i < cfg.n; ++i) {
    const double base = ds.x.row(i).mean();
    const double x1 = ds.x(i, 0);
    double effect = 0.0;
    if (cfg.effect == "linear") effect = 1.0 + x1;
    else if (cfg.effect == "exp") effect = std::exp(0.5 * x1) - 1.0;
    else if (cfg.effect == "step") effect = x1 > cfg.step_threshold ? 1.0 : (x1 < cfg.step_threshold ? -1.0 : 0.0);
    effect *= cfg.effect_scale;
    double m0 = base, m1 = base + effect;
    if (cfg.binary_outcome) {
      m0 = sigmoid(m0);
      m1 = cfg.effect == "zero" ? m0 : sigmoid(m1);
    }
    (*ds.mu0)(i) = m0;
    (*ds.mu1)(i) = m1;
    ds.t(i) = coin(assign_rng) ? 1 : 0;
    const double mean = ds.t(i) == 1 ? m1 : m0;
    if (cfg.binary_outcome) {
      ds.y(i) = unif(noise_rng) < mean ? 1.0 : 0.0;
    } else {
      const double eps = normal(noise_rng);
      ds.y(i) = cfg.noise_std > 0.0 ? mean + cfg.noise_std * eps : mean;
    }
  }
  ds.validate();
  return ds;
}

IndexList biased_subsample_indices(const ObservationalDataset& ds, const SubsampleConfig& cfg) {
  if (!(cfg.q >= 0.0 && cfg.q <= 1.0)) throw ConfigError("subsampling q must lie in [0,1]");
  const auto n = ds.size();
  if (cfg.target_size >= n) throw ConfigError("target_size must be smaller than the dataset");
  const auto groups = treatment_groups(ds);
  const auto deficit = n - cfg.target_size;
  if (static_cast<Eigen::Index>(groups.control.size()) < deficit + 2)
    throw SizeError("need at least " + std::to_string(deficit + 2) + " controls to remove " +
                    std::to_string(deficit) + " rows, have " + std::to_string(groups.control.size()));

  IndexList all(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) all[static_cast<std::size_t>(i)] = i;
  const auto standardized = standardize(ds, all).dataset;
  const Vector eta = fit_propensity(standardized).predict(standardized.x);

  Rng rng = make_rng(cfg.seed, "subsample");
  std::bernoulli_distribution greedy(cfg.q);
  IndexList controls = groups.control;  // ascending
  std::vector<bool> removed(static_cast<std::size_t>(n), false);
  for (Eigen::Index step = 0; step < deficit; ++step) {
    std::size_t pick = 0;
    if (greedy(rng)) {
      for (std::size_t k = 1; k < controls.size(); ++k)
        if (eta(controls[k]) > eta(controls[pick])) pick = k;
    } else {
      std::uniform_int_distribution<std::size_t> u(0, controls.size() - 1);
      pick = u(rng);
    }
    removed[static_cast<std::size_t>(controls[pick])] = true;
    controls.erase(controls.begin() + static_cast<std::ptrdiff_t>(pick));
  }
  IndexList kept;
  for (Eigen::Index i = 0; i < n; ++i)
    if (!removed[static_cast<std::size_t>(i)]) kept.push_back(i);
  return kept;
}

ObservationalDataset biased_subsample(const ObservationalDataset& ds, const SubsampleConfig& cfg) {
  return ds.subset(biased_subsample_indices(ds, cfg));
}

}  // namespace cfr
