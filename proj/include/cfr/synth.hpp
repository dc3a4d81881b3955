#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cfr/data.hpp"

namespace cfr {

/// Semi-synthetic generator with a nonlinear (exponential-linear) response
/// in one arm and a linear response in the other.
///
/// Covariates are standard normal. A coefficient vector beta has each entry
/// 0 with probability `sparsity`, otherwise a uniform draw from
/// `coefficient_levels`. By default the treated arm is exp((x + offset) .
/// beta) and the control arm is x . beta - omega, with omega chosen so that
/// the mean effect over the generated treated units equals `target_att`.
/// `swap_arms` exchanges the two surfaces.
///
/// Treatment is Bernoulli(sigmoid(confounding_strength * x . g + logit of
/// `treated_fraction`)), with g a random dense unit vector drawn
/// independently of beta. noise_std = 0 gives noiseless outcomes.
struct IhdpLikeConfig {
  int n = 747;
  int d = 25;
  double sparsity = 0.6;
  std::vector<double> coefficient_levels{0.1, 0.2, 0.3, 0.4};
  double offset = 0.5;
  double noise_std = 1.0;
  // Conventional default, not taken from any published setting.
  double target_att = 4.0;
  double confounding_strength = 1.0;
  double treated_fraction = 0.5;
  bool swap_arms = false;

  void validate() const;
};

/// Ground-truth data with the coefficient vectors that produced it.
struct IhdpLikeDraw {
  ObservationalDataset dataset;
  Vector beta;
  Vector assignment_direction;
  double omega = 0.0;
};

IhdpLikeDraw generate_ihdp_like_draw(const IhdpLikeConfig& cfg, std::uint64_t seed);
inline ObservationalDataset generate_ihdp_like(const IhdpLikeConfig& cfg, std::uint64_t seed) {
  return generate_ihdp_like_draw(cfg, seed).dataset;
}

/// Randomized cohort: t ~ Bernoulli(0.5) independent of x, e = 0.5.
///
/// Effect functions (base(x) is the covariate mean):
///   zero      mu1 = mu0 = base
///   linear    mu1 = base + 1 + x1
///   exp       mu1 = base + exp(x1 / 2) - 1
///   step      mu1 = base + sign(x1 - step_threshold)
/// With `binary_outcome` both surfaces are passed through a logistic link
/// and y is a Bernoulli draw, so outcomes lie in {0,1}.
struct RctConfig {
  int n = 1000;
  int d = 5;
  std::string effect = "linear";
  double noise_std = 1.0;
  double step_threshold = 0.0;
  // Multiplies the effect before the link is applied.
  double effect_scale = 1.0;
  bool binary_outcome = false;
};

ObservationalDataset generate_rct(const RctConfig& cfg, std::uint64_t seed);

/// Names accepted by RctConfig::effect.
const std::vector<std::string>& rct_effect_names();

struct SubsampleConfig {
  double q = 1.0;
  Eigen::Index target_size = 400;
  std::uint64_t seed = 0;
};

/// Repeatedly removes a control unit until `target_size` rows remain: with
/// probability q the remaining control with the largest estimated
/// propensity (lowest index on ties), otherwise a uniformly random control.
/// Propensities come from a logistic model fit once on standardized
/// covariates. Returns the surviving row indices in ascending order.
IndexList biased_subsample_indices(const ObservationalDataset& ds, const SubsampleConfig& cfg);
ObservationalDataset biased_subsample(const ObservationalDataset& ds, const SubsampleConfig& cfg);

}  // namespace cfr
