#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cfr/data.hpp"
#include "cfr/ipm.hpp"
#include "cfr/nnet.hpp"
#include "cfr/rng.hpp"

namespace cfr {

enum class IpmKind { kMmdQuadratic, kMmdLinear, kSinkhorn };
enum class Weighting { kUniform, kFixed, kLearned };

struct ObjectiveConfig {
  double alpha = 0.0;
  double lambda_h = 0.0;
  // Only used with learned weights.
  double lambda_w = 0.0;
  IpmKind ipm = IpmKind::kMmdQuadratic;
  Weighting weighting = Weighting::kUniform;
  KernelConfig kernel = KernelConfig::median_heuristic();
  SinkhornConfig sinkhorn;

  void validate() const;
};

/// Rows of one mini-batch. `weights` holds fixed per-row weights and is
/// empty for uniform or learned weighting.
struct Batch {
  Matrix x;
  IntVector t;
  Vector y;
  Vector weights;
};

Batch make_batch(const ObservationalDataset& ds, const IndexList& rows, const Vector& fixed_weights = Vector());

/// (1/n) sum w_i (yhat_i - y_i)^2; empty weights mean w = 1.
double factual_weighted_risk(const Vector& yhat, const Vector& y, const Vector& weights = Vector());
double factual_weighted_risk(const CfrModel& model, const Batch& batch, const Vector& weights = Vector());

struct ObjectiveTerms {
  double risk = 0.0;
  double head_norm = 0.0;    // |theta_heads|_2, before the lambda_h / sqrt(n) factor
  double ipm = 0.0;          // clamped at 0
  double ipm_raw = 0.0;
  double weight_norm = 0.0;  // |w|_2 / n, before lambda_w; 0 unless learned
  double total = 0.0;
  Vector gradient;           // empty unless requested
  Vector weights;            // the weights used in the risk (ones when uniform)
};

/// risk + (lambda_h / sqrt(n)) |theta_heads| + alpha IPM(control, treated)
/// + lambda_w |w| / n. The IPM is between the representations of the two
/// groups of the batch, weighted by the fixed or learned weights. Terms with
/// a zero coefficient contribute neither value nor gradient.
ObjectiveTerms total_objective(const CfrModel& model, const Batch& batch, const ObjectiveConfig& cfg,
                               bool with_gradient = true);

/// IPM between the unweighted representations of the two groups of `rows`.
double representation_ipm(const CfrModel& model, const ObservationalDataset& ds, const IndexList& rows,
                          const ObjectiveConfig& cfg);

enum class ValidationCriterion { kObjective, kSurrogateMse, kPolicyRisk };

/// Adam with constant step size.
struct TrainConfig {
  int batch_size = 100;
  int max_epochs = 300;
  double learning_rate = 1e-3;
  int early_stop_patience = 30;
  ValidationCriterion validation = ValidationCriterion::kObjective;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const;
};

struct EpochRecord {
  int epoch = 0;
  double risk = 0.0;
  double ipm = 0.0;
  double wnorm = 0.0;
  double objective_train = 0.0;
  double objective_valid = 0.0;
  double criterion = 0.0;  // value used for early stopping
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  double best_criterion = 0.0;

  void write_csv(const std::string& path) const;
};

struct TrainResult {
  CfrModel model;
  TrainHistory history;
};

/// Shuffled mini-batches with both groups split evenly across batches.
/// The number of batches is ceil(n / batch_size), capped so that every batch
/// holds at least two units of each group.
std::vector<IndexList> stratified_batches(const IntVector& t, const IndexList& rows, int batch_size, Rng& rng);

/// Trains `model` on split.train with early stopping on split.valid and
/// returns the parameters of the best validation epoch. `fixed_weights`
/// (one per dataset row) is required for fixed weighting.
TrainResult train(CfrModel model, const ObservationalDataset& ds, const DatasetSplit& split,
                  const ObjectiveConfig& ocfg, const TrainConfig& tcfg, const Vector& fixed_weights = Vector());

std::vector<double> table_alpha_grid();

struct AlphaSweepEntry {
  double alpha = 0.0;
  TrainResult result;
  double surrogate_valid = 0.0;
  double ipm_train = 0.0;
};

/// One model per alpha, all starting from the same initialization and
/// batching seed.
std::vector<AlphaSweepEntry> alpha_sweep(const ObservationalDataset& ds, const DatasetSplit& split,
                                         const std::vector<double>& grid, const Architecture& arch,
                                         const ObjectiveConfig& ocfg, const TrainConfig& tcfg,
                                         const Vector& fixed_weights = Vector());

/// One architecture/objective pair checked against central differences.
struct GradcheckCase {
  std::string name;
  Architecture arch;
  ObjectiveConfig objective;
  GradientReport report;
};

/// Gradient checks of the full objective over a grid of small architectures:
/// 1-3 representation layers, 0-1 hidden head layers, quadratic MMD and
/// unrolled Sinkhorn, with and without a learned weight head. Kernels use a
/// fixed bandwidth since the median heuristic is not differentiated.
std::vector<GradcheckCase> gradient_check_suite(std::uint64_t seed, double step = 1e-5);

std::string to_string(IpmKind kind);
std::string to_string(Weighting w);
std::string to_string(ValidationCriterion c);
IpmKind parse_ipm_kind(const std::string& s);
Weighting parse_weighting(const std::string& s);
ValidationCriterion parse_validation_criterion(const std::string& s);

}  // namespace cfr
