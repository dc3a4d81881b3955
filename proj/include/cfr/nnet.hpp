#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cfr/data.hpp"

namespace cfr {

enum class Activation { kElu, kIdentity };

struct LayerSpec {
  int width = 1;
  Activation activation = Activation::kElu;
};

/// Layer shapes of a representation network and its heads.
///
/// An empty `rep_layers` is the identity representation, which turns the
/// model into a T-learner on the raw covariates. Both outcome heads share
/// `head_layers`; the last head layer and the last weight-head layer must be
/// a width-1 identity layer. The weight head reads the representation with
/// the treatment appended as one extra column.
struct Architecture {
  int input_dim = 1;
  std::vector<LayerSpec> rep_layers;
  std::vector<LayerSpec> head_layers;
  std::optional<std::vector<LayerSpec>> weight_head_layers;

  /// `rep_count` ELU layers of `rep_width`, `head_hidden` ELU layers of
  /// `head_width` followed by the scalar output, and optionally a weight head
  /// of `weight_hidden` ELU layers of `weight_width`.
  static Architecture standard(int input_dim, int rep_count, int rep_width, int head_hidden, int head_width,
                               int weight_hidden = -1, int weight_width = 0);

  int representation_dim() const { return rep_layers.empty() ? input_dim : rep_layers.back().width; }
  bool has_weight_head() const { return weight_head_layers.has_value(); }
  void validate() const;
};

/// A stack of dense layers whose parameters live in a slice of a flat vector.
/// Each layer stores an (in x out) column-major weight block, then its bias.
class Mlp {
 public:
  struct Layer {
    Eigen::Index in = 0;
    Eigen::Index out = 0;
    Eigen::Index offset = 0;
    Activation activation = Activation::kElu;
  };

  struct Cache {
    std::vector<Matrix> inputs;
    std::vector<Matrix> pre;
  };

  Mlp() = default;
  Mlp(Eigen::Index in_dim, const std::vector<LayerSpec>& specs, Eigen::Index offset);

  Eigen::Index in_dim() const { return in_dim_; }
  Eigen::Index out_dim() const { return layers_.empty() ? in_dim_ : layers_.back().out; }
  Eigen::Index offset() const { return offset_; }
  Eigen::Index size() const { return size_; }
  const std::vector<Layer>& layers() const { return layers_; }

  Matrix forward(const Vector& params, const Matrix& x, Cache* cache = nullptr) const;

  /// Accumulates d(objective)/d(params) into `grad` and returns the
  /// derivative with respect to the input.
  Matrix backward(const Vector& params, const Cache& cache, const Matrix& d_out, Vector& grad) const;

 private:
  Eigen::Index in_dim_ = 0;
  Eigen::Index offset_ = 0;
  Eigen::Index size_ = 0;
  std::vector<Layer> layers_;
};

/// Named contiguous range of the parameter vector.
struct ParameterBlock {
  std::string name;
  Eigen::Index offset = 0;
  Eigen::Index size = 0;
};

/// Cached activations of one batch, consumed by CfrModel::backward.
struct BatchPass {
  Matrix x;
  IntVector t;
  Matrix z;
  Vector yhat;
  Vector weights;      // normalized, empty without a weight head pass
  Vector raw_weights;  // softplus outputs before normalization
  Mlp::Cache rep_cache;
  Mlp::Cache head_cache[2];
  IndexList head_rows[2];
  Mlp::Cache weight_cache;
  Vector weight_logits;
  bool with_weights = false;
};

struct PotentialOutcomes {
  Vector y0;
  Vector y1;
};

/// Representation network, two outcome heads and an optional weighting head
/// sharing a single flat parameter vector.
class CfrModel {
 public:
  CfrModel() = default;
  explicit CfrModel(Architecture arch);

  /// Fan-in scaled uniform weights, zero biases; deterministic per seed.
  static CfrModel init(const Architecture& arch, std::uint64_t seed);

  const Architecture& architecture() const { return arch_; }
  const Vector& parameters() const { return params_; }
  Vector& parameters() { return params_; }
  void set_parameters(const Vector& p);
  Eigen::Index parameter_count() const { return params_.size(); }
  std::uint64_t seed() const { return seed_; }

  const Mlp& representation() const { return rep_; }
  const Mlp& head(int t) const { return heads_[t]; }
  const std::optional<Mlp>& weight_head() const { return weight_head_; }
  std::vector<ParameterBlock> blocks() const;
  /// Both outcome heads, which are stored contiguously.
  ParameterBlock head_block() const;

  Matrix forward_representation(const Matrix& x) const;
  Vector head_output(const Matrix& z, int t) const;
  /// Row i goes through head t(i).
  Vector forward_hypothesis(const Matrix& z, const IntVector& t) const;
  /// Softplus of the weight head, normalized to mean 1 within each
  /// treatment group present in the batch.
  Vector forward_weights(const Matrix& z, const IntVector& t) const;
  Vector predict_cate(const Matrix& x) const;
  PotentialOutcomes predict_potential_outcomes(const Matrix& x) const;

  BatchPass forward(const Matrix& x, const IntVector& t, bool with_weights) const;

  /// Parameter gradient of a scalar objective, given its derivatives with
  /// respect to the factual predictions, the representation rows and the
  /// normalized weights. Empty upstream arguments count as zero.
  Vector backward(const BatchPass& pass, const Vector& d_yhat, const Matrix& d_z, const Vector& d_weights) const;

  /// Text format, parameters at 17 significant digits.
  void save(const std::string& path) const;
  static CfrModel load(const std::string& path);

 private:
  Architecture arch_;
  Mlp rep_;
  Mlp heads_[2];
  std::optional<Mlp> weight_head_;
  Vector params_;
  std::uint64_t seed_ = 0;
};

Eigen::Index parameter_count(const Architecture& arch);

inline double elu(double v) { return v > 0.0 ? v : std::expm1(v); }
double softplus(double v);

/// Outcome of comparing an analytic gradient with central differences.
struct GradientReport {
  double max_relative_error = 0.0;
  Eigen::Index worst_coordinate = -1;
  double step = 1e-5;
  std::vector<std::pair<std::string, double>> block_errors;
};

/// Relative error per coordinate is |analytic - numeric| / max(|analytic|,
/// |numeric|, floor). Coordinates are grouped by `blocks` for reporting.
GradientReport check_gradient(const std::function<double(const Vector&)>& objective, const Vector& point,
                              const Vector& analytic, const std::vector<ParameterBlock>& blocks, double step = 1e-5,
                              double floor = 1e-6);

}  // namespace cfr
