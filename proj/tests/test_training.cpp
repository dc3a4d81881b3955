#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "cfr/baselines.hpp"
#include "cfr/error.hpp"
#include "cfr/synth.hpp"
#include "cfr/training.hpp"
#include "oracles.hpp"

using namespace cfr;

namespace {

Batch random_batch(int n, int d, unsigned seed) {
  Batch b;
  b.x = oracle::random_matrix(n, d, seed);
  b.t = IntVector(n);
  for (int i = 0; i < n; ++i) b.t(i) = i % 3 == 0 ? 1 : 0;
  b.y = oracle::random_matrix(n, 1, seed + 1).col(0);
  return b;
}

IndexList iota_rows(Eigen::Index n) {
  IndexList r(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) r[static_cast<std::size_t>(i)] = i;
  return r;
}

double objective_at(const CfrModel& model, const Vector& p, const Batch& b, const ObjectiveConfig& cfg) {
  CfrModel m = model;
  m.set_parameters(p);
  return total_objective(m, b, cfg, false).total;
}

}  // namespace

TEST_CASE("factual risk: worked examples") {
  Vector yhat(2), y(2), w(2);
  yhat << 1.0, 3.0;
  y << 0.0, 0.0;
  CHECK(factual_weighted_risk(yhat, y) == 5.0);
  w << 2.0, 0.5;
  CHECK(factual_weighted_risk(yhat, y, w) == doctest::Approx(3.25));
  CHECK(factual_weighted_risk(yhat, y, Vector::Ones(2)) == factual_weighted_risk(yhat, y));
  CHECK_THROWS_AS(factual_weighted_risk(yhat, Vector::Zero(3)), SizeError);
  CHECK_THROWS_AS(factual_weighted_risk(Vector(), Vector()), SizeError);
}

TEST_CASE("objective terms compose as written") {
  const auto model = CfrModel::init(Architecture::standard(3, 1, 4, 1, 3), 1);
  const Batch b = random_batch(12, 3, 2);
  ObjectiveConfig cfg;
  cfg.kernel = KernelConfig::fixed(1.0);

  const auto plain = total_objective(model, b, cfg);
  CHECK(plain.total == plain.risk);
  const Vector yhat = model.forward_hypothesis(model.forward_representation(b.x), b.t);
  CHECK(std::abs(plain.risk - (yhat - b.y).squaredNorm() / 12.0) < 1e-12);

  cfg.lambda_h = 0.3;
  cfg.alpha = 2.0;
  const auto full = total_objective(model, b, cfg);
  const auto hb = model.head_block();
  const double head = 0.3 / std::sqrt(12.0) * model.parameters().segment(hb.offset, hb.size).norm();
  const Matrix z = model.forward_representation(b.x);
  Matrix za(8, 4), zb(4, 4);
  int ia = 0, ib = 0;
  for (int i = 0; i < 12; ++i) (b.t(i) ? zb.row(ib++) : za.row(ia++)) = z.row(i);
  const double ipm = std::max(0.0, oracle::mmd2_unbiased(za, zb, 1.0));
  CHECK(std::abs(full.total - (plain.risk + head + 2.0 * ipm)) < 1e-10);
  CHECK(std::abs(full.ipm - ipm) < 1e-12);
  CHECK(full.risk == plain.risk);
}

TEST_CASE("identical group representations contribute nothing") {
  Architecture arch = Architecture::standard(2, 0, 0, 1, 3);
  const auto model = CfrModel::init(arch, 3);
  Batch b;
  b.x = Matrix(8, 2);
  b.x.topRows(4) = oracle::random_matrix(4, 2, 4);
  b.x.bottomRows(4) = b.x.topRows(4);
  b.t = IntVector(8);
  b.t << 0, 0, 0, 0, 1, 1, 1, 1;
  b.y = oracle::random_matrix(8, 1, 5).col(0);
  ObjectiveConfig cfg;
  cfg.kernel = KernelConfig::fixed(1.0);
  const auto base = total_objective(model, b, cfg);
  cfg.alpha = 10.0;
  const auto with = total_objective(model, b, cfg);
  CHECK(with.ipm == 0.0);
  CHECK(with.total == base.total);
  CHECK(with.gradient == base.gradient);
}

TEST_CASE("objective gradient matches finite differences") {
  struct Case {
    const char* name;
    IpmKind ipm;
    Weighting weighting;
    bool weight_head;
  };
  const Case cases[] = {
      {"mmd uniform", IpmKind::kMmdQuadratic, Weighting::kUniform, false},
      {"mmd fixed", IpmKind::kMmdQuadratic, Weighting::kFixed, false},
      {"mmd learned", IpmKind::kMmdQuadratic, Weighting::kLearned, true},
      {"mmd linear", IpmKind::kMmdLinear, Weighting::kUniform, false},
      {"sinkhorn uniform", IpmKind::kSinkhorn, Weighting::kUniform, false},
      {"sinkhorn learned", IpmKind::kSinkhorn, Weighting::kLearned, true},
  };
  for (const auto& c : cases) {
    CAPTURE(c.name);
    const auto arch = c.weight_head ? Architecture::standard(3, 2, 4, 1, 3, 1, 3) : Architecture::standard(3, 2, 4, 1, 3);
    const auto model = CfrModel::init(arch, 7);
    Batch b = random_batch(12, 3, 8);
    for (int i = 0; i < 12; ++i)
      if (b.t(i)) b.x.row(i).array() += 1.0;
    if (c.weighting == Weighting::kFixed) b.weights = oracle::random_positive(12, 9);
    ObjectiveConfig cfg;
    cfg.alpha = 1.5;
    cfg.lambda_h = 0.1;
    cfg.lambda_w = c.weight_head ? 0.5 : 0.0;
    cfg.ipm = c.ipm;
    cfg.weighting = c.weighting;
    cfg.kernel = KernelConfig::fixed(1.5);
    cfg.sinkhorn = {5.0, 20, SinkhornGradient::kUnrolled};
    const auto terms = total_objective(model, b, cfg);
    REQUIRE(terms.ipm_raw > 0.0);
    const auto rep = check_gradient([&](const Vector& p) { return objective_at(model, p, b, cfg); },
                                    model.parameters(), terms.gradient, model.blocks());
    CHECK(rep.max_relative_error < 1e-5);
  }
}

TEST_CASE("IPM failure is recorded only when it does not enter the objective") {
  const auto model = CfrModel::init(Architecture::standard(3, 0, 0, 1, 3), 10);
  Batch b = random_batch(12, 3, 11);
  b.x *= 100.0;
  ObjectiveConfig cfg;
  cfg.ipm = IpmKind::kSinkhorn;
  cfg.sinkhorn.entropy_scale = 1e6;
  const auto t = total_objective(model, b, cfg);
  CHECK(std::isnan(t.ipm));
  CHECK(std::isfinite(t.total));
  cfg.alpha = 1.0;
  CHECK_THROWS_AS(total_objective(model, b, cfg), NumericError);
}

TEST_CASE("config validation and parsing") {
  ObjectiveConfig o;
  o.alpha = -1.0;
  CHECK_THROWS_AS(o.validate(), ConfigError);
  o.alpha = 1.0;
  o.ipm = IpmKind::kMmdLinear;
  o.weighting = Weighting::kLearned;
  CHECK_THROWS_AS(o.validate(), ConfigError);
  TrainConfig t;
  t.learning_rate = 0.0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  CHECK(parse_ipm_kind("wass") == IpmKind::kSinkhorn);
  CHECK(parse_ipm_kind(to_string(IpmKind::kMmdLinear)) == IpmKind::kMmdLinear);
  CHECK(parse_weighting("learned") == Weighting::kLearned);
  CHECK(parse_validation_criterion("surrogate") == ValidationCriterion::kSurrogateMse);
  CHECK_THROWS_AS(parse_ipm_kind("kl"), ConfigError);
}

TEST_CASE("stratified batches keep the treated share") {
  IntVector t(103);
  for (int i = 0; i < 103; ++i) t(i) = i % 4 == 0 ? 1 : 0;
  const auto rows = iota_rows(103);
  Rng rng = make_rng(1, "batching");
  const auto batches = stratified_batches(t, rows, 20, rng);
  CHECK(batches.size() == 6);
  std::set<Eigen::Index> seen;
  const double share = 26.0 / 103.0;
  for (const auto& b : batches) {
    int treated = 0;
    for (auto i : b) {
      CHECK(seen.insert(i).second);
      treated += t(i);
    }
    CHECK(std::abs(treated - share * static_cast<double>(b.size())) <= 1.0);
  }
  CHECK(seen.size() == 103);
  // A tiny arm caps the number of batches.
  IntVector few = IntVector::Zero(50);
  few(0) = few(1) = few(2) = 1;
  CHECK(stratified_batches(few, iota_rows(50), 10, rng).size() == 1);
  few(2) = 0;
  few(1) = 0;
  CHECK_THROWS_AS(stratified_batches(few, iota_rows(50), 10, rng), SizeError);
}

TEST_CASE("alpha grid") {
  const auto g = table_alpha_grid();
  CHECK(g.size() == 17);
  CHECK(g.front() == doctest::Approx(1e-5));
  CHECK(g.back() == doctest::Approx(1e3));
  for (std::size_t k = 1; k < g.size(); ++k) CHECK(g[k] / g[k - 1] == doctest::Approx(std::sqrt(10.0)));
}

TEST_CASE("training: determinism and early stopping") {
  IhdpLikeConfig gcfg;
  gcfg.n = 200;
  gcfg.d = 5;
  const auto raw = generate_ihdp_like(gcfg, 12);
  const auto split = split_dataset(raw, {0.6, 0.2, 0.2}, 1);
  const auto ds = standardize(raw, split.train).dataset;
  const auto arch = Architecture::standard(5, 1, 8, 1, 8);
  ObjectiveConfig ocfg;
  ocfg.alpha = 0.5;
  TrainConfig tcfg;
  tcfg.batch_size = 32;
  tcfg.max_epochs = 60;
  tcfg.early_stop_patience = 5;
  tcfg.learning_rate = 1e-2;
  tcfg.seed = 4;
  const auto a = train(CfrModel::init(arch, 4), ds, split, ocfg, tcfg);
  const auto b = train(CfrModel::init(arch, 4), ds, split, ocfg, tcfg);
  CHECK(a.model.parameters() == b.model.parameters());
  REQUIRE(a.history.epochs.size() == b.history.epochs.size());
  for (std::size_t k = 0; k < a.history.epochs.size(); ++k)
    CHECK(a.history.epochs[k].objective_train == b.history.epochs[k].objective_train);

  const auto& h = a.history;
  double best = INFINITY;
  for (const auto& r : h.epochs) best = std::min(best, r.criterion);
  CHECK(h.best_criterion == best);
  CHECK(h.epochs[static_cast<std::size_t>(h.best_epoch - 1)].criterion == best);
  CHECK(static_cast<int>(h.epochs.size()) <= h.best_epoch + tcfg.early_stop_patience);
  // The returned model is the best epoch's model.
  const Batch valid = make_batch(ds, split.valid);
  CHECK(total_objective(a.model, valid, ocfg, false).total == best);

  const auto path = (std::filesystem::temp_directory_path() / "cfr_test_history.csv").string();
  h.write_csv(path);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header == "epoch,risk,ipm,wnorm,objective_train,objective_valid,criterion");

  TrainConfig other = tcfg;
  other.seed = 5;
  CHECK(train(CfrModel::init(arch, 4), ds, split, ocfg, other).model.parameters() != a.model.parameters());
}

TEST_CASE("unit fixed weights reproduce uniform training bit for bit") {
  RctConfig rcfg;
  rcfg.n = 150;
  rcfg.d = 3;
  const auto ds = generate_rct(rcfg, 13);
  const auto split = split_dataset(ds, {0.7, 0.3, 0.0}, 2);
  const auto arch = Architecture::standard(3, 1, 6, 1, 6);
  ObjectiveConfig uni;
  uni.alpha = 1.0;
  uni.lambda_h = 1e-3;
  ObjectiveConfig fixed = uni;
  fixed.weighting = Weighting::kFixed;
  TrainConfig tcfg;
  tcfg.batch_size = 50;
  tcfg.max_epochs = 20;
  tcfg.learning_rate = 1e-2;
  const auto a = train(CfrModel::init(arch, 1), ds, split, uni, tcfg);
  // Balancing weights from the known propensity 0.5 are exactly one.
  const Vector w = balancing_weights(*ds.e, ds.t).normalized;
  CHECK(w == Vector::Ones(ds.size()));
  const auto b = train(CfrModel::init(arch, 1), ds, split, fixed, tcfg, w);
  CHECK(a.model.parameters() == b.model.parameters());
  const Batch ub = make_batch(ds, split.train), fb = make_batch(ds, split.train, w);
  CHECK(total_objective(a.model, ub, uni).total == total_objective(a.model, fb, fixed).total);
}

TEST_CASE("identity representation with linear heads recovers OLS-T") {
  RctConfig rcfg;
  rcfg.n = 200;
  rcfg.d = 3;
  const auto ds = generate_rct(rcfg, 14);
  DatasetSplit split;
  split.train = iota_rows(ds.size());
  split.valid = split.train;
  Architecture arch;
  arch.input_dim = 3;
  arch.head_layers = {{1, Activation::kIdentity}};
  TrainConfig tcfg;
  tcfg.batch_size = 200;
  tcfg.max_epochs = 4000;
  tcfg.early_stop_patience = 4000;
  tcfg.learning_rate = 2e-2;
  const auto res = train(CfrModel::init(arch, 2), ds, split, ObjectiveConfig{}, tcfg);
  const auto ols = fit_ols_t(ds);
  const LinearModel* arms[2] = {&ols.control, &ols.treated};
  for (int t = 0; t < 2; ++t) {
    const auto& l = res.model.head(t).layers().front();
    const Vector& p = res.model.parameters();
    for (int k = 0; k < 3; ++k) CHECK(std::abs(p(l.offset + k) - arms[t]->coefficients(k)) < 1e-3);
    CHECK(std::abs(p(l.offset + 3) - arms[t]->intercept) < 1e-3);
  }
  const Vector ols_fit = ds.t.cast<double>().cwiseProduct(ols.treated.predict(ds.x, 1)) +
                         (1.0 - ds.t.cast<double>().array()).matrix().cwiseProduct(ols.control.predict(ds.x, 0));
  const double ols_mse = (ols_fit - ds.y).squaredNorm() / static_cast<double>(ds.size());
  CHECK(std::abs(factual_weighted_risk(res.model, make_batch(ds, split.train)) - ols_mse) < 1e-3);
}

TEST_CASE("a heavy weight penalty pins learned weights to one") {
  IhdpLikeConfig gcfg;
  gcfg.n = 200;
  gcfg.d = 5;
  const auto raw = generate_ihdp_like(gcfg, 16);
  const auto split = split_dataset(raw, {0.7, 0.3, 0.0}, 4);
  const auto ds = standardize(raw, split.train).dataset;
  ObjectiveConfig ocfg;
  ocfg.alpha = 1.0;
  ocfg.weighting = Weighting::kLearned;
  ocfg.lambda_w = 1e4;
  TrainConfig tcfg;
  tcfg.batch_size = 50;
  tcfg.max_epochs = 200;
  tcfg.early_stop_patience = 200;
  tcfg.learning_rate = 1e-2;
  const auto res = train(CfrModel::init(Architecture::standard(5, 1, 8, 1, 8, 1, 8), 5), ds, split, ocfg, tcfg);
  const Matrix z = res.model.forward_representation(ds.x);
  const Vector w = res.model.forward_weights(z, ds.t);
  CHECK((w.array() - 1.0).abs().maxCoeff() < 0.05);
}
