#include <doctest.h>

#include <filesystem>
#include <numeric>

#include "cfr/error.hpp"
#include "cfr/nnet.hpp"
#include "oracles.hpp"

using namespace cfr;

namespace {

// Forward pass of one row through `mlp`, written out layer by layer.
Vector oracle_mlp(const Vector& params, const Mlp& mlp, Vector h) {
  for (const auto& l : mlp.layers()) h = oracle::dense(params, l.offset, h, l.out, l.activation == Activation::kElu);
  return h;
}

IntVector alternating(Eigen::Index n) {
  IntVector t(n);
  for (Eigen::Index i = 0; i < n; ++i) t(i) = static_cast<int>(i % 2);
  return t;
}

}  // namespace

TEST_CASE("init is deterministic per seed") {
  const auto arch = Architecture::standard(4, 2, 6, 1, 5, 1, 3);
  const auto a = CfrModel::init(arch, 17);
  const auto b = CfrModel::init(arch, 17);
  const auto c = CfrModel::init(arch, 18);
  CHECK(a.parameters() == b.parameters());
  CHECK(a.parameters() != c.parameters());
  // Biases start at zero.
  for (const auto& l : a.representation().layers())
    CHECK(a.parameters().segment(l.offset + l.in * l.out, l.out).isZero(0.0));
}

TEST_CASE("parameter count follows the index map") {
  const auto arch = Architecture::standard(25, 1, 50, 1, 50);
  // 25*50+50 + 2*(50*50+50 + 50*1+1)
  CHECK(parameter_count(arch) == 6502);
  CHECK(CfrModel::init(arch, 1).parameter_count() == 6502);

  const auto weighted = Architecture::standard(3, 1, 4, 0, 0, 1, 2);
  // rep 3*4+4, heads 2*(4+1), weight head (5*2+2) + (2+1)
  CHECK(parameter_count(weighted) == 16 + 10 + 12 + 3);
}

TEST_CASE("identity representation passes covariates through") {
  const auto arch = Architecture::standard(3, 0, 0, 1, 4);
  const auto model = CfrModel::init(arch, 5);
  const Matrix x = oracle::random_matrix(6, 3, 1);
  CHECK(model.forward_representation(x) == x);
}

TEST_CASE("identity weights with ELU keep nonnegative inputs") {
  Architecture arch;
  arch.input_dim = 3;
  arch.rep_layers = {{3, Activation::kElu}};
  arch.head_layers = {{1, Activation::kIdentity}};
  auto model = CfrModel::init(arch, 2);
  const auto& l = model.representation().layers().front();
  Vector p = model.parameters();
  p.segment(l.offset, l.in * l.out + l.out).setZero();
  for (int k = 0; k < 3; ++k) p(l.offset + k * 3 + k) = 1.0;
  model.set_parameters(p);
  const Matrix x = oracle::random_matrix(5, 3, 2).cwiseAbs();
  CHECK((model.forward_representation(x) - x).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("forward matches a straight-line oracle") {
  const auto arch = Architecture::standard(4, 2, 5, 1, 3, 1, 4);
  const auto model = CfrModel::init(arch, 9);
  const Matrix x = oracle::random_matrix(7, 4, 3);
  const Matrix z = model.forward_representation(x);
  const auto po = model.predict_potential_outcomes(x);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Vector zi = oracle_mlp(model.parameters(), model.representation(), x.row(i).transpose());
    CHECK((zi - z.row(i).transpose()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(std::abs(oracle_mlp(model.parameters(), model.head(0), zi)(0) - po.y0(i)) < 1e-12);
    CHECK(std::abs(oracle_mlp(model.parameters(), model.head(1), zi)(0) - po.y1(i)) < 1e-12);
  }
}

TEST_CASE("heads route by treatment") {
  const auto arch = Architecture::standard(3, 1, 4, 1, 3);
  auto model = CfrModel::init(arch, 4);
  Matrix x(2, 3);
  x.row(0) = oracle::random_matrix(1, 3, 4);
  x.row(1) = x.row(0);
  IntVector t(2);
  t << 0, 1;
  const Matrix z = model.forward_representation(x);
  const Vector yhat = model.forward_hypothesis(z, t);
  const Vector zi = z.row(0).transpose();
  CHECK(std::abs(yhat(0) - oracle_mlp(model.parameters(), model.head(0), zi)(0)) < 1e-12);
  CHECK(std::abs(yhat(1) - oracle_mlp(model.parameters(), model.head(1), zi)(0)) < 1e-12);

  // Copying head 0 into head 1 removes any dependence on t.
  Vector p = model.parameters();
  const auto h0 = model.head(0), h1 = model.head(1);
  p.segment(h1.offset(), h1.size()) = p.segment(h0.offset(), h0.size());
  model.set_parameters(p);
  const Matrix xs = oracle::random_matrix(5, 3, 5);
  CHECK(model.predict_cate(xs).cwiseAbs().maxCoeff() == 0.0);
  const Matrix zs = model.forward_representation(xs);
  CHECK(model.forward_hypothesis(zs, IntVector::Zero(5)) == model.forward_hypothesis(zs, IntVector::Ones(5)));

  IntVector bad(2);
  bad << 0, 2;
  CHECK_THROWS_AS(model.forward_hypothesis(z, bad), ValidationError);
}

TEST_CASE("predict_cate is the head difference") {
  const auto model = CfrModel::init(Architecture::standard(3, 2, 4, 1, 4), 6);
  const Matrix x = oracle::random_matrix(7, 3, 6);
  const Matrix z = model.forward_representation(x);
  const Vector diff = model.forward_hypothesis(z, IntVector::Ones(7)) - model.forward_hypothesis(z, IntVector::Zero(7));
  CHECK((model.predict_cate(x) - diff).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("learned weights: positivity and group means") {
  const auto arch = Architecture::standard(3, 1, 4, 1, 3, 2, 3);
  {
    auto model = CfrModel::init(arch, 1);
    Vector p = model.parameters();
    const auto& wh = *model.weight_head();
    p.segment(wh.offset(), wh.size()).setZero();
    model.set_parameters(p);
    const Matrix x = oracle::random_matrix(6, 3, 7);
    const Vector w = model.forward_weights(model.forward_representation(x), alternating(6));
    CHECK((w.array() - 1.0).abs().maxCoeff() < 1e-15);
  }
  for (unsigned s = 0; s < 100; ++s) {
    const auto model = CfrModel::init(arch, s);
    const Matrix x = oracle::random_matrix(9, 3, 1000 + s);
    const IntVector t = alternating(9);
    const Vector w = model.forward_weights(model.forward_representation(x), t);
    CHECK((w.array() > 0.0).all());
    double m0 = 0.0, m1 = 0.0;
    for (int i = 0; i < 9; ++i) (t(i) ? m1 : m0) += w(i);
    CHECK(std::abs(m0 / 5.0 - 1.0) < 1e-9);
    CHECK(std::abs(m1 / 4.0 - 1.0) < 1e-9);
  }
  // A batch holding only one group normalizes that group alone.
  const auto model = CfrModel::init(arch, 3);
  const Matrix x = oracle::random_matrix(4, 3, 8);
  const Vector w = model.forward_weights(model.forward_representation(x), IntVector::Ones(4));
  CHECK(std::abs(w.mean() - 1.0) < 1e-12);
}

TEST_CASE("backward: zero objective and single linear layer") {
  const auto model = CfrModel::init(Architecture::standard(3, 1, 4, 1, 3, 1, 2), 2);
  const Matrix x = oracle::random_matrix(5, 3, 9);
  const auto pass = model.forward(x, alternating(5), true);
  CHECK(model.backward(pass, Vector::Zero(5), Matrix(), Vector::Zero(5)).isZero(0.0));

  // No representation, heads of a single identity layer: yhat = x . w + b.
  Architecture lin;
  lin.input_dim = 3;
  lin.head_layers = {{1, Activation::kIdentity}};
  const auto lm = CfrModel::init(lin, 4);
  Matrix xi(1, 3);
  xi << 0.5, -1.0, 2.0;
  IntVector ti(1);
  ti << 1;
  const double y = 0.3;
  const auto p1 = lm.forward(xi, ti, false);
  Vector d(1);
  d << 2.0 * (p1.yhat(0) - y);
  const Vector g = lm.backward(p1, d, Matrix(), Vector());
  const auto& l = lm.head(1).layers().front();
  for (int k = 0; k < 3; ++k) CHECK(g(l.offset + k) == doctest::Approx(2.0 * (p1.yhat(0) - y) * xi(0, k)));
  CHECK(g(l.offset + 3) == doctest::Approx(2.0 * (p1.yhat(0) - y)));
  const auto& l0 = lm.head(0).layers().front();
  CHECK(g.segment(l0.offset, 4).isZero(0.0));
}

TEST_CASE("backward matches finite differences through all paths") {
  const auto arch = Architecture::standard(3, 2, 4, 1, 3, 1, 3);
  const auto model = CfrModel::init(arch, 12);
  const Matrix x = oracle::random_matrix(8, 3, 10);
  const IntVector t = alternating(8);
  const Vector y = oracle::random_matrix(8, 1, 11).col(0);
  const Matrix gz = oracle::random_matrix(8, 4, 12);
  const Vector gw = oracle::random_matrix(8, 1, 13).col(0);
  // f = sum (yhat - y)^2 + <gz, z> + <gw, w>
  auto objective = [&](const Vector& p) {
    CfrModel m = model;
    m.set_parameters(p);
    const auto pass = m.forward(x, t, true);
    return (pass.yhat - y).squaredNorm() + gz.cwiseProduct(pass.z).sum() + gw.dot(pass.weights);
  };
  const auto pass = model.forward(x, t, true);
  const Vector g = model.backward(pass, 2.0 * (pass.yhat - y), gz, gw);
  const auto rep = check_gradient(objective, model.parameters(), g, model.blocks());
  CHECK(rep.max_relative_error < 1e-6);
}

TEST_CASE("permuting batch rows permutes outputs") {
  const auto model = CfrModel::init(Architecture::standard(3, 1, 5, 1, 4, 1, 3), 14);
  const Matrix x = oracle::random_matrix(6, 3, 14);
  const IntVector t = alternating(6);
  const std::vector<int> perm{3, 0, 5, 1, 4, 2};
  Matrix xp(6, 3);
  IntVector tp(6);
  for (int i = 0; i < 6; ++i) {
    xp.row(i) = x.row(perm[static_cast<std::size_t>(i)]);
    tp(i) = t(perm[static_cast<std::size_t>(i)]);
  }
  const auto a = model.forward(x, t, true);
  const auto b = model.forward(xp, tp, true);
  for (int i = 0; i < 6; ++i) {
    CHECK(std::abs(b.yhat(i) - a.yhat(perm[static_cast<std::size_t>(i)])) < 1e-12);
    CHECK(std::abs(b.weights(i) - a.weights(perm[static_cast<std::size_t>(i)])) < 1e-12);
  }
}

TEST_CASE("identity representation with alpha 0 is a T-learner") {
  const auto model = CfrModel::init(Architecture::standard(3, 0, 0, 1, 4), 15);
  const Matrix x = oracle::random_matrix(5, 3, 15);
  const auto po = model.predict_potential_outcomes(x);
  CHECK(po.y0 == model.head_output(x, 0));
  CHECK(po.y1 == model.head_output(x, 1));
}

TEST_CASE("model file round trip is exact") {
  const auto model = CfrModel::init(Architecture::standard(4, 2, 3, 1, 2, 1, 2), 16);
  const auto path = (std::filesystem::temp_directory_path() / "cfr_test_model.txt").string();
  model.save(path);
  const auto back = CfrModel::load(path);
  CHECK(back.parameters() == model.parameters());
  CHECK(back.seed() == model.seed());
  CHECK(back.architecture().rep_layers.size() == 2);
  CHECK(back.architecture().has_weight_head());
  const Matrix x = oracle::random_matrix(3, 4, 16);
  CHECK(back.predict_cate(x) == model.predict_cate(x));
}

TEST_CASE("architecture validation") {
  Architecture a;
  a.input_dim = 2;
  CHECK_THROWS_AS(a.validate(), ConfigError);
  a.head_layers = {{3, Activation::kElu}};
  CHECK_THROWS_AS(a.validate(), ConfigError);
  a.head_layers.push_back({1, Activation::kIdentity});
  CHECK_NOTHROW(a.validate());
  const auto model = CfrModel::init(a, 1);
  CHECK_THROWS_AS(model.forward_representation(Matrix::Zero(2, 3)), SizeError);
}
