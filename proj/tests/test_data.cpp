#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "cfr/data.hpp"
#include "cfr/error.hpp"
#include "cfr/synth.hpp"

using namespace cfr;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("cfr_test_" + name)).string();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
}

}  // namespace

TEST_CASE("load: three rows, two covariates") {
  const auto path = temp_path("three.csv");
  write_file(path, "x1,x2,t,y\n1,2,0,0.5\n3,4,1,1.5\n5,6,0,2.5\n");
  const auto ds = load_dataset(path);
  CHECK(ds.size() == 3);
  CHECK(ds.dim() == 2);
  CHECK(ds.x(1, 1) == 4.0);
  CHECK(ds.t(1) == 1);
  CHECK(ds.y(2) == 2.5);
  CHECK_FALSE(ds.has_truth());
  CHECK(ds.feature_names == std::vector<std::string>{"x1", "x2"});
}

TEST_CASE("load: treatment outside {0,1} names the row") {
  const auto path = temp_path("badt.csv");
  write_file(path, "x1,t,y\n0,0,1\n0,1,1\n0,0,1\n0,1,1\n0,2,1\n0,0,1\n");
  try {
    load_dataset(path);
    FAIL("expected a validation error");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("row 5") != std::string::npos);
  }
}

TEST_CASE("load: schema and parse errors") {
  const auto missing = temp_path("missing.csv");
  write_file(missing, "x1,y\n0,1\n1,2\n");
  CHECK_THROWS_AS(load_dataset(missing), SchemaError);

  const auto bad = temp_path("bad.csv");
  write_file(bad, "x1,t,y\n0,0,1\n0,1,abc\n");
  try {
    load_dataset(bad);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.row() == 2);
    CHECK(e.column() == "y");
  }

  CsvSchema strict;
  strict.require_truth = true;
  const auto plain = temp_path("plain.csv");
  write_file(plain, "x1,t,y\n0,0,1\n0,1,2\n");
  CHECK_THROWS_AS(load_dataset(plain, strict), SchemaError);
}

TEST_CASE("save/load round trip is bit exact") {
  IhdpLikeConfig cfg;
  cfg.n = 60;
  cfg.d = 4;
  const auto ds = generate_ihdp_like(cfg, 3);
  const auto path = temp_path("roundtrip.csv");
  save_dataset(ds, path);
  const auto back = load_dataset(path);
  REQUIRE(back.size() == ds.size());
  CHECK(back.x == ds.x);
  CHECK(back.t == ds.t);
  CHECK(back.y == ds.y);
  REQUIRE(back.has_truth());
  CHECK(*back.mu0 == *ds.mu0);
  CHECK(*back.mu1 == *ds.mu1);
  CHECK(*back.e == *ds.e);
}

TEST_CASE("split: paper ratios on n=100") {
  const auto s = split_dataset(100, {0.56, 0.24, 0.20}, 1);
  CHECK(s.train.size() == 56);
  CHECK(s.valid.size() == 24);
  CHECK(s.test.size() == 20);
}

TEST_CASE("split: all train, determinism, bijection") {
  const auto all = split_dataset(17, {1.0, 0.0, 0.0}, 5);
  CHECK(all.train.size() == 17);
  CHECK(all.valid.empty());
  CHECK(all.test.empty());

  const auto a = split_dataset(50, {0.5, 0.3, 0.2}, 9);
  const auto b = split_dataset(50, {0.5, 0.3, 0.2}, 9);
  CHECK(a.train == b.train);
  CHECK(a.valid == b.valid);
  CHECK(a.test == b.test);

  for (Eigen::Index n : {4, 5, 7, 31, 100, 257}) {
    for (std::uint64_t seed : {0u, 1u, 42u}) {
      const auto s = split_dataset(n, {0.5, 0.25, 0.25}, seed);
      std::set<Eigen::Index> seen;
      for (const auto* part : {&s.train, &s.valid, &s.test})
        for (auto i : *part) CHECK(seen.insert(i).second);
      CHECK(static_cast<Eigen::Index>(seen.size()) == n);
      CHECK(*seen.begin() == 0);
      CHECK(*seen.rbegin() == n - 1);
    }
  }
}

TEST_CASE("split: errors") {
  CHECK_THROWS_AS(split_dataset(10, {0.5, 0.5, 0.5}, 1), ConfigError);
  CHECK_THROWS_AS(split_dataset(10, {1.2, -0.1, -0.1}, 1), ConfigError);
  CHECK_THROWS_AS(split_dataset(3, {0.8, 0.1, 0.1}, 1), SizeError);
}

TEST_CASE("standardize: hand-computed column and constant column") {
  ObservationalDataset ds;
  ds.x = Matrix(3, 2);
  ds.x << 1, 5, 2, 5, 3, 5;
  ds.t = IntVector(3);
  ds.t << 0, 1, 0;
  ds.y = Vector::Zero(3);
  const IndexList all{0, 1, 2};
  const auto res = standardize(ds, all);
  CHECK(res.dataset.x(0, 0) == doctest::Approx(-1.224744871391589).epsilon(1e-9));
  CHECK(res.dataset.x(1, 0) == doctest::Approx(0.0));
  CHECK(res.dataset.x(2, 0) == doctest::Approx(1.224744871391589).epsilon(1e-9));
  CHECK(res.dataset.x.col(1).isZero());
  CHECK(res.standardizer.stddev(1) == 1.0);
  CHECK(res.dataset.t == ds.t);
}

TEST_CASE("standardize: inverse transform recovers originals") {
  RctConfig cfg;
  cfg.n = 40;
  cfg.d = 3;
  const auto ds = generate_rct(cfg, 11);
  IndexList rows{0, 3, 5, 7, 11, 13, 17, 19};
  const auto st = Standardizer::fit(ds.x, rows);
  const Matrix back = st.inverse_transform(st.transform(ds.x));
  CHECK((back - ds.x).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("treatment groups") {
  IntVector t(3);
  t << 0, 1, 0;
  const auto g = treatment_groups(t);
  CHECK(g.control == IndexList{0, 2});
  CHECK(g.treated == IndexList{1});

  const auto all = treatment_groups(IntVector(IntVector::Ones(4)));
  CHECK(all.control.empty());
  CHECK(all.treated.size() == 4);

  RctConfig cfg;
  cfg.n = 10000;
  const auto ds = generate_rct(cfg, 2024);
  const auto groups = treatment_groups(ds);
  CHECK(std::abs(static_cast<double>(groups.treated.size()) - 5000.0) < 3.0 * 100.0);
}

TEST_CASE("validate rejects broken invariants") {
  ObservationalDataset ds;
  ds.x = Matrix::Zero(3, 1);
  ds.t = IntVector::Zero(3);
  ds.y = Vector::Zero(3);
  CHECK_NOTHROW(ds.validate());
  ds.e = Vector::Constant(3, 1.0);
  CHECK_THROWS_AS(ds.validate(), ValidationError);
  ds.e.reset();
  ds.mu0 = Vector::Zero(3);
  CHECK_THROWS_AS(ds.validate(), ValidationError);
  CHECK_THROWS_AS(ds.true_cate(), DataError);
}
