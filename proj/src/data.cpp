#include "cfr/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "cfr/error.hpp"
#include "cfr/rng.hpp"

namespace cfr {

namespace {

std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find(',', start);
    cells.push_back(trim(std::string_view(line).substr(start, pos == std::string::npos ? std::string::npos : pos - start)));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return cells;
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

Vector ObservationalDataset::true_cate() const {
  if (!has_truth()) throw DataError("ground-truth potential outcomes (mu0, mu1) are not present");
  return *mu1 - *mu0;
}

ObservationalDataset ObservationalDataset::subset(std::span<const Eigen::Index> indices) const {
  ObservationalDataset out;
  const auto m = static_cast<Eigen::Index>(indices.size());
  out.x.resize(m, dim());
  out.t.resize(m);
  out.y.resize(m);
  if (mu0) out.mu0 = Vector(m);
  if (mu1) out.mu1 = Vector(m);
  if (e) out.e = Vector(m);
  for (Eigen::Index r = 0; r < m; ++r) {
    const auto i = indices[static_cast<std::size_t>(r)];
    if (i < 0 || i >= size()) throw SizeError("subset index " + std::to_string(i) + " out of range");
    out.x.row(r) = x.row(i);
    out.t(r) = t(i);
    out.y(r) = y(i);
    if (mu0) (*out.mu0)(r) = (*mu0)(i);
    if (mu1) (*out.mu1)(r) = (*mu1)(i);
    if (e) (*out.e)(r) = (*e)(i);
  }
  out.feature_names = feature_names;
  return out;
}

void ObservationalDataset::validate() const {
  const auto n = size();
  if (dim() < 1) throw ValidationError("dataset needs at least one covariate");
  if (n < 2) throw ValidationError("dataset needs at least two rows");
  if (t.size() != n || y.size() != n) throw ValidationError("t and y must have one entry per row");
  if (!feature_names.empty() && static_cast<Eigen::Index>(feature_names.size()) != dim())
    throw ValidationError("feature_names length does not match covariate count");
  for (Eigen::Index i = 0; i < n; ++i) {
    if (t(i) != 0 && t(i) != 1)
      throw ValidationError("treatment in row " + std::to_string(i + 1) + " is " + std::to_string(t(i)) +
                            ", expected 0 or 1");
  }
  auto check_len = [n](const std::optional<Vector>& v, const char* name) {
    if (v && v->size() != n) throw ValidationError(std::string(name) + " must have one entry per row");
  };
  check_len(mu0, "mu0");
  check_len(mu1, "mu1");
  check_len(e, "e");
  if (mu0.has_value() != mu1.has_value()) throw ValidationError("mu0 and mu1 must be given together");
  if (e) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const double p = (*e)(i);
      if (!(p > 0.0 && p < 1.0))
        throw ValidationError("propensity in row " + std::to_string(i + 1) + " is outside (0,1)");
    }
  }
  if (has_truth()) {
    for (Eigen::Index i = 0; i < n; ++i) {
      if (!std::isfinite((*mu1)(i) - (*mu0)(i)))
        throw ValidationError("non-finite true effect in row " + std::to_string(i + 1));
    }
  }
}

ObservationalDataset load_dataset(const std::string& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset file '" + path + "'");

  std::string line;
  if (!std::getline(in, line)) throw SchemaError("dataset file '" + path + "' is empty");
  const auto header = split_csv_line(line);

  auto find_col = [&](const std::string& name) -> std::optional<std::size_t> {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) return std::nullopt;
    return static_cast<std::size_t>(it - header.begin());
  };
  auto require_col = [&](const std::string& name) {
    auto c = find_col(name);
    if (!c) throw SchemaError("column '" + name + "' not found in '" + path + "'");
    return *c;
  };

  const std::size_t t_col = require_col(schema.t_col);
  const std::size_t y_col = require_col(schema.y_col);
  std::optional<std::size_t> mu0_col, mu1_col, e_col;
  if (schema.mu0_col) mu0_col = schema.require_truth ? require_col(*schema.mu0_col) : find_col(*schema.mu0_col);
  if (schema.mu1_col) mu1_col = schema.require_truth ? require_col(*schema.mu1_col) : find_col(*schema.mu1_col);
  if (schema.e_col) e_col = find_col(*schema.e_col);

  std::vector<std::size_t> cov_cols;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (c == t_col || c == y_col || c == mu0_col || c == mu1_col || c == e_col) continue;
    cov_cols.push_back(c);
  }
  if (cov_cols.empty()) throw SchemaError("no covariate columns in '" + path + "'");

  std::vector<std::vector<double>> rows;
  std::size_t row_no = 0;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    ++row_no;
    auto cells = split_csv_line(line);
    if (cells.size() != header.size())
      throw ParseError("row " + std::to_string(row_no) + " has " + std::to_string(cells.size()) +
                           " cells, header has " + std::to_string(header.size()),
                       row_no, "");
    std::vector<double> values(cells.size());
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const auto& s = cells[c];
      const char* first = s.data();
      const char* last = s.data() + s.size();
      if (!s.empty() && *first == '+') ++first;
      auto [ptr, ec] = std::from_chars(first, last, values[c]);
      if (s.empty() || ec != std::errc() || ptr != last)
        throw ParseError("non-numeric value '" + s + "' at row " + std::to_string(row_no) + ", column '" +
                             header[c] + "'",
                         row_no, header[c]);
    }
    rows.push_back(std::move(values));
  }

  const auto n = static_cast<Eigen::Index>(rows.size());
  ObservationalDataset ds;
  ds.x.resize(n, static_cast<Eigen::Index>(cov_cols.size()));
  ds.t.resize(n);
  ds.y.resize(n);
  if (mu0_col) ds.mu0 = Vector(n);
  if (mu1_col) ds.mu1 = Vector(n);
  if (e_col) ds.e = Vector(n);
  for (auto c : cov_cols) ds.feature_names.push_back(header[c]);

  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& r = rows[static_cast<std::size_t>(i)];
    for (std::size_t k = 0; k < cov_cols.size(); ++k) ds.x(i, static_cast<Eigen::Index>(k)) = r[cov_cols[k]];
    const double tv = r[t_col];
    if (tv != 0.0 && tv != 1.0)
      throw ValidationError("treatment in row " + std::to_string(i + 1) + " is " + format_double(tv) +
                            ", expected 0 or 1");
    ds.t(i) = static_cast<int>(tv);
    ds.y(i) = r[y_col];
    if (mu0_col) (*ds.mu0)(i) = r[*mu0_col];
    if (mu1_col) (*ds.mu1)(i) = r[*mu1_col];
    if (e_col) (*ds.e)(i) = r[*e_col];
  }
  ds.validate();
  return ds;
}

void save_dataset(const ObservationalDataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write dataset file '" + path + "'");
  for (Eigen::Index j = 0; j < ds.dim(); ++j) {
    out << (ds.feature_names.empty() ? "x" + std::to_string(j + 1) : ds.feature_names[static_cast<std::size_t>(j)])
        << ',';
  }
  out << "t,y";
  if (ds.mu0) out << ",mu0";
  if (ds.mu1) out << ",mu1";
  if (ds.e) out << ",e";
  out << '\n';
  for (Eigen::Index i = 0; i < ds.size(); ++i) {
    for (Eigen::Index j = 0; j < ds.dim(); ++j) out << format_double(ds.x(i, j)) << ',';
    out << ds.t(i) << ',' << format_double(ds.y(i));
    if (ds.mu0) out << ',' << format_double((*ds.mu0)(i));
    if (ds.mu1) out << ',' << format_double((*ds.mu1)(i));
    if (ds.e) out << ',' << format_double((*ds.e)(i));
    out << '\n';
  }
  if (!out) throw DataError("error while writing '" + path + "'");
}

DatasetSplit split_dataset(Eigen::Index n, std::array<double, 3> ratios, std::uint64_t seed) {
  double sum = 0.0;
  for (double r : ratios) {
    if (!(r >= 0.0)) throw ConfigError("split ratios must be nonnegative");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");

  // The small epsilon keeps e.g. 100 * 0.24 from flooring to 23.
  auto alloc = [n](double r) { return static_cast<Eigen::Index>(std::floor(static_cast<double>(n) * r + 1e-9)); };
  const Eigen::Index n_valid = alloc(ratios[1]);
  const Eigen::Index n_test = alloc(ratios[2]);
  if ((ratios[1] > 0.0 && n_valid < 1) || (ratios[2] > 0.0 && n_test < 1))
    throw SizeError("n=" + std::to_string(n) + " is too small for the requested validation/test ratios");
  const Eigen::Index n_train = n - n_valid - n_test;
  if (n_train < 0) throw SizeError("split sizes exceed n");

  IndexList perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Eigen::Index{0});
  Rng rng(substream_seed(seed, "split"));
  std::shuffle(perm.begin(), perm.end(), rng);

  DatasetSplit split;
  split.ratios = ratios;
  split.seed = seed;
  auto take = [&](IndexList& dst, std::size_t from, Eigen::Index count) {
    dst.assign(perm.begin() + static_cast<std::ptrdiff_t>(from),
               perm.begin() + static_cast<std::ptrdiff_t>(from) + count);
    std::sort(dst.begin(), dst.end());
  };
  take(split.train, 0, n_train);
  take(split.valid, static_cast<std::size_t>(n_train), n_valid);
  take(split.test, static_cast<std::size_t>(n_train + n_valid), n_test);
  return split;
}

Standardizer Standardizer::fit(const Matrix& x, std::span<const Eigen::Index> rows) {
  if (rows.empty()) throw SizeError("standardizer needs at least one fit row");
  const auto d = x.cols();
  Standardizer s;
  s.mean = Vector::Zero(d);
  s.stddev = Vector::Ones(d);
  const double m = static_cast<double>(rows.size());
  for (auto i : rows) s.mean += x.row(i).transpose();
  s.mean /= m;
  Vector var = Vector::Zero(d);
  for (auto i : rows) var += (x.row(i).transpose() - s.mean).cwiseAbs2();
  var /= m;
  for (Eigen::Index j = 0; j < d; ++j) {
    const double sd = std::sqrt(var(j));
    // Relative threshold so that a column of identical large values counts as constant.
    s.stddev(j) = sd > 1e-12 * std::max(1.0, std::abs(s.mean(j))) ? sd : 1.0;
  }
  return s;
}

Matrix Standardizer::transform(const Matrix& x) const {
  return (x.rowwise() - mean.transpose()).array().rowwise() / stddev.transpose().array();
}

Matrix Standardizer::inverse_transform(const Matrix& z) const {
  return (z.array().rowwise() * stddev.transpose().array()).rowwise() + mean.transpose().array();
}

StandardizeResult standardize(const ObservationalDataset& ds, std::span<const Eigen::Index> fit_rows) {
  StandardizeResult r{ds, Standardizer::fit(ds.x, fit_rows)};
  r.dataset.x = r.standardizer.transform(ds.x);
  return r;
}

TreatmentGroups treatment_groups(const IntVector& t) {
  TreatmentGroups g;
  for (Eigen::Index i = 0; i < t.size(); ++i) (t(i) == 1 ? g.treated : g.control).push_back(i);
  return g;
}

TreatmentGroups treatment_groups(const ObservationalDataset& ds) { return treatment_groups(ds.t); }

}  // namespace cfr
