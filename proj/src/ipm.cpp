#include "cfr/ipm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "cfr/error.hpp"

namespace cfr {

namespace {

void require_same_width(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols())
    throw SizeError("point clouds have different dimensions (" + std::to_string(a.cols()) + " vs " +
                    std::to_string(b.cols()) + ")");
  if (a.cols() < 1) throw SizeError("point clouds need at least one coordinate");
}

Matrix squared_distances(const Matrix& a, const Matrix& b) {
  Matrix d2(a.rows(), b.rows());
  for (Eigen::Index j = 0; j < b.rows(); ++j) {
    for (Eigen::Index i = 0; i < a.rows(); ++i) d2(i, j) = (a.row(i) - b.row(j)).squaredNorm();
  }
  return d2;
}

// Adds d/dX and d/dY of sum_ij C_ij k(x_i, y_j) given the kernel values K,
// using dk/dx = -k (x - y) / sigma^2.
void accumulate_kernel_grad(const Matrix& x, const Matrix& y, const Matrix& kernel, const Matrix& coef,
                            double sigma, Matrix& grad_x, Matrix& grad_y) {
  const Matrix ck = coef.cwiseProduct(kernel);
  const double s = 1.0 / (sigma * sigma);
  const Vector row_sum = ck.rowwise().sum();
  const Vector col_sum = ck.colwise().sum().transpose();
  grad_x.noalias() -= s * (row_sum.asDiagonal() * x - ck * y);
  grad_y.noalias() -= s * (col_sum.asDiagonal() * y - ck.transpose() * x);
}

bool is_constant(const Vector& w) {
  if (w.size() == 0) return true;
  return (w.array() == w(0)).all();
}

Vector normalized(const Vector& w, Eigen::Index n, const char* what) {
  if (w.size() == 0) return Vector::Constant(n, 1.0 / static_cast<double>(n));
  if (w.size() != n) throw SizeError(std::string(what) + " length does not match its point cloud");
  if ((w.array() < 0.0).any()) throw ConfigError(std::string(what) + " must be nonnegative");
  const double total = w.sum();
  if (!(total > 0.0)) throw ConfigError(std::string(what) + " must have positive total");
  return w / total;
}

// d/dw of f(w / sum(w)) given g = df/dp at p = w / sum(w).
Vector chain_normalization(const Vector& g, const Vector& p, double total) {
  return ((g.array() - g.dot(p)) / total).matrix();
}

}  // namespace

Matrix euclidean_distances(const Matrix& a, const Matrix& b) { return squared_distances(a, b).cwiseSqrt(); }

double median_pairwise_distance(const Matrix& a, const Matrix& b) {
  require_same_width(a, b);
  Matrix pooled(a.rows() + b.rows(), a.cols());
  pooled << a, b;
  const auto n = pooled.rows();
  std::vector<double> d;
  d.reserve(static_cast<std::size_t>(n * (n - 1) / 2));
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) d.push_back((pooled.row(i) - pooled.row(j)).norm());
  }
  if (d.empty()) return 0.0;
  const auto mid = d.size() / 2;
  std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(mid), d.end());
  double med = d[mid];
  if (d.size() % 2 == 0) {
    const double lower = *std::max_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(mid));
    med = 0.5 * (med + lower);
  }
  return med;
}

namespace {

struct Bandwidth {
  double sigma;
  bool fallback;
};

Bandwidth resolve_bandwidth(const Matrix& a, const Matrix& b, const KernelConfig& cfg) {
  if (!cfg.median) {
    if (!(cfg.bandwidth > 0.0)) throw ConfigError("kernel bandwidth must be positive");
    return {cfg.bandwidth, false};
  }
  const double med = median_pairwise_distance(a, b);
  if (!(med > 0.0)) return {1.0, true};
  return {med, false};
}

Matrix rbf_from_sq(const Matrix& d2, double sigma) { return (-d2.array() / (2.0 * sigma * sigma)).exp(); }

}  // namespace

KernelMatrix rbf_kernel_matrix(const Matrix& a, const Matrix& b, const KernelConfig& cfg) {
  require_same_width(a, b);
  const auto bw = resolve_bandwidth(a, b, cfg);
  return {rbf_from_sq(squared_distances(a, b), bw.sigma), bw.sigma, bw.fallback};
}

IpmEstimate mmd2_quadratic(const Matrix& a, const Matrix& b, const Vector& weights_a, const Vector& weights_b,
                           const KernelConfig& cfg, MmdForm form) {
  require_same_width(a, b);
  const auto m = a.rows();
  const auto n = b.rows();
  if (m < 1 || n < 1) throw SizeError("MMD needs nonempty point clouds");

  bool weighted = false;
  switch (form) {
    case MmdForm::kAuto: weighted = !(is_constant(weights_a) && is_constant(weights_b)); break;
    case MmdForm::kUnbiased: weighted = false; break;
    case MmdForm::kWeighted: weighted = true; break;
  }
  if (!weighted && (m < 2 || n < 2)) throw SizeError("unbiased MMD needs at least two points per cloud");

  const auto bw = resolve_bandwidth(a, b, cfg);
  const Matrix kaa = rbf_from_sq(squared_distances(a, a), bw.sigma);
  const Matrix kab = rbf_from_sq(squared_distances(a, b), bw.sigma);
  const Matrix kbb = rbf_from_sq(squared_distances(b, b), bw.sigma);

  Matrix caa, cab, cbb;
  Vector p, q;
  if (weighted) {
    p = normalized(weights_a, m, "weights_a");
    q = normalized(weights_b, n, "weights_b");
    caa = p * p.transpose();
    cab = -2.0 * p * q.transpose();
    cbb = q * q.transpose();
  } else {
    const double dm = static_cast<double>(m), dn = static_cast<double>(n);
    caa = Matrix::Constant(m, m, 1.0 / (dm * (dm - 1.0)));
    caa.diagonal().setZero();
    cab = Matrix::Constant(m, n, -2.0 / (dm * dn));
    cbb = Matrix::Constant(n, n, 1.0 / (dn * (dn - 1.0)));
    cbb.diagonal().setZero();
  }

  IpmEstimate est;
  est.raw_value = caa.cwiseProduct(kaa).sum() + cab.cwiseProduct(kab).sum() + cbb.cwiseProduct(kbb).sum();
  est.value = std::max(est.raw_value, 0.0);
  est.biased = weighted;
  est.bandwidth = bw.sigma;
  est.bandwidth_fallback = bw.fallback;

  est.grad_a = Matrix::Zero(m, a.cols());
  est.grad_b = Matrix::Zero(n, b.cols());
  {
    Matrix ga2 = Matrix::Zero(m, a.cols());
    accumulate_kernel_grad(a, a, kaa, caa, bw.sigma, est.grad_a, ga2);
    est.grad_a += ga2;
    accumulate_kernel_grad(a, b, kab, cab, bw.sigma, est.grad_a, est.grad_b);
    Matrix gb2 = Matrix::Zero(n, b.cols());
    accumulate_kernel_grad(b, b, kbb, cbb, bw.sigma, est.grad_b, gb2);
    est.grad_b += gb2;
  }

  if (weighted) {
    const Vector gp = 2.0 * kaa * p - 2.0 * kab * q;
    const Vector gq = 2.0 * kbb * q - 2.0 * kab.transpose() * p;
    if (weights_a.size() > 0) est.grad_weights_a = chain_normalization(gp, p, weights_a.sum());
    if (weights_b.size() > 0) est.grad_weights_b = chain_normalization(gq, q, weights_b.sum());
  }
  return est;
}

IpmEstimate mmd2_linear(const Matrix& a, const Matrix& b, const KernelConfig& cfg) {
  require_same_width(a, b);
  if (a.rows() < 2 || b.rows() < 2) throw SizeError("linear MMD needs at least two points per cloud");
  const auto pairs = std::min(a.rows(), b.rows()) / 2;
  const auto len = 2 * pairs;
  const Matrix at = a.topRows(len);
  const Matrix bt = b.topRows(len);
  const auto bw = resolve_bandwidth(at, bt, cfg);
  const double s2 = bw.sigma * bw.sigma;

  IpmEstimate est;
  est.grad_a = Matrix::Zero(a.rows(), a.cols());
  est.grad_b = Matrix::Zero(b.rows(), b.cols());
  est.bandwidth = bw.sigma;
  est.bandwidth_fallback = bw.fallback;
  const double c = 1.0 / static_cast<double>(pairs);

  // Adds c * sign * k(x, y) to the value and its derivatives to gx, gy.
  auto term = [&](const auto& x, const auto& y, double sign, auto gx, auto gy) {
    const Eigen::RowVectorXd diff = x - y;
    const double k = std::exp(-diff.squaredNorm() / (2.0 * s2));
    est.raw_value += c * sign * k;
    const Eigen::RowVectorXd g = -c * sign * k / s2 * diff;
    gx += g;
    gy -= g;
  };
  for (Eigen::Index i = 0; i < pairs; ++i) {
    const auto o = 2 * i, e = 2 * i + 1;
    term(at.row(o), at.row(e), 1.0, est.grad_a.row(o), est.grad_a.row(e));
    term(bt.row(o), bt.row(e), 1.0, est.grad_b.row(o), est.grad_b.row(e));
    term(at.row(o), bt.row(e), -1.0, est.grad_a.row(o), est.grad_b.row(e));
    term(at.row(e), bt.row(o), -1.0, est.grad_a.row(e), est.grad_b.row(o));
  }
  est.value = std::max(est.raw_value, 0.0);
  return est;
}

IpmEstimate sinkhorn_distance(const Matrix& a, const Matrix& b, const Vector& marginals_a, const Vector& marginals_b,
                              const SinkhornConfig& cfg) {
  require_same_width(a, b);
  if (!(cfg.entropy_scale > 0.0)) throw ConfigError("Sinkhorn entropy_scale must be positive");
  if (cfg.iterations < 1) throw ConfigError("Sinkhorn iterations must be at least 1");
  const auto m = a.rows();
  const auto n = b.rows();
  if (m < 1 || n < 1) throw SizeError("Sinkhorn distance needs nonempty point clouds");

  const Vector pa = normalized(marginals_a, m, "marginals_a");
  const Vector pb = normalized(marginals_b, n, "marginals_b");
  const double lambda = cfg.entropy_scale;
  const Matrix dist = euclidean_distances(a, b);
  // Eigen's vectorized exp clamps large negative arguments to a subnormal
  // instead of 0, which would hide underflow; use the scalar exp.
  const Matrix kern = dist.unaryExpr([lambda](double d) { return std::exp(-lambda * d); });

  constexpr double tiny = std::numeric_limits<double>::min();
  if ((kern.rowwise().sum().array() < tiny).any() || (kern.colwise().sum().array() < tiny).any())
    throw NumericError("Sinkhorn kernel underflow at entropy_scale " + std::to_string(lambda) +
                       "; use a smaller entropy_scale");

  const int iters = cfg.iterations;
  std::vector<Vector> us(static_cast<std::size_t>(iters + 1));
  std::vector<Vector> vs(static_cast<std::size_t>(iters + 1));  // vs[0] unused
  std::vector<Vector> ss(static_cast<std::size_t>(iters + 2));  // K^T u denominators
  std::vector<Vector> rs(static_cast<std::size_t>(iters + 1));  // K v denominators
  us[0] = Vector::Ones(m);
  for (int it = 1; it <= iters; ++it) {
    const auto k = static_cast<std::size_t>(it);
    ss[k] = kern.transpose() * us[k - 1];
    vs[k] = pb.cwiseQuotient(ss[k]);
    rs[k] = kern * vs[k];
    us[k] = pa.cwiseQuotient(rs[k]);
    if (!us[k].allFinite() || !vs[k].allFinite())
      throw NumericError("Sinkhorn scaling became non-finite at iteration " + std::to_string(it));
  }
  const auto last = static_cast<std::size_t>(iters);
  ss[last + 1] = kern.transpose() * us[last];
  const Vector v_final = pb.cwiseQuotient(ss[last + 1]);
  if (!v_final.allFinite()) throw NumericError("Sinkhorn scaling became non-finite at the final column update");

  const Matrix plan = us[last].asDiagonal() * kern * v_final.asDiagonal();

  IpmEstimate est;
  est.raw_value = plan.cwiseProduct(dist).sum();
  est.value = std::max(est.raw_value, 0.0);
  est.biased = marginals_a.size() > 0 || marginals_b.size() > 0;

  // Reverse pass. Adjoints of K are needed only for the unrolled point
  // gradient, but the marginal adjoints need the scaling chain either way.
  const bool unrolled = cfg.gradient == SinkhornGradient::kUnrolled;
  const Matrix km = kern.cwiseProduct(dist);
  Vector u_bar = km * v_final;
  Vector v_bar = km.transpose() * us[last];
  Vector a_bar = Vector::Zero(m);
  Vector b_bar = Vector::Zero(n);
  Matrix k_bar;
  if (unrolled) k_bar = dist.cwiseProduct(us[last] * v_final.transpose());

  {
    const Vector& s = ss[last + 1];
    b_bar += v_bar.cwiseQuotient(s);
    const Vector s_bar = -v_bar.cwiseProduct(v_final).cwiseQuotient(s);
    u_bar += kern * s_bar;
    if (unrolled) k_bar += us[last] * s_bar.transpose();
  }
  for (int it = iters; it >= 1; --it) {
    const auto k = static_cast<std::size_t>(it);
    a_bar += u_bar.cwiseQuotient(rs[k]);
    const Vector r_bar = -u_bar.cwiseProduct(us[k]).cwiseQuotient(rs[k]);
    v_bar = kern.transpose() * r_bar;
    if (unrolled) k_bar += r_bar * vs[k].transpose();
    b_bar += v_bar.cwiseQuotient(ss[k]);
    const Vector s_bar = -v_bar.cwiseProduct(vs[k]).cwiseQuotient(ss[k]);
    u_bar = kern * s_bar;
    if (unrolled) k_bar += us[k - 1] * s_bar.transpose();
  }

  Matrix m_bar = plan;
  if (unrolled) m_bar += -lambda * k_bar.cwiseProduct(kern);

  est.grad_a = Matrix::Zero(m, a.cols());
  est.grad_b = Matrix::Zero(n, b.cols());
  for (Eigen::Index j = 0; j < n; ++j) {
    for (Eigen::Index i = 0; i < m; ++i) {
      if (dist(i, j) <= 0.0) continue;  // subgradient 0 at coincident points
      const Eigen::RowVectorXd g = (m_bar(i, j) / dist(i, j)) * (a.row(i) - b.row(j));
      est.grad_a.row(i) += g;
      est.grad_b.row(j) -= g;
    }
  }
  if (marginals_a.size() > 0) est.grad_weights_a = chain_normalization(a_bar, pa, marginals_a.sum());
  if (marginals_b.size() > 0) est.grad_weights_b = chain_normalization(b_bar, pb, marginals_b.sum());
  est.transport = plan;
  return est;
}

}  // namespace cfr
