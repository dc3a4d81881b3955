#include "cfr/nnet.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "cfr/error.hpp"
#include "cfr/rng.hpp"

namespace cfr {

namespace {

using ConstMatMap = Eigen::Map<const Matrix>;
using ConstVecMap = Eigen::Map<const Vector>;

Matrix activate(const Matrix& pre, Activation act) {
  if (act == Activation::kIdentity) return pre;
  return pre.unaryExpr([](double v) { return elu(v); });
}

Matrix activation_derivative(const Matrix& pre, Activation act) {
  if (act == Activation::kIdentity) return Matrix::Ones(pre.rows(), pre.cols());
  return pre.unaryExpr([](double v) { return v > 0.0 ? 1.0 : std::exp(v); });
}

double sigmoid(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

Matrix gather_rows(const Matrix& m, const IndexList& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = m.row(rows[r]);
  return out;
}

void check_treatments(const IntVector& t) {
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    if (t(i) != 0 && t(i) != 1)
      throw ValidationError("treatment at batch row " + std::to_string(i) + " is " + std::to_string(t(i)));
  }
}

Matrix with_treatment_column(const Matrix& z, const IntVector& t) {
  Matrix in(z.rows(), z.cols() + 1);
  in.leftCols(z.cols()) = z;
  in.col(z.cols()) = t.cast<double>();
  return in;
}

const char* activation_name(Activation a) { return a == Activation::kElu ? "elu" : "linear"; }

Activation parse_activation(const std::string& s) {
  if (s == "elu") return Activation::kElu;
  if (s == "linear") return Activation::kIdentity;
  throw DataError("unknown activation '" + s + "' in model file");
}

}  // namespace

double softplus(double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); }

Architecture Architecture::standard(int input_dim, int rep_count, int rep_width, int head_hidden, int head_width,
                                    int weight_hidden, int weight_width) {
  Architecture a;
  a.input_dim = input_dim;
  for (int i = 0; i < rep_count; ++i) a.rep_layers.push_back({rep_width, Activation::kElu});
  for (int i = 0; i < head_hidden; ++i) a.head_layers.push_back({head_width, Activation::kElu});
  a.head_layers.push_back({1, Activation::kIdentity});
  if (weight_hidden >= 0) {
    std::vector<LayerSpec> w;
    for (int i = 0; i < weight_hidden; ++i) w.push_back({weight_width, Activation::kElu});
    w.push_back({1, Activation::kIdentity});
    a.weight_head_layers = std::move(w);
  }
  return a;
}

void Architecture::validate() const {
  if (input_dim < 1) throw ConfigError("architecture input_dim must be at least 1");
  auto check = [](const std::vector<LayerSpec>& layers, const char* what) {
    for (const auto& l : layers)
      if (l.width < 1) throw ConfigError(std::string(what) + " layer width must be at least 1");
  };
  check(rep_layers, "representation");
  check(head_layers, "head");
  if (head_layers.empty() || head_layers.back().width != 1)
    throw ConfigError("outcome heads must end in a width-1 output layer");
  if (weight_head_layers) {
    check(*weight_head_layers, "weight head");
    if (weight_head_layers->empty() || weight_head_layers->back().width != 1)
      throw ConfigError("weight head must end in a width-1 output layer");
  }
}

Mlp::Mlp(Eigen::Index in_dim, const std::vector<LayerSpec>& specs, Eigen::Index offset)
    : in_dim_(in_dim), offset_(offset) {
  Eigen::Index in = in_dim, off = offset;
  for (const auto& s : specs) {
    layers_.push_back({in, s.width, off, s.activation});
    off += (in + 1) * s.width;
    in = s.width;
  }
  size_ = off - offset;
}

Matrix Mlp::forward(const Vector& params, const Matrix& x, Cache* cache) const {
  if (x.cols() != in_dim_)
    throw SizeError("layer input has " + std::to_string(x.cols()) + " columns, expected " + std::to_string(in_dim_));
  if (cache) {
    cache->inputs.clear();
    cache->pre.clear();
  }
  Matrix h = x;
  for (const auto& l : layers_) {
    ConstMatMap w(params.data() + l.offset, l.in, l.out);
    ConstVecMap b(params.data() + l.offset + l.in * l.out, l.out);
    Matrix pre = h * w;
    pre.rowwise() += b.transpose();
    if (cache) {
      cache->inputs.push_back(h);
      cache->pre.push_back(pre);
    }
    h = activate(pre, l.activation);
  }
  return h;
}

Matrix Mlp::backward(const Vector& params, const Cache& cache, const Matrix& d_out, Vector& grad) const {
  if (cache.pre.size() != layers_.size()) throw Error("backward called without a matching forward cache");
  Matrix d = d_out;
  for (std::size_t k = layers_.size(); k-- > 0;) {
    const auto& l = layers_[k];
    const Matrix d_pre = d.cwiseProduct(activation_derivative(cache.pre[k], l.activation));
    Eigen::Map<Matrix> gw(grad.data() + l.offset, l.in, l.out);
    Eigen::Map<Vector> gb(grad.data() + l.offset + l.in * l.out, l.out);
    gw.noalias() += cache.inputs[k].transpose() * d_pre;
    gb += d_pre.colwise().sum().transpose();
    ConstMatMap w(params.data() + l.offset, l.in, l.out);
    d = d_pre * w.transpose();
  }
  return d;
}

CfrModel::CfrModel(Architecture arch) : arch_(std::move(arch)) {
  arch_.validate();
  Eigen::Index off = 0;
  rep_ = Mlp(arch_.input_dim, arch_.rep_layers, off);
  off += rep_.size();
  for (int t = 0; t < 2; ++t) {
    heads_[t] = Mlp(arch_.representation_dim(), arch_.head_layers, off);
    off += heads_[t].size();
  }
  if (arch_.weight_head_layers) {
    weight_head_ = Mlp(arch_.representation_dim() + 1, *arch_.weight_head_layers, off);
    off += weight_head_->size();
  }
  params_ = Vector::Zero(off);
}

Eigen::Index parameter_count(const Architecture& arch) { return CfrModel(arch).parameter_count(); }

CfrModel CfrModel::init(const Architecture& arch, std::uint64_t seed) {
  CfrModel model(arch);
  model.seed_ = seed;
  Rng rng(substream_seed(seed, "init"));
  auto fill = [&](const Mlp& mlp) {
    for (const auto& l : mlp.layers()) {
      const double limit = std::sqrt(3.0 / static_cast<double>(l.in));
      std::uniform_real_distribution<double> u(-limit, limit);
      for (Eigen::Index k = 0; k < l.in * l.out; ++k) model.params_(l.offset + k) = u(rng);
    }
  };
  fill(model.rep_);
  fill(model.heads_[0]);
  fill(model.heads_[1]);
  if (model.weight_head_) fill(*model.weight_head_);
  return model;
}

void CfrModel::set_parameters(const Vector& p) {
  if (p.size() != params_.size()) throw SizeError("parameter vector has the wrong length");
  params_ = p;
}

std::vector<ParameterBlock> CfrModel::blocks() const {
  std::vector<ParameterBlock> b;
  if (rep_.size() > 0) b.push_back({"representation", rep_.offset(), rep_.size()});
  b.push_back({"head0", heads_[0].offset(), heads_[0].size()});
  b.push_back({"head1", heads_[1].offset(), heads_[1].size()});
  if (weight_head_) b.push_back({"weight_head", weight_head_->offset(), weight_head_->size()});
  return b;
}

ParameterBlock CfrModel::head_block() const {
  return {"heads", heads_[0].offset(), heads_[0].size() + heads_[1].size()};
}

Matrix CfrModel::forward_representation(const Matrix& x) const { return rep_.forward(params_, x); }

Vector CfrModel::head_output(const Matrix& z, int t) const { return heads_[t].forward(params_, z).col(0); }

Vector CfrModel::forward_hypothesis(const Matrix& z, const IntVector& t) const {
  if (t.size() != z.rows()) throw SizeError("treatment vector length does not match batch");
  check_treatments(t);
  const auto groups = treatment_groups(t);
  Vector out(z.rows());
  const IndexList* rows[2] = {&groups.control, &groups.treated};
  for (int g = 0; g < 2; ++g) {
    if (rows[g]->empty()) continue;
    const Vector y = head_output(gather_rows(z, *rows[g]), g);
    for (std::size_t r = 0; r < rows[g]->size(); ++r) out((*rows[g])[r]) = y(static_cast<Eigen::Index>(r));
  }
  return out;
}

Vector CfrModel::forward_weights(const Matrix& z, const IntVector& t) const {
  if (!weight_head_) throw ConfigError("model has no weight head");
  if (t.size() != z.rows()) throw SizeError("treatment vector length does not match batch");
  check_treatments(t);
  const Vector logits = weight_head_->forward(params_, with_treatment_column(z, t)).col(0);
  Vector w = logits.unaryExpr([](double v) { return softplus(v); });
  const auto groups = treatment_groups(t);
  for (const auto* rows : {&groups.control, &groups.treated}) {
    if (rows->empty()) continue;
    double total = 0.0;
    for (auto i : *rows) total += w(i);
    const double scale = static_cast<double>(rows->size()) / total;
    for (auto i : *rows) w(i) *= scale;
  }
  return w;
}

Vector CfrModel::predict_cate(const Matrix& x) const {
  const auto po = predict_potential_outcomes(x);
  return po.y1 - po.y0;
}

PotentialOutcomes CfrModel::predict_potential_outcomes(const Matrix& x) const {
  const Matrix z = forward_representation(x);
  return {head_output(z, 0), head_output(z, 1)};
}

BatchPass CfrModel::forward(const Matrix& x, const IntVector& t, bool with_weights) const {
  if (t.size() != x.rows()) throw SizeError("treatment vector length does not match batch");
  check_treatments(t);
  BatchPass pass;
  pass.x = x;
  pass.t = t;
  pass.z = rep_.forward(params_, x, &pass.rep_cache);
  const auto groups = treatment_groups(t);
  pass.head_rows[0] = groups.control;
  pass.head_rows[1] = groups.treated;
  pass.yhat = Vector(x.rows());
  for (int g = 0; g < 2; ++g) {
    if (pass.head_rows[g].empty()) continue;
    const Vector y = heads_[g].forward(params_, gather_rows(pass.z, pass.head_rows[g]), &pass.head_cache[g]).col(0);
    for (std::size_t r = 0; r < pass.head_rows[g].size(); ++r)
      pass.yhat(pass.head_rows[g][r]) = y(static_cast<Eigen::Index>(r));
  }
  if (with_weights) {
    if (!weight_head_) throw ConfigError("model has no weight head");
    pass.with_weights = true;
    pass.weight_logits = weight_head_->forward(params_, with_treatment_column(pass.z, t), &pass.weight_cache).col(0);
    pass.raw_weights = pass.weight_logits.unaryExpr([](double v) { return softplus(v); });
    pass.weights = pass.raw_weights;
    for (int g = 0; g < 2; ++g) {
      const auto& rows = pass.head_rows[g];
      if (rows.empty()) continue;
      double total = 0.0;
      for (auto i : rows) total += pass.raw_weights(i);
      const double scale = static_cast<double>(rows.size()) / total;
      for (auto i : rows) pass.weights(i) = pass.raw_weights(i) * scale;
    }
  }
  return pass;
}

Vector CfrModel::backward(const BatchPass& pass, const Vector& d_yhat, const Matrix& d_z_in,
                          const Vector& d_weights) const {
  const auto n = pass.x.rows();
  if (pass.z.rows() != n || pass.yhat.size() != n) throw Error("backward called without a forward cache");
  Vector grad = Vector::Zero(params_.size());
  Matrix d_z = d_z_in.size() == 0 ? Matrix::Zero(n, pass.z.cols()) : d_z_in;
  if (d_z.rows() != n || d_z.cols() != pass.z.cols()) throw SizeError("d_z has the wrong shape");

  if (d_yhat.size() > 0) {
    if (d_yhat.size() != n) throw SizeError("d_yhat has the wrong length");
    for (int g = 0; g < 2; ++g) {
      const auto& rows = pass.head_rows[g];
      if (rows.empty()) continue;
      Matrix d_out(static_cast<Eigen::Index>(rows.size()), 1);
      for (std::size_t r = 0; r < rows.size(); ++r) d_out(static_cast<Eigen::Index>(r), 0) = d_yhat(rows[r]);
      const Matrix d_in = heads_[g].backward(params_, pass.head_cache[g], d_out, grad);
      for (std::size_t r = 0; r < rows.size(); ++r) d_z.row(rows[r]) += d_in.row(static_cast<Eigen::Index>(r));
    }
  }

  if (d_weights.size() > 0) {
    if (!pass.with_weights) throw Error("weight gradient supplied but the forward pass had no weights");
    if (d_weights.size() != n) throw SizeError("d_weights has the wrong length");
    // w_i = n_g s_i / S_g within group g, s = softplus(logit).
    Vector d_logit = Vector::Zero(n);
    for (int g = 0; g < 2; ++g) {
      const auto& rows = pass.head_rows[g];
      if (rows.empty()) continue;
      double total = 0.0, dot = 0.0;
      for (auto i : rows) {
        total += pass.raw_weights(i);
        dot += d_weights(i) * pass.raw_weights(i);
      }
      const double ng = static_cast<double>(rows.size());
      for (auto i : rows) {
        const double d_s = ng * d_weights(i) / total - ng * dot / (total * total);
        d_logit(i) = d_s * sigmoid(pass.weight_logits(i));
      }
    }
    const Matrix d_in = weight_head_->backward(params_, pass.weight_cache, d_logit, grad);
    d_z += d_in.leftCols(pass.z.cols());
  }

  rep_.backward(params_, pass.rep_cache, d_z, grad);
  return grad;
}

void CfrModel::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write model file '" + path + "'");
  auto layers = [&](const char* name, const std::vector<LayerSpec>& ls) {
    out << name << ' ' << ls.size();
    for (const auto& l : ls) out << ' ' << l.width << ':' << activation_name(l.activation);
    out << '\n';
  };
  out << "cfr-model 1\n";
  out << "input_dim " << arch_.input_dim << '\n';
  layers("rep", arch_.rep_layers);
  layers("head", arch_.head_layers);
  if (arch_.weight_head_layers) layers("weight_head", *arch_.weight_head_layers);
  out << "seed " << seed_ << '\n';
  out << "params " << params_.size() << '\n';
  char buf[64];
  for (Eigen::Index i = 0; i < params_.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g\n", params_(i));
    out << buf;
  }
  if (!out) throw DataError("error while writing '" + path + "'");
}

CfrModel CfrModel::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open model file '" + path + "'");
  std::string tag;
  int version = 0;
  in >> tag >> version;
  if (tag != "cfr-model" || version != 1) throw DataError("'" + path + "' is not a version-1 model file");

  Architecture arch;
  std::uint64_t seed = 0;
  Eigen::Index count = -1;
  auto read_layers = [&](std::vector<LayerSpec>& ls) {
    std::size_t k = 0;
    in >> k;
    for (std::size_t i = 0; i < k; ++i) {
      std::string item;
      in >> item;
      const auto colon = item.find(':');
      if (colon == std::string::npos) throw DataError("malformed layer '" + item + "' in model file");
      ls.push_back({std::stoi(item.substr(0, colon)), parse_activation(item.substr(colon + 1))});
    }
  };
  std::string key;
  while (count < 0 && in >> key) {
    if (key == "input_dim") in >> arch.input_dim;
    else if (key == "rep") read_layers(arch.rep_layers);
    else if (key == "head") read_layers(arch.head_layers);
    else if (key == "weight_head") read_layers(arch.weight_head_layers.emplace());
    else if (key == "seed") in >> seed;
    else if (key == "params") in >> count;
    else throw DataError("unknown key '" + key + "' in model file");
  }
  CfrModel model(arch);
  model.seed_ = seed;
  if (count != model.parameter_count()) throw DataError("model file parameter count does not match architecture");
  for (Eigen::Index i = 0; i < count; ++i) {
    std::string s;
    if (!(in >> s)) throw DataError("model file ended early");
    model.params_(i) = std::strtod(s.c_str(), nullptr);
  }
  return model;
}

GradientReport check_gradient(const std::function<double(const Vector&)>& objective, const Vector& point,
                              const Vector& analytic, const std::vector<ParameterBlock>& blocks, double step,
                              double floor) {
  GradientReport rep;
  rep.step = step;
  Vector x = point;
  Vector rel(point.size());
  for (Eigen::Index i = 0; i < point.size(); ++i) {
    const double orig = x(i);
    x(i) = orig + step;
    const double fp = objective(x);
    x(i) = orig - step;
    const double fm = objective(x);
    x(i) = orig;
    const double numeric = (fp - fm) / (2.0 * step);
    const double denom = std::max({std::abs(analytic(i)), std::abs(numeric), floor});
    rel(i) = std::abs(analytic(i) - numeric) / denom;
    if (rel(i) > rep.max_relative_error || rep.worst_coordinate < 0) {
      rep.max_relative_error = rel(i);
      rep.worst_coordinate = i;
    }
  }
  for (const auto& b : blocks) {
    double worst = 0.0;
    for (Eigen::Index i = b.offset; i < b.offset + b.size; ++i) worst = std::max(worst, rel(i));
    rep.block_errors.emplace_back(b.name, worst);
  }
  return rep;
}

}  // namespace cfr
