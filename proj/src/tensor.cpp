#include "gama/tensor.hpp"

#include "gama/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>

namespace gama {

// ---- Matrix ----------------------------------------------------------------

Matrix::Matrix(std::size_t rows, std::size_t cols, Real fill)
    : m_(Storage::Constant(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols), fill)) {}

Matrix::Matrix(std::initializer_list<std::initializer_list<Real>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  m_.resize(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
  std::size_t i = 0;
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("ragged matrix literal");
    std::size_t j = 0;
    for (Real v : row) m_(i, j++) = v;
    ++i;
  }
}

Matrix Matrix::identity(std::size_t n) {
  return Matrix(Storage::Identity(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n)));
}

Matrix Matrix::row(std::span<const Real> values) {
  Matrix m(1, values.size());
  std::copy(values.begin(), values.end(), m.data().begin());
  return m;
}

Real Matrix::max_abs_diff(const Matrix& other) const {
  if (!same_shape(other)) throw ShapeError("max_abs_diff: " + shape_str(*this) + " vs " + shape_str(other));
  if (empty()) return 0.0;
  return (m_ - other.m_).cwiseAbs().maxCoeff();
}

std::string shape_str(const Matrix& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

Matrix& Node::ensure_grad() {
  if (!grad.same_shape(value)) grad = Matrix::zeros(value.rows(), value.cols());
  return grad;
}

// ---- Tensor ----------------------------------------------------------------

Tensor::Tensor(Matrix value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Matrix Tensor::grad() const {
  if (node_->grad.same_shape(node_->value)) return node_->grad;
  return Matrix::zeros(rows(), cols());
}

void Tensor::zero_grad() {
  if (!node_->grad.empty()) node_->grad.eigen().setZero();
}

Real Tensor::item() const {
  if (rows() != 1 || cols() != 1) throw ShapeError("item() on " + shape_str(value()));
  return node_->value(0, 0);
}

namespace {
thread_local bool g_grad_mode = true;

void accumulate(const std::shared_ptr<Node>& n, const Matrix::Storage& g) {
  if (!n->requires_grad) return;
  n->ensure_grad().eigen() += g;
}

template <typename Expr>
void accumulate_expr(const std::shared_ptr<Node>& n, const Expr& g) {
  if (!n->requires_grad) return;
  n->ensure_grad().eigen() += g;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.value().same_shape(b.value())) {
    throw ShapeError(std::string(op) + ": " + shape_str(a.value()) + " vs " + shape_str(b.value()));
  }
}

void require_scalar(const Tensor& s, const char* op) {
  if (s.rows() != 1 || s.cols() != 1) throw ShapeError(std::string(op) + ": expected 1x1, got " + shape_str(s.value()));
}
}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_mode) { g_grad_mode = false; }
NoGradGuard::~NoGradGuard() { g_grad_mode = previous_; }
bool grad_mode_enabled() { return g_grad_mode; }

Tensor make_op(Matrix value, std::string op, std::vector<Tensor> parents,
               std::function<void(const Matrix&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = std::move(op);
  const bool needs = g_grad_mode && std::any_of(parents.begin(), parents.end(),
                                                [](const Tensor& p) { return p.requires_grad(); });
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

// ---- linear algebra ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: " + shape_str(a.value()) + " x " + shape_str(b.value()));
  Matrix out(Matrix::Storage(a.value().eigen() * b.value().eigen()));
  auto an = a.node(), bn = b.node();
  return make_op(std::move(out), "matmul", {a, b}, [an, bn](const Matrix& g) {
    if (an->requires_grad) accumulate_expr(an, g.eigen() * bn->value.eigen().transpose());
    if (bn->requires_grad) accumulate_expr(bn, an->value.eigen().transpose() * g.eigen());
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) throw ShapeError("matmul_nt: " + shape_str(a.value()) + " x " + shape_str(b.value()) + "^T");
  Matrix out(Matrix::Storage(a.value().eigen() * b.value().eigen().transpose()));
  auto an = a.node(), bn = b.node();
  return make_op(std::move(out), "matmul_nt", {a, b}, [an, bn](const Matrix& g) {
    if (an->requires_grad) accumulate_expr(an, g.eigen() * bn->value.eigen());
    if (bn->requires_grad) accumulate_expr(bn, g.eigen().transpose() * an->value.eigen());
  });
}

Tensor transpose(const Tensor& a) {
  Matrix out(Matrix::Storage(a.value().eigen().transpose()));
  auto an = a.node();
  return make_op(std::move(out), "transpose", {a}, [an](const Matrix& g) {
    accumulate_expr(an, g.eigen().transpose());
  });
}

// ---- elementwise -------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Matrix out(Matrix::Storage(a.value().eigen() + b.value().eigen()));
  auto an = a.node(), bn = b.node();
  return make_op(std::move(out), "add", {a, b}, [an, bn](const Matrix& g) {
    accumulate(an, g.eigen());
    accumulate(bn, g.eigen());
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Matrix out(Matrix::Storage(a.value().eigen() - b.value().eigen()));
  auto an = a.node(), bn = b.node();
  return make_op(std::move(out), "sub", {a, b}, [an, bn](const Matrix& g) {
    accumulate(an, g.eigen());
    accumulate_expr(bn, -g.eigen());
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Matrix out(Matrix::Storage(a.value().eigen().cwiseProduct(b.value().eigen())));
  auto an = a.node(), bn = b.node();
  return make_op(std::move(out), "mul", {a, b}, [an, bn](const Matrix& g) {
    accumulate_expr(an, g.eigen().cwiseProduct(bn->value.eigen()));
    accumulate_expr(bn, g.eigen().cwiseProduct(an->value.eigen()));
  });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw ShapeError("add_row: " + shape_str(a.value()) + " + " + shape_str(row.value()));
  }
  Matrix out(Matrix::Storage(a.value().eigen().rowwise() + row.value().eigen().row(0)));
  auto an = a.node(), rn = row.node();
  return make_op(std::move(out), "add_row", {a, row}, [an, rn](const Matrix& g) {
    accumulate(an, g.eigen());
    accumulate_expr(rn, g.eigen().colwise().sum());
  });
}

Tensor scale(const Tensor& a, Real s) {
  Matrix out(Matrix::Storage(a.value().eigen() * s));
  auto an = a.node();
  return make_op(std::move(out), "scale", {a}, [an, s](const Matrix& g) {
    accumulate_expr(an, g.eigen() * s);
  });
}

Tensor scale_by(const Tensor& a, const Tensor& s) {
  require_scalar(s, "scale_by");
  const Real sv = s.value()(0, 0);
  Matrix out(Matrix::Storage(a.value().eigen() * sv));
  auto an = a.node(), sn = s.node();
  return make_op(std::move(out), "scale_by", {a, s}, [an, sn](const Matrix& g) {
    const Real sv = sn->value(0, 0);
    accumulate_expr(an, g.eigen() * sv);
    if (sn->requires_grad) sn->ensure_grad()(0, 0) += g.eigen().cwiseProduct(an->value.eigen()).sum();
  });
}

Tensor div_by(const Tensor& a, const Tensor& s) {
  require_scalar(s, "div_by");
  const Real sv = s.value()(0, 0);
  if (sv == 0.0) throw ValidationError("div_by: division by zero");
  Matrix out(Matrix::Storage(a.value().eigen() / sv));
  auto an = a.node(), sn = s.node();
  return make_op(std::move(out), "div_by", {a, s}, [an, sn](const Matrix& g) {
    const Real sv = sn->value(0, 0);
    accumulate_expr(an, g.eigen() / sv);
    if (sn->requires_grad) {
      sn->ensure_grad()(0, 0) -= g.eigen().cwiseProduct(an->value.eigen()).sum() / (sv * sv);
    }
  });
}

namespace {
constexpr Real kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr Real kGeluA = 0.044715;
}  // namespace

Tensor gelu(const Tensor& a) {
  const auto& x = a.value().eigen();
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const Real v = x.data()[i];
    out.eigen().data()[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  }
  auto an = a.node();
  return make_op(std::move(out), "gelu", {a}, [an](const Matrix& g) {
    if (!an->requires_grad) return;
    auto& dst = an->ensure_grad().eigen();
    const auto& x = an->value.eigen();
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const Real v = x.data()[i];
      const Real u = kGeluC * (v + kGeluA * v * v * v);
      const Real t = std::tanh(u);
      const Real du = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      const Real d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
      dst.data()[i] += g.eigen().data()[i] * d;
    }
  });
}

Tensor relu(const Tensor& a) {
  Matrix out(Matrix::Storage(a.value().eigen().cwiseMax(0.0)));
  auto an = a.node();
  return make_op(std::move(out), "relu", {a}, [an](const Matrix& g) {
    accumulate_expr(an, g.eigen().cwiseProduct(
                            (an->value.eigen().array() > 0.0).cast<Real>().matrix()));
  });
}

Tensor sigmoid(const Tensor& a) {
  Matrix out(Matrix::Storage((1.0 / (1.0 + (-a.value().eigen().array()).exp())).matrix()));
  auto an = a.node();
  Matrix y = out;
  return make_op(std::move(out), "sigmoid", {a}, [an, y = std::move(y)](const Matrix& g) {
    accumulate_expr(an, (g.eigen().array() * y.eigen().array() * (1.0 - y.eigen().array())).matrix());
  });
}

Tensor tanh(const Tensor& a) {
  Matrix out(Matrix::Storage(a.value().eigen().array().tanh().matrix()));
  auto an = a.node();
  Matrix y = out;
  return make_op(std::move(out), "tanh", {a}, [an, y = std::move(y)](const Matrix& g) {
    accumulate_expr(an, (g.eigen().array() * (1.0 - y.eigen().array().square())).matrix());
  });
}

// ---- normalisation -------------------------------------------------------------

Tensor softmax_rows(const Tensor& x) {
  Matrix out(x.rows(), x.cols());
  const auto& in = x.value().eigen();
  for (Eigen::Index r = 0; r < in.rows(); ++r) {
    const Real m = in.row(r).maxCoeff();
    Real total = 0.0;
    for (Eigen::Index c = 0; c < in.cols(); ++c) {
      // exp underflows to exactly 0 below -745.2; skipping it avoids libm's slow path on masked scores.
      const Real v = in(r, c) - m;
      const Real e = v < -746.0 ? 0.0 : std::exp(v);
      out.eigen()(r, c) = e;
      total += e;
    }
    out.eigen().row(r) /= total;
  }
  auto xn = x.node();
  Matrix y = out;
  return make_op(std::move(out), "softmax_rows", {x}, [xn, y = std::move(y)](const Matrix& g) {
    if (!xn->requires_grad) return;
    const auto& yy = y.eigen();
    Eigen::VectorXd dot = (g.eigen().cwiseProduct(yy)).rowwise().sum();
    Matrix::Storage dx = yy.cwiseProduct(g.eigen().colwise() - dot);
    accumulate(xn, dx);
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Real eps) {
  const std::size_t n = x.cols();
  if (gain.rows() != 1 || gain.cols() != n || bias.rows() != 1 || bias.cols() != n) {
    throw ShapeError("layer_norm: x " + shape_str(x.value()) + ", gain " + shape_str(gain.value()) +
                     ", bias " + shape_str(bias.value()));
  }
  const auto& in = x.value().eigen();
  Matrix xhat(x.rows(), n);
  Eigen::VectorXd inv_std(in.rows());
  for (Eigen::Index r = 0; r < in.rows(); ++r) {
    const Real mu = in.row(r).mean();
    const Real var = (in.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.eigen().row(r) = (in.row(r).array() - mu) * inv_std(r);
  }
  Matrix out(Matrix::Storage(
      (xhat.eigen().array().rowwise() * gain.value().eigen().row(0).array()).rowwise() +
      bias.value().eigen().row(0).array()));
  auto xn = x.node(), gn = gain.node(), bn = bias.node();
  return make_op(std::move(out), "layer_norm", {x, gain, bias},
                 [xn, gn, bn, xhat = std::move(xhat), inv_std](const Matrix& g) {
                   const auto& gg = g.eigen();
                   const auto& xh = xhat.eigen();
                   if (gn->requires_grad) accumulate_expr(gn, gg.cwiseProduct(xh).colwise().sum());
                   if (bn->requires_grad) accumulate_expr(bn, gg.colwise().sum());
                   if (!xn->requires_grad) return;
                   const Real n = static_cast<Real>(xh.cols());
                   Matrix::Storage dxhat = gg.array().rowwise() * gn->value.eigen().row(0).array();
                   Matrix::Storage dx(xh.rows(), xh.cols());
                   for (Eigen::Index r = 0; r < xh.rows(); ++r) {
                     const Real s1 = dxhat.row(r).sum();
                     const Real s2 = dxhat.row(r).dot(xh.row(r));
                     dx.row(r) = (inv_std(r) / n) *
                                 (n * dxhat.row(r).array() - s1 - xh.row(r).array() * s2).matrix();
                   }
                   accumulate(xn, dx);
                 });
}

Tensor l2_normalize_rows(const Tensor& x) {
  const auto& in = x.value().eigen();
  Eigen::VectorXd norms = in.rowwise().norm();
  for (Eigen::Index r = 0; r < norms.size(); ++r) {
    if (!(norms(r) > 0.0)) throw ValidationError("l2_normalize_rows: zero-norm row");
  }
  Matrix out(Matrix::Storage(in.array().colwise() / norms.array()));
  auto xn = x.node();
  Matrix y = out;
  return make_op(std::move(out), "l2_normalize_rows", {x}, [xn, y = std::move(y), norms](const Matrix& g) {
    if (!xn->requires_grad) return;
    const auto& yy = y.eigen();
    Eigen::VectorXd dot = g.eigen().cwiseProduct(yy).rowwise().sum();
    Matrix::Storage dx = ((g.eigen() - (yy.array().colwise() * dot.array()).matrix()).array().colwise() /
                          norms.array())
                             .matrix();
    accumulate(xn, dx);
  });
}

// ---- reductions ------------------------------------------------------------------

Tensor sum(const Tensor& a) {
  Matrix out(1, 1, a.value().eigen().sum());
  auto an = a.node();
  return make_op(std::move(out), "sum", {a}, [an](const Matrix& g) {
    if (an->requires_grad) an->ensure_grad().eigen().array() += g(0, 0);
  });
}

Tensor mean(const Tensor& a) {
  if (a.value().empty()) throw ValidationError("mean of empty tensor");
  const Real n = static_cast<Real>(a.value().size());
  Matrix out(1, 1, a.value().eigen().sum() / n);
  auto an = a.node();
  return make_op(std::move(out), "mean", {a}, [an, n](const Matrix& g) {
    if (an->requires_grad) an->ensure_grad().eigen().array() += g(0, 0) / n;
  });
}

Tensor mean_rows(const Tensor& a) {
  if (a.rows() == 0) throw ValidationError("mean_rows of empty tensor");
  const Real n = static_cast<Real>(a.rows());
  Matrix out(Matrix::Storage(a.value().eigen().colwise().mean()));
  auto an = a.node();
  return make_op(std::move(out), "mean_rows", {a}, [an, n](const Matrix& g) {
    if (an->requires_grad) an->ensure_grad().eigen().rowwise() += g.eigen().row(0) / n;
  });
}

Tensor max_all(const Tensor& a) {
  if (a.value().empty()) throw ValidationError("max_all of empty tensor");
  Eigen::Index r = 0, c = 0;
  const Real m = a.value().eigen().maxCoeff(&r, &c);
  Matrix out(1, 1, m);
  auto an = a.node();
  return make_op(std::move(out), "max_all", {a}, [an, r, c](const Matrix& g) {
    if (an->requires_grad) an->ensure_grad()(r, c) += g(0, 0);
  });
}

// ---- structural -------------------------------------------------------------------

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ValidationError("concat_rows: no parts");
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat_rows: column mismatch " + shape_str(p.value()));
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::vector<std::shared_ptr<Node>> nodes;
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    if (p.rows() > 0) out.eigen().middleRows(off, p.rows()) = p.value().eigen();
    nodes.push_back(p.node());
    offsets.push_back(off);
    off += p.rows();
  }
  return make_op(std::move(out), "concat_rows", parts, [nodes, offsets](const Matrix& g) {
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      const auto rows = nodes[i]->value.rows();
      if (rows > 0) accumulate_expr(nodes[i], g.eigen().middleRows(offsets[i], rows));
    }
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ValidationError("concat_cols: no parts");
  const std::size_t rows = parts.front().rows();
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row mismatch " + shape_str(p.value()));
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<std::shared_ptr<Node>> nodes;
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    if (p.cols() > 0) out.eigen().middleCols(off, p.cols()) = p.value().eigen();
    nodes.push_back(p.node());
    offsets.push_back(off);
    off += p.cols();
  }
  return make_op(std::move(out), "concat_cols", parts, [nodes, offsets](const Matrix& g) {
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      const auto cols = nodes[i]->value.cols();
      if (cols > 0) accumulate_expr(nodes[i], g.eigen().middleCols(offsets[i], cols));
    }
  });
}

Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count) {
  if (start + count > a.rows()) throw ShapeError("slice_rows out of range on " + shape_str(a.value()));
  Matrix out(Matrix::Storage(a.value().eigen().middleRows(start, count)));
  auto an = a.node();
  return make_op(std::move(out), "slice_rows", {a}, [an, start, count](const Matrix& g) {
    if (an->requires_grad) an->ensure_grad().eigen().middleRows(start, count) += g.eigen();
  });
}

Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count) {
  if (start + count > a.cols()) throw ShapeError("slice_cols out of range on " + shape_str(a.value()));
  Matrix out(Matrix::Storage(a.value().eigen().middleCols(start, count)));
  auto an = a.node();
  return make_op(std::move(out), "slice_cols", {a}, [an, start, count](const Matrix& g) {
    if (an->requires_grad) an->ensure_grad().eigen().middleCols(start, count) += g.eigen();
  });
}

Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
  const auto vocab = static_cast<int>(table.rows());
  Matrix out(ids.size(), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= vocab) throw ValidationError("gather_rows: id " + std::to_string(ids[i]) + " out of range");
    out.eigen().row(i) = table.value().eigen().row(ids[i]);
  }
  auto tn = table.node();
  std::vector<int> idv(ids.begin(), ids.end());
  return make_op(std::move(out), "gather_rows", {table}, [tn, idv = std::move(idv)](const Matrix& g) {
    if (!tn->requires_grad) return;
    auto& dst = tn->ensure_grad().eigen();
    for (std::size_t i = 0; i < idv.size(); ++i) dst.row(idv[i]) += g.eigen().row(i);
  });
}

// ---- losses -------------------------------------------------------------------------

namespace {
void check_targets(const Matrix& logits, std::span<const int> targets, std::optional<int> ignore) {
  if (targets.size() != logits.rows()) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + shape_str(logits));
  }
  const int v = static_cast<int>(logits.cols());
  for (int t : targets) {
    if (ignore && t == *ignore) continue;
    if (t < 0 || t >= v) throw ValidationError("cross_entropy: target " + std::to_string(t) + " outside [0," + std::to_string(v) + ")");
  }
}

Matrix::Storage log_softmax(const Matrix::Storage& x) {
  Matrix::Storage out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Real m = x.row(r).maxCoeff();
    const Real lse = m + std::log((x.row(r).array() - m).exp().sum());
    out.row(r) = x.row(r).array() - lse;
  }
  return out;
}
}  // namespace

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, std::optional<int> ignore_index) {
  check_targets(logits.value(), targets, ignore_index);
  std::vector<int> tv(targets.begin(), targets.end());
  std::size_t count = 0;
  for (int t : tv) count += (ignore_index && t == *ignore_index) ? 0 : 1;
  if (count == 0) throw ValidationError("cross_entropy: every position ignored");
  Matrix::Storage lsm = log_softmax(logits.value().eigen());
  Real total = 0.0;
  for (std::size_t i = 0; i < tv.size(); ++i) {
    if (ignore_index && tv[i] == *ignore_index) continue;
    total -= lsm(static_cast<Eigen::Index>(i), tv[i]);
  }
  const Real n = static_cast<Real>(count);
  Matrix out(1, 1, total / n);
  auto ln = logits.node();
  return make_op(std::move(out), "cross_entropy", {logits},
                 [ln, tv = std::move(tv), ignore_index, n, lsm = std::move(lsm)](const Matrix& g) {
                   if (!ln->requires_grad) return;
                   auto& dst = ln->ensure_grad().eigen();
                   const Real w = g(0, 0) / n;
                   for (std::size_t i = 0; i < tv.size(); ++i) {
                     if (ignore_index && tv[i] == *ignore_index) continue;
                     const auto r = static_cast<Eigen::Index>(i);
                     dst.row(r) += w * lsm.row(r).array().exp().matrix();
                     dst(r, tv[i]) -= w;
                   }
                 });
}

std::vector<Real> token_nll(const Matrix& logits, std::span<const int> targets, std::optional<int> ignore_index) {
  check_targets(logits, targets, ignore_index);
  Matrix::Storage lsm = log_softmax(logits.eigen());
  std::vector<Real> out(targets.size(), std::numeric_limits<Real>::quiet_NaN());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (ignore_index && targets[i] == *ignore_index) continue;
    out[i] = -lsm(static_cast<Eigen::Index>(i), targets[i]);
  }
  return out;
}

Tensor bce_with_logits(const Tensor& logit, bool label) {
  require_scalar(logit, "bce_with_logits");
  const Real z = logit.value()(0, 0);
  const Real y = label ? 1.0 : 0.0;
  // max(z,0) - z*y + log(1 + exp(-|z|))
  const Real loss = std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
  auto zn = logit.node();
  return make_op(Matrix(1, 1, loss), "bce_with_logits", {logit}, [zn, y](const Matrix& g) {
    if (!zn->requires_grad) return;
    const Real z = zn->value(0, 0);
    const Real p = 1.0 / (1.0 + std::exp(-z));
    zn->ensure_grad()(0, 0) += g(0, 0) * (p - y);
  });
}

// ---- backward ------------------------------------------------------------------------

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.rows() != 1 || loss.cols() != 1) {
    throw ContractError("backward: loss must be a 1x1 scalar, got " +
                        (loss.defined() ? shape_str(loss.value()) : std::string("undefined")));
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order (parents before children).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (!n->is_leaf()) n->ensure_grad().eigen().setZero();
  }
  loss.node()->ensure_grad()(0, 0) += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) n->backward_fn(n->grad);
  }
}

// ---- ParamStore --------------------------------------------------------------------------

std::size_t ParamStore::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].name == name) return i;
  }
  return entries_.size();
}

Tensor ParamStore::create(const std::string& name, Matrix init, bool trainable) {
  Tensor t = Tensor::param(std::move(init));
  insert(name, t, trainable);
  return t;
}

void ParamStore::insert(const std::string& name, Tensor tensor, bool trainable) {
  if (contains(name)) throw ConfigError("duplicate parameter name: " + name);
  tensor.set_requires_grad(trainable);
  entries_.push_back({name, std::move(tensor), trainable});
}

bool ParamStore::contains(const std::string& name) const { return index_of(name) < entries_.size(); }

Tensor& ParamStore::at(const std::string& name) {
  const auto i = index_of(name);
  if (i == entries_.size()) throw ConfigError("unknown parameter: " + name);
  return entries_[i].tensor;
}

const Tensor& ParamStore::at(const std::string& name) const {
  const auto i = index_of(name);
  if (i == entries_.size()) throw ConfigError("unknown parameter: " + name);
  return entries_[i].tensor;
}

bool ParamStore::trainable(const std::string& name) const {
  const auto i = index_of(name);
  if (i == entries_.size()) throw ConfigError("unknown parameter: " + name);
  return entries_[i].trainable;
}

void ParamStore::set_trainable(const std::string& name, bool flag) {
  const auto i = index_of(name);
  if (i == entries_.size()) throw ConfigError("unknown parameter: " + name);
  entries_[i].trainable = flag;
  entries_[i].tensor.set_requires_grad(flag);
}

void ParamStore::set_trainable_if(const std::function<bool(const std::string&)>& pred) {
  for (auto& e : entries_) {
    e.trainable = pred(e.name);
    e.tensor.set_requires_grad(e.trainable);
  }
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.name);
  return out;
}

std::size_t ParamStore::parameter_count(bool trainable_only) const {
  std::size_t n = 0;
  for (const auto& e : entries_) {
    if (!trainable_only || e.trainable) n += e.tensor.value().size();
  }
  return n;
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

std::vector<std::pair<std::string, Matrix>> ParamStore::snapshot() const {
  std::vector<std::pair<std::string, Matrix>> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.emplace_back(e.name, e.tensor.value());
  return out;
}

GradientMap backward(const Tensor& loss, const ParamStore& store) {
  backward(loss);
  GradientMap out;
  for (const auto& e : store.entries()) {
    if (e.trainable) out.emplace_back(e.name, e.tensor.grad());
  }
  return out;
}

}  // namespace gama
