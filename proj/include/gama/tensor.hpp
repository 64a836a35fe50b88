#pragma once

// Dense row-major matrices with a reverse-mode autodiff tape.
//
// A Tensor is a cheap handle onto a shared Node. Ops build a DAG of Nodes;
// backward() walks it in reverse topological order. Leaf nodes (parameters)
// accumulate gradients across calls, interior nodes are reset on every call.

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace gama {

using Real = double;

class Matrix {
 public:
  using Storage = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, Real fill = 0.0);
  Matrix(std::initializer_list<std::initializer_list<Real>> rows);
  explicit Matrix(Storage storage) : m_(std::move(storage)) {}

  static Matrix zeros(std::size_t rows, std::size_t cols) { return Matrix(rows, cols, 0.0); }
  static Matrix ones(std::size_t rows, std::size_t cols) { return Matrix(rows, cols, 1.0); }
  static Matrix identity(std::size_t n);
  static Matrix row(std::span<const Real> values);

  std::size_t rows() const noexcept { return static_cast<std::size_t>(m_.rows()); }
  std::size_t cols() const noexcept { return static_cast<std::size_t>(m_.cols()); }
  std::size_t size() const noexcept { return static_cast<std::size_t>(m_.size()); }
  bool empty() const noexcept { return m_.size() == 0; }

  Real& operator()(std::size_t r, std::size_t c) { return m_(r, c); }
  Real operator()(std::size_t r, std::size_t c) const { return m_(r, c); }

  std::span<Real> data() noexcept { return {m_.data(), size()}; }
  std::span<const Real> data() const noexcept { return {m_.data(), size()}; }
  std::span<const Real> row_span(std::size_t r) const noexcept {
    return {m_.data() + r * cols(), cols()};
  }

  Storage& eigen() noexcept { return m_; }
  const Storage& eigen() const noexcept { return m_; }

  bool same_shape(const Matrix& other) const noexcept {
    return rows() == other.rows() && cols() == other.cols();
  }
  bool all_finite() const noexcept { return m_.allFinite(); }
  Real max_abs_diff(const Matrix& other) const;

  bool operator==(const Matrix& other) const noexcept {
    return same_shape(other) && m_ == other.m_;
  }

 private:
  Storage m_;
};

std::string shape_str(const Matrix& m);

struct Node {
  Matrix value;
  Matrix grad;  // lazily allocated to value's shape
  bool requires_grad = false;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const Matrix& out_grad)> backward_fn;

  bool is_leaf() const noexcept { return parents.empty(); }
  Matrix& ensure_grad();
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Matrix value, bool requires_grad = false);

  static Tensor constant(Matrix value) { return Tensor(std::move(value), false); }
  static Tensor param(Matrix value) { return Tensor(std::move(value), true); }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  // Gradient after backward(); zeros when nothing reached this node.
  Matrix grad() const;
  void zero_grad();

  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }

  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }
  Real item() const;  // 1x1 only
  const std::string& op() const { return node_->op; }

  const std::shared_ptr<Node>& node() const noexcept { return node_; }

 private:
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  friend Tensor make_op(Matrix, std::string, std::vector<Tensor>,
                        std::function<void(const Matrix&)>);

  std::shared_ptr<Node> node_;
};

// Builds a result node. When grad mode is off or no parent requires grad the
// result is a plain constant and backward_fn is discarded.
Tensor make_op(Matrix value, std::string op, std::vector<Tensor> parents,
               std::function<void(const Matrix&)> backward_fn);

// Disables graph recording for the lifetime of the guard (thread local).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_mode_enabled();

// ---- ops -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);     // a·b
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a·bᵀ
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor add_row(const Tensor& a, const Tensor& row);  // broadcast 1×n over rows
Tensor scale(const Tensor& a, Real s);
Tensor scale_by(const Tensor& a, const Tensor& s);   // s is 1×1
Tensor div_by(const Tensor& a, const Tensor& s);     // s is 1×1, nonzero

Tensor gelu(const Tensor& a);  // tanh approximation
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);

Tensor softmax_rows(const Tensor& x);
// Rows of x are normalised then scaled by gain and shifted by bias (both 1×cols).
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Real eps = 1e-5);
Tensor l2_normalize_rows(const Tensor& x);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor mean_rows(const Tensor& a);  // column means, 1×cols
Tensor max_all(const Tensor& a);    // 1×1; gradient routed to the first maximum

Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count);
Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count);
Tensor gather_rows(const Tensor& table, std::span<const int> ids);

// Mean of −log softmax(logits[t])[targets[t]] over positions whose target is
// not ignore_index. Throws ValidationError for out-of-range targets or when
// every position is ignored.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     std::optional<int> ignore_index = std::nullopt);
// Per-position negative log-likelihoods (no graph); ignored positions are NaN.
std::vector<Real> token_nll(const Matrix& logits, std::span<const int> targets,
                            std::optional<int> ignore_index = std::nullopt);
// Binary cross-entropy of a 1×1 logit against a 0/1 label, numerically stable.
Tensor bce_with_logits(const Tensor& logit, bool label);

// ---- backward & parameters -------------------------------------------------

// Propagates d(loss)/d(node) into every reachable node that requires grad.
// Leaf gradients accumulate across calls; throws ContractError unless loss is 1×1.
void backward(const Tensor& loss);

class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor tensor;
    bool trainable = true;
  };

  Tensor create(const std::string& name, Matrix init, bool trainable = true);
  void insert(const std::string& name, Tensor tensor, bool trainable = true);

  bool contains(const std::string& name) const;
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool trainable(const std::string& name) const;
  void set_trainable(const std::string& name, bool flag);
  // Sets every parameter's flag from a predicate over its name.
  void set_trainable_if(const std::function<bool(const std::string&)>& pred);

  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::vector<std::string> names() const;
  std::size_t size() const noexcept { return entries_.size(); }
  std::size_t parameter_count(bool trainable_only = false) const;

  void zero_grad();
  std::vector<std::pair<std::string, Matrix>> snapshot() const;

 private:
  std::size_t index_of(const std::string& name) const;
  std::vector<Entry> entries_;
};

using GradientMap = std::vector<std::pair<std::string, Matrix>>;

// Runs backward on loss and returns the gradient of every trainable parameter
// in store order (zeros for parameters the loss never reached).
GradientMap backward(const Tensor& loss, const ParamStore& store);

}  // namespace gama
