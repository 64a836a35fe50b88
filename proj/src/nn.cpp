#include "gama/nn.hpp"

#include "gama/errors.hpp"

#include <cmath>

namespace gama {

Matrix random_normal(std::size_t rows, std::size_t cols, Real stddev, Rng& rng) {
  Matrix m(rows, cols);
  std::normal_distribution<Real> dist(0.0, stddev);
  for (auto& v : m.data()) v = dist(rng);
  return m;
}

Linear Linear::create(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng) {
  Linear l;
  l.weight = store.create(prefix + ".weight", random_normal(out, in, 1.0 / std::sqrt(static_cast<Real>(in)), rng));
  l.bias = store.create(prefix + ".bias", Matrix::zeros(1, out));
  return l;
}

Tensor Linear::operator()(const Tensor& x) const {
  if (x.cols() != in_dim()) {
    throw ShapeError("linear: input " + shape_str(x.value()) + " for weight " + shape_str(weight.value()));
  }
  return add_row(matmul_nt(x, weight), bias);
}

LayerNorm LayerNorm::create(ParamStore& store, const std::string& prefix, std::size_t dim) {
  LayerNorm n;
  n.gain = store.create(prefix + ".gain", Matrix::ones(1, dim));
  n.bias = store.create(prefix + ".bias", Matrix::zeros(1, dim));
  return n;
}

FeedForward FeedForward::create(ParamStore& store, const std::string& prefix, std::size_t dim, std::size_t hidden,
                                Rng& rng) {
  return {Linear::create(store, prefix + ".fc1", dim, hidden, rng),
          Linear::create(store, prefix + ".fc2", hidden, dim, rng)};
}

Matrix causal_mask(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) m(i, j) = kMaskedScore;
  }
  return m;
}

MultiHeadAttention MultiHeadAttention::create(ParamStore& store, const std::string& prefix, std::size_t dim,
                                              std::size_t kv_dim, std::size_t heads, Rng& rng) {
  if (heads == 0 || dim % heads != 0) {
    throw ConfigError("attention: dim " + std::to_string(dim) + " not divisible by heads " + std::to_string(heads));
  }
  MultiHeadAttention a;
  a.q = Linear::create(store, prefix + ".q", dim, dim, rng);
  a.k = Linear::create(store, prefix + ".k", kv_dim, dim, rng);
  a.v = Linear::create(store, prefix + ".v", kv_dim, dim, rng);
  a.o = Linear::create(store, prefix + ".o", dim, dim, rng);
  a.heads = heads;
  return a;
}

namespace {
Tensor project(const Linear& lin, const std::optional<LoraAdapter>& adapter, bool enabled, const Tensor& x) {
  if (!adapter || !enabled) return lin(x);
  if (x.cols() != lin.in_dim()) {
    throw ShapeError("linear: input " + shape_str(x.value()) + " for weight " + shape_str(lin.weight.value()));
  }
  return add_row(lora_forward(x, lin.weight, *adapter), lin.bias);
}
}  // namespace

Tensor MultiHeadAttention::context(const Tensor& query_in, const Tensor& kv_in, const Matrix* mask) const {
  if (mask && (mask->rows() != query_in.rows() || mask->cols() != kv_in.rows())) {
    throw ShapeError("attention mask " + shape_str(*mask) + " for " + std::to_string(query_in.rows()) + " queries and " +
                     std::to_string(kv_in.rows()) + " keys");
  }
  const Tensor qp = project(q, q_lora, lora_enabled, query_in);
  const Tensor kp = k(kv_in);
  const Tensor vp = project(v, v_lora, lora_enabled, kv_in);
  const std::size_t dim = qp.cols();
  const std::size_t dh = dim / heads;
  const Real inv_sqrt = 1.0 / std::sqrt(static_cast<Real>(dh));
  const Tensor mask_t = mask ? Tensor::constant(*mask) : Tensor();

  std::vector<Tensor> ctx;
  ctx.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor qh = heads == 1 ? qp : slice_cols(qp, h * dh, dh);
    Tensor kh = heads == 1 ? kp : slice_cols(kp, h * dh, dh);
    Tensor vh = heads == 1 ? vp : slice_cols(vp, h * dh, dh);
    Tensor scores = scale(matmul_nt(qh, kh), inv_sqrt);
    if (mask) scores = add(scores, mask_t);
    ctx.push_back(matmul(softmax_rows(scores), vh));
  }
  return heads == 1 ? ctx.front() : concat_cols(ctx);
}

}  // namespace gama
