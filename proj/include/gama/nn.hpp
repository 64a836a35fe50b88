#pragma once

// Transformer building blocks shared by the encoder, aggregator, Q-Former and
// decoder. Every block registers its parameters in a ParamStore under a dotted
// prefix and keeps Tensor handles onto them.

#include "gama/lora.hpp"
#include "gama/tensor.hpp"

#include <optional>
#include <random>
#include <string>

namespace gama {

using Rng = std::mt19937_64;

Matrix random_normal(std::size_t rows, std::size_t cols, Real stddev, Rng& rng);

struct Linear {
  Tensor weight;  // out × in
  Tensor bias;    // 1 × out

  static Linear create(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng);
  Tensor operator()(const Tensor& x) const;
  std::size_t in_dim() const { return weight.cols(); }
  std::size_t out_dim() const { return weight.rows(); }
};

struct LayerNorm {
  Tensor gain;
  Tensor bias;
  Real eps = 1e-5;

  static LayerNorm create(ParamStore& store, const std::string& prefix, std::size_t dim);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias, eps); }
};

struct FeedForward {
  Linear fc1;
  Linear fc2;

  static FeedForward create(ParamStore& store, const std::string& prefix, std::size_t dim, std::size_t hidden,
                            Rng& rng);
  Tensor operator()(const Tensor& x) const { return fc2(gelu(fc1(x))); }
};

// Additive attention mask: 0 where attention is allowed, kMaskedScore elsewhere.
inline constexpr Real kMaskedScore = -1e9;
Matrix causal_mask(std::size_t n);

struct MultiHeadAttention {
  Linear q, k, v, o;
  std::size_t heads = 1;
  // Optional adapters on the query and value projections (decoder only).
  std::optional<LoraAdapter> q_lora;
  std::optional<LoraAdapter> v_lora;
  bool lora_enabled = true;

  // kv_dim may differ from dim (cross-attention into another stream).
  static MultiHeadAttention create(ParamStore& store, const std::string& prefix, std::size_t dim,
                                   std::size_t kv_dim, std::size_t heads, Rng& rng);

  // Per-head softmax(QKᵀ/√d_h + mask)·V, concatenated, before the output projection.
  Tensor context(const Tensor& query_in, const Tensor& kv_in, const Matrix* mask = nullptr) const;
  Tensor operator()(const Tensor& query_in, const Tensor& kv_in, const Matrix* mask = nullptr) const {
    return o(context(query_in, kv_in, mask));
  }
};

}  // namespace gama
