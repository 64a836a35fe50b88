#pragma once

// Multi-layer aggregation: two blocks fuse middle encoder layers into the last
// one, Ā = B₂(B₁(A_i; A_j); A_k), with B(X; Y) = FFN(CrossAttn(Attn(X), Y)).

#include "gama/encoder.hpp"
#include "gama/nn.hpp"

#include <array>

namespace gama {

struct AggregatorBlock {
  LayerNorm ln_self;
  MultiHeadAttention self_attn;
  LayerNorm ln_query;
  LayerNorm ln_memory;
  MultiHeadAttention cross_attn;  // queries from the X branch, keys/values from Y
  LayerNorm ln_ffn;
  FeedForward ffn;

  static AggregatorBlock create(ParamStore& store, const std::string& prefix, std::size_t dim, std::size_t heads,
                                std::size_t ffn_mult, Rng& rng);

  // Pre-norm residual form:
  //   h1 = x + SelfAttn(LN(x))
  //   h2 = h1 + CrossAttn(LN(h1), LN(y))
  //   out = h2 + FFN(LN(h2))
  Tensor operator()(const Tensor& x, const Tensor& y) const;
};

class Aggregator {
 public:
  static Aggregator create(ParamStore& store, const std::string& prefix, std::size_t dim, std::size_t heads,
                           std::size_t ffn_mult, Rng& rng);

  // Fuses A_j first, then A_k. Output has A_i's shape.
  Tensor aggregate(const LayerFeatureBundle& bundle) const;
  Tensor aggregate(const Tensor& last, const Tensor& mid_j, const Tensor& mid_k) const;

  std::array<AggregatorBlock, 2>& blocks() noexcept { return blocks_; }
  const std::array<AggregatorBlock, 2>& blocks() const noexcept { return blocks_; }

 private:
  std::array<AggregatorBlock, 2> blocks_;
};

}  // namespace gama
