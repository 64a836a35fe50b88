#include "gama/aggregator.hpp"

#include "gama/errors.hpp"

namespace gama {

AggregatorBlock AggregatorBlock::create(ParamStore& store, const std::string& prefix, std::size_t dim,
                                        std::size_t heads, std::size_t ffn_mult, Rng& rng) {
  return {LayerNorm::create(store, prefix + ".ln_self", dim),
          MultiHeadAttention::create(store, prefix + ".self_attn", dim, dim, heads, rng),
          LayerNorm::create(store, prefix + ".ln_query", dim),
          LayerNorm::create(store, prefix + ".ln_memory", dim),
          MultiHeadAttention::create(store, prefix + ".cross_attn", dim, dim, heads, rng),
          LayerNorm::create(store, prefix + ".ln_ffn", dim),
          FeedForward::create(store, prefix + ".ffn", dim, dim * ffn_mult, rng)};
}

Tensor AggregatorBlock::operator()(const Tensor& x, const Tensor& y) const {
  if (x.cols() != y.cols()) {
    throw ShapeError("aggregator block: x " + shape_str(x.value()) + " and y " + shape_str(y.value()) +
                     " differ in dim");
  }
  const Tensor xs = ln_self(x);
  const Tensor h1 = add(x, self_attn(xs, xs));
  const Tensor h2 = add(h1, cross_attn(ln_query(h1), ln_memory(y)));
  return add(h2, ffn(ln_ffn(h2)));
}

Aggregator Aggregator::create(ParamStore& store, const std::string& prefix, std::size_t dim, std::size_t heads,
                              std::size_t ffn_mult, Rng& rng) {
  Aggregator a;
  a.blocks_[0] = AggregatorBlock::create(store, prefix + ".block1", dim, heads, ffn_mult, rng);
  a.blocks_[1] = AggregatorBlock::create(store, prefix + ".block2", dim, heads, ffn_mult, rng);
  return a;
}

Tensor Aggregator::aggregate(const Tensor& last, const Tensor& mid_j, const Tensor& mid_k) const {
  return blocks_[1](blocks_[0](last, mid_j), mid_k);
}

Tensor Aggregator::aggregate(const LayerFeatureBundle& bundle) const {
  if (bundle.j == 0 || bundle.k == 0) throw ValidationError("aggregator: bundle has no middle-layer indices");
  return aggregate(bundle.last(), bundle.layer(bundle.j), bundle.layer(bundle.k));
}

}  // namespace gama
