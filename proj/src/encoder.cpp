#include "gama/encoder.hpp"

#include "gama/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace gama {

void EncoderConfig::validate() const {
  if (depth == 0 || dim == 0) throw ConfigError("encoder: depth and dim must be positive");
  if (heads == 0 || dim % heads != 0) {
    throw ConfigError("encoder: dim " + std::to_string(dim) + " not divisible by heads " + std::to_string(heads));
  }
  if (aggregation) {
    if (depth < mid_k + 1) {
      throw ConfigError("encoder: depth " + std::to_string(depth) + " too shallow for aggregation layer k=" +
                        std::to_string(mid_k));
    }
    if (mid_j < 1 || mid_j >= mid_k) throw ConfigError("encoder: aggregation layers need 1 <= j < k");
  }
}

const Tensor& LayerFeatureBundle::layer(std::size_t one_based) const {
  if (one_based == 0 || one_based > per_layer.size() || !per_layer[one_based - 1].defined()) {
    throw ValidationError("layer bundle: layer " + std::to_string(one_based) + " not populated");
  }
  return per_layer[one_based - 1];
}

std::vector<EventTag> select_tags(const Matrix& logits, const std::vector<std::string>& vocab, std::size_t top_k,
                                  Real threshold) {
  if (vocab.empty()) throw ConfigError("tag vocabulary is empty");
  if (logits.rows() != 1 || logits.cols() != vocab.size()) {
    throw ShapeError("select_tags: logits " + shape_str(logits) + " for vocab of " + std::to_string(vocab.size()));
  }
  std::vector<std::size_t> order(vocab.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<Real> scores(vocab.size());
  for (std::size_t i = 0; i < vocab.size(); ++i) scores[i] = 1.0 / (1.0 + std::exp(-logits(0, i)));
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<EventTag> out;
  for (std::size_t idx : order) {
    if (out.size() >= top_k || scores[idx] < threshold) break;
    out.push_back({vocab[idx], scores[idx], std::nullopt});
  }
  return out;
}

AstEncoder AstEncoder::create(ParamStore& store, const std::string& prefix, const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  AstEncoder e;
  e.cfg_ = cfg;
  e.patch_embed_ = Linear::create(store, prefix + ".patch_embed", cfg.patch_dim, cfg.dim, rng);
  e.pos_embed_ = store.create(prefix + ".pos_embed", random_normal(cfg.max_tokens, cfg.dim, 0.02, rng));
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    const std::string p = prefix + ".layers." + std::to_string(l);
    e.blocks_.push_back({LayerNorm::create(store, p + ".ln1", cfg.dim),
                         MultiHeadAttention::create(store, p + ".attn", cfg.dim, cfg.dim, cfg.heads, rng),
                         LayerNorm::create(store, p + ".ln2", cfg.dim),
                         FeedForward::create(store, p + ".ffn", cfg.dim, cfg.dim * cfg.ffn_mult, rng)});
  }
  if (!cfg.tag_vocab.empty()) {
    e.tag_head_ = Linear::create(store, prefix + ".tag_head", cfg.dim, cfg.tag_vocab.size(), rng);
  }
  return e;
}

LayerFeatureBundle AstEncoder::encode(const Tensor& patches) const {
  if (patches.rows() == 0) throw ValidationError("encoder: no patch tokens");
  if (patches.rows() > cfg_.max_tokens) {
    throw ValidationError("encoder: " + std::to_string(patches.rows()) + " tokens exceed max_tokens " +
                          std::to_string(cfg_.max_tokens));
  }
  Tensor x = add(patch_embed_(patches), slice_rows(pos_embed_, 0, patches.rows()));
  LayerFeatureBundle bundle;
  bundle.per_layer.reserve(cfg_.depth);
  for (const auto& b : blocks_) {
    Tensor h = b.ln1(x);
    x = add(x, b.attn(h, h));
    x = add(x, b.ffn(b.ln2(x)));
    bundle.per_layer.push_back(x);
  }
  bundle.last_index = cfg_.depth;
  if (cfg_.aggregation) {
    bundle.j = cfg_.mid_j;
    bundle.k = cfg_.mid_k;
  }
  return bundle;
}

Tensor AstEncoder::tag_logits(const Tensor& last) const {
  if (!tag_head_) throw ConfigError("tag vocabulary is empty");
  return (*tag_head_)(mean_rows(last));
}

std::vector<EventTag> AstEncoder::classify_tags(const Tensor& last, std::size_t top_k, Real threshold) const {
  if (!tag_head_) throw ConfigError("tag vocabulary is empty");
  NoGradGuard ng;
  return select_tags(tag_logits(last).value(), cfg_.tag_vocab, top_k, threshold);
}

}  // namespace gama
