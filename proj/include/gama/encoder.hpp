#pragma once

// Patch-token transformer encoder standing in for AST. Exposes every layer's
// hidden states for the aggregator and a mean-pooled event-tag head used only
// to fill the soft-prompt tag list.

#include "gama/audio.hpp"
#include "gama/nn.hpp"

#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace gama {

struct EncoderConfig {
  std::size_t depth = 12;
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t ffn_mult = 4;
  std::size_t patch_dim = 256;  // patch_h · patch_w
  std::size_t max_tokens = 512;
  std::vector<std::string> tag_vocab;
  // Middle layers handed to the aggregator (1-based).
  std::size_t mid_j = 4;
  std::size_t mid_k = 8;
  bool aggregation = true;

  void validate() const;
};

// per_layer[l - 1] holds layer l's output, l = 1..depth.
struct LayerFeatureBundle {
  std::vector<Tensor> per_layer;
  std::size_t last_index = 0;
  std::size_t j = 0;
  std::size_t k = 0;

  // Throws ValidationError when the layer is not populated.
  const Tensor& layer(std::size_t one_based) const;
  const Tensor& last() const { return layer(last_index); }
};

struct EventTag {
  std::string label;
  Real score = 0.0;
  std::optional<std::pair<Real, Real>> span;  // seconds
};

// Sigmoid scores ≥ threshold, highest first, at most top_k. Ties keep the
// lower vocabulary index first. logits is 1 × |vocab|.
std::vector<EventTag> select_tags(const Matrix& logits, const std::vector<std::string>& vocab, std::size_t top_k,
                                  Real threshold);

class AstEncoder {
 public:
  struct Block {
    LayerNorm ln1;
    MultiHeadAttention attn;
    LayerNorm ln2;
    FeedForward ffn;
  };

  static AstEncoder create(ParamStore& store, const std::string& prefix, const EncoderConfig& cfg, Rng& rng);

  // Patch embedding + learned positions, then `depth` pre-norm blocks.
  LayerFeatureBundle encode(const Tensor& patches) const;
  LayerFeatureBundle encode(const PatchSequence& patches) const { return encode(Tensor::constant(patches.values)); }

  Tensor tag_logits(const Tensor& last) const;  // 1 × |vocab|
  std::vector<EventTag> classify_tags(const Tensor& last, std::size_t top_k = 5, Real threshold = 0.5) const;

  const EncoderConfig& config() const noexcept { return cfg_; }
  std::vector<Block>& blocks() noexcept { return blocks_; }
  const Linear& patch_embed() const noexcept { return patch_embed_; }

 private:
  EncoderConfig cfg_;
  Linear patch_embed_;
  Tensor pos_embed_;
  std::vector<Block> blocks_;
  std::optional<Linear> tag_head_;
};

}  // namespace gama
