#pragma once

// Small causal transformer standing in for the 7B language decoder. Base
// weights are frozen in every fine-tuning stage; LoRA adapters sit on the
// query and value projections of each layer.

#include "gama/nn.hpp"
#include "gama/tokenizer.hpp"

#include <span>
#include <vector>

namespace gama {

struct DecoderConfig {
  std::size_t dim = 64;
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t ffn_mult = 4;
  std::size_t vocab = tok::kVocabSize;
  std::size_t max_len = 1024;
  bool lora = true;
  std::size_t lora_rank = 8;
  Real lora_alpha = 16.0;
};

class Decoder {
 public:
  struct Block {
    LayerNorm ln1;
    MultiHeadAttention attn;
    LayerNorm ln2;
    FeedForward ffn;
  };

  static Decoder create(ParamStore& store, const std::string& prefix, const DecoderConfig& cfg, Rng& rng);

  Tensor embed(std::span<const int> ids) const;
  // Causal stack over input embeddings (T × dim); returns final-normed hidden states.
  Tensor hidden(const Tensor& inputs) const;
  Tensor head(const Tensor& hidden) const;  // rows × vocab
  Tensor logits(const Tensor& inputs) const { return head(hidden(inputs)); }

  void set_lora_enabled(bool enabled);
  bool lora_enabled() const noexcept { return lora_enabled_; }
  std::vector<const LoraAdapter*> adapters() const;
  std::vector<Block>& blocks() noexcept { return blocks_; }

  const DecoderConfig& config() const noexcept { return cfg_; }
  const Tensor& token_embedding() const noexcept { return tok_embed_; }

 private:
  DecoderConfig cfg_;
  Tensor tok_embed_;
  Tensor pos_embed_;
  std::vector<Block> blocks_;
  LayerNorm ln_final_;
  Linear lm_head_;
  bool lora_enabled_ = true;
};

}  // namespace gama
