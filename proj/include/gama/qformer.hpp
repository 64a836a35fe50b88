#pragma once

// Audio Q-Former: a fixed set of learnable query tokens that cross-attend to
// the encoder's last-layer features, plus a text side sharing the
// self-attention layers. Stage 1 trains it with contrastive, matching and
// grounded-generation objectives; stage 2 with a language-modelling loss
// through the decoder.

#include "gama/decoder.hpp"
#include "gama/nn.hpp"
#include "gama/tokenizer.hpp"

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace gama {

// Self-attention masking over the joint [queries; text] sequence.
enum class MaskMode {
  bidirectional,      // everything sees everything (matching)
  multimodal_causal,  // queries see queries; text sees queries and earlier text (generation)
  unimodal,           // queries and text never see each other (contrastive)
};

struct QFormerConfig {
  std::size_t num_queries = 32;
  std::size_t dim = 64;
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t ffn_mult = 4;
  std::size_t audio_dim = 64;
  std::size_t vocab = tok::kVocabSize;
  std::size_t max_text = 256;
  // Layers whose index is a multiple of this carry cross-attention to audio.
  std::size_t cross_attention_freq = 2;
  Real temperature = 0.07;

  void validate() const;
};

struct QFormerOutput {
  Tensor query_out;                // Q × dim
  std::optional<Tensor> text_out;  // L × dim when text was supplied
};

Matrix qformer_mask(std::size_t queries, std::size_t text, MaskMode mode);

class AudioQFormer {
 public:
  struct Layer {
    LayerNorm ln_self;
    MultiHeadAttention self_attn;
    std::optional<LayerNorm> ln_cross;
    std::optional<MultiHeadAttention> cross_attn;
    LayerNorm ln_ffn_query;
    FeedForward ffn_query;
    LayerNorm ln_ffn_text;
    FeedForward ffn_text;
  };

  static AudioQFormer create(ParamStore& store, const std::string& prefix, const QFormerConfig& cfg, Rng& rng);

  // text holds token ids (already framed with [CLS]/[DEC]). Throws
  // ContractError when text is absent for a mode that needs it.
  QFormerOutput forward(const Tensor& audio, std::optional<std::span<const int>> text, MaskMode mode) const;
  Tensor query_output(const Tensor& audio) const { return forward(audio, std::nullopt, MaskMode::unimodal).query_out; }

  // [CLS] row of the text-only pass (1 × dim), used by the contrastive loss.
  Tensor text_embedding(std::span<const int> caption) const;
  // Matching logit (1×1): bidirectional pass, mean-pooled query rows, linear head.
  Tensor atm_logit(const Tensor& audio, std::span<const int> caption) const;
  // Next-token logits for [DEC, c₁..c_L] → targets [c₁..c_L, EOS].
  Tensor agtg_logits(const Tensor& audio, std::span<const int> caption) const;

  bool has_cross_attention(std::size_t layer) const { return layers_.at(layer).cross_attn.has_value(); }
  std::vector<Layer>& layers() noexcept { return layers_; }
  const Tensor& queries() const noexcept { return queries_; }
  const Tensor& temperature() const noexcept { return temperature_; }
  const QFormerConfig& config() const noexcept { return cfg_; }

 private:
  Tensor embed_text(std::span<const int> ids) const;

  QFormerConfig cfg_;
  Tensor queries_;
  Tensor word_embed_;
  Tensor pos_embed_;
  LayerNorm ln_embed_;
  std::vector<Layer> layers_;
  LayerNorm ln_final_;
  Linear lm_head_;
  Linear itm_head_;
  Tensor temperature_;
};

// Framing helpers for the text side.
std::vector<int> cls_framed(std::span<const int> caption);
std::vector<int> dec_framed(std::span<const int> caption);

// Symmetric InfoNCE over the B×B matrix of s(a, t) = max_q cos(query_q, t) / τ.
// Throws ValidationError on zero-norm embeddings or mismatched batch sizes.
Tensor atc_loss(const std::vector<Tensor>& query_outs, const std::vector<Tensor>& text_embeddings,
                const Tensor& temperature);
// Same loss from a precomputed similarity matrix.
Tensor atc_loss_from_similarity(const Tensor& similarity, const Tensor& temperature);

Tensor atm_loss(const Tensor& logit, bool matched);

// Mean next-token cross-entropy over the caption (+EOS). Throws ValidationError
// on an empty caption.
Tensor agtg_loss(const AudioQFormer& qf, const Tensor& audio, std::span<const int> caption);
std::vector<Real> agtg_token_losses(const AudioQFormer& qf, const Tensor& audio, std::span<const int> caption);

struct QFormerPairSample {
  Tensor audio;              // encoder last-layer features
  std::vector<int> caption;  // byte tokens, unframed
};

struct Stage1Losses {
  Tensor atc, atm, agtg, total;
};

// All three stage-1 objectives on a batch. ATM negatives pair each audio with
// a random other caption from the batch (none when the batch has one item).
Stage1Losses qformer_stage1_loss(const AudioQFormer& qf, const std::vector<QFormerPairSample>& batch, Rng& rng);

// Query outputs projected into the decoder space become a prefix; loss is
// next-token cross-entropy on the caption positions only (L terms).
Tensor stage2_lm_loss(const AudioQFormer& qf, const Linear& to_decoder, const Decoder& decoder, const Tensor& audio,
                      std::span<const int> caption);

struct CaptionSet {
  std::string original;
  std::vector<std::string> rewrites;
  Real p_original = 0.4;
};

// Original with probability p_original, otherwise a uniformly chosen rewrite.
std::string sample_training_caption(const CaptionSet& set, Rng& rng);

}  // namespace gama
