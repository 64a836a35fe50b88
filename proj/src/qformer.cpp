#include "gama/qformer.hpp"

#include "gama/errors.hpp"

#include <cmath>

namespace gama {

void QFormerConfig::validate() const {
  if (num_queries == 0) throw ConfigError("q-former: needs at least one query token");
  if (dim == 0 || heads == 0 || dim % heads != 0) throw ConfigError("q-former: dim must be divisible by heads");
  if (depth == 0) throw ConfigError("q-former: depth must be positive");
  if (cross_attention_freq == 0) throw ConfigError("q-former: cross_attention_freq must be positive");
  if (!(temperature > 0.0)) throw ConfigError("q-former: temperature must be positive");
}

Matrix qformer_mask(std::size_t queries, std::size_t text, MaskMode mode) {
  const std::size_t n = queries + text;
  Matrix m(n, n);
  if (mode == MaskMode::bidirectional) return m;
  for (std::size_t i = 0; i < n; ++i) {
    const bool row_query = i < queries;
    for (std::size_t j = 0; j < n; ++j) {
      const bool col_query = j < queries;
      bool allowed = false;
      if (mode == MaskMode::unimodal) {
        allowed = row_query == col_query;
      } else if (row_query) {
        allowed = col_query;
      } else {
        allowed = col_query || j <= i;
      }
      if (!allowed) m(i, j) = kMaskedScore;
    }
  }
  return m;
}

AudioQFormer AudioQFormer::create(ParamStore& store, const std::string& prefix, const QFormerConfig& cfg, Rng& rng) {
  cfg.validate();
  AudioQFormer q;
  q.cfg_ = cfg;
  q.queries_ = store.create(prefix + ".queries", random_normal(cfg.num_queries, cfg.dim, 0.5, rng));
  q.word_embed_ = store.create(prefix + ".word_embed", random_normal(cfg.vocab, cfg.dim, 1.0, rng));
  q.pos_embed_ = store.create(prefix + ".pos_embed", random_normal(cfg.max_text, cfg.dim, 0.02, rng));
  q.ln_embed_ = LayerNorm::create(store, prefix + ".ln_embed", cfg.dim);
  const std::size_t hidden = cfg.dim * cfg.ffn_mult;
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    const std::string p = prefix + ".layers." + std::to_string(l);
    Layer layer{LayerNorm::create(store, p + ".ln_self", cfg.dim),
                MultiHeadAttention::create(store, p + ".self_attn", cfg.dim, cfg.dim, cfg.heads, rng),
                std::nullopt,
                std::nullopt,
                LayerNorm::create(store, p + ".ln_ffn_query", cfg.dim),
                FeedForward::create(store, p + ".ffn_query", cfg.dim, hidden, rng),
                LayerNorm::create(store, p + ".ln_ffn_text", cfg.dim),
                FeedForward::create(store, p + ".ffn_text", cfg.dim, hidden, rng)};
    if (l % cfg.cross_attention_freq == 0) {
      layer.ln_cross = LayerNorm::create(store, p + ".ln_cross", cfg.dim);
      layer.cross_attn = MultiHeadAttention::create(store, p + ".cross_attn", cfg.dim, cfg.audio_dim, cfg.heads, rng);
    }
    q.layers_.push_back(std::move(layer));
  }
  q.ln_final_ = LayerNorm::create(store, prefix + ".ln_final", cfg.dim);
  q.lm_head_ = Linear::create(store, prefix + ".lm_head", cfg.dim, cfg.vocab, rng);
  q.itm_head_ = Linear::create(store, prefix + ".itm_head", cfg.dim, 1, rng);
  q.temperature_ = store.create(prefix + ".temperature", Matrix(1, 1, cfg.temperature));
  return q;
}

Tensor AudioQFormer::embed_text(std::span<const int> ids) const {
  if (ids.size() > cfg_.max_text) {
    throw ValidationError("q-former: text of " + std::to_string(ids.size()) + " tokens exceeds max_text");
  }
  return ln_embed_(add(gather_rows(word_embed_, ids), slice_rows(pos_embed_, 0, ids.size())));
}

QFormerOutput AudioQFormer::forward(const Tensor& audio, std::optional<std::span<const int>> text,
                                    MaskMode mode) const {
  if (audio.rows() == 0) throw ValidationError("q-former: audio has no tokens");
  if (audio.cols() != cfg_.audio_dim) {
    throw ShapeError("q-former: audio features " + shape_str(audio.value()) + " for audio_dim " +
                     std::to_string(cfg_.audio_dim));
  }
  if (mode != MaskMode::unimodal && (!text || text->empty())) {
    throw ContractError("q-former: this mask mode needs text tokens");
  }
  const std::size_t nq = cfg_.num_queries;
  const std::size_t nt = text ? text->size() : 0;
  Tensor x = nt > 0 ? concat_rows({queries_, embed_text(*text)}) : queries_;
  const Matrix mask = qformer_mask(nq, nt, mode);
  const bool masked = mode != MaskMode::bidirectional && nt > 0;

  for (const auto& layer : layers_) {
    const Tensor h = layer.ln_self(x);
    x = add(x, layer.self_attn(h, h, masked ? &mask : nullptr));
    Tensor q_part = nt > 0 ? slice_rows(x, 0, nq) : x;
    if (layer.cross_attn) q_part = add(q_part, (*layer.cross_attn)(layer.ln_cross->operator()(q_part), audio));
    q_part = add(q_part, layer.ffn_query(layer.ln_ffn_query(q_part)));
    if (nt > 0) {
      Tensor t_part = slice_rows(x, nq, nt);
      t_part = add(t_part, layer.ffn_text(layer.ln_ffn_text(t_part)));
      x = concat_rows({q_part, t_part});
    } else {
      x = q_part;
    }
  }
  x = ln_final_(x);
  QFormerOutput out;
  if (nt > 0) {
    out.query_out = slice_rows(x, 0, nq);
    out.text_out = slice_rows(x, nq, nt);
  } else {
    out.query_out = x;
  }
  return out;
}

std::vector<int> cls_framed(std::span<const int> caption) {
  std::vector<int> ids{tok::kBos};
  ids.insert(ids.end(), caption.begin(), caption.end());
  return ids;
}

std::vector<int> dec_framed(std::span<const int> caption) {
  std::vector<int> ids{tok::kDec};
  ids.insert(ids.end(), caption.begin(), caption.end());
  return ids;
}

Tensor AudioQFormer::text_embedding(std::span<const int> caption) const {
  const auto ids = cls_framed(caption);
  // Text-only pass: queries are masked out of the text rows, so any audio works;
  // the query path is skipped entirely by running the layers on text alone.
  Tensor x = embed_text(ids);
  for (const auto& layer : layers_) {
    const Tensor h = layer.ln_self(x);
    x = add(x, layer.self_attn(h, h));
    x = add(x, layer.ffn_text(layer.ln_ffn_text(x)));
  }
  return slice_rows(ln_final_(x), 0, 1);
}

Tensor AudioQFormer::atm_logit(const Tensor& audio, std::span<const int> caption) const {
  const auto ids = cls_framed(caption);
  const auto out = forward(audio, std::span<const int>(ids), MaskMode::bidirectional);
  return itm_head_(mean_rows(out.query_out));
}

Tensor AudioQFormer::agtg_logits(const Tensor& audio, std::span<const int> caption) const {
  const auto ids = dec_framed(caption);
  const auto out = forward(audio, std::span<const int>(ids), MaskMode::multimodal_causal);
  return lm_head_(*out.text_out);
}

// ---- losses ----------------------------------------------------------------------

Tensor atc_loss_from_similarity(const Tensor& similarity, const Tensor& temperature) {
  const std::size_t b = similarity.rows();
  if (b == 0 || similarity.cols() != b) throw ShapeError("atc: similarity must be square, got " + shape_str(similarity.value()));
  const Tensor logits = div_by(similarity, temperature);
  std::vector<int> diag(b);
  for (std::size_t i = 0; i < b; ++i) diag[i] = static_cast<int>(i);
  const Tensor a2t = cross_entropy(logits, diag);
  const Tensor t2a = cross_entropy(transpose(logits), diag);
  return scale(add(a2t, t2a), 0.5);
}

Tensor atc_loss(const std::vector<Tensor>& query_outs, const std::vector<Tensor>& text_embeddings,
                const Tensor& temperature) {
  const std::size_t b = query_outs.size();
  if (b == 0 || text_embeddings.size() != b) throw ValidationError("atc: batch sizes differ or are empty");
  std::vector<Tensor> queries, texts;
  for (const auto& q : query_outs) queries.push_back(l2_normalize_rows(q));
  for (const auto& t : text_embeddings) {
    if (t.rows() != 1) throw ShapeError("atc: text embedding must be a single row");
    texts.push_back(l2_normalize_rows(t));
  }
  std::vector<Tensor> rows;
  for (std::size_t i = 0; i < b; ++i) {
    std::vector<Tensor> cells;
    for (std::size_t j = 0; j < b; ++j) cells.push_back(max_all(matmul_nt(queries[i], texts[j])));
    rows.push_back(concat_cols(cells));
  }
  return atc_loss_from_similarity(concat_rows(rows), temperature);
}

Tensor atm_loss(const Tensor& logit, bool matched) { return bce_with_logits(logit, matched); }

namespace {
std::vector<int> agtg_targets(std::span<const int> caption) {
  std::vector<int> t(caption.begin(), caption.end());
  t.push_back(tok::kEos);
  return t;
}
}  // namespace

Tensor agtg_loss(const AudioQFormer& qf, const Tensor& audio, std::span<const int> caption) {
  if (caption.empty()) throw ValidationError("agtg: empty caption");
  const auto targets = agtg_targets(caption);
  return cross_entropy(qf.agtg_logits(audio, caption), targets);
}

std::vector<Real> agtg_token_losses(const AudioQFormer& qf, const Tensor& audio, std::span<const int> caption) {
  if (caption.empty()) throw ValidationError("agtg: empty caption");
  NoGradGuard ng;
  const auto targets = agtg_targets(caption);
  return token_nll(qf.agtg_logits(audio, caption).value(), targets);
}

Stage1Losses qformer_stage1_loss(const AudioQFormer& qf, const std::vector<QFormerPairSample>& batch, Rng& rng) {
  if (batch.empty()) throw ValidationError("q-former stage 1: empty batch");
  std::vector<Tensor> query_outs, text_embs;
  std::vector<Tensor> agtg_terms, atm_terms;
  for (const auto& s : batch) {
    query_outs.push_back(qf.query_output(s.audio));
    text_embs.push_back(qf.text_embedding(s.caption));
    agtg_terms.push_back(agtg_loss(qf, s.audio, s.caption));
    atm_terms.push_back(atm_loss(qf.atm_logit(s.audio, s.caption), true));
  }
  if (batch.size() > 1) {
    std::uniform_int_distribution<std::size_t> pick(0, batch.size() - 2);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      std::size_t j = pick(rng);
      if (j >= i) ++j;
      atm_terms.push_back(atm_loss(qf.atm_logit(batch[i].audio, batch[j].caption), false));
    }
  }
  Stage1Losses out;
  out.atc = atc_loss(query_outs, text_embs, qf.temperature());
  out.atm = mean(concat_rows(atm_terms));
  out.agtg = mean(concat_rows(agtg_terms));
  out.total = add(add(out.atc, out.atm), out.agtg);
  return out;
}

Tensor stage2_lm_loss(const AudioQFormer& qf, const Linear& to_decoder, const Decoder& decoder, const Tensor& audio,
                      std::span<const int> caption) {
  if (caption.empty()) throw ValidationError("stage 2: empty caption");
  const Tensor prefix = to_decoder(qf.query_output(audio));
  const std::size_t q = prefix.rows();
  // Input [prefix ; c₁..c_{L-1}]; the row before each caption token predicts it.
  std::vector<Tensor> parts{prefix};
  if (caption.size() > 1) parts.push_back(decoder.embed(caption.subspan(0, caption.size() - 1)));
  const Tensor h = decoder.hidden(concat_rows(parts));
  const Tensor logits = decoder.head(slice_rows(h, q - 1, caption.size()));
  return cross_entropy(logits, caption);
}

std::string sample_training_caption(const CaptionSet& set, Rng& rng) {
  if (!(set.p_original >= 0.0 && set.p_original <= 1.0)) throw ValidationError("caption set: p_original outside [0,1]");
  if (set.p_original < 1.0 && set.rewrites.empty()) throw ValidationError("caption set: no rewrites to sample");
  std::uniform_real_distribution<Real> coin(0.0, 1.0);
  if (set.rewrites.empty() || coin(rng) < set.p_original) return set.original;
  std::uniform_int_distribution<std::size_t> pick(0, set.rewrites.size() - 1);
  return set.rewrites[pick(rng)];
}

}  // namespace gama
