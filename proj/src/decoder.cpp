#include "gama/decoder.hpp"

#include "gama/errors.hpp"

namespace gama {

Decoder Decoder::create(ParamStore& store, const std::string& prefix, const DecoderConfig& cfg, Rng& rng) {
  if (cfg.heads == 0 || cfg.dim % cfg.heads != 0) throw ConfigError("decoder: dim not divisible by heads");
  if (cfg.lora) validate_lora_rank(cfg.lora_rank, cfg.dim, cfg.dim);
  Decoder d;
  d.cfg_ = cfg;
  d.tok_embed_ = store.create(prefix + ".tok_embed", random_normal(cfg.vocab, cfg.dim, 1.0, rng));
  d.pos_embed_ = store.create(prefix + ".pos_embed", random_normal(cfg.max_len, cfg.dim, 0.02, rng));
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    const std::string p = prefix + ".layers." + std::to_string(l);
    Block b{LayerNorm::create(store, p + ".ln1", cfg.dim),
            MultiHeadAttention::create(store, p + ".attn", cfg.dim, cfg.dim, cfg.heads, rng),
            LayerNorm::create(store, p + ".ln2", cfg.dim),
            FeedForward::create(store, p + ".ffn", cfg.dim, cfg.dim * cfg.ffn_mult, rng)};
    if (cfg.lora) {
      b.attn.q_lora = LoraAdapter::create(store, p + ".attn.q", p + ".attn.q.weight", cfg.dim, cfg.dim,
                                          cfg.lora_rank, cfg.lora_alpha, rng);
      b.attn.v_lora = LoraAdapter::create(store, p + ".attn.v", p + ".attn.v.weight", cfg.dim, cfg.dim,
                                          cfg.lora_rank, cfg.lora_alpha, rng);
    }
    d.blocks_.push_back(std::move(b));
  }
  d.ln_final_ = LayerNorm::create(store, prefix + ".ln_final", cfg.dim);
  d.lm_head_ = Linear::create(store, prefix + ".lm_head", cfg.dim, cfg.vocab, rng);
  return d;
}

Tensor Decoder::embed(std::span<const int> ids) const { return gather_rows(tok_embed_, ids); }

Tensor Decoder::hidden(const Tensor& inputs) const {
  const std::size_t t = inputs.rows();
  if (t == 0) throw ValidationError("decoder: empty input sequence");
  if (t > cfg_.max_len) {
    throw ValidationError("decoder: sequence of " + std::to_string(t) + " exceeds max_len " + std::to_string(cfg_.max_len));
  }
  if (inputs.cols() != cfg_.dim) throw ShapeError("decoder: input dim " + shape_str(inputs.value()));
  const Matrix mask = causal_mask(t);
  Tensor x = add(inputs, slice_rows(pos_embed_, 0, t));
  for (const auto& b : blocks_) {
    const Tensor h = b.ln1(x);
    x = add(x, b.attn(h, h, &mask));
    x = add(x, b.ffn(b.ln2(x)));
  }
  return ln_final_(x);
}

Tensor Decoder::head(const Tensor& hidden) const { return lm_head_(hidden); }

void Decoder::set_lora_enabled(bool enabled) {
  lora_enabled_ = enabled;
  for (auto& b : blocks_) b.attn.lora_enabled = enabled;
}

std::vector<const LoraAdapter*> Decoder::adapters() const {
  std::vector<const LoraAdapter*> out;
  for (const auto& b : blocks_) {
    if (b.attn.q_lora) out.push_back(&*b.attn.q_lora);
    if (b.attn.v_lora) out.push_back(&*b.attn.v_lora);
  }
  return out;
}

}  // namespace gama
