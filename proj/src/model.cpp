#include "gama/model.hpp"

#include "gama/errors.hpp"

#include <algorithm>

namespace gama {

ConnectionMlp ConnectionMlp::create(ParamStore& store, const std::string& prefix, std::size_t in_dim,
                                    std::size_t hidden, std::size_t out_dim, Rng& rng, Activation act) {
  return {Linear::create(store, prefix + ".fc1", in_dim, hidden, rng),
          Linear::create(store, prefix + ".fc2", hidden, out_dim, rng), act};
}

Tensor project(const Tensor& features, const ConnectionMlp& mlp) {
  if (features.cols() != mlp.in_dim()) {
    throw ShapeError("project: features " + shape_str(features.value()) + " for MLP in_dim " +
                     std::to_string(mlp.in_dim()));
  }
  const Tensor h = mlp.fc1(features);
  return mlp.fc2(mlp.activation == Activation::gelu ? gelu(h) : relu(h));
}

// ---- prompt ---------------------------------------------------------------------

namespace {
std::string join_tags(const std::vector<EventTag>& tags) {
  std::string out;
  for (std::size_t i = 0; i < tags.size(); ++i) {
    if (i > 0) out += ", ";
    out += tags[i].label;
  }
  return out;
}
}  // namespace

RenderedPrompt render_prompt(std::string_view instruction, const std::vector<EventTag>& tags, const Tensor* soft,
                             const Decoder& embedder, PromptMode mode) {
  RenderedPrompt p;
  if (mode == PromptMode::fine_tune) {
    if (instruction.empty()) throw ValidationError("render_prompt: empty instruction");
    p.tokens = tok::encode(instruction);
    p.text = std::string(instruction);
    p.embeddings = embedder.embed(p.tokens);
    return p;
  }
  if (soft == nullptr || !soft->defined() || soft->rows() == 0) {
    throw ContractError("render_prompt: instruction-tuning prompts need a soft prompt");
  }
  if (soft->cols() != embedder.config().dim) {
    throw ShapeError("render_prompt: soft prompt " + shape_str(soft->value()) + " for decoder dim " +
                     std::to_string(embedder.config().dim));
  }
  const auto lead = tok::encode(kHintLead);
  const std::string tail_text = std::string(kHintTail) + join_tags(tags) + "\n" + std::string(instruction);
  const auto tail = tok::encode(tail_text);

  p.soft_start = lead.size();
  p.soft_length = soft->rows();
  p.tokens = lead;
  p.tokens.insert(p.tokens.end(), p.soft_length, -1);
  p.tokens.insert(p.tokens.end(), tail.begin(), tail.end());
  p.text = std::string(kHintLead) + std::string(kHintMarker) + tail_text;
  p.embeddings = concat_rows({embedder.embed(lead), *soft, embedder.embed(tail)});
  return p;
}

DecoderInput build_prefix(const std::optional<Tensor>& agg_proj, const std::optional<Tensor>& qf_proj,
                          const RenderedPrompt& prompt) {
  const std::size_t dim = prompt.embeddings.cols();
  std::vector<Tensor> parts;
  DecoderInput in;
  if (agg_proj) {
    if (agg_proj->cols() != dim) throw ShapeError("build_prefix: aggregator stream " + shape_str(agg_proj->value()));
    parts.push_back(*agg_proj);
    in.agg_len = agg_proj->rows();
  }
  if (qf_proj) {
    if (qf_proj->cols() != dim) throw ShapeError("build_prefix: q-former stream " + shape_str(qf_proj->value()));
    parts.push_back(*qf_proj);
    in.qf_len = qf_proj->rows();
  }
  parts.push_back(prompt.embeddings);
  in.prompt_len = prompt.length();
  in.sequence = concat_rows(parts);
  in.soft_start = in.agg_len + in.qf_len + prompt.soft_start;
  in.soft_length = prompt.soft_length;
  in.labels.assign(in.sequence.rows(), tok::kPad);
  in.loss_mask.assign(in.sequence.rows(), false);
  return in;
}

void append_response(DecoderInput& input, const Decoder& decoder, std::string_view response) {
  std::vector<int> ids{tok::kResp};
  const auto body = tok::encode(response);
  ids.insert(ids.end(), body.begin(), body.end());
  input.sequence = concat_rows({input.sequence, decoder.embed(ids)});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    input.labels.push_back(i + 1 < ids.size() ? ids[i + 1] : tok::kEos);
    input.loss_mask.push_back(true);
  }
}

Tensor masked_lm_loss(const Decoder& decoder, const DecoderInput& input) {
  const std::size_t n = input.length();
  if (input.labels.size() != n || input.loss_mask.size() != n) throw ShapeError("masked_lm_loss: label/mask length");
  const auto first = std::find(input.loss_mask.begin(), input.loss_mask.end(), true);
  if (first == input.loss_mask.end()) throw ValidationError("masked_lm_loss: no response positions");
  const auto start = static_cast<std::size_t>(first - input.loss_mask.begin());
  constexpr int kIgnore = -1;
  std::vector<int> targets;
  targets.reserve(n - start);
  for (std::size_t i = start; i < n; ++i) targets.push_back(input.loss_mask[i] ? input.labels[i] : kIgnore);
  const Tensor h = decoder.hidden(input.sequence);
  return cross_entropy(decoder.head(slice_rows(h, start, n - start)), targets, kIgnore);
}

std::string generate(const Tensor& prefix, const Decoder& decoder, std::size_t max_new) {
  NoGradGuard ng;
  const int resp = tok::kResp;
  Tensor seq = concat_rows({prefix, decoder.embed(std::span<const int>(&resp, 1))});
  std::vector<int> out;
  for (std::size_t step = 0; step < max_new; ++step) {
    const Tensor h = decoder.hidden(seq);
    const Matrix logits = decoder.head(slice_rows(h, h.rows() - 1, 1)).value();
    Eigen::Index best = 0;
    logits.eigen().row(0).maxCoeff(&best);  // first maximum on ties
    const int id = static_cast<int>(best);
    if (id == tok::kEos) break;
    out.push_back(id);
    if (seq.rows() + 1 > decoder.config().max_len) break;
    seq = concat_rows({seq, decoder.embed(std::span<const int>(&id, 1))});
  }
  return tok::decode(out);
}

// ---- config ------------------------------------------------------------------------

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.encoder.tag_vocab = {"Speech", "Music", "Dog", "Bird", "Vehicle", "Water", "Wind", "Crowd",
                         "Tick", "Footsteps", "Engine", "Rain", "Alarm", "Laughter", "Silence", "Tools"};
  c.encoder.patch_dim = c.patch_h * c.patch_w;
  c.qformer.audio_dim = c.encoder.dim;
  c.connector_hidden = c.decoder.dim;
  return c;
}

ModelConfig ModelConfig::toy() {
  ModelConfig c;
  c.mel.mel_bins = 8;
  c.patch_h = 4;
  c.patch_w = 4;
  c.encoder.depth = 3;
  c.encoder.dim = 8;
  c.encoder.heads = 2;
  c.encoder.ffn_mult = 2;
  c.encoder.patch_dim = 16;
  c.encoder.max_tokens = 16;
  c.encoder.mid_j = 1;
  c.encoder.mid_k = 2;
  c.encoder.tag_vocab = {"dog", "speech", "rain"};
  c.aggregator_heads = 2;
  c.aggregator_ffn_mult = 2;
  c.qformer.num_queries = 2;
  c.qformer.dim = 8;
  c.qformer.depth = 2;
  c.qformer.heads = 2;
  c.qformer.ffn_mult = 2;
  c.qformer.audio_dim = 8;
  c.qformer.max_text = 32;
  c.decoder.dim = 8;
  c.decoder.depth = 2;
  c.decoder.heads = 2;
  c.decoder.ffn_mult = 2;
  c.decoder.max_len = 128;
  c.decoder.lora_rank = 2;
  c.decoder.lora_alpha = 4.0;
  c.connector_hidden = 8;
  return c;
}

void ModelConfig::validate() const {
  encoder.validate();
  qformer.validate();
  if (encoder.patch_dim != patch_h * patch_w) throw ConfigError("model: encoder patch_dim must equal patch_h*patch_w");
  if (qformer.audio_dim != encoder.dim) throw ConfigError("model: q-former audio_dim must equal encoder dim");
  if (use_aggregator && !encoder.aggregation) throw ConfigError("model: aggregator stream needs encoder aggregation");
  if (soft_prompt_len == 0) throw ConfigError("model: soft prompt needs at least one row");
}

nlohmann::json ModelConfig::to_json() const {
  using nlohmann::json;
  return json{
      {"encoder",
       {{"depth", encoder.depth}, {"dim", encoder.dim}, {"heads", encoder.heads}, {"ffn_mult", encoder.ffn_mult},
        {"patch_dim", encoder.patch_dim}, {"max_tokens", encoder.max_tokens}, {"tag_vocab", encoder.tag_vocab},
        {"mid_j", encoder.mid_j}, {"mid_k", encoder.mid_k}, {"aggregation", encoder.aggregation}}},
      {"qformer",
       {{"num_queries", qformer.num_queries}, {"dim", qformer.dim}, {"depth", qformer.depth},
        {"heads", qformer.heads}, {"ffn_mult", qformer.ffn_mult}, {"audio_dim", qformer.audio_dim},
        {"vocab", qformer.vocab}, {"max_text", qformer.max_text},
        {"cross_attention_freq", qformer.cross_attention_freq}, {"temperature", qformer.temperature}}},
      {"decoder",
       {{"dim", decoder.dim}, {"depth", decoder.depth}, {"heads", decoder.heads}, {"ffn_mult", decoder.ffn_mult},
        {"vocab", decoder.vocab}, {"max_len", decoder.max_len}, {"lora", decoder.lora},
        {"lora_rank", decoder.lora_rank}, {"lora_alpha", decoder.lora_alpha}}},
      {"aggregator_heads", aggregator_heads},
      {"aggregator_ffn_mult", aggregator_ffn_mult},
      {"connector_hidden", connector_hidden},
      {"soft_prompt_len", soft_prompt_len},
      {"use_aggregator", use_aggregator},
      {"use_qformer", use_qformer},
      {"mel",
       {{"win", mel.win}, {"hop", mel.hop}, {"n_fft", mel.n_fft}, {"mel_bins", mel.mel_bins}, {"floor", mel.floor},
        {"low_hz", mel.low_hz}, {"high_hz", mel.high_hz}}},
      {"patch_h", patch_h},
      {"patch_w", patch_w},
      {"tag_top_k", tag_top_k},
      {"tag_threshold", tag_threshold},
  };
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  try {
    ModelConfig c;
    const auto& e = j.at("encoder");
    c.encoder.depth = e.at("depth");
    c.encoder.dim = e.at("dim");
    c.encoder.heads = e.at("heads");
    c.encoder.ffn_mult = e.at("ffn_mult");
    c.encoder.patch_dim = e.at("patch_dim");
    c.encoder.max_tokens = e.at("max_tokens");
    c.encoder.tag_vocab = e.at("tag_vocab").get<std::vector<std::string>>();
    c.encoder.mid_j = e.at("mid_j");
    c.encoder.mid_k = e.at("mid_k");
    c.encoder.aggregation = e.at("aggregation");
    const auto& q = j.at("qformer");
    c.qformer.num_queries = q.at("num_queries");
    c.qformer.dim = q.at("dim");
    c.qformer.depth = q.at("depth");
    c.qformer.heads = q.at("heads");
    c.qformer.ffn_mult = q.at("ffn_mult");
    c.qformer.audio_dim = q.at("audio_dim");
    c.qformer.vocab = q.at("vocab");
    c.qformer.max_text = q.at("max_text");
    c.qformer.cross_attention_freq = q.at("cross_attention_freq");
    c.qformer.temperature = q.at("temperature");
    const auto& d = j.at("decoder");
    c.decoder.dim = d.at("dim");
    c.decoder.depth = d.at("depth");
    c.decoder.heads = d.at("heads");
    c.decoder.ffn_mult = d.at("ffn_mult");
    c.decoder.vocab = d.at("vocab");
    c.decoder.max_len = d.at("max_len");
    c.decoder.lora = d.at("lora");
    c.decoder.lora_rank = d.at("lora_rank");
    c.decoder.lora_alpha = d.at("lora_alpha");
    c.aggregator_heads = j.at("aggregator_heads");
    c.aggregator_ffn_mult = j.at("aggregator_ffn_mult");
    c.connector_hidden = j.at("connector_hidden");
    c.soft_prompt_len = j.at("soft_prompt_len");
    c.use_aggregator = j.at("use_aggregator");
    c.use_qformer = j.at("use_qformer");
    const auto& m = j.at("mel");
    c.mel.win = m.at("win");
    c.mel.hop = m.at("hop");
    c.mel.n_fft = m.at("n_fft");
    c.mel.mel_bins = m.at("mel_bins");
    c.mel.floor = m.at("floor");
    c.mel.low_hz = m.at("low_hz");
    c.mel.high_hz = m.at("high_hz");
    c.patch_h = j.at("patch_h");
    c.patch_w = j.at("patch_w");
    c.tag_top_k = j.at("tag_top_k");
    c.tag_threshold = j.at("tag_threshold");
    return c;
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(std::string("model config: ") + ex.what());
  }
}

// ---- model -----------------------------------------------------------------------------

GamaModel GamaModel::create(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  GamaModel m;
  m.cfg_ = cfg;
  m.encoder_ = AstEncoder::create(m.store_, "encoder", cfg.encoder, rng);
  if (cfg.encoder.aggregation) {
    m.aggregator_ = Aggregator::create(m.store_, "aggregator", cfg.encoder.dim, cfg.aggregator_heads,
                                       cfg.aggregator_ffn_mult, rng);
  }
  m.qformer_ = AudioQFormer::create(m.store_, "qformer", cfg.qformer, rng);
  m.qformer_lm_proj_ = Linear::create(m.store_, "qformer.lm_proj", cfg.qformer.dim, cfg.decoder.dim, rng);
  m.agg_connector_ =
      ConnectionMlp::create(m.store_, "connector.agg", cfg.encoder.dim, cfg.connector_hidden, cfg.decoder.dim, rng);
  m.qf_connector_ =
      ConnectionMlp::create(m.store_, "connector.qf", cfg.qformer.dim, cfg.connector_hidden, cfg.decoder.dim, rng);
  m.soft_prompt_ = m.store_.create("soft_prompt", random_normal(cfg.soft_prompt_len, cfg.decoder.dim, 1.0, rng));
  m.decoder_ = Decoder::create(m.store_, "decoder", cfg.decoder, rng);
  return m;
}

PatchSequence GamaModel::frontend(const Waveform& wave) const {
  return patchify(log_mel(wave, cfg_.mel), cfg_.patch_h, cfg_.patch_w);
}

AudioStreams GamaModel::audio_streams(const PatchSequence& patches, bool predict_tags) const {
  const LayerFeatureBundle bundle = encoder_.encode(patches);
  AudioStreams s;
  if (cfg_.use_aggregator) s.agg_proj = project(aggregator_.aggregate(bundle), agg_connector_);
  if (cfg_.use_qformer) s.qf_proj = project(qformer_.query_output(bundle.last()), qf_connector_);
  if (predict_tags && !cfg_.encoder.tag_vocab.empty()) {
    s.tags = encoder_.classify_tags(bundle.last(), cfg_.tag_top_k, cfg_.tag_threshold);
  }
  return s;
}

RenderedPrompt GamaModel::render(std::string_view instruction, const std::vector<EventTag>& tags,
                                 PromptMode mode) const {
  return render_prompt(instruction, tags, &soft_prompt_, decoder_, mode);
}

DecoderInput GamaModel::assemble(const PatchSequence& patches, std::string_view instruction, PromptMode mode,
                                 const std::optional<std::vector<EventTag>>& tags) const {
  const bool need_tags = mode == PromptMode::instruction_tune && !tags;
  AudioStreams s = audio_streams(patches, need_tags);
  const auto& use_tags = tags ? *tags : s.tags;
  return build_prefix(s.agg_proj, s.qf_proj, render(instruction, use_tags, mode));
}

Tensor GamaModel::response_loss(const PatchSequence& patches, std::string_view instruction,
                                std::string_view response, PromptMode mode,
                                const std::optional<std::vector<EventTag>>& tags) const {
  DecoderInput in = assemble(patches, instruction, mode, tags);
  append_response(in, decoder_, response);
  return masked_lm_loss(decoder_, in);
}

std::string GamaModel::answer(const PatchSequence& patches, std::string_view instruction, PromptMode mode,
                              std::size_t max_new, const std::optional<std::vector<EventTag>>& tags) const {
  NoGradGuard ng;
  return generate(assemble(patches, instruction, mode, tags).sequence, decoder_, max_new);
}

}  // namespace gama
