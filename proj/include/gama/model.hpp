#pragma once

// Assembles the audio streams, the soft-prompted instruction and the decoder
// into one model, and owns the ParamStore every sub-module registers into.

#include "gama/aggregator.hpp"
#include "gama/audio.hpp"
#include "gama/decoder.hpp"
#include "gama/encoder.hpp"
#include "gama/qformer.hpp"

#include <json.hpp>

#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace gama {

enum class Activation { gelu, relu };

// Two-layer MLP mapping one audio stream into the decoder embedding space.
struct ConnectionMlp {
  Linear fc1;
  Linear fc2;
  Activation activation = Activation::gelu;

  static ConnectionMlp create(ParamStore& store, const std::string& prefix, std::size_t in_dim, std::size_t hidden,
                              std::size_t out_dim, Rng& rng, Activation act = Activation::gelu);
  std::size_t in_dim() const { return fc1.in_dim(); }
  std::size_t out_dim() const { return fc2.out_dim(); }
};

// T × in_dim → T × decoder_dim. Throws ShapeError on a feature-dim mismatch.
Tensor project(const Tensor& features, const ConnectionMlp& mlp);

enum class PromptMode { fine_tune, instruction_tune };

inline constexpr std::string_view kHintLead = "According to ";
inline constexpr std::string_view kHintTail = ", you are allowed to use or partially use the following tags: ";
inline constexpr std::string_view kHintMarker = "<hint>";

struct RenderedPrompt {
  Tensor embeddings;        // L_prompt × decoder_dim
  std::vector<int> tokens;  // vocabulary ids; -1 at soft-prompt rows
  std::string text;         // human-readable form with the <hint> marker
  // [start, start + length) rows hold the soft prompt; length 0 when absent.
  std::size_t soft_start = 0;
  std::size_t soft_length = 0;

  std::size_t length() const { return tokens.size(); }
};

// Fine-tune mode embeds the bare instruction (tags and soft prompt are not
// used). Instruction-tune mode renders
//   "According to " ⧺ soft rows ⧺ ", you are allowed to use or partially use
//   the following tags: " + tags + "\n" + instruction
// and throws ContractError when soft is null.
RenderedPrompt render_prompt(std::string_view instruction, const std::vector<EventTag>& tags, const Tensor* soft,
                             const Decoder& embedder, PromptMode mode);

struct DecoderInput {
  Tensor sequence;            // rows × decoder_dim
  std::vector<int> labels;    // next-token label per row
  std::vector<bool> loss_mask;
  std::size_t agg_len = 0;
  std::size_t qf_len = 0;
  std::size_t prompt_len = 0;
  std::size_t soft_start = 0;  // absolute row of the soft prompt
  std::size_t soft_length = 0;

  std::size_t length() const { return sequence.rows(); }
};

// [aggregator stream ⧺ q-former stream ⧺ prompt]; either stream may be absent.
// Every row is excluded from the loss.
DecoderInput build_prefix(const std::optional<Tensor>& agg_proj, const std::optional<Tensor>& qf_proj,
                          const RenderedPrompt& prompt);
// Appends [RESP] r₁..r_L. Rows from [RESP] on predict r₁..r_L, EOS and are the
// only rows in the loss.
void append_response(DecoderInput& input, const Decoder& decoder, std::string_view response);

// Response-masked next-token cross-entropy. Rows outside loss_mask never
// contribute, whatever their label.
Tensor masked_lm_loss(const Decoder& decoder, const DecoderInput& input);

// Greedy decoding after prefix ⧺ [RESP] until EOS or max_new tokens.
std::string generate(const Tensor& prefix, const Decoder& decoder, std::size_t max_new);

struct ModelConfig {
  EncoderConfig encoder;
  QFormerConfig qformer;
  DecoderConfig decoder;
  std::size_t aggregator_heads = 4;
  std::size_t aggregator_ffn_mult = 4;
  std::size_t connector_hidden = 64;
  std::size_t soft_prompt_len = 1;
  bool use_aggregator = true;  // false drops the whole AST stream from the prefix
  bool use_qformer = true;
  MelConfig mel;
  std::size_t patch_h = 16;
  std::size_t patch_w = 16;
  std::size_t tag_top_k = 5;
  Real tag_threshold = 0.5;

  // Desk-scale defaults (encoder depth 12, aggregation from layers 4 and 8).
  static ModelConfig desk();
  // Tiny shapes for finite-difference checks.
  static ModelConfig toy();

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  void validate() const;
};

struct AudioStreams {
  std::optional<Tensor> agg_proj;
  std::optional<Tensor> qf_proj;
  std::vector<EventTag> tags;
};

class GamaModel {
 public:
  static GamaModel create(const ModelConfig& cfg, std::uint64_t seed);

  PatchSequence frontend(const Waveform& wave) const;
  AudioStreams audio_streams(const PatchSequence& patches, bool predict_tags) const;
  // Prefix for one example; IT mode uses the given tags or, when none are
  // given, the encoder's predicted tags.
  DecoderInput assemble(const PatchSequence& patches, std::string_view instruction, PromptMode mode,
                        const std::optional<std::vector<EventTag>>& tags = std::nullopt) const;
  RenderedPrompt render(std::string_view instruction, const std::vector<EventTag>& tags, PromptMode mode) const;

  Tensor response_loss(const PatchSequence& patches, std::string_view instruction, std::string_view response,
                       PromptMode mode, const std::optional<std::vector<EventTag>>& tags = std::nullopt) const;
  std::string answer(const PatchSequence& patches, std::string_view instruction, PromptMode mode,
                     std::size_t max_new = 128,
                     const std::optional<std::vector<EventTag>>& tags = std::nullopt) const;

  ParamStore& params() noexcept { return store_; }
  const ParamStore& params() const noexcept { return store_; }
  const ModelConfig& config() const noexcept { return cfg_; }
  AstEncoder& encoder() noexcept { return encoder_; }
  const AstEncoder& encoder() const noexcept { return encoder_; }
  Aggregator& aggregator() noexcept { return aggregator_; }
  AudioQFormer& qformer() noexcept { return qformer_; }
  const AudioQFormer& qformer() const noexcept { return qformer_; }
  ConnectionMlp& agg_connector() noexcept { return agg_connector_; }
  ConnectionMlp& qf_connector() noexcept { return qf_connector_; }
  Decoder& decoder() noexcept { return decoder_; }
  const Decoder& decoder() const noexcept { return decoder_; }
  const Tensor& soft_prompt() const noexcept { return soft_prompt_; }
  const Linear& qformer_lm_proj() const noexcept { return qformer_lm_proj_; }

 private:
  ModelConfig cfg_;
  ParamStore store_;
  AstEncoder encoder_;
  Aggregator aggregator_;
  AudioQFormer qformer_;
  Linear qformer_lm_proj_;  // stage-2 Q-Former pretraining projection
  ConnectionMlp agg_connector_;
  ConnectionMlp qf_connector_;
  Tensor soft_prompt_;
  Decoder decoder_;
};

}  // namespace gama
