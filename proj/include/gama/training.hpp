#pragma once

// Stage-gated training: which parameters each stage may update, and a step
// that accumulates gradients over micro-batches before one Adam update.

#include "gama/model.hpp"
#include "gama/optim.hpp"

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace gama {

// ft1..ft4: fine-tuning (encoders, aggregator, q-former, connectors, decoder LoRA).
// it: instruction tuning (decoder LoRA and the soft prompt only).
// pt: everything except the soft prompt; used for from-scratch desk runs.
// qf1/qf2: Q-Former pretraining (stage 2 adds the decoder projection).
enum class StageId { ft1, ft2, ft3, ft4, it, pt, qf1, qf2 };

std::string_view stage_name(StageId id);
StageId parse_stage(std::string_view name);  // ConfigError on unknown names

bool is_lora_param(const std::string& name);
// Trainable-set membership of a parameter name for a stage.
bool stage_trains(StageId id, const std::string& name);
void apply_stage(ParamStore& store, StageId id);

struct StageConfig {
  StageId id = StageId::it;
  Real lr = 1e-4;
  std::size_t batch_size = 2;        // examples per micro-batch
  std::size_t effective_batch = 256;  // examples per optimizer update

  static StageConfig defaults(StageId id);
  PromptMode prompt_mode() const {
    return id == StageId::it ? PromptMode::instruction_tune : PromptMode::fine_tune;
  }
  void validate() const;
};

struct InstructionExample {
  PatchSequence patches;
  std::string instruction;
  std::string response;
  std::optional<std::vector<EventTag>> tags;  // IT mode falls back to predicted tags
};

struct QFormerExample {
  PatchSequence patches;
  CaptionSet captions;
};

class Trainer {
 public:
  // Applies the stage's trainable set to the model's store.
  Trainer(GamaModel& model, StageConfig cfg);

  // One optimizer update over the whole batch, forwarded in micro-batches of
  // cfg.batch_size with gradients accumulated serially. Returns the mean
  // per-example loss. Throws ValidationError on an empty batch.
  Real step(std::span<const InstructionExample> batch);
  // Q-Former stage step (qf1: ATC+ATM+AGTG, qf2: LM loss through the decoder).
  Real qformer_step(std::span<const QFormerExample> batch, Rng& rng);

  // Mean per-example loss without touching gradients or parameters.
  Real evaluate(std::span<const InstructionExample> batch) const;

  const StageConfig& config() const noexcept { return cfg_; }
  Adam& optimizer() noexcept { return adam_; }

 private:
  GamaModel& model_;
  StageConfig cfg_;
  Adam adam_;
};

}  // namespace gama
