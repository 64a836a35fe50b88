#include "gama/training.hpp"

#include "gama/errors.hpp"

#include <algorithm>
#include <array>

namespace gama {

namespace {

constexpr std::array<std::pair<StageId, std::string_view>, 8> kStageNames{{
    {StageId::ft1, "ft1"},
    {StageId::ft2, "ft2"},
    {StageId::ft3, "ft3"},
    {StageId::ft4, "ft4"},
    {StageId::it, "it"},
    {StageId::pt, "pt"},
    {StageId::qf1, "qf1"},
    {StageId::qf2, "qf2"},
}};

bool starts_with(const std::string& s, std::string_view p) { return s.rfind(p, 0) == 0; }

bool is_ft(StageId id) {
  return id == StageId::ft1 || id == StageId::ft2 || id == StageId::ft3 || id == StageId::ft4;
}

}  // namespace

std::string_view stage_name(StageId id) {
  for (const auto& [sid, name] : kStageNames) {
    if (sid == id) return name;
  }
  throw InternalError("stage_name: unknown stage");
}

StageId parse_stage(std::string_view name) {
  for (const auto& [sid, n] : kStageNames) {
    if (n == name) return sid;
  }
  throw ConfigError("unknown stage '" + std::string(name) + "' (expected ft1..ft4, it, pt, qf1, qf2)");
}

bool is_lora_param(const std::string& name) { return name.find(".lora_") != std::string::npos; }

bool stage_trains(StageId id, const std::string& name) {
  const bool lm_proj = starts_with(name, "qformer.lm_proj.");
  switch (id) {
    case StageId::it:
      return is_lora_param(name) || name == "soft_prompt";
    case StageId::pt:
      return name != "soft_prompt";
    case StageId::qf1:
      return starts_with(name, "qformer.") && !lm_proj;
    case StageId::qf2:
      return starts_with(name, "qformer.");
    default:
      break;
  }
  if (is_ft(id)) {
    return is_lora_param(name) || starts_with(name, "encoder.") || starts_with(name, "aggregator.") ||
           (starts_with(name, "qformer.") && !lm_proj) || starts_with(name, "connector.");
  }
  throw InternalError("stage_trains: unknown stage");
}

void apply_stage(ParamStore& store, StageId id) {
  store.set_trainable_if([id](const std::string& name) { return stage_trains(id, name); });
}

StageConfig StageConfig::defaults(StageId id) {
  StageConfig c;
  c.id = id;
  switch (id) {
    case StageId::ft1: c.batch_size = 4; break;
    case StageId::ft2:
    case StageId::ft3:
    case StageId::ft4:
    case StageId::it: c.batch_size = 2; break;
    case StageId::pt:
      c.lr = 1e-3;
      c.batch_size = 8;
      c.effective_batch = 8;
      break;
    case StageId::qf1:
      c.batch_size = 192;
      c.effective_batch = 192;
      break;
    case StageId::qf2:
      c.batch_size = 128;
      c.effective_batch = 128;
      break;
  }
  return c;
}

void StageConfig::validate() const {
  if (!(lr >= 0.0)) throw ConfigError("stage: lr must be non-negative");
  if (batch_size == 0) throw ConfigError("stage: batch_size must be positive");
  if (effective_batch < batch_size) throw ConfigError("stage: effective_batch must be >= batch_size");
}

Trainer::Trainer(GamaModel& model, StageConfig cfg) : model_(model), cfg_(cfg), adam_(AdamConfig{cfg.lr}) {
  cfg_.validate();
  apply_stage(model_.params(), cfg_.id);
}

Real Trainer::step(std::span<const InstructionExample> batch) {
  if (batch.empty()) throw ValidationError("training step: empty batch");
  if (cfg_.id == StageId::qf1 || cfg_.id == StageId::qf2) {
    throw ContractError("training step: Q-Former stages take QFormerExample batches");
  }
  model_.params().zero_grad();
  Real total = 0.0;
  for (std::size_t start = 0; start < batch.size(); start += cfg_.batch_size) {
    const std::size_t end = std::min(batch.size(), start + cfg_.batch_size);
    for (std::size_t i = start; i < end; ++i) {
      const auto& ex = batch[i];
      const Tensor loss = model_.response_loss(ex.patches, ex.instruction, ex.response, cfg_.prompt_mode(), ex.tags);
      total += loss.item();
      backward(loss);
    }
  }
  adam_.step(model_.params(), 1.0 / static_cast<Real>(batch.size()));
  return total / static_cast<Real>(batch.size());
}

Real Trainer::evaluate(std::span<const InstructionExample> batch) const {
  if (batch.empty()) throw ValidationError("evaluate: empty batch");
  NoGradGuard ng;
  Real total = 0.0;
  for (const auto& ex : batch) {
    total += model_.response_loss(ex.patches, ex.instruction, ex.response, cfg_.prompt_mode(), ex.tags).item();
  }
  return total / static_cast<Real>(batch.size());
}

Real Trainer::qformer_step(std::span<const QFormerExample> batch, Rng& rng) {
  if (batch.empty()) throw ValidationError("q-former step: empty batch");
  if (cfg_.id != StageId::qf1 && cfg_.id != StageId::qf2) {
    throw ContractError("q-former step: stage " + std::string(stage_name(cfg_.id)) + " is not a Q-Former stage");
  }
  model_.params().zero_grad();
  // The audio encoder is frozen while the Q-Former is pretrained.
  std::vector<QFormerPairSample> samples;
  samples.reserve(batch.size());
  {
    NoGradGuard ng;
    for (const auto& ex : batch) {
      const Tensor last = model_.encoder().encode(ex.patches).last();
      samples.push_back({Tensor::constant(last.value()), tok::encode(sample_training_caption(ex.captions, rng))});
    }
  }
  Real total = 0.0;
  std::size_t updates = 0;
  if (cfg_.id == StageId::qf1) {
    // Contrastive and matching terms couple the items, so each micro-batch is one graph.
    for (std::size_t start = 0; start < samples.size(); start += cfg_.batch_size) {
      const std::size_t end = std::min(samples.size(), start + cfg_.batch_size);
      const std::vector<QFormerPairSample> micro(samples.begin() + static_cast<std::ptrdiff_t>(start),
                                                 samples.begin() + static_cast<std::ptrdiff_t>(end));
      const Stage1Losses losses = qformer_stage1_loss(model_.qformer(), micro, rng);
      total += losses.total.item();
      ++updates;
      backward(losses.total);
    }
  } else {
    for (const auto& s : samples) {
      const Tensor loss =
          stage2_lm_loss(model_.qformer(), model_.qformer_lm_proj(), model_.decoder(), s.audio, s.caption);
      total += loss.item();
      ++updates;
      backward(loss);
    }
  }
  adam_.step(model_.params(), 1.0 / static_cast<Real>(updates));
  return total / static_cast<Real>(updates);
}

}  // namespace gama
