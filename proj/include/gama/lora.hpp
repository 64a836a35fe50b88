#pragma once

#include "gama/tensor.hpp"

#include <random>
#include <string>

namespace gama {

// Low-rank additive adapter on a frozen base weight W (d_out × d_in):
//   effective W' = W + (alpha / rank) · up · down
// `up` starts at zero so a fresh adapter is an exact no-op.
struct LoraAdapter {
  std::string target;  // name of the adapted base weight
  std::size_t rank = 0;
  Real alpha = 0.0;
  Tensor down;  // rank × d_in
  Tensor up;    // d_out × rank

  Real scaling() const { return alpha / static_cast<Real>(rank); }

  // Registers `<prefix>.lora_down` / `<prefix>.lora_up`. Throws ConfigError
  // when rank is 0 or exceeds min(d_in, d_out).
  static LoraAdapter create(ParamStore& store, const std::string& prefix, const std::string& target,
                            std::size_t d_in, std::size_t d_out, std::size_t rank, Real alpha,
                            std::mt19937_64& rng);
};

void validate_lora_rank(std::size_t rank, std::size_t d_in, std::size_t d_out);

// x·Wᵀ + scaling·x·downᵀ·upᵀ
Tensor lora_forward(const Tensor& x, const Tensor& base_weight, const LoraAdapter& adapter);
// W + scaling·up·down
Matrix lora_merge(const Matrix& base_weight, const LoraAdapter& adapter);

}  // namespace gama
