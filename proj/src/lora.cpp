#include "gama/lora.hpp"

#include "gama/errors.hpp"

#include <algorithm>
#include <cmath>

namespace gama {

void validate_lora_rank(std::size_t rank, std::size_t d_in, std::size_t d_out) {
  if (rank == 0) throw ConfigError("LoRA rank must be at least 1");
  if (rank > std::min(d_in, d_out)) {
    throw ConfigError("LoRA rank " + std::to_string(rank) + " exceeds min(d_in, d_out) = " +
                      std::to_string(std::min(d_in, d_out)));
  }
}

LoraAdapter LoraAdapter::create(ParamStore& store, const std::string& prefix, const std::string& target,
                                std::size_t d_in, std::size_t d_out, std::size_t rank, Real alpha,
                                std::mt19937_64& rng) {
  validate_lora_rank(rank, d_in, d_out);
  LoraAdapter a;
  a.target = target;
  a.rank = rank;
  a.alpha = alpha;
  Matrix down(rank, d_in);
  std::normal_distribution<Real> dist(0.0, 1.0 / std::sqrt(static_cast<Real>(d_in)));
  for (auto& v : down.data()) v = dist(rng);
  a.down = store.create(prefix + ".lora_down", std::move(down));
  a.up = store.create(prefix + ".lora_up", Matrix::zeros(d_out, rank));
  return a;
}

Tensor lora_forward(const Tensor& x, const Tensor& base_weight, const LoraAdapter& adapter) {
  const auto& w = base_weight.value();
  if (adapter.down.cols() != w.cols() || adapter.up.rows() != w.rows() ||
      adapter.down.rows() != adapter.rank || adapter.up.cols() != adapter.rank) {
    throw ShapeError("lora_forward: adapter " + shape_str(adapter.up.value()) + "·" +
                     shape_str(adapter.down.value()) + " does not fit base " + shape_str(w));
  }
  Tensor base = matmul_nt(x, base_weight);
  Tensor delta = matmul_nt(matmul_nt(x, adapter.down), adapter.up);
  return add(base, scale(delta, adapter.scaling()));
}

Matrix lora_merge(const Matrix& base_weight, const LoraAdapter& adapter) {
  const auto& up = adapter.up.value();
  const auto& down = adapter.down.value();
  if (up.rows() != base_weight.rows() || down.cols() != base_weight.cols() || up.cols() != down.rows()) {
    throw ShapeError("lora_merge: adapter does not fit base " + shape_str(base_weight));
  }
  return Matrix(Matrix::Storage(base_weight.eigen() + adapter.scaling() * (up.eigen() * down.eigen())));
}

}  // namespace gama
