#pragma once

#include "gama/tensor.hpp"

#include <functional>
#include <map>
#include <string>
#include <vector>

namespace gama {

struct AdamConfig {
  Real lr = 1e-4;
  Real beta1 = 0.9;
  Real beta2 = 0.999;
  Real eps = 1e-8;
};

// Plain Adam with bias correction. State is keyed by parameter name so the
// optimizer survives trainable-set changes between stages.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  // Updates every trainable parameter from its accumulated gradient, scaled by
  // grad_scale (1/accumulated examples), then zeroes all gradients.
  void step(ParamStore& store, Real grad_scale = 1.0);

  void set_lr(Real lr) { cfg_.lr = lr; }
  const AdamConfig& config() const noexcept { return cfg_; }
  long steps_taken() const noexcept { return steps_; }

 private:
  struct Slot {
    Matrix m, v;
    long t = 0;
  };
  AdamConfig cfg_;
  std::map<std::string, Slot> slots_;
  long steps_ = 0;
};

struct GradCheckEntry {
  std::string name;
  std::size_t checked = 0;
  Real max_rel_err = 0.0;
  Real max_abs_err = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> params;
  Real max_rel_err = 0.0;
  bool passed = true;
};

struct GradCheckOptions {
  Real h = 1e-5;
  Real tol = 1e-4;
  // Relative error is |a - n| / max(|a|, |n|, denom_floor).
  Real denom_floor = 1e-6;
  // 0 checks every entry; otherwise a fixed-stride subset of this size.
  std::size_t max_entries_per_param = 0;
};

// Compares backward() gradients of every trainable parameter in store against
// central differences (f(x+h) - f(x-h)) / 2h. f must rebuild the loss from the
// current parameter values. Throws ContractError if two evaluations of f at the
// same point disagree or h <= 0.
GradCheckReport grad_check(const std::function<Tensor()>& f, ParamStore& store,
                           const GradCheckOptions& opts = {});

}  // namespace gama
