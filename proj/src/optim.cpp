#include "gama/optim.hpp"

#include "gama/errors.hpp"

#include <algorithm>
#include <cmath>

namespace gama {

void Adam::step(ParamStore& store, Real grad_scale) {
  ++steps_;
  for (const auto& e : store.entries()) {
    if (!e.trainable) continue;
    Tensor t = e.tensor;
    Matrix g = t.grad();
    auto& slot = slots_[e.name];
    if (!slot.m.same_shape(g)) {
      slot.m = Matrix::zeros(g.rows(), g.cols());
      slot.v = Matrix::zeros(g.rows(), g.cols());
      slot.t = 0;
    }
    ++slot.t;
    auto gs = g.eigen() * grad_scale;
    slot.m.eigen() = cfg_.beta1 * slot.m.eigen() + (1.0 - cfg_.beta1) * gs;
    slot.v.eigen() = cfg_.beta2 * slot.v.eigen() + (1.0 - cfg_.beta2) * gs.cwiseProduct(gs);
    const Real bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<Real>(slot.t));
    const Real bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<Real>(slot.t));
    auto& w = t.mutable_value().eigen();
    w.array() -= cfg_.lr * (slot.m.eigen().array() / bc1) /
                 ((slot.v.eigen().array() / bc2).sqrt() + cfg_.eps);
  }
  store.zero_grad();
}

GradCheckReport grad_check(const std::function<Tensor()>& f, ParamStore& store, const GradCheckOptions& opts) {
  if (!(opts.h > 0.0)) throw ContractError("grad_check: h must be positive");

  store.zero_grad();
  Tensor loss = f();
  const Real base = loss.item();
  backward(loss);
  {
    NoGradGuard ng;
    const Real again = f().item();
    if (again != base) throw ContractError("grad_check: loss function is not deterministic");
  }

  GradCheckReport report;
  for (const auto& e : store.entries()) {
    if (!e.trainable) continue;
    Tensor t = e.tensor;
    const Matrix analytic = t.grad();
    GradCheckEntry entry{e.name};
    const std::size_t n = t.value().size();
    const std::size_t stride =
        (opts.max_entries_per_param == 0 || n <= opts.max_entries_per_param) ? 1 : n / opts.max_entries_per_param;
    for (std::size_t i = 0; i < n; i += stride) {
      Real& x = t.mutable_value().data()[i];
      const Real saved = x;
      Real plus = 0.0, minus = 0.0;
      {
        NoGradGuard ng;
        x = saved + opts.h;
        plus = f().item();
        x = saved - opts.h;
        minus = f().item();
      }
      x = saved;
      const Real numeric = (plus - minus) / (2.0 * opts.h);
      const Real a = analytic.data()[i];
      const Real abs_err = std::abs(a - numeric);
      const Real rel = abs_err / std::max({std::abs(a), std::abs(numeric), opts.denom_floor});
      entry.max_abs_err = std::max(entry.max_abs_err, abs_err);
      entry.max_rel_err = std::max(entry.max_rel_err, rel);
      ++entry.checked;
    }
    entry.passed = entry.max_rel_err <= opts.tol;
    report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
    report.passed = report.passed && entry.passed;
    report.params.push_back(std::move(entry));
  }
  store.zero_grad();
  return report;
}

}  // namespace gama
