#pragma once

#include <cmath>
#include <vector>

#include "pepr/params.hpp"

namespace pepr {

struct OptimizerConfig {
  double base_lr = 6e-5;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const {
    require(base_lr > 0.0, "optimizer: base_lr must be > 0");
    require(weight_decay >= 0.0, "optimizer: weight_decay must be >= 0");
    require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "optimizer: betas must lie in [0, 1)");
    require(epsilon > 0.0, "optimizer: epsilon must be > 0");
  }
};

struct ScheduleConfig {
  double power = 1.0;
  double warmup_ratio = 1e-6;
  int warmup_iters = 1500;

  void validate() const {
    require(power > 0.0, "schedule: poly power must be > 0");
    require(warmup_ratio >= 0.0 && warmup_ratio <= 1.0, "schedule: warmup_ratio must lie in [0, 1]");
    require(warmup_iters >= 0, "schedule: warmup_iters must be >= 0");
  }
};

// Linear warmup from warmup_ratio * base_lr to base_lr, then polynomial decay
// reaching 0 at total_steps.
inline double lr_at(int step, int total_steps, double base_lr, const ScheduleConfig& s) {
  s.validate();
  require(total_steps > s.warmup_iters, "lr_at: total_steps must exceed warmup_iters");
  require(step >= 0 && step <= total_steps, "lr_at: step out of range");
  if (step < s.warmup_iters) {
    const double frac = static_cast<double>(step) / s.warmup_iters;
    return base_lr * (s.warmup_ratio + (1.0 - s.warmup_ratio) * frac);
  }
  const double progress = static_cast<double>(step - s.warmup_iters) / (total_steps - s.warmup_iters);
  return base_lr * std::pow(1.0 - progress, s.power);
}

inline bool decays(ParamKind k) { return k == ParamKind::weight || k == ParamKind::bias; }

// AdamW moments, one pair of buffers per parameter in store order.
struct AdamState {
  long step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

// Returns false, leaving parameters and state untouched, when any gradient is
// non-finite.
template <class T>
bool optimizer_step(ParameterStore<T>& store, AdamState& state, double lr, const OptimizerConfig& cfg) {
  auto& params = store.params();
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), {});
    state.v.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].var.size(), 0.0);
      state.v[i].assign(params[i].var.size(), 0.0);
    }
  }
  for (const auto& p : params)
    for (T g : p.var.grad())
      if (!std::isfinite(static_cast<double>(g))) return false;

  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto value = p.var.mutable_value();
    const auto grad = p.var.grad();
    const double wd = decays(p.kind) ? cfg.weight_decay : 0.0;
    for (std::size_t k = 0; k < value.size(); ++k) {
      const double g = grad.empty() ? 0.0 : static_cast<double>(grad[k]);
      double& m = state.m[i][k];
      double& v = state.v[i][k];
      m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
      v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
      const double mhat = m / bc1;
      const double vhat = v / bc2;
      const double pv = static_cast<double>(value[k]);
      value[k] = static_cast<T>(pv - lr * (mhat / (std::sqrt(vhat) + cfg.epsilon) + wd * pv));
    }
  }
  return true;
}

}  // namespace pepr
