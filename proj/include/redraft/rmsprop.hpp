#pragma once

#include <cmath>
#include <unordered_map>
#include <vector>

#include "redraft/tensor.hpp"

namespace redraft {

// RMSProp with one running mean of squared gradients per parameter.
// Update: p -= lr * g / sqrt(mean_sq + eps), mean_sq = decay*mean_sq + (1-decay)*g^2.
struct RmsProp {
  double lr = 2e-3;
  double decay = 0.9;
  double eps = 1e-8;
  double clip_norm = 0.0;  // global gradient-norm clip; <= 0 disables

  // keyed by parameter identity; named states are exported for resuming
  std::unordered_map<const TensorData*, std::vector<double>> mean_sq;

  RmsProp() = default;
  RmsProp(double lr_, double decay_, double eps_, double clip = 0.0)
      : lr(lr_), decay(decay_), eps(eps_), clip_norm(clip) {}

  std::vector<double>& state_for(const Tensor& p) {
    auto it = mean_sq.find(p.raw());
    if (it == mean_sq.end())
      it = mean_sq.emplace(p.raw(), std::vector<double>(p.size(), 0.0)).first;
    return it->second;
  }

  // Applies one update to the given parameters from their accumulated grads,
  // then leaves the grads untouched (callers zero them).
  void step(const std::vector<Tensor>& params) {
    double gscale = 1.0;
    if (clip_norm > 0.0) {
      double sq = 0.0;
      for (const auto& p : params) {
        if (!p.has_grad()) continue;
        for (double g : p.grad()) sq += g * g;
      }
      const double norm = std::sqrt(sq);
      if (norm > clip_norm) gscale = clip_norm / norm;
    }
    for (auto p : params) {
      auto& ms = state_for(p);
      const std::vector<double>* gp = p.has_grad() ? &p.grad() : nullptr;
      auto& val = p.value();
      for (std::size_t i = 0; i < val.size(); ++i) {
        const double g = (gp ? (*gp)[i] : 0.0) * gscale;
        ms[i] = decay * ms[i] + (1.0 - decay) * g * g;
        val[i] -= lr * g / std::sqrt(ms[i] + eps);
      }
    }
  }
};

}  // namespace redraft
