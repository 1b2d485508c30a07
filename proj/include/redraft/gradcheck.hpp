#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "redraft/tensor.hpp"

namespace redraft {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  int worst_index = -1;
  int checked = 0;
};

// Compares reverse-mode gradients against central finite differences for a
// scalar loss. `build` must construct the loss from the given parameters and
// be deterministic in them. The relative error denominator is floored so
// near-zero gradients are compared absolutely against the floor.
inline GradCheckReport gradient_check(
    const std::function<Tensor(const std::vector<Tensor>&)>& build, std::vector<Tensor> params,
    double step = 1e-5) {
  GradCheckReport report;

  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  Tensor loss = build(params);
  check(loss.size() == 1, "gradient_check: loss must be scalar");
  backward(loss);

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = params[pi];
    for (int i = 0; i < p.size(); ++i) {
      const double orig = p.value()[i];
      p.value()[i] = orig + step;
      double up;
      {
        NoGradGuard ng;
        up = build(params).item();
      }
      p.value()[i] = orig - step;
      double down;
      {
        NoGradGuard ng;
        down = build(params).item();
      }
      p.value()[i] = orig;

      const double numeric = (up - down) / (2.0 * step);
      const double analytic = p.has_grad() ? p.grad()[i] : 0.0;
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-2});
      const double rel = std::abs(analytic - numeric) / denom;
      ++report.checked;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = "param" + std::to_string(pi);
        report.worst_index = i;
      }
    }
  }
  return report;
}

}  // namespace redraft
