#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "starry/ops.hpp"
#include "starry/rng.hpp"
#include "starry/tensor.hpp"

namespace starry::testing {

// Central finite differences of a scalar function with respect to one leaf,
// evaluated through the same f32 forward path the implementation uses. The
// divisor is the step actually realized after f32 rounding of x +- h.
inline std::vector<float> fd_gradient(const std::function<float()>& loss_fn,
                                      Tensor& leaf, float step = 1e-3f) {
  std::vector<float> grad(leaf.size());
  float* data = leaf.data();
  for (std::size_t i = 0; i < leaf.size(); ++i) {
    const float saved = data[i];
    const float xp = saved + step;
    const float xm = saved - step;
    data[i] = xp;
    const double hi = loss_fn();
    data[i] = xm;
    const double lo = loss_fn();
    data[i] = saved;
    grad[i] = static_cast<float>((hi - lo) /
                                 (static_cast<double>(xp) - static_cast<double>(xm)));
  }
  return grad;
}

// Relative-error check at the stated tolerance. The absolute floor covers
// the f32 quantization noise of the probe itself (loss rounding / step, on
// the order of a few 1e-4 for O(1) losses), below which the finite
// difference carries no signal.
inline bool grads_close(const std::vector<float>& analytic,
                        const std::vector<float>& fd, float rel_tol = 1e-3f,
                        float abs_floor = 1.25e-3f) {
  if (analytic.size() != fd.size()) return false;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const float scale = std::max(std::fabs(analytic[i]), std::fabs(fd[i]));
    const float err = std::fabs(analytic[i] - fd[i]);
    if (err > std::max(rel_tol * scale, abs_floor)) return false;
  }
  return true;
}

inline float max_grad_err(const std::vector<float>& analytic,
                          const std::vector<float>& fd) {
  float worst = 0.0f;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const float scale =
        std::max({std::fabs(analytic[i]), std::fabs(fd[i]), 1.0f});
    worst = std::max(worst, std::fabs(analytic[i] - fd[i]) / scale);
  }
  return worst;
}

// Projects a tensor to a scalar with fixed random weights so every output
// element receives an O(1) gradient.
inline Tensor random_projection_loss(const Tensor& value, Rng& rng) {
  Tensor weights(value.shape());
  for (float& w : weights.values()) {
    w = static_cast<float>(rng.uniform() < 0.5 ? -1.0 : 1.0) *
        static_cast<float>(rng.uniform(0.5, 1.5));
  }
  return sum(mul(value, weights));
}

}  // namespace starry::testing
