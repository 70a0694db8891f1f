#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "maxstyle/tensor.hpp"

namespace maxstyle {

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t step = 0;
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
};

/// One bias-corrected Adam step, in place: p -= lr * m_hat / (sqrt(v_hat) + eps).
/// Moment buffers are created on the first call and must keep their shapes.
void adam_update(std::span<Tensor> params, std::span<const Tensor> grads, AdamState& state, double lr);

/// Same, reading each parameter's accumulated gradient (absent = zero).
void adam_step(std::span<Tensor> params, AdamState& state, double lr);

}  // namespace maxstyle
