#include "maxstyle/adam.hpp"

#include <cmath>
#include <string>

#include "maxstyle/errors.hpp"

namespace maxstyle {

void adam_update(std::span<Tensor> params, std::span<const Tensor> grads, AdamState& state, double lr) {
  if (params.size() != grads.size()) {
    throw DimensionError("adam_update: " + std::to_string(params.size()) + " parameters but " +
                         std::to_string(grads.size()) + " gradients");
  }
  if (state.m.empty() && state.step == 0) {
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), 0.0f);
      state.v.emplace_back(p.numel(), 0.0f);
    }
  }
  if (state.m.size() != params.size()) throw DimensionError("adam_update: state tracks a different parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i].shape() || state.m[i].size() != params[i].numel()) {
      throw DimensionError("adam_update: parameter " + std::to_string(i) + " has shape " +
                           shape_str(params[i].shape()) + ", gradient " + shape_str(grads[i].shape()));
    }
  }

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].mutable_data();
    const auto g = grads[i].data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double gk = g[k];
      const double mk = state.beta1 * m[k] + (1.0 - state.beta1) * gk;
      const double vk = state.beta2 * v[k] + (1.0 - state.beta2) * gk * gk;
      m[k] = static_cast<float>(mk);
      v[k] = static_cast<float>(vk);
      const double step = lr * (mk / c1) / (std::sqrt(vk / c2) + state.eps);
      p[k] = static_cast<float>(p[k] - step);
    }
  }
}

void adam_step(std::span<Tensor> params, AdamState& state, double lr) {
  std::vector<Tensor> grads;
  grads.reserve(params.size());
  for (const auto& p : params) grads.push_back(p.grad_tensor());
  adam_update(params, grads, state, lr);
}

}  // namespace maxstyle
