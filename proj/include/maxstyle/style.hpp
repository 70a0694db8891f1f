#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "maxstyle/rng.hpp"
#include "maxstyle/tensor.hpp"

namespace maxstyle {

/// Floor inside the instance standard deviation: sigma = sqrt(var + kStdEps^2).
inline constexpr float kStdEps = 1e-6f;

/// Per-instance, per-channel spatial statistics of a feature map.
struct StyleStats {
  Tensor mu;     // [N,C]
  Tensor sigma;  // [N,C], >= kStdEps
};

/// Adversarial style state for one mini-batch.
///
/// `eps_gamma[l]` / `eps_beta[l]` are [N, C_l] for style layer l; channel
/// counts differ per layer so they are kept as one tensor per layer.
struct StyleParams {
  Tensor lambda_mix;                // [N], kept in [0,1]
  std::vector<Tensor> eps_gamma;    // L x [N, C_l]
  std::vector<Tensor> eps_beta;     // L x [N, C_l]
  std::vector<std::size_t> donor;   // permutation of [0, N)
  std::vector<bool> gate;           // L

  std::size_t layers() const { return gate.size(); }
  std::size_t batch() const { return donor.size(); }

  /// Deep copy; the copy's tensors are fresh leaves with the same flags.
  StyleParams clone() const;
  /// Every tensor that currently requires grad (lambda, then eps by layer).
  std::vector<Tensor> trainable();
  void set_requires_grad(bool lambda, bool noise);
  void zero_grad();
  void clip_lambda();
};

/// Batch spread of the style statistics at one layer. Holds variances.
struct NoiseScale {
  Tensor sigma_gamma;  // [C], variance over the batch of sigma[:,c]
  Tensor sigma_beta;   // [C], variance over the batch of mu[:,c]
};

StyleStats instance_stats(const Tensor& f);

/// (f - mu) / sigma per instance and channel.
Tensor normalize(const Tensor& f, const StyleStats& stats);

/// Linear interpolation of own and donor style statistics. Gate-off layers
/// pass `f` through untouched.
Tensor mixstyle_transform(const Tensor& f, const StyleParams& params, std::size_t layer);

/// Population variance across the batch of per-instance sigma and mu. The
/// result is a constant: it never carries gradient.
NoiseScale estimate_style_noise_scale(const Tensor& f);

/// lambda ~ U[0,1], eps ~ N(0,1), donor ~ uniform permutation,
/// gate[l] ~ Bernoulli(p_gate).
StyleParams sample_style_params(SeededRng& rng, std::size_t batch, std::span<const std::size_t> layer_channels,
                                double p_gate);

/// Mixed styles plus noise:
///   (gamma_mix + sqrt(var_gamma) * eps_gamma) * normalize(f)
///     + (beta_mix + sqrt(var_beta) * eps_beta)
/// `scale` must come from the same batch of features.
Tensor maxstyle_transform(const Tensor& f, const StyleParams& params, const NoiseScale& scale, std::size_t layer);

}  // namespace maxstyle
