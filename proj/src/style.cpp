#include "maxstyle/style.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "maxstyle/errors.hpp"

namespace maxstyle {

namespace {

void check_layer(const Tensor& f, const StyleParams& params, std::size_t layer) {
  if (f.rank() != 4) throw DimensionError("style transform: features must be [N,C,H,W], got " + shape_str(f.shape()));
  if (layer >= params.layers()) {
    throw ValidationError("style transform: layer " + std::to_string(layer) + " >= " +
                          std::to_string(params.layers()) + " style layers");
  }
  const std::size_t N = f.dim(0), C = f.dim(1);
  if (params.batch() != N || params.lambda_mix.numel() != N) {
    throw DimensionError("style transform: params built for batch " + std::to_string(params.batch()) +
                         ", features have axis 0 = " + std::to_string(N));
  }
  const Shape nc{N, C};
  if (params.eps_gamma[layer].shape() != nc || params.eps_beta[layer].shape() != nc) {
    throw DimensionError("style transform: eps at layer " + std::to_string(layer) + " is " +
                         shape_str(params.eps_gamma[layer].shape()) + ", features need " + shape_str(nc));
  }
}

// lambda * own + (1 - lambda) * donor, written as donor + lambda * (own - donor).
Tensor interpolate(const Tensor& own, const Tensor& donor, const Tensor& lambda) {
  return add(donor, scale_rows(sub(own, donor), lambda));
}

struct MixedStyle {
  Tensor normalized;
  Tensor gamma;
  Tensor beta;
};

MixedStyle mix(const Tensor& f, const StyleParams& params) {
  const StyleStats stats = instance_stats(f);
  Tensor normalized = normalize(f, stats);
  const Tensor donor_sigma = gather_rows(stats.sigma, params.donor);
  const Tensor donor_mu = gather_rows(stats.mu, params.donor);
  return {std::move(normalized), interpolate(stats.sigma, donor_sigma, params.lambda_mix),
          interpolate(stats.mu, donor_mu, params.lambda_mix)};
}

}  // namespace

StyleParams StyleParams::clone() const {
  StyleParams out;
  out.lambda_mix = lambda_mix.clone();
  for (const auto& t : eps_gamma) out.eps_gamma.push_back(t.clone());
  for (const auto& t : eps_beta) out.eps_beta.push_back(t.clone());
  out.donor = donor;
  out.gate = gate;
  return out;
}

std::vector<Tensor> StyleParams::trainable() {
  std::vector<Tensor> out;
  if (lambda_mix.requires_grad()) out.push_back(lambda_mix);
  for (std::size_t l = 0; l < layers(); ++l) {
    if (eps_gamma[l].requires_grad()) out.push_back(eps_gamma[l]);
    if (eps_beta[l].requires_grad()) out.push_back(eps_beta[l]);
  }
  return out;
}

void StyleParams::set_requires_grad(bool lambda, bool noise) {
  lambda_mix.set_requires_grad(lambda);
  for (auto& t : eps_gamma) t.set_requires_grad(noise);
  for (auto& t : eps_beta) t.set_requires_grad(noise);
}

void StyleParams::zero_grad() {
  lambda_mix.zero_grad();
  for (auto& t : eps_gamma) t.zero_grad();
  for (auto& t : eps_beta) t.zero_grad();
}

void StyleParams::clip_lambda() {
  for (float& v : lambda_mix.mutable_data()) v = std::clamp(v, 0.0f, 1.0f);
}

StyleStats instance_stats(const Tensor& f) {
  if (f.rank() != 4) throw DimensionError("instance_stats: expected [N,C,H,W], got " + shape_str(f.shape()));
  Tensor mu = spatial_mean(f);
  const Tensor centered = channel_affine(f, Tensor::full(mu.shape(), 1.0f), scale(mu, -1.0f));
  const Tensor var = spatial_mean(mul(centered, centered));
  Tensor sigma = sqrt(add_scalar(var, kStdEps * kStdEps));
  return {std::move(mu), std::move(sigma)};
}

Tensor normalize(const Tensor& f, const StyleStats& stats) {
  const Tensor inv_sigma = reciprocal(stats.sigma);
  return channel_affine(f, inv_sigma, scale(mul(stats.mu, inv_sigma), -1.0f));
}

Tensor mixstyle_transform(const Tensor& f, const StyleParams& params, std::size_t layer) {
  check_layer(f, params, layer);
  if (!params.gate[layer]) return f;
  const MixedStyle m = mix(f, params);
  return channel_affine(m.normalized, m.gamma, m.beta);
}

NoiseScale estimate_style_noise_scale(const Tensor& f) {
  if (f.rank() != 4) {
    throw DimensionError("estimate_style_noise_scale: expected [N,C,H,W], got " + shape_str(f.shape()));
  }
  const std::size_t N = f.dim(0), C = f.dim(1);
  if (N < 2) throw ValidationError("estimate_style_noise_scale: need at least 2 instances, got " + std::to_string(N));
  StyleStats stats;
  {
    NoGradGuard no_grad;
    stats = instance_stats(f);
  }
  auto batch_variance = [&](const Tensor& t) {
    std::vector<float> out(C);
    const auto v = t.data();
    for (std::size_t c = 0; c < C; ++c) {
      double m = 0.0;
      for (std::size_t n = 0; n < N; ++n) m += v[n * C + c];
      m /= static_cast<double>(N);
      double acc = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const double d = v[n * C + c] - m;
        acc += d * d;
      }
      out[c] = static_cast<float>(acc / static_cast<double>(N));
    }
    return Tensor({C}, std::move(out));
  };
  return {batch_variance(stats.sigma), batch_variance(stats.mu)};
}

StyleParams sample_style_params(SeededRng& rng, std::size_t batch, std::span<const std::size_t> layer_channels,
                                double p_gate) {
  if (p_gate < 0.0 || p_gate > 1.0) throw ValidationError("sample_style_params: p_gate outside [0,1]");
  if (batch == 0) throw ValidationError("sample_style_params: empty batch");
  StyleParams p;
  std::vector<float> lambda(batch);
  for (auto& v : lambda) v = static_cast<float>(rng.uniform());
  p.lambda_mix = Tensor({batch}, std::move(lambda));
  for (std::size_t c : layer_channels) {
    std::vector<float> g(batch * c), b(batch * c);
    for (auto& v : g) v = static_cast<float>(rng.normal());
    for (auto& v : b) v = static_cast<float>(rng.normal());
    p.eps_gamma.emplace_back(Shape{batch, c}, std::move(g));
    p.eps_beta.emplace_back(Shape{batch, c}, std::move(b));
  }
  p.donor = rng.permutation(batch);
  p.gate.resize(layer_channels.size());
  for (std::size_t l = 0; l < layer_channels.size(); ++l) p.gate[l] = rng.bernoulli(p_gate);
  return p;
}

Tensor maxstyle_transform(const Tensor& f, const StyleParams& params, const NoiseScale& scale_est, std::size_t layer) {
  check_layer(f, params, layer);
  if (!params.gate[layer]) return f;
  const std::size_t C = f.dim(1);
  if (scale_est.sigma_gamma.shape() != Shape{C} || scale_est.sigma_beta.shape() != Shape{C}) {
    throw DimensionError("maxstyle_transform: noise scale does not match feature axis 1 = " + std::to_string(C));
  }
  Tensor std_gamma, std_beta;
  {
    NoGradGuard no_grad;
    std_gamma = sqrt(scale_est.sigma_gamma);
    std_beta = sqrt(scale_est.sigma_beta);
  }
  const MixedStyle m = mix(f, params);
  const Tensor gamma = add(m.gamma, scale_cols(params.eps_gamma[layer], std_gamma));
  const Tensor beta = add(m.beta, scale_cols(params.eps_beta[layer], std_beta));
  return channel_affine(m.normalized, gamma, beta);
}

}  // namespace maxstyle
