#include "maxstyle/advstyle.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "maxstyle/errors.hpp"

namespace maxstyle {

namespace {

double mean_abs(const std::vector<Tensor>& ts) {
  double acc = 0.0;
  std::size_t n = 0;
  for (const auto& t : ts) {
    for (float v : t.data()) acc += std::fabs(v);
    n += t.numel();
  }
  return n ? acc / static_cast<double>(n) : 0.0;
}

float seg_loss_at(const Model& model, const Tensor& z, const IntTensor& y, const StyleParams& params) {
  NoGradGuard no_grad;
  const Tensor x_hat = decode_img(model, z, &params);
  return softmax_cross_entropy(decode_seg(model, encode(model, x_hat)), y).item();
}

void require_wiring_c(const Model& model, const char* where) {
  if (model.variant.wiring != Wiring::C_decoder_style_aug) {
    throw ConfigurationError(std::string(where) + ": adversarial style search needs wiring C, model is " +
                             to_string(model.variant.wiring));
  }
}

}  // namespace

std::string to_string(AscentOptimizer o) { return o == AscentOptimizer::plain_ascent ? "plain_ascent" : "adam_ascent"; }

AscentOptimizer parse_ascent_optimizer(const std::string& s) {
  if (s == "plain_ascent") return AscentOptimizer::plain_ascent;
  if (s == "adam_ascent") return AscentOptimizer::adam_ascent;
  throw ConfigurationError("unknown ascent optimizer '" + s + "'");
}

void AdvConfig::validate() const {
  if (!(alpha > 0.0f)) throw ValidationError("AdvConfig: alpha must be positive");
}

StyleSummary summarize(const StyleParams& p) {
  StyleSummary s;
  s.mean_abs_eps_gamma = mean_abs(p.eps_gamma);
  s.mean_abs_eps_beta = mean_abs(p.eps_beta);
  double acc = 0.0;
  for (float v : p.lambda_mix.data()) acc += v;
  s.mean_lambda = p.lambda_mix.numel() ? acc / static_cast<double>(p.lambda_mix.numel()) : 0.0;
  return s;
}

void write_trace_csv_header(std::ostream& out) {
  out << "batch_id,iter,seg_loss,mean_abs_eps_gamma,mean_abs_eps_beta,mean_lambda\n";
}

void write_trace_csv_rows(std::ostream& out, std::size_t batch_id, const AdvTrace& trace) {
  for (std::size_t i = 0; i < trace.seg_loss.size(); ++i) {
    const auto& s = trace.summaries[i];
    out << batch_id << ',' << i << ',' << trace.seg_loss[i] << ',' << s.mean_abs_eps_gamma << ','
        << s.mean_abs_eps_beta << ',' << s.mean_lambda << '\n';
  }
}

StyleParams init_style_params(SeededRng& rng, std::size_t batch, const Model& model, double p_gate) {
  require_wiring_c(model, "init_style_params");
  StyleParams p = sample_style_params(rng, batch, model.style_layer_channels(), p_gate);
  const StyleKind kind = model.variant.style_kind;
  const bool pin_noise = kind == StyleKind::mixstyle || kind == StyleKind::none || model.variant.ablation.no_style_noise;
  const bool pin_mixing = kind == StyleKind::dsu_noise || model.variant.ablation.no_style_mixing;
  if (pin_noise) {
    for (auto& t : p.eps_gamma) std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0f);
    for (auto& t : p.eps_beta) std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0f);
  }
  if (pin_mixing) {
    std::fill(p.lambda_mix.mutable_data().begin(), p.lambda_mix.mutable_data().end(), 1.0f);
    for (std::size_t i = 0; i < p.donor.size(); ++i) p.donor[i] = i;
  }
  p.set_requires_grad(!pin_mixing, !pin_noise);
  return p;
}

AscentResult ascent_step_from_latent(const Model& model, const Tensor& z, const IntTensor& y,
                                     const StyleParams& params, const AdvConfig& cfg, AdamState* adam) {
  cfg.validate();
  FrozenParameters frozen(model);
  AscentResult out{params.clone(), 0.0f};
  out.params.zero_grad();

  Tape::current().clear();
  const Tensor x_hat = decode_img(model, z, &out.params);
  const Tensor loss = softmax_cross_entropy(decode_seg(model, encode(model, x_hat)), y);
  out.seg_loss = loss.item();
  backward(loss);

  std::vector<Tensor> trainable = out.params.trainable();
  if (trainable.empty()) return out;
  if (cfg.optimizer == AscentOptimizer::plain_ascent || adam == nullptr) {
    for (auto& t : trainable) {
      if (!t.has_grad()) continue;
      auto data = t.mutable_data();
      const auto g = t.grad();
      for (std::size_t i = 0; i < data.size(); ++i) data[i] += cfg.alpha * g[i];
    }
  } else {
    // Ascent on L is descent on -L.
    std::vector<Tensor> neg;
    neg.reserve(trainable.size());
    for (const auto& t : trainable) {
      Tensor g = t.grad_tensor();
      for (float& v : g.mutable_data()) v = -v;
      neg.push_back(std::move(g));
    }
    adam_update(trainable, neg, *adam, cfg.alpha);
  }
  out.params.clip_lambda();
  out.params.zero_grad();
  return out;
}

AscentResult ascent_step(const Model& model, const Tensor& x, const IntTensor& y, const StyleParams& params,
                         const AdvConfig& cfg, AdamState* adam) {
  require_wiring_c(model, "ascent_step");
  Tensor z;
  {
    NoGradGuard no_grad;
    z = encode(model, x);
  }
  return ascent_step_from_latent(model, z, y, params, cfg, adam);
}

OptimizedStyles optimize_styles(const Model& model, const Tensor& x, const IntTensor& y, const StyleParams& init,
                                const AdvConfig& cfg, SeededRng& rng) {
  require_wiring_c(model, "optimize_styles");
  cfg.validate();
  Tensor z;
  {
    NoGradGuard no_grad;
    z = encode(model, x);
  }
  OptimizedStyles out{init.clone(), {}};
  out.trace.initial = init.clone();
  out.trace.all_gates_off = std::none_of(init.gate.begin(), init.gate.end(), [](bool g) { return g; });
  AdamState adam;
  for (std::size_t it = 0; it < cfg.n_iter; ++it) {
    if (cfg.resample_donor && it > 0) {
      // Keep pinned (identity) donors pinned.
      if (out.params.lambda_mix.requires_grad()) out.params.donor = rng.permutation(out.params.batch());
    }
    out.trace.summaries.push_back(summarize(out.params));
    AscentResult step = ascent_step_from_latent(model, z, y, out.params, cfg, &adam);
    out.trace.seg_loss.push_back(step.seg_loss);
    out.params = std::move(step.params);
  }
  out.trace.summaries.push_back(summarize(out.params));
  out.trace.seg_loss.push_back(seg_loss_at(model, z, y, out.params));
  out.trace.final = out.params.clone();
  return out;
}

OptimizedStyles optimize_styles(const Model& model, const Tensor& x, const IntTensor& y, const AdvConfig& cfg,
                                SeededRng& rng) {
  const StyleParams init = init_style_params(rng, x.dim(0), model);
  return optimize_styles(model, x, y, init, cfg, rng);
}

Tensor generate_hard_example(const Model& model, const Tensor& x, const StyleParams& params) {
  NoGradGuard no_grad;
  return decode_img(model, encode(model, x), &params).detach();
}

}  // namespace maxstyle
