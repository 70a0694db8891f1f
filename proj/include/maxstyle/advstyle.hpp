#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "maxstyle/adam.hpp"
#include "maxstyle/network.hpp"
#include "maxstyle/style.hpp"

namespace maxstyle {

enum class AscentOptimizer { plain_ascent, adam_ascent };

std::string to_string(AscentOptimizer o);
AscentOptimizer parse_ascent_optimizer(const std::string& s);

struct AdvConfig {
  float alpha = 0.1f;
  std::size_t n_iter = 5;
  AscentOptimizer optimizer = AscentOptimizer::adam_ascent;
  bool resample_donor = false;

  void validate() const;
};

/// Magnitudes of the style parameters at one point of the inner loop.
struct StyleSummary {
  double mean_abs_eps_gamma = 0.0;
  double mean_abs_eps_beta = 0.0;
  double mean_lambda = 0.0;
};

StyleSummary summarize(const StyleParams& p);

struct AdvTrace {
  std::vector<float> seg_loss;          // n_iter + 1 entries, loss at each visited point
  std::vector<StyleSummary> summaries;  // same length
  StyleParams initial;
  StyleParams final;
  bool all_gates_off = false;
};

/// AdvTrace CSV rows: batch_id,iter,seg_loss,mean_abs_eps_gamma,mean_abs_eps_beta,mean_lambda
void write_trace_csv_header(std::ostream& out);
void write_trace_csv_rows(std::ostream& out, std::size_t batch_id, const AdvTrace& trace);

/// Random style init for a wiring-C model (gate probability 0.5). Lambda and
/// eps are marked differentiable unless the model's style kind or ablation
/// pins them: no noise pins eps to 0, no mixing pins lambda to 1.
StyleParams init_style_params(SeededRng& rng, std::size_t batch, const Model& model, double p_gate = 0.5);

struct AscentResult {
  StyleParams params;  // updated copy
  float seg_loss = 0.0f;  // L_seg at the incoming params
};

/// One ascent step on L_seg(D_s(E(D_i(E(x); params))), y). Model parameters
/// are frozen for the duration. `adam` carries Adam moments between steps
/// when cfg.optimizer is adam_ascent; it is ignored for plain ascent.
AscentResult ascent_step(const Model& model, const Tensor& x, const IntTensor& y, const StyleParams& params,
                         const AdvConfig& cfg, AdamState* adam = nullptr);

/// Same, with the clean latent z = E(x) supplied by the caller.
AscentResult ascent_step_from_latent(const Model& model, const Tensor& z, const IntTensor& y,
                                     const StyleParams& params, const AdvConfig& cfg, AdamState* adam);

struct OptimizedStyles {
  StyleParams params;
  AdvTrace trace;
};

/// n_iter ascent steps from `init`. n_iter = 0 returns `init` unchanged.
OptimizedStyles optimize_styles(const Model& model, const Tensor& x, const IntTensor& y, const StyleParams& init,
                                const AdvConfig& cfg, SeededRng& rng);

/// Draws the init with init_style_params and optimizes it.
OptimizedStyles optimize_styles(const Model& model, const Tensor& x, const IntTensor& y, const AdvConfig& cfg,
                                SeededRng& rng);

/// x_hat* = D_i(E(x); params), produced without recording, as plain data.
Tensor generate_hard_example(const Model& model, const Tensor& x, const StyleParams& params);

}  // namespace maxstyle
