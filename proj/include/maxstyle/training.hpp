#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "maxstyle/adam.hpp"
#include "maxstyle/advstyle.hpp"
#include "maxstyle/network.hpp"
#include "maxstyle/synthdata.hpp"

namespace maxstyle {

struct TrainConfig {
  std::string preset = "custom";
  float lr = 1e-4f;
  std::size_t batch_size = 20;
  std::size_t epochs = 60;
  std::uint64_t seed = 0;
  ModelVariant variant;
  AdvConfig adv;
  float rec_weight = 1.0f;
  double p_gate = 0.5;
  ModelOptions model;

  void validate() const;
  /// True when the step adds the hard-example terms (wiring C with a style kind).
  bool augments() const;
  /// Ascent steps actually run: 0 under the no_advopt ablation.
  std::size_t effective_n_iter() const;
};

nlohmann::json to_json(const TrainConfig& cfg);
/// Starts from `base` and overrides the keys present; unknown keys are rejected.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

/// Named presets for the ablation and wiring comparisons.
struct Preset {
  std::string name;
  TrainConfig config;
};
const std::vector<Preset>& variant_registry();
TrainConfig preset(const std::string& name);

/// Loss components as logged; the rec terms already include rec_weight, so
/// total = l_seg_clean + l_rec_clean + l_seg_adv + l_rec_adv.
struct StepReport {
  float l_seg_clean = 0.0f;
  float l_rec_clean = 0.0f;
  float l_seg_adv = 0.0f;
  float l_rec_adv = 0.0f;
  float total = 0.0f;
  std::optional<AdvTrace> adv_trace;
};

struct LossTerms {
  Tensor l_seg_clean;
  std::optional<Tensor> l_rec_clean;
  std::optional<Tensor> l_seg_adv;
  std::optional<Tensor> l_rec_adv;
  Tensor total;
};

/// Builds the recorded outer objective for one batch. `x_hard` is the
/// constant hard example (wiring C) and `encoder_style` the sampled style for
/// wirings A/B; pass whichever the variant uses.
LossTerms compute_loss_terms(const Model& model, const Tensor& x, const IntTensor& y, const TrainConfig& cfg,
                             const Tensor* x_hard, const StyleParams* encoder_style);

/// Style draw plus (optional) adversarial search; returns x_hat* for wiring-C
/// augmenting variants, nullopt otherwise.
std::optional<Tensor> make_hard_example(const Model& model, const Tensor& x, const IntTensor& y,
                                        const TrainConfig& cfg, SeededRng& rng, AdvTrace* trace = nullptr);

/// One outer update: hard example, losses, backward, Adam over all parameters.
StepReport minimax_step(Model& model, AdamState& adam, const Tensor& x, const IntTensor& y, const TrainConfig& cfg,
                        SeededRng& rng);

struct LossRow {
  std::size_t epoch = 0;
  std::size_t step = 0;
  StepReport report;
};

void write_loss_trace_csv(std::ostream& out, const std::vector<LossRow>& rows);

struct TrainResult {
  Checkpoint final;
  Checkpoint best;
  std::size_t best_epoch = 0;
  double best_val_dice = 0.0;
  std::vector<double> val_dice;  // per epoch, index 0 = initialization
  std::vector<LossRow> trace;
};

struct TrainHooks {
  std::function<void(std::size_t epoch, double mean_loss, double val_dice)> on_epoch;
  std::function<void(std::size_t batch_id, const AdvTrace&)> on_adv_trace;
};

/// Epoch loop over the corpus train split, best checkpoint by mean
/// foreground Dice on val. `config_hash` is embedded in both checkpoints.
TrainResult train(const Corpus& corpus, const TrainConfig& cfg, const std::string& config_hash = "",
                  const TrainHooks& hooks = {});

/// Hex SHA-256 over the canonical JSON of the config.
std::string config_hash(const TrainConfig& cfg);

Model clone_model(const Model& m);

}  // namespace maxstyle
