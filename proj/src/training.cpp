#include "maxstyle/training.hpp"

#include <cmath>
#include <filesystem>
#include <ostream>

#include "maxstyle/errors.hpp"
#include "maxstyle/evalharness.hpp"
#include "maxstyle/hash.hpp"

namespace maxstyle {

namespace {

// Child-seed streams of the training run.
constexpr std::uint64_t kModelStream = 1;
constexpr std::uint64_t kShuffleStream = 2;
constexpr std::uint64_t kStyleStream = 3;

bool uses_encoder_style(const TrainConfig& cfg) {
  return cfg.variant.wiring != Wiring::C_decoder_style_aug && cfg.variant.style_kind != StyleKind::none;
}

std::filesystem::path dump_nan_batch(const Tensor& x, const IntTensor& y, const StyleParams* style) {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "maxstyle-nan-dump";
  std::error_code ec;
  fs::create_directories(dir, ec);
  try {
    save_tns(dir / "x.tns", x);
    std::vector<float> lbl(y.data.begin(), y.data.end());
    save_tns(dir / "y.tns", Tensor(y.shape, std::move(lbl)));
    if (style) {
      save_tns(dir / "lambda.tns", style->lambda_mix);
      for (std::size_t l = 0; l < style->layers(); ++l) {
        save_tns(dir / ("eps_gamma_" + std::to_string(l) + ".tns"), style->eps_gamma[l]);
        save_tns(dir / ("eps_beta_" + std::to_string(l) + ".tns"), style->eps_beta[l]);
      }
    }
  } catch (const Error&) {
    // The dump is best effort; the NaN itself is the error being reported.
  }
  return dir;
}

}  // namespace

void TrainConfig::validate() const {
  if (batch_size < 2) throw ValidationError("batch_size must be >= 2 (noise-scale estimation needs two instances)");
  if (!(lr > 0.0f)) throw ValidationError("lr must be positive");
  if (!(rec_weight >= 0.0f)) throw ValidationError("rec_weight must be >= 0");
  if (!(p_gate >= 0.0 && p_gate <= 1.0)) throw ValidationError("p_gate must lie in [0,1]");
  adv.validate();
}

bool TrainConfig::augments() const {
  return variant.wiring == Wiring::C_decoder_style_aug && variant.style_kind != StyleKind::none;
}

std::size_t TrainConfig::effective_n_iter() const { return variant.ablation.no_advopt ? 0 : adv.n_iter; }

nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json model{{"widths", c.model.widths}};
  if (c.model.reconstruction) model["reconstruction"] = *c.model.reconstruction;
  return {{"preset", c.preset},
          {"lr", c.lr},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"seed", c.seed},
          {"variant", to_json(c.variant)},
          {"adv",
           {{"alpha", c.adv.alpha},
            {"n_iter", c.adv.n_iter},
            {"optimizer", to_string(c.adv.optimizer)},
            {"resample_donor", c.adv.resample_donor}}},
          {"rec_weight", c.rec_weight},
          {"p_gate", c.p_gate},
          {"model", std::move(model)}};
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
  if (!j.is_object()) throw ConfigurationError("train config: expected an object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "preset") c.preset = v.get<std::string>();
      else if (key == "lr") c.lr = v.get<float>();
      else if (key == "batch_size") c.batch_size = v.get<std::size_t>();
      else if (key == "epochs") c.epochs = v.get<std::size_t>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "variant") c.variant = variant_from_json(v);
      else if (key == "rec_weight") c.rec_weight = v.get<float>();
      else if (key == "p_gate") c.p_gate = v.get<double>();
      else if (key == "adv") {
        for (const auto& [ak, av] : v.items()) {
          if (ak == "alpha") c.adv.alpha = av.get<float>();
          else if (ak == "n_iter") {
            if (av.is_number_integer() && av.get<long long>() < 0) throw ValidationError("adv.n_iter must be >= 0");
            c.adv.n_iter = av.get<std::size_t>();
          } else if (ak == "optimizer") c.adv.optimizer = parse_ascent_optimizer(av.get<std::string>());
          else if (ak == "resample_donor") c.adv.resample_donor = av.get<bool>();
          else throw ConfigurationError("unknown adv key '" + ak + "'");
        }
      } else if (key == "model") {
        for (const auto& [mk, mv] : v.items()) {
          if (mk == "widths") c.model.widths = mv.get<std::array<std::size_t, 4>>();
          else if (mk == "reconstruction") c.model.reconstruction = mv.get<bool>();
          else throw ConfigurationError("unknown model key '" + mk + "'");
        }
      } else {
        throw ConfigurationError("unknown train config key '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigurationError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

const std::vector<Preset>& variant_registry() {
  static const std::vector<Preset> presets = [] {
    std::vector<Preset> out;
    auto add = [&](const std::string& name, Wiring w, StyleKind k, Ablation ab, std::size_t n_iter) {
      TrainConfig c;
      c.preset = name;
      c.variant = {w, k, ab};
      c.adv.n_iter = n_iter;
      out.push_back({name, c});
    };
    using W = Wiring;
    using K = StyleKind;
    add("baseline", W::C_decoder_style_aug, K::none, {}, 0);
    add("mixstyle_A", W::A_encoder_mixstyle, K::mixstyle, {}, 0);
    add("mixstyle_B", W::B_dualbranch_encoder_mixstyle, K::mixstyle, {}, 0);
    add("mixstyle_DA", W::C_decoder_style_aug, K::mixstyle, {true, false, true}, 0);
    add("dsu_C", W::C_decoder_style_aug, K::dsu_noise, {false, false, true}, 0);
    add("maxstyle", W::C_decoder_style_aug, K::maxstyle, {}, 5);
    add("maxstyle_no_noise", W::C_decoder_style_aug, K::maxstyle, {true, false, false}, 5);
    add("maxstyle_no_mixing", W::C_decoder_style_aug, K::maxstyle, {false, true, false}, 5);
    add("maxstyle_no_advopt", W::C_decoder_style_aug, K::maxstyle, {false, false, true}, 0);
    return out;
  }();
  return presets;
}

TrainConfig preset(const std::string& name) {
  for (const auto& p : variant_registry()) {
    if (p.name == name) return p.config;
  }
  std::string known;
  for (const auto& p : variant_registry()) known += (known.empty() ? "" : ", ") + p.name;
  throw LookupError("unknown preset '" + name + "' (known: " + known + ")");
}

LossTerms compute_loss_terms(const Model& model, const Tensor& x, const IntTensor& y, const TrainConfig& cfg,
                             const Tensor* x_hard, const StyleParams* encoder_style) {
  LossTerms t;
  const StyleParams* style = uses_encoder_style(cfg) ? encoder_style : nullptr;
  const Tensor z = encode(model, x, style);
  t.l_seg_clean = softmax_cross_entropy(decode_seg(model, z), y);
  Tensor total = t.l_seg_clean;
  const bool rec = model.has_image_decoder() && cfg.variant.wiring != Wiring::A_encoder_mixstyle;
  if (rec) {
    // Wiring B reconstructs from the clean latent; C's clean branch is ungated.
    const Tensor z_rec = style ? encode(model, x) : z;
    t.l_rec_clean = scale(mse(decode_img(model, z_rec), x), cfg.rec_weight);
    total = add(total, *t.l_rec_clean);
  }
  if (cfg.augments() && x_hard != nullptr) {
    const Tensor zh = encode(model, *x_hard);
    t.l_seg_adv = softmax_cross_entropy(decode_seg(model, zh), y);
    total = add(total, *t.l_seg_adv);
    if (rec) {
      t.l_rec_adv = scale(mse(decode_img(model, zh), x), cfg.rec_weight);
      total = add(total, *t.l_rec_adv);
    }
  }
  t.total = total;
  return t;
}

std::optional<Tensor> make_hard_example(const Model& model, const Tensor& x, const IntTensor& y,
                                        const TrainConfig& cfg, SeededRng& rng, AdvTrace* trace) {
  if (!cfg.augments()) return std::nullopt;
  const StyleParams init = init_style_params(rng, x.dim(0), model, cfg.p_gate);
  AdvConfig adv = cfg.adv;
  adv.n_iter = cfg.effective_n_iter();
  OptimizedStyles opt = optimize_styles(model, x, y, init, adv, rng);
  if (trace) *trace = opt.trace;
  return generate_hard_example(model, x, opt.params);
}

StepReport minimax_step(Model& model, AdamState& adam, const Tensor& x, const IntTensor& y, const TrainConfig& cfg,
                        SeededRng& rng) {
  if (model.variant != cfg.variant) {
    throw ConfigurationError("minimax_step: model variant does not match the training config");
  }
  if (x.dim(0) < 2) throw ValidationError("minimax_step: batch needs at least 2 instances");
  StepReport report;
  std::optional<StyleParams> encoder_style;
  std::optional<Tensor> x_hard;
  if (uses_encoder_style(cfg)) {
    encoder_style = sample_style_params(rng, x.dim(0), model.style_layer_channels(), cfg.p_gate);
  } else if (cfg.augments()) {
    AdvTrace trace;
    x_hard = make_hard_example(model, x, y, cfg, rng, &trace);
    report.adv_trace = std::move(trace);
  }

  Tape::current().clear();
  model.zero_grad();
  const LossTerms terms =
      compute_loss_terms(model, x, y, cfg, x_hard ? &*x_hard : nullptr, encoder_style ? &*encoder_style : nullptr);
  report.l_seg_clean = terms.l_seg_clean.item();
  report.l_rec_clean = terms.l_rec_clean ? terms.l_rec_clean->item() : 0.0f;
  report.l_seg_adv = terms.l_seg_adv ? terms.l_seg_adv->item() : 0.0f;
  report.l_rec_adv = terms.l_rec_adv ? terms.l_rec_adv->item() : 0.0f;
  report.total = terms.total.item();
  if (!std::isfinite(report.total)) {
    Tape::current().clear();
    const StyleParams* style = encoder_style ? &*encoder_style : (report.adv_trace ? &report.adv_trace->final : nullptr);
    const auto dir = dump_nan_batch(x, y, style);
    throw NumericError("non-finite loss (seg_clean=" + std::to_string(report.l_seg_clean) +
                       ", rec_clean=" + std::to_string(report.l_rec_clean) + ", seg_adv=" +
                       std::to_string(report.l_seg_adv) + ", rec_adv=" + std::to_string(report.l_rec_adv) +
                       "); batch and style parameters dumped to " + dir.string());
  }
  backward(terms.total);
  auto params = model.parameters();
  adam_step(params, adam, cfg.lr);
  model.zero_grad();
  return report;
}

void write_loss_trace_csv(std::ostream& out, const std::vector<LossRow>& rows) {
  out << "epoch,step,l_seg_clean,l_rec_clean,l_seg_adv,l_rec_adv,total\n";
  char buf[256];
  for (const auto& r : rows) {
    const auto& s = r.report;
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.epoch, r.step,
                  static_cast<double>(s.l_seg_clean), static_cast<double>(s.l_rec_clean),
                  static_cast<double>(s.l_seg_adv), static_cast<double>(s.l_rec_adv), static_cast<double>(s.total));
    out << buf;
  }
}

Model clone_model(const Model& m) {
  Checkpoint c{m, 0, 0, ""};
  return deserialize_checkpoint(serialize_checkpoint(c)).model;
}

std::string config_hash(const TrainConfig& cfg) { return sha256_hex(to_json(cfg).dump()); }

TrainResult train(const Corpus& corpus, const TrainConfig& cfg, const std::string& hash, const TrainHooks& hooks) {
  cfg.validate();
  if (!corpus.has_split("train") || corpus.split("train").samples.empty()) {
    throw ValidationError("train: corpus has no training samples");
  }
  const auto& train_set = corpus.split("train").samples;
  const std::string chash = hash.empty() ? config_hash(cfg) : hash;

  SeededRng model_rng(SeededRng::derive(cfg.seed, kModelStream));
  SeededRng shuffle_rng(SeededRng::derive(cfg.seed, kShuffleStream));
  SeededRng style_rng(SeededRng::derive(cfg.seed, kStyleStream));

  Model model = build_model(cfg.variant, train_set.front().image.dim(0), kSceneClasses, model_rng, cfg.model);
  AdamState adam;

  const Split* val = corpus.has_split("val") && !corpus.split("val").samples.empty() ? &corpus.split("val") : nullptr;
  auto validate_now = [&] { return val ? mean_foreground_dice(model, *val) : 0.0; };

  TrainResult result;
  result.val_dice.push_back(validate_now());
  result.best = {clone_model(model), cfg.seed, 0, chash};
  result.best_val_dice = result.val_dice.back();

  std::size_t step = 0;
  std::size_t batch_id = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto order = shuffle_rng.permutation(train_set.size());
    double loss_acc = 0.0;
    std::size_t loss_n = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      if (end - start < 2) break;  // a singleton tail cannot be style-mixed
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      const Tensor x = stack_images(train_set, idx);
      const IntTensor y = stack_labels(train_set, idx);
      StepReport r = minimax_step(model, adam, x, y, cfg, style_rng);
      if (hooks.on_adv_trace && r.adv_trace) hooks.on_adv_trace(batch_id, *r.adv_trace);
      r.adv_trace.reset();
      loss_acc += r.total;
      ++loss_n;
      result.trace.push_back({epoch, step++, r});
      ++batch_id;
    }
    const double vd = validate_now();
    result.val_dice.push_back(vd);
    if (vd > result.best_val_dice) {
      result.best_val_dice = vd;
      result.best_epoch = epoch;
      result.best = {clone_model(model), cfg.seed, epoch, chash};
    }
    if (hooks.on_epoch) hooks.on_epoch(epoch, loss_n ? loss_acc / static_cast<double>(loss_n) : 0.0, vd);
  }
  result.final = {std::move(model), cfg.seed, cfg.epochs, chash};
  return result;
}

}  // namespace maxstyle
