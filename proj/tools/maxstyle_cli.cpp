// maxstyle: corpus generation, training, evaluation and augmentation previews.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "maxstyle/advstyle.hpp"
#include "maxstyle/errors.hpp"
#include "maxstyle/evalharness.hpp"
#include "maxstyle/experiment.hpp"
#include "maxstyle/synthdata.hpp"
#include "maxstyle/training.hpp"

namespace fs = std::filesystem;
using namespace maxstyle;

namespace {

struct Common {
  std::string config;
  std::string preset;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;
  std::size_t jobs = 1;
  bool allow_mismatch = false;
};

ExperimentConfig resolve_config(const Common& c) {
  ExperimentConfig cfg =
      c.config.empty() ? experiment_from_json(nlohmann::json::object(), c.preset) : load_experiment(c.config, c.preset);
  if (c.seed) cfg.train.seed = *c.seed;
  if (!c.out.empty()) cfg.out_dir = c.out;
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw IoError("cannot write " + path.string());
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

void prepare_out_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force) throw Error("E_EXISTS", dir.string() + " exists and is not empty (use --force to overwrite)");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
}

Corpus corpus_for(const std::string& corpus_dir, const ExperimentConfig& cfg, std::size_t jobs) {
  if (!corpus_dir.empty()) return load_corpus(corpus_dir);
  return build_splits(cfg.corpus, jobs);
}

int cmd_gen_data(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_experiment(c.config);
  if (c.seed) cfg.corpus.seed = *c.seed;
  const fs::path out = c.out.empty() ? fs::path(cfg.out_dir) / "corpus" : fs::path(c.out);
  prepare_out_dir(out, c.force);
  const Corpus corpus = build_splits(cfg.corpus, c.jobs);
  save_corpus(out, corpus);
  write_text(out / "provenance.json",
             nlohmann::json{{"config_hash", cfg.hash()}, {"corpus_fingerprint", corpus.fingerprint()}}.dump(2) + "\n");
  for (const auto& s : corpus.splits) std::cout << s.name << ": " << s.samples.size() << " samples\n";
  std::cout << "corpus " << corpus.fingerprint() << " written to " << out.string() << "\n";
  return 0;
}

int cmd_train(const Common& c, const std::string& corpus_dir, std::optional<std::size_t> epochs) {
  ExperimentConfig cfg = resolve_config(c);
  if (epochs) cfg.train.epochs = *epochs;
  cfg.train.validate();
  const fs::path out(cfg.out_dir);
  prepare_out_dir(out, c.force);
  const Corpus corpus = corpus_for(corpus_dir, cfg, c.jobs);
  const std::string hash = cfg.hash();

  std::ofstream adv_csv;
  TrainHooks hooks;
  hooks.on_epoch = [](std::size_t epoch, double loss, double vd) {
    std::fprintf(stderr, "epoch %zu  loss %.5f  val_fg_dice %.4f\n", epoch, loss, vd);
  };
  if (cfg.train.augments()) {
    adv_csv.open(out / "adv_trace.csv");
    write_trace_csv_header(adv_csv);
    hooks.on_adv_trace = [&](std::size_t batch_id, const AdvTrace& t) { write_trace_csv_rows(adv_csv, batch_id, t); };
  }
  const TrainResult result = train(corpus, cfg.train, hash, hooks);
  save_checkpoint(out / "best.ckpt", result.best);
  save_checkpoint(out / "final.ckpt", result.final);
  std::ofstream trace(out / "loss_trace.csv");
  write_loss_trace_csv(trace, result.trace);
  write_text(out / "config.json", cfg.to_json().dump(2) + "\n");
  write_text(out / "run.json", nlohmann::json{{"config_hash", hash},
                                              {"corpus_fingerprint", corpus.fingerprint()},
                                              {"preset", cfg.train.preset},
                                              {"seed", cfg.train.seed},
                                              {"best_epoch", result.best_epoch},
                                              {"best_val_dice", result.best_val_dice},
                                              {"val_dice", result.val_dice}}
                                       .dump(2) +
                                   "\n");
  std::cout << "best epoch " << result.best_epoch << " (val fg dice " << result.best_val_dice << "), config "
            << hash << "\n";
  return 0;
}

void check_provenance(const fs::path& ckpt, const Corpus& corpus, bool allow_mismatch) {
  const fs::path run = ckpt.parent_path() / "run.json";
  if (!fs::exists(run)) {
    std::cerr << "warning: no run.json next to " << ckpt.string() << "; corpus provenance unchecked\n";
    return;
  }
  const auto j = read_json(run);
  const std::string recorded = j.value("corpus_fingerprint", "");
  if (recorded == corpus.fingerprint()) return;
  const std::string msg = "checkpoint was trained on corpus " + recorded.substr(0, 12) + "..., evaluating on " +
                          corpus.fingerprint().substr(0, 12) + "...";
  if (!allow_mismatch) throw Error("E_MISMATCH", msg + " (pass --allow-mismatch to proceed)");
  std::cerr << "warning: " << msg << "\n";
}

int cmd_eval(const Common& c, const std::string& ckpt_path, const std::string& corpus_dir, std::string name) {
  if (ckpt_path.empty() || corpus_dir.empty()) throw ValidationError("eval needs --ckpt and --corpus");
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const Corpus corpus = load_corpus(corpus_dir);
  check_provenance(ckpt_path, corpus, c.allow_mismatch);
  if (name.empty()) {
    const fs::path run = fs::path(ckpt_path).parent_path() / "run.json";
    name = fs::exists(run) ? read_json(run).value("preset", "model") : to_string(ckpt.model.variant.style_kind);
  }
  const EvalReport report = evaluate_model(ckpt, corpus, name, c.jobs);
  const fs::path out = c.out.empty() ? fs::path(ckpt_path).parent_path() : fs::path(c.out);
  fs::create_directories(out);
  std::ofstream csv(out / "report.csv");
  write_report_csv(csv, report);
  write_text(out / "report.json", report.to_json().dump() + "\n");
  std::printf("%s  IID %.4f  OOD %.4f\n", name.c_str(), report.split("test_iid").mean(-1), report.ood_mean());
  return 0;
}

int cmd_compare(const Common& c, const std::vector<std::string>& inputs, const std::string& baseline) {
  std::vector<EvalReport> reports;
  for (const auto& in : inputs) {
    fs::path p(in);
    if (fs::is_directory(p)) p /= "report.json";
    reports.push_back(EvalReport::from_json(read_json(p)));
  }
  const ComparisonTable table = compare_runs(reports, baseline);
  std::cout << format_comparison_text(table);
  if (!c.out.empty()) {
    fs::create_directories(c.out);
    std::ofstream csv(fs::path(c.out) / "comparison.csv");
    write_comparison_csv(csv, table);
    write_text(fs::path(c.out) / "comparison.txt", format_comparison_text(table));
  }
  return 0;
}

float single_seg_loss(const Model& m, const Tensor& x_hat, const IntTensor& y, std::size_t i) {
  NoGradGuard no_grad;
  const std::size_t per = x_hat.numel() / x_hat.dim(0);
  const std::size_t hw = y.numel() / y.shape[0];
  Tensor xi({1, x_hat.dim(1), x_hat.dim(2), x_hat.dim(3)},
            std::vector<float>(x_hat.data().begin() + i * per, x_hat.data().begin() + (i + 1) * per));
  IntTensor yi({1, y.shape[1], y.shape[2]},
               std::vector<std::int32_t>(y.data.begin() + i * hw, y.data.begin() + (i + 1) * hw));
  return softmax_cross_entropy(decode_seg(m, encode(m, xi)), yi).item();
}

int cmd_preview_aug(const Common& c, const std::string& ckpt_path, const std::string& corpus_dir, std::size_t n,
                    std::size_t n_iter, bool gates_off) {
  if (ckpt_path.empty() || corpus_dir.empty()) throw ValidationError("preview-aug needs --ckpt and --corpus");
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const Model& model = ckpt.model;
  if (model.variant.wiring != Wiring::C_decoder_style_aug) {
    throw ConfigurationError("preview-aug needs a wiring-C checkpoint, got " + to_string(model.variant.wiring));
  }
  const Corpus corpus = load_corpus(corpus_dir);
  check_provenance(ckpt_path, corpus, c.allow_mismatch);
  const Split& split = corpus.split("test_iid");
  const std::size_t batch = std::min(split.samples.size(), std::max<std::size_t>(n, 2));
  if (batch < 2) throw ValidationError("preview-aug: split needs at least 2 samples");
  std::vector<std::size_t> idx(batch);
  std::iota(idx.begin(), idx.end(), 0);
  const Tensor x = stack_images(split.samples, idx);
  const IntTensor y = stack_labels(split.samples, idx);

  SeededRng rng(c.seed.value_or(0));
  StyleParams init = init_style_params(rng, batch, model);
  if (gates_off) std::fill(init.gate.begin(), init.gate.end(), false);
  AdvConfig adv;
  adv.n_iter = n_iter;
  const OptimizedStyles opt = optimize_styles(model, x, y, init, adv, rng);

  Tensor plain, random_style;
  {
    NoGradGuard no_grad;
    plain = decode_img(model, encode(model, x));
  }
  random_style = generate_hard_example(model, x, init);
  const Tensor hard = generate_hard_example(model, x, opt.params);
  const IntTensor pred = predict(model, x);
  const IntTensor pred_hard = predict(model, hard);

  const fs::path out = c.out.empty() ? fs::path("preview") : fs::path(c.out);
  fs::create_directories(out);
  const std::size_t H = x.dim(2), W = x.dim(3), hw = H * W;
  auto slice = [&](const Tensor& t, std::size_t i) { return std::span<const float>(t.data().data() + i * hw, hw); };
  auto labels = [&](const IntTensor& l, std::size_t i) {
    std::vector<float> v(hw);
    for (std::size_t k = 0; k < hw; ++k) v[k] = static_cast<float>(l.data[i * hw + k]) / float(model.classes - 1);
    return v;
  };
  std::ofstream txt(out / "preview.txt");
  txt << "sample,grad_corr,grad_corr_degenerate,seg_loss_before,seg_loss_after\n";
  for (std::size_t i = 0; i < std::min(n, batch); ++i) {
    const std::string p = std::to_string(i) + "_";
    write_pgm(out / (p + "x.pgm"), slice(x, i), H, W);
    write_pgm(out / (p + "recon.pgm"), slice(plain, i), H, W);
    write_pgm(out / (p + "random.pgm"), slice(random_style, i), H, W);
    write_pgm(out / (p + "adv.pgm"), slice(hard, i), H, W);
    write_pgm(out / (p + "pred.pgm"), labels(pred, i), H, W);
    write_pgm(out / (p + "pred_adv.pgm"), labels(pred_hard, i), H, W);
    write_pgm(out / (p + "gt.pgm"), labels(y, i), H, W);
    const Tensor xi({H, W}, std::vector<float>(slice(x, i).begin(), slice(x, i).end()));
    const Tensor hi({H, W}, std::vector<float>(slice(hard, i).begin(), slice(hard, i).end()));
    const Correlation corr = gradient_field_correlation(xi, hi);
    txt << i << ',' << corr.value << ',' << corr.degenerate << ',' << single_seg_loss(model, random_style, y, i) << ','
        << single_seg_loss(model, hard, y, i) << '\n';
  }
  std::cout << "batch seg loss " << opt.trace.seg_loss.front() << " -> " << opt.trace.seg_loss.back() << "; wrote "
            << out.string() << "\n";
  return 0;
}

int cmd_sweep_niter(const Common& c, const std::string& corpus_dir) {
  Common cc = c;
  if (cc.preset.empty()) cc.preset = "maxstyle";
  ExperimentConfig cfg = resolve_config(cc);
  const Corpus corpus = corpus_for(corpus_dir, cfg, c.jobs);
  const fs::path out(cfg.out_dir);
  fs::create_directories(out);
  std::vector<EvalReport> reports;
  const std::string base_preset = cfg.train.preset;
  for (std::size_t n : {0, 1, 3, 5, 7}) {
    TrainConfig t = cfg.train;
    t.adv.n_iter = n;
    t.preset = base_preset + "_niter" + std::to_string(n);
    std::fprintf(stderr, "training %s\n", t.preset.c_str());
    RunArtifacts run = run_or_load(corpus, t, out / "runs");
    reports.push_back(std::move(run.report));
  }
  const ComparisonTable table = compare_runs(reports, base_preset + "_niter0");
  std::cout << format_comparison_text(table);
  std::ofstream csv(out / "sweep_niter.csv");
  write_comparison_csv(csv, table);
  write_text(out / "sweep_niter.txt", format_comparison_text(table));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"maxstyle: adversarial style-composition augmentation on a synthetic segmentation benchmark"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub, bool with_preset) {
    sub->add_option("--config", common.config, "experiment config (JSON)");
    if (with_preset) sub->add_option("--preset", common.preset, "named variant preset");
    sub->add_option("--seed", common.seed, "seed override");
    sub->add_option("--out", common.out, "output directory");
    sub->add_flag("--force", common.force, "overwrite a non-empty output directory");
    sub->add_option("--jobs", common.jobs, "worker threads for generation/evaluation")->check(CLI::PositiveNumber);
    sub->add_flag("--allow-mismatch", common.allow_mismatch, "proceed when corpus provenance differs");
  };

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic corpus");
  add_common(gen, false);

  std::string corpus_dir, ckpt_path, name, baseline = "baseline";
  std::optional<std::size_t> epochs;
  auto* tr = app.add_subcommand("train", "train one variant");
  add_common(tr, true);
  tr->add_option("--corpus", corpus_dir, "corpus directory (default: generate from config)");
  tr->add_option("--epochs", epochs, "epoch override");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on every split");
  add_common(ev, false);
  ev->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
  ev->add_option("--corpus", corpus_dir, "corpus directory")->required();
  ev->add_option("--name", name, "variant label for the report");

  std::vector<std::string> inputs;
  auto* cmp = app.add_subcommand("compare", "compare evaluation reports");
  add_common(cmp, false);
  cmp->add_option("reports", inputs, "report.json files or directories")->required()->expected(2, -1);
  cmp->add_option("--baseline", baseline, "baseline variant name");

  std::size_t n = 4, n_iter = 5;
  bool gates_off = false;
  auto* pv = app.add_subcommand("preview-aug", "write augmentation previews as PGM");
  add_common(pv, false);
  pv->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
  pv->add_option("--corpus", corpus_dir, "corpus directory")->required();
  pv->add_option("--n", n, "number of samples")->check(CLI::PositiveNumber);
  pv->add_option("--n-iter", n_iter, "ascent steps");
  pv->add_flag("--gates-off", gates_off, "disable every style layer");

  auto* sw = app.add_subcommand("sweep-niter", "train and compare n_iter in {0,1,3,5,7}");
  add_common(sw, true);
  sw->add_option("--corpus", corpus_dir, "corpus directory (default: generate from config)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "E_USAGE: " << e.what() << "\n";
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(common);
    if (tr->parsed()) return cmd_train(common, corpus_dir, epochs);
    if (ev->parsed()) return cmd_eval(common, ckpt_path, corpus_dir, name);
    if (cmp->parsed()) return cmd_compare(common, inputs, baseline);
    if (pv->parsed()) return cmd_preview_aug(common, ckpt_path, corpus_dir, n, n_iter, gates_off);
    if (sw->parsed()) return cmd_sweep_niter(common, corpus_dir);
  } catch (const Error& e) {
    std::cerr << e.code() << ": " << e.what() << "\n";
    return 1;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "E_IO: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "E_INTERNAL: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
