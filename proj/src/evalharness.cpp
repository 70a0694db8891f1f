#include "maxstyle/evalharness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>
#include <thread>

#include "maxstyle/errors.hpp"
#include "maxstyle/hash.hpp"

namespace maxstyle {

double dice(std::span<const std::int32_t> pred, std::span<const std::int32_t> gt, int class_id) {
  if (pred.size() != gt.size()) {
    throw DimensionError("dice: prediction has " + std::to_string(pred.size()) + " pixels, ground truth " +
                         std::to_string(gt.size()));
  }
  std::size_t a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] == class_id, g = gt[i] == class_id;
    a += p;
    b += g;
    both += p && g;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

double dice(const IntTensor& pred, const IntTensor& gt, int class_id) {
  if (pred.shape != gt.shape) {
    throw DimensionError("dice: shapes " + shape_str(pred.shape) + " and " + shape_str(gt.shape) + " differ");
  }
  return dice(std::span<const std::int32_t>(pred.data), std::span<const std::int32_t>(gt.data), class_id);
}

namespace {

std::pair<std::size_t, std::size_t> image_hw(const Tensor& t, const char* where) {
  if (t.rank() == 2) return {t.dim(0), t.dim(1)};
  if (t.rank() == 3 && t.dim(0) == 1) return {t.dim(1), t.dim(2)};
  throw DimensionError(std::string(where) + ": expected [H,W] or [1,H,W], got " + shape_str(t.shape()));
}

std::vector<double> gradient_field(std::span<const float> v, std::size_t h, std::size_t w) {
  std::vector<double> g;
  g.reserve(h * (w - 1) + (h - 1) * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x + 1 < w; ++x) g.push_back(double(v[y * w + x + 1]) - double(v[y * w + x]));
  for (std::size_t y = 0; y + 1 < h; ++y)
    for (std::size_t x = 0; x < w; ++x) g.push_back(double(v[(y + 1) * w + x]) - double(v[y * w + x]));
  return g;
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double acc = 0.0;
  for (double x : v) acc += (x - m) * (x - m);
  return std::sqrt(acc / static_cast<double>(v.size()));
}

}  // namespace

Correlation gradient_field_correlation(const Tensor& a, const Tensor& b) {
  const auto [h, w] = image_hw(a, "gradient_field_correlation");
  const auto [hb, wb] = image_hw(b, "gradient_field_correlation");
  if (h != hb || w != wb) {
    throw DimensionError("gradient_field_correlation: shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
  }
  if (h < 2 || w < 2) throw DimensionError("gradient_field_correlation: image must be at least 2x2");
  const auto ga = gradient_field(a.data(), h, w);
  const auto gb = gradient_field(b.data(), h, w);
  const double ma = mean_of(ga), mb = mean_of(gb);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ga.size(); ++i) {
    sab += (ga[i] - ma) * (gb[i] - mb);
    saa += (ga[i] - ma) * (ga[i] - ma);
    sbb += (gb[i] - mb) * (gb[i] - mb);
  }
  if (saa <= 0.0 || sbb <= 0.0) return {0.0, true};
  return {sab / std::sqrt(saa * sbb), false};
}

IntTensor predict(const Model& model, const Tensor& images, std::size_t chunk) {
  if (images.rank() != 4) throw DimensionError("predict: expected [N,C,H,W], got " + shape_str(images.shape()));
  NoGradGuard no_grad;
  const std::size_t n = images.dim(0);
  const std::size_t per = images.numel() / n;
  IntTensor out;
  out.shape = {n, images.dim(2), images.dim(3)};
  out.data.reserve(shape_numel(out.shape));
  const auto src = images.data();
  for (std::size_t s = 0; s < n; s += chunk) {
    const std::size_t m = std::min(chunk, n - s);
    Tensor part({m, images.dim(1), images.dim(2), images.dim(3)},
                std::vector<float>(src.begin() + s * per, src.begin() + (s + m) * per));
    const IntTensor p = argmax_channels(decode_seg(model, encode(model, part)));
    out.data.insert(out.data.end(), p.data.begin(), p.data.end());
  }
  return out;
}

double SplitReport::mean(int class_id) const {
  return class_id < 0 ? mean_of(foreground) : mean_of(per_class.at(static_cast<std::size_t>(class_id)));
}

double SplitReport::stddev(int class_id) const {
  return class_id < 0 ? std_of(foreground) : std_of(per_class.at(static_cast<std::size_t>(class_id)));
}

const SplitReport& EvalReport::split(const std::string& name) const {
  for (const auto& s : splits) {
    if (s.name == name) return s;
  }
  throw LookupError("report has no split '" + name + "'");
}

bool EvalReport::has_split(const std::string& name) const {
  return std::any_of(splits.begin(), splits.end(), [&](const SplitReport& s) { return s.name == name; });
}

double EvalReport::ood_mean() const {
  double acc = 0.0;
  std::size_t n = 0;
  for (const auto& name : kOodSplits) {
    if (!has_split(name)) continue;
    acc += split(name).mean(-1);
    ++n;
  }
  if (n == 0) throw LookupError("report has no OOD splits");
  return acc / static_cast<double>(n);
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json sj = nlohmann::json::array();
  for (const auto& s : splits) sj.push_back({{"name", s.name}, {"per_class", s.per_class}, {"foreground", s.foreground}});
  return {{"variant", variant},         {"seed", seed},       {"config_hash", config_hash},
          {"corpus", corpus_fingerprint}, {"classes", classes}, {"splits", std::move(sj)}};
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  EvalReport r;
  try {
    r.variant = j.at("variant").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.config_hash = j.at("config_hash").get<std::string>();
    r.corpus_fingerprint = j.at("corpus").get<std::string>();
    r.classes = j.at("classes").get<std::size_t>();
    for (const auto& s : j.at("splits")) {
      SplitReport sr;
      sr.name = s.at("name").get<std::string>();
      sr.per_class = s.at("per_class").get<std::vector<std::vector<double>>>();
      sr.foreground = s.at("foreground").get<std::vector<double>>();
      for (const auto& c : sr.per_class) {
        if (c.size() != sr.foreground.size()) throw ValidationError("report split " + sr.name + ": ragged counts");
      }
      r.splits.push_back(std::move(sr));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("report: ") + e.what());
  }
  return r;
}

void write_report_csv(std::ostream& out, const EvalReport& r) {
  out << "variant,seed,split,class,dice_mean,dice_std,n\n";
  char buf[64];
  auto row = [&](const SplitReport& s, const std::string& cls, int id) {
    out << r.variant << ',' << r.seed << ',' << s.name << ',' << cls << ',';
    std::snprintf(buf, sizeof buf, "%.6f,%.6f", s.mean(id), s.stddev(id));
    out << buf << ',' << s.n() << '\n';
  };
  for (const auto& s : r.splits) {
    for (std::size_t c = 0; c < s.per_class.size(); ++c) row(s, std::to_string(c), static_cast<int>(c));
    row(s, "fg", -1);
  }
}

double mean_foreground_dice(const Model& model, const Split& split) {
  if (split.samples.empty()) return 0.0;
  std::vector<std::size_t> idx(split.samples.size());
  std::iota(idx.begin(), idx.end(), 0);
  const IntTensor pred = predict(model, stack_images(split.samples, idx));
  const IntTensor gt = stack_labels(split.samples, idx);
  const std::size_t per = gt.numel() / idx.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::span<const std::int32_t> p(pred.data.data() + i * per, per), g(gt.data.data() + i * per, per);
    double fg = 0.0;
    for (int c = 1; c < static_cast<int>(model.classes); ++c) fg += dice(p, g, c);
    acc += fg / static_cast<double>(model.classes - 1);
  }
  return acc / static_cast<double>(idx.size());
}

double reconstruction_mse(const Model& model, const Split& split) {
  if (!model.has_image_decoder()) throw ConfigurationError("reconstruction_mse: model has no image decoder");
  if (split.samples.empty()) return 0.0;
  NoGradGuard no_grad;
  double acc = 0.0;
  constexpr std::size_t kChunk = 16;
  for (std::size_t s = 0; s < split.samples.size(); s += kChunk) {
    std::vector<std::size_t> idx(std::min(kChunk, split.samples.size() - s));
    std::iota(idx.begin(), idx.end(), s);
    const Tensor x = stack_images(split.samples, idx);
    acc += static_cast<double>(mse(decode_img(model, encode(model, x)), x).item()) * static_cast<double>(idx.size());
  }
  return acc / static_cast<double>(split.samples.size());
}

namespace {

SplitReport score_split(const Split& split, const IntTensor& pred, std::size_t classes) {
  SplitReport sr;
  sr.name = split.name;
  sr.per_class.assign(classes, {});
  const std::size_t n = split.samples.size();
  if (n == 0) return sr;
  const std::size_t per = pred.numel() / n;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& gt = split.samples[i].labels;
    if (gt.numel() != per) {
      throw ValidationError("evaluate: split " + split.name + " sample " + std::to_string(i) + " has " +
                            std::to_string(gt.numel()) + " pixels, prediction has " + std::to_string(per));
    }
    std::span<const std::int32_t> p(pred.data.data() + i * per, per);
    double fg = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
      const double d = dice(p, gt.data, static_cast<int>(c));
      sr.per_class[c].push_back(d);
      if (c > 0) fg += d;
    }
    sr.foreground.push_back(fg / static_cast<double>(classes - 1));
  }
  return sr;
}

}  // namespace

EvalReport evaluate_model(const Checkpoint& ckpt, const Corpus& corpus, const std::string& variant_name,
                          std::size_t jobs) {
  const Model& model = ckpt.model;
  for (const auto& s : corpus.splits) {
    for (const auto& smp : s.samples) {
      if (smp.image.rank() != 3 || smp.image.dim(0) != model.in_channels) {
        throw ValidationError("evaluate_model: split " + s.name + " has images " + shape_str(smp.image.shape()) +
                              ", model expects " + std::to_string(model.in_channels) + " channel(s)");
      }
    }
  }
  EvalReport r;
  r.variant = variant_name;
  r.seed = ckpt.seed;
  r.config_hash = ckpt.config_hash;
  r.corpus_fingerprint = corpus.fingerprint();
  r.classes = model.classes;
  r.splits.resize(corpus.splits.size());
  auto work = [&](std::size_t i) {
    const Split& s = corpus.splits[i];
    if (s.samples.empty()) {
      r.splits[i] = score_split(s, IntTensor{}, model.classes);
      return;
    }
    std::vector<std::size_t> idx(s.samples.size());
    std::iota(idx.begin(), idx.end(), 0);
    r.splits[i] = score_split(s, predict(model, stack_images(s.samples, idx)), model.classes);
  };
  jobs = std::max<std::size_t>(1, std::min(jobs, corpus.splits.size()));
  if (jobs == 1) {
    for (std::size_t i = 0; i < corpus.splits.size(); ++i) work(i);
  } else {
    // Tapes and grad mode are thread_local, so frozen models are safe to share.
    std::vector<std::jthread> pool;
    for (std::size_t j = 0; j < jobs; ++j) {
      pool.emplace_back([&, j] {
        for (std::size_t i = j; i < corpus.splits.size(); i += jobs) work(i);
      });
    }
  }
  return r;
}

EvalReport evaluate_predictions(const Corpus& corpus, const std::vector<std::vector<IntTensor>>& predictions,
                                const std::string& variant_name) {
  if (predictions.size() != corpus.splits.size()) {
    throw ValidationError("evaluate_predictions: one prediction list per split required");
  }
  EvalReport r;
  r.variant = variant_name;
  r.corpus_fingerprint = corpus.fingerprint();
  for (std::size_t i = 0; i < corpus.splits.size(); ++i) {
    const auto& preds = predictions[i];
    if (preds.size() != corpus.splits[i].samples.size()) {
      throw ValidationError("evaluate_predictions: split " + corpus.splits[i].name + " count mismatch");
    }
    IntTensor all;
    for (const auto& p : preds) all.data.insert(all.data.end(), p.data.begin(), p.data.end());
    all.shape = {all.data.size()};
    r.splits.push_back(score_split(corpus.splits[i], all, r.classes));
  }
  return r;
}

double sign_test_p(std::size_t wins, std::size_t losses) {
  const std::size_t n = wins + losses;
  if (n == 0) return 1.0;
  const std::size_t k = std::min(wins, losses);
  // P(X <= k) for X ~ Binomial(n, 1/2), summed in log space.
  const double log_half_n = static_cast<double>(n) * std::log(0.5);
  const double lgn = std::lgamma(static_cast<double>(n) + 1.0);
  double tail = 0.0;
  for (std::size_t i = 0; i <= k; ++i) {
    const double lc = lgn - std::lgamma(double(i) + 1.0) - std::lgamma(double(n - i) + 1.0);
    tail += std::exp(lc + log_half_n);
  }
  return std::min(1.0, 2.0 * tail);
}

namespace {

std::vector<double> ood_samples(const EvalReport& r) {
  std::vector<double> v;
  for (const auto& name : kOodSplits) {
    if (!r.has_split(name)) continue;
    const auto& f = r.split(name).foreground;
    v.insert(v.end(), f.begin(), f.end());
  }
  return v;
}

double relative(double v, double base) { return base != 0.0 ? (v - base) / base : 0.0; }

}  // namespace

ComparisonTable compare_runs(const std::vector<EvalReport>& reports, const std::string& baseline_name) {
  if (reports.size() < 2) throw ValidationError("compare_runs: need at least two reports");
  for (const auto& r : reports) {
    if (r.corpus_fingerprint != reports.front().corpus_fingerprint) {
      throw ValidationError("compare_runs: report " + r.variant + " (seed " + std::to_string(r.seed) +
                            ") was evaluated on a different corpus");
    }
  }
  std::vector<std::string> order;
  std::map<std::string, std::vector<const EvalReport*>> groups;
  for (const auto& r : reports) {
    if (!groups.count(r.variant)) order.push_back(r.variant);
    groups[r.variant].push_back(&r);
  }
  if (!groups.count(baseline_name)) throw LookupError("compare_runs: no report for baseline '" + baseline_name + "'");
  order.erase(std::find(order.begin(), order.end(), baseline_name));
  order.insert(order.begin(), baseline_name);

  const auto& base_runs = groups[baseline_name];
  auto baseline_for = [&](std::uint64_t seed) {
    for (const auto* b : base_runs) {
      if (b->seed == seed) return b;
    }
    return base_runs.front();
  };

  ComparisonTable table;
  table.baseline = baseline_name;
  ComparisonRow base_row;
  for (const auto& name : order) {
    const auto& runs = groups[name];
    ComparisonRow row;
    row.variant = name;
    row.runs = runs.size();
    row.split_means.assign(kOodSplits.size(), 0.0);
    for (const auto* r : runs) {
      row.iid += r->split("test_iid").mean(-1);
      row.ood += r->ood_mean();
      for (std::size_t s = 0; s < kOodSplits.size(); ++s) row.split_means[s] += r->split(kOodSplits[s]).mean(-1);
      const auto mine = ood_samples(*r);
      const auto theirs = ood_samples(*baseline_for(r->seed));
      if (mine.size() != theirs.size()) throw ValidationError("compare_runs: per-sample vectors differ in length");
      for (std::size_t i = 0; i < mine.size(); ++i) {
        if (mine[i] > theirs[i]) ++row.wins;
        else if (mine[i] < theirs[i]) ++row.losses;
        else ++row.ties;
      }
    }
    const double k = static_cast<double>(runs.size());
    row.iid /= k;
    row.ood /= k;
    for (double& m : row.split_means) m /= k;
    row.p_value = sign_test_p(row.wins, row.losses);
    if (name == baseline_name) base_row = row;
    row.delta_iid = relative(row.iid, base_row.iid);
    row.delta_ood = relative(row.ood, base_row.ood);
    table.rows.push_back(std::move(row));
  }
  return table;
}

void write_comparison_csv(std::ostream& out, const ComparisonTable& t) {
  out << "variant,runs,iid,ood";
  for (const auto& s : kOodSplits) out << ',' << s;
  out << ",delta_iid,delta_ood,wins,losses,ties,p_value\n";
  char buf[64];
  for (const auto& r : t.rows) {
    out << r.variant << ',' << r.runs;
    std::snprintf(buf, sizeof buf, ",%.6f,%.6f", r.iid, r.ood);
    out << buf;
    for (double m : r.split_means) {
      std::snprintf(buf, sizeof buf, ",%.6f", m);
      out << buf;
    }
    std::snprintf(buf, sizeof buf, ",%.6f,%.6f", r.delta_iid, r.delta_ood);
    out << buf << ',' << r.wins << ',' << r.losses << ',' << r.ties;
    std::snprintf(buf, sizeof buf, ",%.6g\n", r.p_value);
    out << buf;
  }
}

std::string format_comparison_text(const ComparisonTable& t) {
  std::vector<std::vector<std::string>> cells;
  std::vector<std::string> head{"variant", "IID", "OOD"};
  for (const auto& s : kOodSplits) head.push_back(s);
  head.insert(head.end(), {"dIID", "dOOD", "p(sign)"});
  cells.push_back(head);
  char buf[64];
  auto fmt = [&](const char* f, double v) {
    std::snprintf(buf, sizeof buf, f, v);
    return std::string(buf);
  };
  for (const auto& r : t.rows) {
    std::vector<std::string> row{r.variant, fmt("%.4f", r.iid), fmt("%.4f", r.ood)};
    for (double m : r.split_means) row.push_back(fmt("%.4f", m));
    row.push_back(fmt("%+.1f%%", 100.0 * r.delta_iid));
    row.push_back(fmt("%+.1f%%", 100.0 * r.delta_ood));
    row.push_back(r.variant == t.baseline ? "-" : fmt("%.3g", r.p_value));
    cells.push_back(std::move(row));
  }
  std::vector<std::size_t> width(head.size(), 0);
  for (const auto& row : cells)
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  std::ostringstream out;
  for (const auto& row : cells) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c == 0) out << row[c] << std::string(width[c] - row[c].size(), ' ');
      else out << "  " << std::string(width[c] - row[c].size(), ' ') << row[c];
    }
    out << '\n';
  }
  return out.str();
}

RunArtifacts run_or_load(const Corpus& corpus, const TrainConfig& cfg, const std::filesystem::path& cache_dir) {
  namespace fs = std::filesystem;
  const std::string chash = config_hash(cfg);
  const std::string key = sha256_hex(chash + corpus.fingerprint()).substr(0, 24);
  std::error_code ec;
  fs::create_directories(cache_dir, ec);
  const fs::path ckpt_path = cache_dir / (cfg.preset + "-s" + std::to_string(cfg.seed) + "-" + key + ".ckpt");
  const fs::path report_path = cache_dir / (cfg.preset + "-s" + std::to_string(cfg.seed) + "-" + key + ".json");
  if (fs::exists(ckpt_path) && fs::exists(report_path)) {
    std::ifstream in(report_path);
    try {
      return {EvalReport::from_json(nlohmann::json::parse(in)), ckpt_path, true};
    } catch (const std::exception&) {
      // Fall through and retrain over a damaged cache entry.
    }
  }
  const TrainResult tr = train(corpus, cfg, chash);
  save_checkpoint(ckpt_path, tr.best);
  EvalReport report = evaluate_model(tr.best, corpus, cfg.preset);
  std::ofstream out(report_path);
  out << report.to_json().dump() << '\n';
  if (!out) throw IoError("cannot write " + report_path.string());
  return {std::move(report), ckpt_path, false};
}

}  // namespace maxstyle
