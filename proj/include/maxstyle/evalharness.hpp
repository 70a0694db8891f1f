#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "maxstyle/network.hpp"
#include "maxstyle/synthdata.hpp"
#include "maxstyle/training.hpp"

namespace maxstyle {

/// 2|A and B| / (|A| + |B|) for one class; 1.0 when the class is absent from both.
double dice(std::span<const std::int32_t> pred, std::span<const std::int32_t> gt, int class_id);
double dice(const IntTensor& pred, const IntTensor& gt, int class_id);

struct Correlation {
  double value = 0.0;
  bool degenerate = false;  // a gradient field had zero variance
};

/// Pearson correlation of forward-difference gradient fields (x then y
/// components) of two [H,W] or [1,H,W] images.
Correlation gradient_field_correlation(const Tensor& a, const Tensor& b);

/// Argmax segmentation [N,H,W] through encoder and segmentation decoder only.
IntTensor predict(const Model& model, const Tensor& images, std::size_t chunk = 16);

struct SplitReport {
  std::string name;
  std::vector<std::vector<double>> per_class;  // [class][sample], class 0 included
  std::vector<double> foreground;              // per sample mean over classes 1..K-1

  std::size_t n() const { return foreground.size(); }
  double mean(int class_id) const;  // class_id < 0: foreground mean
  double stddev(int class_id) const;
};

struct EvalReport {
  std::string variant;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string corpus_fingerprint;
  std::size_t classes = kSceneClasses;
  std::vector<SplitReport> splits;

  const SplitReport& split(const std::string& name) const;
  bool has_split(const std::string& name) const;
  /// Unweighted mean over the OOD split means.
  double ood_mean() const;
  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
};

/// Per-split Dice CSV: variant,seed,split,class,dice_mean,dice_std,n
/// ("fg" rows carry the foreground mean).
void write_report_csv(std::ostream& out, const EvalReport& report);

double mean_foreground_dice(const Model& model, const Split& split);

/// Mean squared error of the clean (unstyled) reconstruction over a split.
double reconstruction_mse(const Model& model, const Split& split);

/// Evaluates every split present in the corpus. `jobs` > 1 evaluates splits
/// on worker threads; the report does not depend on it.
EvalReport evaluate_model(const Checkpoint& ckpt, const Corpus& corpus, const std::string& variant_name,
                          std::size_t jobs = 1);
/// Same, with predictions supplied per split (used for oracle predictors).
EvalReport evaluate_predictions(const Corpus& corpus, const std::vector<std::vector<IntTensor>>& predictions,
                                const std::string& variant_name);

/// Exact two-sided sign test p-value for `wins` positive and `losses`
/// negative paired differences (ties dropped).
double sign_test_p(std::size_t wins, std::size_t losses);

struct ComparisonRow {
  std::string variant;
  std::size_t runs = 0;
  double iid = 0.0;
  double ood = 0.0;
  std::vector<double> split_means;  // kOodSplits order
  double delta_iid = 0.0;           // relative to baseline
  double delta_ood = 0.0;
  std::size_t wins = 0, losses = 0, ties = 0;
  double p_value = 1.0;
};

struct ComparisonTable {
  std::string baseline;
  std::vector<ComparisonRow> rows;  // baseline first, then in first-seen order
};

/// Groups reports by variant (pooling seeds), pairs per-sample OOD
/// foreground Dice against the baseline with the same seed.
ComparisonTable compare_runs(const std::vector<EvalReport>& reports, const std::string& baseline_name);
void write_comparison_csv(std::ostream& out, const ComparisonTable& table);
std::string format_comparison_text(const ComparisonTable& table);

/// Trains (or reuses a cached run keyed by config and corpus) and evaluates
/// the best-validation checkpoint.
struct RunArtifacts {
  EvalReport report;
  std::filesystem::path checkpoint;
  bool cached = false;
};
RunArtifacts run_or_load(const Corpus& corpus, const TrainConfig& cfg, const std::filesystem::path& cache_dir);

}  // namespace maxstyle
