#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "maxstyle/rng.hpp"
#include "maxstyle/tensor.hpp"

namespace maxstyle {

inline constexpr std::size_t kSceneClasses = 4;  // bg, ring, disk, blob

struct SceneSpec {
  std::size_t height = 64;
  std::size_t width = 64;
  float noise_std = 0.03f;
};

struct Sample {
  Tensor image;       // [1,H,W], values in [0,1]
  IntTensor labels;   // [H,W], classes 0..3
  std::string domain_tag;
  std::uint64_t seed = 0;  // generation seed of the clean scene
};

enum class ShiftKind { bias_field, ghosting, spiking, motion, gamma, contrast, texture, invert };

std::string to_string(ShiftKind k);
ShiftKind parse_shift_kind(const std::string& s);

struct ShiftSpec {
  ShiftKind kind = ShiftKind::bias_field;
  float magnitude = 0.0f;
  std::uint64_t seed = 0;

  void validate() const;
  std::string tag() const;
};

/// Random ring + disk + blob scene. Degenerate geometry is redrawn.
Sample generate_sample(SeededRng& rng, const SceneSpec& spec = {});
/// Same, seeded directly; the sample records `seed`.
Sample generate_sample(std::uint64_t seed, const SceneSpec& spec = {});

/// Coefficients (c0..c5) of log-field c0 + c1 u + c2 v + c3 u^2 + c4 uv + c5 v^2 on u,v in [-1,1].
std::array<double, 6> bias_field_coefficients(float magnitude, std::uint64_t seed);
/// The log bias field sampled on an H x W grid, row-major.
std::vector<double> bias_field_log(std::size_t height, std::size_t width, float magnitude, std::uint64_t seed);

/// Integer spatial frequency (cycles per image along x, y) used by corrupt_spiking.
std::array<int, 2> spiking_frequency(std::uint64_t seed);
/// Offset direction (dx, dy) and step k used by corrupt_motion.
struct MotionKernel {
  int dx = 0;
  int dy = 0;
  int k = 0;
};
MotionKernel motion_kernel(float magnitude, std::uint64_t seed);
/// Axis (0 = rows, 1 = columns) along which corrupt_ghosting shifts.
int ghosting_axis(std::uint64_t seed);

// All image transforms take [C,H,W] (or [H,W]) tensors, return a fresh tensor
// clamped to [0,1] and are the identity at magnitude 0.
Tensor corrupt_bias_field(const Tensor& img, float magnitude, std::uint64_t seed);
Tensor corrupt_ghosting(const Tensor& img, float magnitude, std::uint64_t seed);
Tensor corrupt_spiking(const Tensor& img, float magnitude, std::uint64_t seed);
Tensor corrupt_motion(const Tensor& img, float magnitude, std::uint64_t seed);
Tensor apply_domain_style(const Tensor& img, ShiftKind kind, float magnitude, std::uint64_t seed);
Tensor apply_shift(const Tensor& img, const ShiftSpec& spec);

struct SplitCounts {
  std::size_t train = 200;
  std::size_t val = 30;
  std::size_t test_iid = 60;
  std::size_t corrupt_repeats = 1;
};

struct CorpusSpec {
  std::uint64_t seed = 0;
  SplitCounts counts;
  SceneSpec scene;
  float corrupt_magnitude = 0.5f;
  float site_magnitude = 0.5f;
  float sequence_magnitude = 0.3f;
};

nlohmann::json to_json(const CorpusSpec& spec);
CorpusSpec corpus_spec_from_json(const nlohmann::json& j);

struct SampleRecord {
  std::uint64_t scene_seed = 0;
  bool shifted = false;
  ShiftSpec shift;
  std::size_t source_index = 0;  // index into test_iid for shifted samples
};

struct Split {
  std::string name;
  std::vector<Sample> samples;
  std::vector<SampleRecord> records;
};

inline const std::array<std::string, 6> kSplitNames{"train",    "val",       "test_iid",
                                                    "test_corrupt", "test_site", "test_sequence"};
inline const std::array<std::string, 3> kOodSplits{"test_corrupt", "test_site", "test_sequence"};

struct Corpus {
  CorpusSpec spec;
  std::vector<Split> splits;  // kSplitNames order

  const Split& split(const std::string& name) const;
  bool has_split(const std::string& name) const;
  /// Manifest JSON: the CorpusSpec plus per-sample seeds and ShiftSpecs.
  nlohmann::json manifest() const;
  /// SHA-256 of the canonical manifest text.
  std::string fingerprint() const;
};

/// Builds all six splits. `jobs` > 1 generates samples on worker threads; the
/// result does not depend on it.
Corpus build_splits(const CorpusSpec& spec, std::size_t jobs = 1);

void save_corpus(const std::filesystem::path& dir, const Corpus& corpus);
Corpus load_corpus(const std::filesystem::path& dir);

/// Stacks sample images into [N,C,H,W] and label maps into [N,H,W].
Tensor stack_images(const std::vector<Sample>& samples, std::span<const std::size_t> index);
IntTensor stack_labels(const std::vector<Sample>& samples, std::span<const std::size_t> index);

/// 8-bit binary PGM (P5); values are clamped to [0,1] and scaled to 0..255.
void write_pgm(const std::filesystem::path& path, std::span<const float> values, std::size_t height,
               std::size_t width);
struct PgmImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;
};
PgmImage read_pgm(const std::filesystem::path& path);

}  // namespace maxstyle
