#include "maxstyle/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <thread>

#include "maxstyle/errors.hpp"
#include "maxstyle/hash.hpp"

namespace maxstyle {

namespace {

constexpr double kPi = std::numbers::pi;

// Stream ids for SeededRng::derive: split id, sub-stream, sample index.
std::uint64_t stream_id(std::uint64_t split, std::uint64_t sub, std::uint64_t index) {
  return (split << 48) | (sub << 32) | index;
}

float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

struct Plane {
  std::size_t channels, height, width;
};

Plane plane_of(const Tensor& img) {
  if (img.rank() == 2) return {1, img.dim(0), img.dim(1)};
  if (img.rank() == 3) return {img.dim(0), img.dim(1), img.dim(2)};
  throw DimensionError("image transform: expected [H,W] or [C,H,W], got " + shape_str(img.shape()));
}

void check_magnitude(const char* where, float m) {
  if (!(m >= 0.0f) || m > 1.0f) {
    throw ValidationError(std::string(where) + ": magnitude must lie in [0,1], got " + std::to_string(m));
  }
}

Tensor pointwise(const Tensor& img, const auto& fn) {
  plane_of(img);
  Tensor out = img.clone();
  for (float& v : out.mutable_data()) v = clamp01(fn(static_cast<double>(v)));
  return out;
}

std::size_t count_class(const IntTensor& labels, int cls) {
  return static_cast<std::size_t>(std::count(labels.data.begin(), labels.data.end(), cls));
}

}  // namespace

std::string to_string(ShiftKind k) {
  switch (k) {
    case ShiftKind::bias_field: return "bias_field";
    case ShiftKind::ghosting: return "ghosting";
    case ShiftKind::spiking: return "spiking";
    case ShiftKind::motion: return "motion";
    case ShiftKind::gamma: return "gamma";
    case ShiftKind::contrast: return "contrast";
    case ShiftKind::texture: return "texture";
    case ShiftKind::invert: return "invert";
  }
  return "?";
}

ShiftKind parse_shift_kind(const std::string& s) {
  for (auto k : {ShiftKind::bias_field, ShiftKind::ghosting, ShiftKind::spiking, ShiftKind::motion, ShiftKind::gamma,
                 ShiftKind::contrast, ShiftKind::texture, ShiftKind::invert}) {
    if (to_string(k) == s) return k;
  }
  throw ConfigurationError("unknown shift kind '" + s + "'");
}

void ShiftSpec::validate() const { check_magnitude("ShiftSpec", magnitude); }

std::string ShiftSpec::tag() const {
  char buf[32];
  std::snprintf(buf, sizeof buf, "@%.2f", static_cast<double>(magnitude));
  return to_string(kind) + buf;
}

Sample generate_sample(SeededRng& rng, const SceneSpec& spec) {
  const std::size_t H = spec.height, W = spec.width;
  if (H < 16 || W < 16) throw ValidationError("generate_sample: scene must be at least 16x16");
  const double S = static_cast<double>(std::min(H, W));

  for (int attempt = 0; attempt < 1000; ++attempt) {
    const double cx = W * 0.5 + rng.uniform(-0.08, 0.08) * S;
    const double cy = H * 0.5 + rng.uniform(-0.08, 0.08) * S;
    const double a = rng.uniform(0.16, 0.26) * S;
    const double b = rng.uniform(0.16, 0.26) * S;
    const double theta = rng.uniform(0.0, kPi);
    const double inner = 1.0 - rng.uniform(0.3, 0.45);
    const double r_blob = rng.uniform(0.08, 0.13) * S;
    const double phi = rng.uniform(0.0, 2.0 * kPi);
    const double d_blob = std::max(a, b) + 0.5 * r_blob;
    const double bx = cx + d_blob * std::cos(phi);
    const double by = cy + d_blob * std::sin(phi);

    const double i_bg = 0.2 + rng.uniform(-0.03, 0.03);
    const double i_ring = 0.45 + rng.uniform(-0.05, 0.05);
    const double i_disk = 0.85 + rng.uniform(-0.05, 0.05);
    const double i_blob = 0.65 + rng.uniform(-0.05, 0.05);
    // Smooth background texture: three low-frequency waves.
    std::array<std::array<double, 4>, 3> waves{};
    for (auto& w : waves) w = {rng.uniform(0.5, 2.5), rng.uniform(0.5, 2.5), rng.uniform(0.0, 2.0 * kPi), 0.02};

    IntTensor labels = IntTensor::zeros({H, W});
    std::vector<float> img(H * W);
    const double ct = std::cos(theta), st = std::sin(theta);
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
        const double u = dx * ct + dy * st, v = -dx * st + dy * ct;
        const double e = (u / a) * (u / a) + (v / b) * (v / b);
        const double ei = e / (inner * inner);
        const double db = std::hypot(x + 0.5 - bx, y + 0.5 - by);
        int cls = 0;
        if (ei <= 1.0) cls = 2;
        else if (e <= 1.0) cls = 1;
        else if (db <= r_blob) cls = 3;
        labels.data[y * W + x] = cls;
        double base = i_bg;
        if (cls == 1) base = i_ring;
        else if (cls == 2) base = i_disk;
        else if (cls == 3) base = i_blob;
        else {
          for (const auto& w : waves) {
            base += w[3] * std::sin(2.0 * kPi * (w[0] * x / W + w[1] * y / H) + w[2]);
          }
        }
        img[y * W + x] = static_cast<float>(base);
      }
    }
    for (auto& v : img) v = clamp01(v + spec.noise_std * rng.normal());

    bool ok = true;
    for (int c = 1; c < static_cast<int>(kSceneClasses); ++c) ok = ok && count_class(labels, c) >= 8;
    if (!ok) continue;
    Sample s;
    s.image = Tensor({1, H, W}, std::move(img));
    s.labels = std::move(labels);
    s.domain_tag = "source";
    s.seed = rng.seed();
    return s;
  }
  throw ValidationError("generate_sample: could not place a non-degenerate scene");
}

Sample generate_sample(std::uint64_t seed, const SceneSpec& spec) {
  SeededRng rng(seed);
  return generate_sample(rng, spec);
}

std::array<double, 6> bias_field_coefficients(float magnitude, std::uint64_t seed) {
  SeededRng rng(seed);
  std::array<double, 6> c{};
  for (auto& v : c) v = rng.uniform(-magnitude, magnitude);
  return c;
}

std::vector<double> bias_field_log(std::size_t height, std::size_t width, float magnitude, std::uint64_t seed) {
  const auto c = bias_field_coefficients(magnitude, seed);
  std::vector<double> field(height * width);
  for (std::size_t y = 0; y < height; ++y) {
    const double v = height > 1 ? -1.0 + 2.0 * y / (height - 1) : 0.0;
    for (std::size_t x = 0; x < width; ++x) {
      const double u = width > 1 ? -1.0 + 2.0 * x / (width - 1) : 0.0;
      field[y * width + x] = c[0] + c[1] * u + c[2] * v + c[3] * u * u + c[4] * u * v + c[5] * v * v;
    }
  }
  return field;
}

Tensor corrupt_bias_field(const Tensor& img, float magnitude, std::uint64_t seed) {
  check_magnitude("corrupt_bias_field", magnitude);
  const Plane p = plane_of(img);
  if (magnitude == 0.0f) return pointwise(img, [](double v) { return v; });
  const auto field = bias_field_log(p.height, p.width, magnitude, seed);
  Tensor out = img.clone();
  auto d = out.mutable_data();
  const std::size_t hw = p.height * p.width;
  for (std::size_t c = 0; c < p.channels; ++c) {
    for (std::size_t i = 0; i < hw; ++i) d[c * hw + i] = clamp01(d[c * hw + i] * std::exp(field[i]));
  }
  return out;
}

int ghosting_axis(std::uint64_t seed) {
  SeededRng rng(seed);
  return static_cast<int>(rng.below(2));
}

Tensor corrupt_ghosting(const Tensor& img, float magnitude, std::uint64_t seed) {
  check_magnitude("corrupt_ghosting", magnitude);
  const Plane p = plane_of(img);
  if (magnitude == 0.0f) return pointwise(img, [](double v) { return v; });
  const int axis = ghosting_axis(seed);
  const std::size_t len = axis == 0 ? p.height : p.width;
  const std::size_t s1 = len / 4, s2 = len / 2;
  const auto src = img.data();
  Tensor out = img.clone();
  auto d = out.mutable_data();
  const double norm = 1.0 + 2.0 * magnitude;
  for (std::size_t c = 0; c < p.channels; ++c) {
    const std::size_t base = c * p.height * p.width;
    for (std::size_t y = 0; y < p.height; ++y) {
      for (std::size_t x = 0; x < p.width; ++x) {
        auto at = [&](std::size_t shift) {
          // Value that lands on (y, x) after a circular shift by `shift`.
          const std::size_t yy = axis == 0 ? (y + len - shift) % len : y;
          const std::size_t xx = axis == 1 ? (x + len - shift) % len : x;
          return static_cast<double>(src[base + yy * p.width + xx]);
        };
        const double v = at(0) + magnitude * (at(s1) + at(s2));
        d[base + y * p.width + x] = clamp01(v / norm);
      }
    }
  }
  return out;
}

std::array<int, 2> spiking_frequency(std::uint64_t seed) {
  SeededRng rng(seed);
  const double angle = rng.uniform(0.0, kPi);
  const double radius = 6.0 + static_cast<double>(rng.below(5));
  std::array<int, 2> f{static_cast<int>(std::lround(radius * std::cos(angle))),
                       static_cast<int>(std::lround(radius * std::sin(angle)))};
  if (f[0] == 0 && f[1] == 0) f[0] = 6;
  return f;
}

Tensor corrupt_spiking(const Tensor& img, float magnitude, std::uint64_t seed) {
  check_magnitude("corrupt_spiking", magnitude);
  const Plane p = plane_of(img);
  if (magnitude == 0.0f) return pointwise(img, [](double v) { return v; });
  const auto f = spiking_frequency(seed);
  SeededRng rng(SeededRng::derive(seed, 1));
  const double phase = rng.uniform(0.0, 2.0 * kPi);
  Tensor out = img.clone();
  auto d = out.mutable_data();
  for (std::size_t c = 0; c < p.channels; ++c) {
    for (std::size_t y = 0; y < p.height; ++y) {
      for (std::size_t x = 0; x < p.width; ++x) {
        const double arg = 2.0 * kPi * (double(f[0]) * x / p.width + double(f[1]) * y / p.height) + phase;
        float& v = d[(c * p.height + y) * p.width + x];
        v = clamp01(v + magnitude * std::sin(arg));
      }
    }
  }
  return out;
}

MotionKernel motion_kernel(float magnitude, std::uint64_t seed) {
  static constexpr std::array<std::array<int, 2>, 4> kDirs{{{1, 0}, {0, 1}, {1, 1}, {1, -1}}};
  SeededRng rng(seed);
  const auto dir = kDirs[rng.below(kDirs.size())];
  return {dir[0], dir[1], static_cast<int>(std::ceil(3.0 * magnitude))};
}

Tensor corrupt_motion(const Tensor& img, float magnitude, std::uint64_t seed) {
  check_magnitude("corrupt_motion", magnitude);
  const Plane p = plane_of(img);
  if (magnitude == 0.0f) return pointwise(img, [](double v) { return v; });
  const MotionKernel mk = motion_kernel(magnitude, seed);
  const auto src = img.data();
  Tensor out = img.clone();
  auto d = out.mutable_data();
  const long H = static_cast<long>(p.height), W = static_cast<long>(p.width);
  for (std::size_t c = 0; c < p.channels; ++c) {
    const std::size_t base = c * p.height * p.width;
    for (long y = 0; y < H; ++y) {
      for (long x = 0; x < W; ++x) {
        double acc = 0.0;
        for (int s : {-mk.k, 0, mk.k}) {
          const long yy = std::clamp(y + s * mk.dy, 0L, H - 1);
          const long xx = std::clamp(x + s * mk.dx, 0L, W - 1);
          acc += src[base + yy * W + xx];
        }
        d[base + y * W + x] = clamp01(acc / 3.0);
      }
    }
  }
  return out;
}

Tensor apply_domain_style(const Tensor& img, ShiftKind kind, float magnitude, std::uint64_t seed) {
  check_magnitude("apply_domain_style", magnitude);
  const Plane p = plane_of(img);
  if (magnitude == 0.0f) return pointwise(img, [](double v) { return v; });
  SeededRng rng(seed);
  switch (kind) {
    case ShiftKind::gamma: {
      const double u = rng.uniform(-1.0, 1.0);
      const double g = std::exp(2.0 * magnitude * u);
      return pointwise(img, [g](double v) { return std::pow(std::max(v, 0.0), g); });
    }
    case ShiftKind::contrast: {
      const double factor = rng.uniform(1.0 - magnitude, 1.0 + magnitude);
      return pointwise(img, [factor](double v) { return (v - 0.5) * factor + 0.5; });
    }
    case ShiftKind::texture: {
      // Sum of random waves with 4..10 cycles per image, scaled to peak amplitude m.
      constexpr int kWaves = 6;
      std::array<std::array<double, 3>, kWaves> waves{};
      for (auto& w : waves) {
        const double angle = rng.uniform(0.0, 2.0 * kPi);
        const double radius = rng.uniform(4.0, 10.0);
        w = {radius * std::cos(angle), radius * std::sin(angle), rng.uniform(0.0, 2.0 * kPi)};
      }
      const std::size_t hw = p.height * p.width;
      std::vector<double> noise(hw);
      double peak = 0.0;
      for (std::size_t y = 0; y < p.height; ++y) {
        for (std::size_t x = 0; x < p.width; ++x) {
          double v = 0.0;
          for (const auto& w : waves) v += std::sin(2.0 * kPi * (w[0] * x / p.width + w[1] * y / p.height) + w[2]);
          noise[y * p.width + x] = v;
          peak = std::max(peak, std::fabs(v));
        }
      }
      Tensor out = img.clone();
      auto d = out.mutable_data();
      const double k = peak > 0.0 ? magnitude / peak : 0.0;
      for (std::size_t c = 0; c < p.channels; ++c) {
        for (std::size_t i = 0; i < hw; ++i) d[c * hw + i] = clamp01(d[c * hw + i] + k * noise[i]);
      }
      return out;
    }
    case ShiftKind::invert: {
      const double m = magnitude;
      return pointwise(img, [m](double v) { return (1.0 - m) * v + m * (1.0 - v); });
    }
    default:
      throw ConfigurationError("apply_domain_style: '" + to_string(kind) + "' is a corruption, not a domain style");
  }
}

Tensor apply_shift(const Tensor& img, const ShiftSpec& spec) {
  spec.validate();
  switch (spec.kind) {
    case ShiftKind::bias_field: return corrupt_bias_field(img, spec.magnitude, spec.seed);
    case ShiftKind::ghosting: return corrupt_ghosting(img, spec.magnitude, spec.seed);
    case ShiftKind::spiking: return corrupt_spiking(img, spec.magnitude, spec.seed);
    case ShiftKind::motion: return corrupt_motion(img, spec.magnitude, spec.seed);
    default: return apply_domain_style(img, spec.kind, spec.magnitude, spec.seed);
  }
}

nlohmann::json to_json(const CorpusSpec& s) {
  return {{"seed", s.seed},
          {"counts",
           {{"train", s.counts.train},
            {"val", s.counts.val},
            {"test_iid", s.counts.test_iid},
            {"corrupt_repeats", s.counts.corrupt_repeats}}},
          {"scene", {{"height", s.scene.height}, {"width", s.scene.width}, {"noise_std", s.scene.noise_std}}},
          {"corrupt_magnitude", s.corrupt_magnitude},
          {"site_magnitude", s.site_magnitude},
          {"sequence_magnitude", s.sequence_magnitude}};
}

namespace {

void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw ConfigurationError(where + ": expected an object");
  for (const auto& [k, _] : j.items()) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* key) { return k == key; })) {
      throw ConfigurationError(where + ": unknown key '" + k + "'");
    }
  }
}

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

CorpusSpec corpus_spec_from_json(const nlohmann::json& j) {
  reject_unknown(j, {"seed", "counts", "scene", "corrupt_magnitude", "site_magnitude", "sequence_magnitude"},
                 "corpus");
  CorpusSpec s;
  try {
    read_opt(j, "seed", s.seed);
    if (j.contains("counts")) {
      const auto& c = j.at("counts");
      reject_unknown(c, {"train", "val", "test_iid", "corrupt_repeats"}, "corpus.counts");
      read_opt(c, "train", s.counts.train);
      read_opt(c, "val", s.counts.val);
      read_opt(c, "test_iid", s.counts.test_iid);
      read_opt(c, "corrupt_repeats", s.counts.corrupt_repeats);
    }
    if (j.contains("scene")) {
      const auto& c = j.at("scene");
      reject_unknown(c, {"height", "width", "noise_std"}, "corpus.scene");
      read_opt(c, "height", s.scene.height);
      read_opt(c, "width", s.scene.width);
      read_opt(c, "noise_std", s.scene.noise_std);
    }
    read_opt(j, "corrupt_magnitude", s.corrupt_magnitude);
    read_opt(j, "site_magnitude", s.site_magnitude);
    read_opt(j, "sequence_magnitude", s.sequence_magnitude);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigurationError(std::string("corpus: ") + e.what());
  }
  return s;
}

const Split& Corpus::split(const std::string& name) const {
  for (const auto& s : splits) {
    if (s.name == name) return s;
  }
  throw LookupError("corpus has no split '" + name + "'");
}

bool Corpus::has_split(const std::string& name) const {
  return std::any_of(splits.begin(), splits.end(), [&](const Split& s) { return s.name == name; });
}

nlohmann::json Corpus::manifest() const {
  nlohmann::json m;
  m["format"] = "maxstyle-corpus-1";
  m["spec"] = to_json(spec);
  nlohmann::json sj = nlohmann::json::object();
  for (const auto& s : splits) {
    nlohmann::json recs = nlohmann::json::array();
    for (const auto& r : s.records) {
      nlohmann::json rj{{"scene_seed", r.scene_seed}};
      if (r.shifted) {
        rj["shift"] = {{"kind", to_string(r.shift.kind)}, {"magnitude", r.shift.magnitude}, {"seed", r.shift.seed}};
        rj["source_index"] = r.source_index;
      }
      recs.push_back(std::move(rj));
    }
    sj[s.name] = {{"count", s.samples.size()}, {"samples", std::move(recs)}};
  }
  m["splits"] = std::move(sj);
  return m;
}

std::string Corpus::fingerprint() const { return sha256_hex(manifest().dump()); }

namespace {

template <typename Fn>
void parallel_for(std::size_t n, std::size_t jobs, Fn fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::jthread> workers;
  for (std::size_t j = 0; j < jobs; ++j) {
    workers.emplace_back([=, &fn] {
      for (std::size_t i = j; i < n; i += jobs) fn(i);
    });
  }
}

Split source_split(const std::string& name, std::uint64_t split_id, std::size_t count, const CorpusSpec& spec,
                   std::size_t jobs) {
  Split s;
  s.name = name;
  s.samples.resize(count);
  s.records.resize(count);
  parallel_for(count, jobs, [&](std::size_t i) {
    const std::uint64_t seed = SeededRng::derive(spec.seed, stream_id(split_id, 0, i));
    s.samples[i] = generate_sample(seed, spec.scene);
    s.records[i].scene_seed = seed;
  });
  return s;
}

Split shifted_split(const std::string& name, std::uint64_t split_id, const Split& source,
                    const std::vector<std::pair<ShiftKind, float>>& kinds, std::size_t repeats,
                    const CorpusSpec& spec, std::size_t jobs) {
  Split s;
  s.name = name;
  const std::size_t n = source.samples.size();
  const std::size_t total = n * kinds.size() * repeats;
  s.samples.resize(total);
  s.records.resize(total);
  parallel_for(total, jobs, [&](std::size_t idx) {
    const std::size_t i = idx % n;
    const std::size_t sub = idx / n;  // repeat * kinds + kind
    const auto& [kind, magnitude] = kinds[sub % kinds.size()];
    ShiftSpec shift{kind, magnitude, SeededRng::derive(spec.seed, stream_id(split_id, sub + 1, i))};
    const Sample& src = source.samples[i];
    Sample out;
    out.image = apply_shift(src.image, shift);
    out.labels = src.labels;
    out.domain_tag = shift.tag();
    out.seed = src.seed;
    s.samples[idx] = std::move(out);
    s.records[idx] = {src.seed, true, shift, i};
  });
  return s;
}

}  // namespace

Corpus build_splits(const CorpusSpec& spec, std::size_t jobs) {
  const auto& c = spec.counts;
  if (c.train == 0 || c.val == 0 || c.test_iid == 0 || c.corrupt_repeats == 0) {
    throw ValidationError("build_splits: all counts must be positive");
  }
  for (float m : {spec.corrupt_magnitude, spec.site_magnitude, spec.sequence_magnitude}) {
    check_magnitude("build_splits", m);
  }
  Corpus corpus;
  corpus.spec = spec;
  corpus.splits.push_back(source_split("train", 1, c.train, spec, jobs));
  corpus.splits.push_back(source_split("val", 2, c.val, spec, jobs));
  corpus.splits.push_back(source_split("test_iid", 3, c.test_iid, spec, jobs));
  const Split& iid = corpus.splits.back();
  const float mc = spec.corrupt_magnitude, ms = spec.site_magnitude;
  Split corrupt = shifted_split("test_corrupt", 4, iid,
                                {{ShiftKind::bias_field, mc}, {ShiftKind::ghosting, mc}, {ShiftKind::spiking, mc},
                                 {ShiftKind::motion, mc}},
                                c.corrupt_repeats, spec, jobs);
  Split site = shifted_split("test_site", 5, iid,
                             {{ShiftKind::gamma, ms}, {ShiftKind::contrast, ms}, {ShiftKind::texture, ms}}, 1, spec,
                             jobs);
  Split sequence =
      shifted_split("test_sequence", 6, iid, {{ShiftKind::invert, spec.sequence_magnitude}}, 1, spec, jobs);
  corpus.splits.push_back(std::move(corrupt));
  corpus.splits.push_back(std::move(site));
  corpus.splits.push_back(std::move(sequence));
  return corpus;
}

namespace {

Tensor labels_to_tensor(const IntTensor& l) {
  std::vector<float> v(l.data.begin(), l.data.end());
  return Tensor(l.shape, std::move(v));
}

IntTensor tensor_to_labels(const Tensor& t) {
  IntTensor l;
  l.shape = t.shape();
  l.data.reserve(t.numel());
  for (float v : t.data()) l.data.push_back(static_cast<std::int32_t>(std::lround(v)));
  return l;
}

}  // namespace

void save_corpus(const std::filesystem::path& dir, const Corpus& corpus) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  for (const auto& s : corpus.splits) {
    const fs::path sd = dir / s.name;
    fs::create_directories(sd, ec);
    if (ec) throw IoError("cannot create " + sd.string() + ": " + ec.message());
    for (std::size_t i = 0; i < s.samples.size(); ++i) {
      save_tns(sd / (std::to_string(i) + ".img.tns"), s.samples[i].image);
      save_tns(sd / (std::to_string(i) + ".lbl.tns"), labels_to_tensor(s.samples[i].labels));
    }
  }
  std::ofstream out(dir / "manifest.json", std::ios::binary);
  if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
  out << corpus.manifest().dump(2) << '\n';
  if (!out) throw IoError("write failed: " + (dir / "manifest.json").string());
}

Corpus load_corpus(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json", std::ios::binary);
  if (!in) throw IoError("no manifest.json in " + dir.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("manifest.json: " + std::string(e.what()));
  }
  Corpus corpus;
  try {
    corpus.spec = corpus_spec_from_json(m.at("spec"));
    for (const auto& name : kSplitNames) {
      if (!m.at("splits").contains(name)) continue;
      const auto& sj = m.at("splits").at(name);
      Split s;
      s.name = name;
      const std::size_t n = sj.at("count").get<std::size_t>();
      const auto& recs = sj.at("samples");
      if (recs.size() != n) throw IoError("manifest split " + name + ": count disagrees with samples");
      for (std::size_t i = 0; i < n; ++i) {
        SampleRecord r;
        r.scene_seed = recs[i].at("scene_seed").get<std::uint64_t>();
        Sample smp;
        smp.seed = r.scene_seed;
        smp.domain_tag = "source";
        if (recs[i].contains("shift")) {
          const auto& sh = recs[i].at("shift");
          r.shifted = true;
          r.shift = {parse_shift_kind(sh.at("kind").get<std::string>()), sh.at("magnitude").get<float>(),
                     sh.at("seed").get<std::uint64_t>()};
          r.source_index = recs[i].at("source_index").get<std::size_t>();
          smp.domain_tag = r.shift.tag();
        }
        smp.image = load_tns(dir / name / (std::to_string(i) + ".img.tns"));
        smp.labels = tensor_to_labels(load_tns(dir / name / (std::to_string(i) + ".lbl.tns")));
        s.samples.push_back(std::move(smp));
        s.records.push_back(r);
      }
      corpus.splits.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("manifest.json: " + std::string(e.what()));
  }
  return corpus;
}

Tensor stack_images(const std::vector<Sample>& samples, std::span<const std::size_t> index) {
  if (index.empty()) throw ValidationError("stack_images: empty index");
  const Shape s0 = samples.at(index[0]).image.shape();
  std::vector<float> data;
  data.reserve(index.size() * shape_numel(s0));
  for (std::size_t i : index) {
    const auto& img = samples.at(i).image;
    if (img.shape() != s0) {
      throw DimensionError("stack_images: sample " + std::to_string(i) + " has shape " + shape_str(img.shape()) +
                           ", expected " + shape_str(s0));
    }
    data.insert(data.end(), img.data().begin(), img.data().end());
  }
  Shape out{index.size()};
  out.insert(out.end(), s0.begin(), s0.end());
  return Tensor(std::move(out), std::move(data));
}

IntTensor stack_labels(const std::vector<Sample>& samples, std::span<const std::size_t> index) {
  if (index.empty()) throw ValidationError("stack_labels: empty index");
  const Shape s0 = samples.at(index[0]).labels.shape;
  IntTensor out;
  out.shape = {index.size()};
  out.shape.insert(out.shape.end(), s0.begin(), s0.end());
  out.data.reserve(shape_numel(out.shape));
  for (std::size_t i : index) {
    const auto& l = samples.at(i).labels;
    if (l.shape != s0) throw DimensionError("stack_labels: label maps differ in shape");
    out.data.insert(out.data.end(), l.data.begin(), l.data.end());
  }
  return out;
}

void write_pgm(const std::filesystem::path& path, std::span<const float> values, std::size_t height,
               std::size_t width) {
  if (values.size() != height * width) {
    throw DimensionError("write_pgm: " + std::to_string(values.size()) + " values for a " + std::to_string(height) +
                         "x" + std::to_string(width) + " image");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P5\n" << width << ' ' << height << "\n255\n";
  for (float v : values) {
    const float c = std::clamp(std::isfinite(v) ? v : 0.0f, 0.0f, 1.0f);
    out.put(static_cast<char>(static_cast<std::uint8_t>(std::lround(c * 255.0f))));
  }
  if (!out) throw IoError("write failed: " + path.string());
}

PgmImage read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::string magic;
  PgmImage img;
  int maxval = 0;
  in >> magic >> img.width >> img.height >> maxval;
  if (!in || magic != "P5" || maxval != 255) throw IoError(path.string() + ": not an 8-bit P5 file");
  in.get();  // single whitespace before the raster
  img.pixels.resize(img.width * img.height);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) throw IoError(path.string() + ": truncated");
  return img;
}

}  // namespace maxstyle
