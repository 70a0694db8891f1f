#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "maxstyle/rng.hpp"
#include "maxstyle/tensor.hpp"

namespace maxstyle::test {

inline Tensor random_tensor(SeededRng& rng, const Shape& shape, double lo = -1.0, double hi = 1.0) {
  std::vector<float> v(shape_numel(shape));
  for (float& x : v) x = static_cast<float>(rng.uniform(lo, hi));
  return Tensor(shape, std::move(v));
}

inline Tensor random_normal(SeededRng& rng, const Shape& shape, double stddev = 1.0) {
  std::vector<float> v(shape_numel(shape));
  for (float& x : v) x = static_cast<float>(stddev * rng.normal());
  return Tensor(shape, std::move(v));
}

inline IntTensor random_labels(SeededRng& rng, const Shape& shape, std::size_t classes) {
  IntTensor t = IntTensor::zeros(shape);
  for (auto& v : t.data) v = static_cast<std::int32_t>(rng.below(classes));
  return t;
}

/// Central differences of a double-valued function, for probes whose float32
/// loss value would quantise the difference quotient.
inline Tensor central_diff(const std::function<double(const Tensor&)>& f, const Tensor& x, float h) {
  NoGradGuard guard;
  Tensor probe = x.detach();
  std::vector<float> g(x.numel());
  auto buf = probe.mutable_data();
  for (std::size_t i = 0; i < buf.size(); ++i) {
    const float orig = buf[i];
    const float up = orig + h, down = orig - h;
    buf[i] = up;
    const double fu = f(probe);
    buf[i] = down;
    const double fd = f(probe);
    buf[i] = orig;
    g[i] = static_cast<float>((fu - fd) / (static_cast<double>(up) - down));
  }
  return Tensor(x.shape(), std::move(g));
}

/// max |a - b| / max |b|: the error of `a` measured against the scale of the
/// reference `b`, which stays meaningful when single entries are near zero.
inline double max_rel_error(std::span<const float> a, std::span<const float> b) {
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(static_cast<double>(a[i]) - b[i]));
    scale = std::max(scale, std::abs(static_cast<double>(b[i])));
  }
  return scale > 0.0 ? diff / scale : diff;
}

inline double max_abs_diff(std::span<const float> a, std::span<const float> b) {
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, std::abs(static_cast<double>(a[i]) - b[i]));
  return diff;
}

inline bool bitwise_equal(std::span<const float> a, std::span<const float> b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin(), [](float x, float y) {
           return std::bit_cast<std::uint32_t>(x) == std::bit_cast<std::uint32_t>(y);
         });
}

}  // namespace maxstyle::test
