#include "maxstyle/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "maxstyle/errors.hpp"

namespace maxstyle {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

// Upper bound on floats in one conv column buffer (16 MiB).
constexpr std::size_t kConvChunkFloats = std::size_t{1} << 18;

thread_local bool g_grad_enabled = true;

std::shared_ptr<detail::TensorImpl> make_impl(Shape shape, std::vector<float> data, bool requires_grad) {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return impl;
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_rank(const char* op, const Tensor& t, std::size_t rank, const char* layout) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + " " + layout + ", got " +
                         shape_str(t.shape()));
  }
}

// Output columns ox whose tap ox + kx - pad lands inside [0, W).
std::pair<std::size_t, std::size_t> valid_span(std::size_t kx, std::size_t pad, std::size_t W, std::size_t Wo) {
  const std::size_t lo = pad > kx ? pad - kx : 0;
  const std::size_t hi = std::min(Wo, W + pad - kx);
  return {std::min(lo, Wo), hi};
}

// Reused conv scratch space; contents are always overwritten before use.
std::vector<float>& scratch(int slot, std::size_t n) {
  thread_local std::array<std::vector<float>, 3> buffers;
  auto& b = buffers[static_cast<std::size_t>(slot)];
  if (b.size() < n) b.resize(n);
  return b;
}

// cols is [C*kh*kw, ld] with ld >= Ho*Wo; `ld` is the row stride.
void im2col(const float* img, std::size_t C, std::size_t H, std::size_t W, std::size_t kh, std::size_t kw,
            std::size_t pad, std::size_t Ho, std::size_t Wo, float* cols, std::size_t ld) {
  const auto iH = static_cast<std::ptrdiff_t>(H);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        float* row = cols + ((c * kh + ky) * kw + kx) * ld;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(pad);
          float* dst = row + oy * Wo;
          if (iy < 0 || iy >= iH) {
            std::fill(dst, dst + Wo, 0.0f);
            continue;
          }
          const float* src = img + (c * H + static_cast<std::size_t>(iy)) * W;
          const auto [lo, hi] = valid_span(kx, pad, W, Wo);
          std::fill(dst, dst + lo, 0.0f);
          if (hi > lo) std::copy(src + (lo + kx - pad), src + (hi + kx - pad), dst + lo);
          std::fill(dst + std::max(lo, hi), dst + Wo, 0.0f);
        }
      }
    }
  }
}

void col2im(const float* cols, std::size_t C, std::size_t H, std::size_t W, std::size_t kh, std::size_t kw,
            std::size_t pad, std::size_t Ho, std::size_t Wo, float* img, std::size_t ld) {
  const auto iH = static_cast<std::ptrdiff_t>(H);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        const float* row = cols + ((c * kh + ky) * kw + kx) * ld;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= iH) continue;
          float* dst = img + (c * H + static_cast<std::size_t>(iy)) * W;
          const float* src = row + oy * Wo;
          const auto [lo, hi] = valid_span(kx, pad, W, Wo);
          for (std::size_t ox = lo; ox < hi; ++ox) dst[ox + kx - pad] += src[ox];
        }
      }
    }
  }
}

void put_u32(std::ostream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                         static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(bytes, 4);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw IoError("TNS1: truncated header");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor() : impl_(make_impl({}, {0.0f}, false)) {}

Tensor::Tensor(Shape shape, std::vector<float> data, bool requires_grad) {
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("Tensor: zero-sized axis in " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("Tensor: shape " + shape_str(shape) + " holds " + std::to_string(shape_numel(shape)) +
                         " elements, buffer has " + std::to_string(data.size()));
  }
  impl_ = make_impl(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::zeros(const Shape& shape) { return Tensor(shape, std::vector<float>(shape_numel(shape), 0.0f)); }

Tensor Tensor::full(const Shape& shape, float value) {
  return Tensor(shape, std::vector<float>(shape_numel(shape), value));
}

Tensor Tensor::scalar(float value) { return Tensor({}, {value}); }

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw DimensionError("Tensor::dim: axis " + std::to_string(axis) + " out of range");
  return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_->data.size(); }
std::span<const float> Tensor::data() const { return impl_->data; }
std::span<float> Tensor::mutable_data() { return impl_->data; }

float Tensor::item() const {
  if (numel() != 1) throw ValidationError("item(): tensor is not a scalar " + shape_str(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool value) {
  if (!is_leaf()) throw ValidationError("set_requires_grad: only leaf tensors can change requires_grad");
  impl_->requires_grad = value;
  return *this;
}

bool Tensor::is_leaf() const {
  return !impl_->node.has_value() || impl_->generation != Tape::current().generation();
}

bool Tensor::has_grad() const { return !impl_->grad.empty(); }
std::span<const float> Tensor::grad() const { return impl_->grad; }

Tensor Tensor::grad_tensor() const {
  if (impl_->grad.empty()) return zeros(shape());
  return Tensor(shape(), impl_->grad);
}

void Tensor::zero_grad() { impl_->grad.clear(); }

Tensor Tensor::detach() const { return Tensor(shape(), impl_->data); }

Tensor Tensor::clone() const { return Tensor(shape(), impl_->data, impl_->requires_grad); }

IntTensor::IntTensor(Shape s, std::vector<std::int32_t> d) : shape(std::move(s)), data(std::move(d)) {
  if (shape_numel(shape) != data.size()) throw DimensionError("IntTensor: shape/buffer size mismatch");
}

IntTensor IntTensor::zeros(const Shape& s) { return IntTensor(s, std::vector<std::int32_t>(shape_numel(s), 0)); }

// ---------------------------------------------------------------------------
// Tape

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool value) { g_grad_enabled = value; }

Tape& Tape::current() {
  thread_local Tape tape;
  return tape;
}

bool Tape::active() const { return GradMode::enabled(); }

void Tape::clear() {
  nodes_.clear();
  ++generation_;
}

Tensor Tape::record(std::string op, std::vector<Tensor> inputs, Shape out_shape, std::vector<float> out_data,
                    BackwardFn backward_fn) {
  auto impl = make_impl(std::move(out_shape), std::move(out_data), false);
  const bool needs = active() && std::any_of(inputs.begin(), inputs.end(),
                                             [](const Tensor& t) { return t.requires_grad(); });
  if (needs) {
    impl->requires_grad = true;
    impl->node = nodes_.size();
    impl->generation = generation_;
    TapeNode node;
    node.op = std::move(op);
    node.inputs.reserve(inputs.size());
    for (const auto& t : inputs) node.inputs.push_back(t.impl());
    node.output = impl;
    node.backward = std::move(backward_fn);
    nodes_.push_back(std::move(node));
  }
  return Tensor(impl);
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) throw ValidationError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
  auto& root = *loss.impl();
  if (!root.requires_grad) {
    // Nothing on the tape depends on a differentiable input.
    clear();
    return;
  }
  if (root.node && root.generation != generation_) {
    throw ValidationError("backward: loss was recorded on a tape that has already been consumed");
  }
  if (root.grad.empty()) root.grad.assign(1, 0.0f);
  root.grad[0] += 1.0f;
  if (root.node) {
    std::vector<float*> grad_in;
    for (std::size_t i = *root.node + 1; i-- > 0;) {
      TapeNode& node = nodes_[i];
      if (node.output->grad.empty()) continue;
      grad_in.clear();
      for (auto& in : node.inputs) {
        if (!in->requires_grad) {
          grad_in.push_back(nullptr);
          continue;
        }
        if (in->grad.empty()) in->grad.assign(in->data.size(), 0.0f);
        grad_in.push_back(in->grad.data());
      }
      node.backward(node.output->grad, grad_in);
    }
  }
  clear();
}

void backward(const Tensor& loss) { Tape::current().backward(loss); }

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<float> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return Tape::current().record("add", {a, b}, a.shape(), std::move(out),
                                [](std::span<const float> g, std::span<float* const> gi) {
                                  for (std::size_t k = 0; k < 2; ++k) {
                                    if (!gi[k]) continue;
                                    for (std::size_t i = 0; i < g.size(); ++i) gi[k][i] += g[i];
                                  }
                                });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<float> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return Tape::current().record("sub", {a, b}, a.shape(), std::move(out),
                                [](std::span<const float> g, std::span<float* const> gi) {
                                  if (gi[0])
                                    for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
                                  if (gi[1])
                                    for (std::size_t i = 0; i < g.size(); ++i) gi[1][i] -= g[i];
                                });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<float> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  auto ai = a.impl(), bi = b.impl();
  return Tape::current().record("mul", {a, b}, a.shape(), std::move(out),
                                [ai, bi](std::span<const float> g, std::span<float* const> gi) {
                                  if (gi[0])
                                    for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i] * bi->data[i];
                                  if (gi[1])
                                    for (std::size_t i = 0; i < g.size(); ++i) gi[1][i] += g[i] * ai->data[i];
                                });
}

Tensor scale(const Tensor& a, float factor) {
  std::vector<float> out(a.numel());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  return Tape::current().record("scale", {a}, a.shape(), std::move(out),
                                [factor](std::span<const float> g, std::span<float* const> gi) {
                                  for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i] * factor;
                                });
}

Tensor add_scalar(const Tensor& a, float value) {
  std::vector<float> out(a.numel());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + value;
  return Tape::current().record("add_scalar", {a}, a.shape(), std::move(out),
                                [](std::span<const float> g, std::span<float* const> gi) {
                                  for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
                                });
}

Tensor sqrt(const Tensor& a) {
  std::vector<float> out(a.numel());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (x[i] < 0.0f) throw ValidationError("sqrt: negative input");
    out[i] = std::sqrt(x[i]);
  }
  std::vector<float> root = out;
  return Tape::current().record("sqrt", {a}, a.shape(), std::move(out),
                                [root = std::move(root)](std::span<const float> g, std::span<float* const> gi) {
                                  for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i] * 0.5f / root[i];
                                });
}

Tensor reciprocal(const Tensor& a) {
  std::vector<float> out(a.numel());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0f / x[i];
  std::vector<float> inv = out;
  return Tape::current().record("reciprocal", {a}, a.shape(), std::move(out),
                                [inv = std::move(inv)](std::span<const float> g, std::span<float* const> gi) {
                                  for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] -= g[i] * inv[i] * inv[i];
                                });
}


Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (float v : a.data()) acc += v;
  const std::size_t n = a.numel();
  return Tape::current().record("sum", {a}, {}, {static_cast<float>(acc)},
                                [n](std::span<const float> g, std::span<float* const> gi) {
                                  for (std::size_t i = 0; i < n; ++i) gi[0][i] += g[0];
                                });
}

Tensor mean(const Tensor& a) {
  double acc = 0.0;
  for (float v : a.data()) acc += v;
  const std::size_t n = a.numel();
  return Tape::current().record("mean", {a}, {}, {static_cast<float>(acc / static_cast<double>(n))},
                                [n](std::span<const float> g, std::span<float* const> gi) {
                                  const float share = g[0] / static_cast<float>(n);
                                  for (std::size_t i = 0; i < n; ++i) gi[0][i] += share;
                                });
}

Tensor reshape(const Tensor& a, const Shape& shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<float> out(a.data().begin(), a.data().end());
  return Tape::current().record("reshape", {a}, shape, std::move(out),
                                [](std::span<const float> g, std::span<float* const> gi) {
                                  for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
                                });
}

Tensor relu(const Tensor& x) {
  std::vector<float> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] > 0.0f ? in[i] : 0.0f;
  auto xi = x.impl();
  return Tape::current().record("relu", {x}, x.shape(), std::move(out),
                                [xi](std::span<const float> g, std::span<float* const> gi) {
                                  for (std::size_t i = 0; i < g.size(); ++i) {
                                    if (xi->data[i] > 0.0f) gi[0][i] += g[i];
                                  }
                                });
}

// ---------------------------------------------------------------------------
// Convolution and resampling

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t padding) {
  require_rank("conv2d", input, 4, "[N,Cin,H,W] for input");
  require_rank("conv2d", kernel, 4, "[Cout,Cin,kh,kw] for kernel");
  require_rank("conv2d", bias, 1, "[Cout] for bias");
  const std::size_t N = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t Cout = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kernel.dim(1) != Cin) {
    throw DimensionError("conv2d: input axis 1 (channels) = " + std::to_string(Cin) + " but kernel axis 1 = " +
                         std::to_string(kernel.dim(1)));
  }
  if (bias.dim(0) != Cout) {
    throw DimensionError("conv2d: bias axis 0 = " + std::to_string(bias.dim(0)) + " but kernel axis 0 (Cout) = " +
                         std::to_string(Cout));
  }
  if (kh % 2 == 0 || kw % 2 == 0) {
    throw DimensionError("conv2d: kernel axes 2,3 must be odd, got " + shape_str(kernel.shape()));
  }
  if (H + 2 * padding < kh || W + 2 * padding < kw) {
    throw DimensionError("conv2d: kernel axes 2,3 exceed padded input axes 2,3");
  }
  const std::size_t Ho = H + 2 * padding - kh + 1, Wo = W + 2 * padding - kw + 1;
  const std::size_t K = Cin * kh * kw, P = Ho * Wo;
  const bool direct = (kh == 1 && kw == 1 && padding == 0);

  // Samples are processed in chunks whose column matrices sit side by side,
  // so each chunk is one GEMM of [Cout,K] x [K, chunk*P].
  const std::size_t chunk = std::clamp<std::size_t>(kConvChunkFloats / std::max<std::size_t>(1, K * P), 1, N);
  const std::size_t in_stride = Cin * H * W;

  std::vector<float> out(N * Cout * P);
  float* cols = scratch(0, chunk * K * P).data();
  RowMat res;
  ConstMatMap wmat(kernel.data().data(), static_cast<Eigen::Index>(Cout), static_cast<Eigen::Index>(K));
  const auto b = bias.data();
  const float* in = input.data().data();
  for (std::size_t n0 = 0; n0 < N; n0 += chunk) {
    const std::size_t nc = std::min(chunk, N - n0);
    const std::size_t ld = nc * P;
    for (std::size_t j = 0; j < nc; ++j) {
      const float* img = in + (n0 + j) * in_stride;
      if (direct) {
        for (std::size_t k = 0; k < K; ++k) std::copy_n(img + k * P, P, cols + k * ld + j * P);
      } else {
        im2col(img, Cin, H, W, kh, kw, padding, Ho, Wo, cols + j * P, ld);
      }
    }
    ConstMatMap cmat(cols, static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(ld));
    res.noalias() = wmat * cmat;
    for (std::size_t j = 0; j < nc; ++j) {
      float* o = out.data() + (n0 + j) * Cout * P;
      for (std::size_t co = 0; co < Cout; ++co) {
        const float* r = res.data() + co * ld + j * P;
        for (std::size_t p = 0; p < P; ++p) o[co * P + p] = r[p] + b[co];
      }
    }
  }

  auto xi = input.impl(), ki = kernel.impl();
  return Tape::current().record(
      "conv2d", {input, kernel, bias}, {N, Cout, Ho, Wo}, std::move(out),
      [=](std::span<const float> g, std::span<float* const> gi) {
        ConstMatMap wm(ki->data.data(), static_cast<Eigen::Index>(Cout), static_cast<Eigen::Index>(K));
        float* colbuf = gi[1] ? scratch(0, chunk * K * P).data() : nullptr;
        float* gbuf = scratch(1, chunk * Cout * P).data();
        RowMat dcols;
        for (std::size_t n0 = 0; n0 < N; n0 += chunk) {
          const std::size_t nc = std::min(chunk, N - n0);
          const std::size_t ld = nc * P;
          for (std::size_t j = 0; j < nc; ++j) {
            const float* gs = g.data() + (n0 + j) * Cout * P;
            for (std::size_t co = 0; co < Cout; ++co) std::copy_n(gs + co * P, P, gbuf + co * ld + j * P);
          }
          ConstMatMap gmat(gbuf, static_cast<Eigen::Index>(Cout), static_cast<Eigen::Index>(ld));
          if (gi[1]) {
            for (std::size_t j = 0; j < nc; ++j) {
              const float* img = xi->data.data() + (n0 + j) * in_stride;
              if (direct) {
                for (std::size_t k = 0; k < K; ++k) std::copy_n(img + k * P, P, colbuf + k * ld + j * P);
              } else {
                im2col(img, Cin, H, W, kh, kw, padding, Ho, Wo, colbuf + j * P, ld);
              }
            }
            ConstMatMap cmat(colbuf, static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(ld));
            MatMap dw(gi[1], static_cast<Eigen::Index>(Cout), static_cast<Eigen::Index>(K));
            dw.noalias() += gmat * cmat.transpose();
          }
          if (gi[2]) {
            for (std::size_t co = 0; co < Cout; ++co) gi[2][co] += gmat.row(static_cast<Eigen::Index>(co)).sum();
          }
          if (gi[0]) {
            dcols.noalias() = wm.transpose() * gmat;
            for (std::size_t j = 0; j < nc; ++j) {
              float* dimg = gi[0] + (n0 + j) * in_stride;
              if (direct) {
                for (std::size_t k = 0; k < K; ++k) {
                  const float* src = dcols.data() + k * ld + j * P;
                  for (std::size_t p = 0; p < P; ++p) dimg[k * P + p] += src[p];
                }
              } else {
                col2im(dcols.data() + j * P, Cin, H, W, kh, kw, padding, Ho, Wo, dimg, ld);
              }
            }
          }
        }
      });
}

Tensor upsample_nearest2x(const Tensor& x) {
  require_rank("upsample_nearest2x", x, 4, "[N,C,H,W]");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t H2 = 2 * H, W2 = 2 * W;
  std::vector<float> out(N * C * H2 * W2);
  const auto in = x.data();
  for (std::size_t p = 0; p < N * C; ++p) {
    const float* src = in.data() + p * H * W;
    float* dst = out.data() + p * H2 * W2;
    for (std::size_t y = 0; y < H2; ++y) {
      for (std::size_t xx = 0; xx < W2; ++xx) dst[y * W2 + xx] = src[(y / 2) * W + xx / 2];
    }
  }
  return Tape::current().record("upsample_nearest2x", {x}, {N, C, H2, W2}, std::move(out),
                                [=](std::span<const float> g, std::span<float* const> gi) {
                                  for (std::size_t p = 0; p < N * C; ++p) {
                                    const float* src = g.data() + p * H2 * W2;
                                    float* dst = gi[0] + p * H * W;
                                    for (std::size_t y = 0; y < H2; ++y) {
                                      for (std::size_t xx = 0; xx < W2; ++xx) {
                                        dst[(y / 2) * W + xx / 2] += src[y * W2 + xx];
                                      }
                                    }
                                  }
                                });
}

Tensor avgpool2x(const Tensor& x) {
  require_rank("avgpool2x", x, 4, "[N,C,H,W]");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % 2 || W % 2) {
    throw DimensionError("avgpool2x: axes 2,3 (H,W) must be even, got " + shape_str(x.shape()));
  }
  const std::size_t Hh = H / 2, Wh = W / 2;
  std::vector<float> out(N * C * Hh * Wh);
  const auto in = x.data();
  for (std::size_t p = 0; p < N * C; ++p) {
    const float* src = in.data() + p * H * W;
    float* dst = out.data() + p * Hh * Wh;
    for (std::size_t y = 0; y < Hh; ++y) {
      for (std::size_t xx = 0; xx < Wh; ++xx) {
        const float* s = src + 2 * y * W + 2 * xx;
        dst[y * Wh + xx] = 0.25f * (s[0] + s[1] + s[W] + s[W + 1]);
      }
    }
  }
  return Tape::current().record("avgpool2x", {x}, {N, C, Hh, Wh}, std::move(out),
                                [=](std::span<const float> g, std::span<float* const> gi) {
                                  for (std::size_t p = 0; p < N * C; ++p) {
                                    const float* src = g.data() + p * Hh * Wh;
                                    float* dst = gi[0] + p * H * W;
                                    for (std::size_t y = 0; y < Hh; ++y) {
                                      for (std::size_t xx = 0; xx < Wh; ++xx) {
                                        const float v = 0.25f * src[y * Wh + xx];
                                        float* d = dst + 2 * y * W + 2 * xx;
                                        d[0] += v;
                                        d[1] += v;
                                        d[W] += v;
                                        d[W + 1] += v;
                                      }
                                    }
                                  }
                                });
}

// ---------------------------------------------------------------------------
// Losses

Tensor softmax_cross_entropy(const Tensor& logits, const IntTensor& labels) {
  require_rank("softmax_cross_entropy", logits, 4, "[N,K,H,W]");
  const std::size_t N = logits.dim(0), K = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
  const Shape expected{N, H, W};
  if (labels.shape != expected) {
    throw DimensionError("softmax_cross_entropy: labels " + shape_str(labels.shape) + " do not match logits axes 0,2,3 " +
                         shape_str(expected));
  }
  const std::size_t P = H * W;
  const auto z = logits.data();
  std::vector<float> prob(N * K * P);
  double total = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t p = 0; p < P; ++p) {
      const std::int32_t label = labels.data[n * P + p];
      if (label < 0 || static_cast<std::size_t>(label) >= K) {
        throw ValidationError("softmax_cross_entropy: label " + std::to_string(label) + " outside [0," +
                              std::to_string(K) + ")");
      }
      const float* zp = z.data() + n * K * P + p;
      float zmax = zp[0];
      for (std::size_t k = 1; k < K; ++k) zmax = std::max(zmax, zp[k * P]);
      double denom = 0.0;
      for (std::size_t k = 0; k < K; ++k) denom += std::exp(static_cast<double>(zp[k * P] - zmax));
      const double log_denom = std::log(denom);
      for (std::size_t k = 0; k < K; ++k) {
        prob[n * K * P + k * P + p] =
            static_cast<float>(std::exp(static_cast<double>(zp[k * P] - zmax) - log_denom));
      }
      total += log_denom - static_cast<double>(zp[static_cast<std::size_t>(label) * P] - zmax);
    }
  }
  const double count = static_cast<double>(N * P);
  auto lab = std::make_shared<const std::vector<std::int32_t>>(labels.data);
  return Tape::current().record(
      "softmax_cross_entropy", {logits}, {}, {static_cast<float>(total / count)},
      [=, prob = std::move(prob)](std::span<const float> g, std::span<float* const> gi) {
        const float s = static_cast<float>(g[0] / count);
        for (std::size_t n = 0; n < N; ++n) {
          for (std::size_t k = 0; k < K; ++k) {
            for (std::size_t p = 0; p < P; ++p) {
              const std::size_t idx = n * K * P + k * P + p;
              const float onehot = (*lab)[n * P + p] == static_cast<std::int32_t>(k) ? 1.0f : 0.0f;
              gi[0][idx] += s * (prob[idx] - onehot);
            }
          }
        }
      });
}

Tensor mse(const Tensor& a, const Tensor& b) {
  require_same_shape("mse", a, b);
  const auto x = a.data(), y = b.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = static_cast<double>(x[i]) - static_cast<double>(y[i]);
    acc += d * d;
  }
  const std::size_t n = a.numel();
  auto ai = a.impl(), bi = b.impl();
  return Tape::current().record("mse", {a, b}, {}, {static_cast<float>(acc / static_cast<double>(n))},
                                [=](std::span<const float> g, std::span<float* const> gi) {
                                  const float s = 2.0f * g[0] / static_cast<float>(n);
                                  for (std::size_t i = 0; i < n; ++i) {
                                    const float d = ai->data[i] - bi->data[i];
                                    if (gi[0]) gi[0][i] += s * d;
                                    if (gi[1]) gi[1][i] -= s * d;
                                  }
                                });
}

// ---------------------------------------------------------------------------
// Per-channel helpers

Tensor spatial_mean(const Tensor& f) {
  require_rank("spatial_mean", f, 4, "[N,C,H,W]");
  const std::size_t NC = f.dim(0) * f.dim(1), P = f.dim(2) * f.dim(3);
  std::vector<float> out(NC);
  const auto in = f.data();
  for (std::size_t r = 0; r < NC; ++r) {
    double acc = 0.0;
    for (std::size_t p = 0; p < P; ++p) acc += in[r * P + p];
    out[r] = static_cast<float>(acc / static_cast<double>(P));
  }
  return Tape::current().record("spatial_mean", {f}, {f.dim(0), f.dim(1)}, std::move(out),
                                [=](std::span<const float> g, std::span<float* const> gi) {
                                  for (std::size_t r = 0; r < NC; ++r) {
                                    const float share = g[r] / static_cast<float>(P);
                                    for (std::size_t p = 0; p < P; ++p) gi[0][r * P + p] += share;
                                  }
                                });
}

Tensor channel_affine(const Tensor& f, const Tensor& scale_nc, const Tensor& shift_nc) {
  require_rank("channel_affine", f, 4, "[N,C,H,W]");
  const Shape nc{f.dim(0), f.dim(1)};
  if (scale_nc.shape() != nc || shift_nc.shape() != nc) {
    throw DimensionError("channel_affine: scale " + shape_str(scale_nc.shape()) + " / shift " +
                         shape_str(shift_nc.shape()) + " must equal feature axes 0,1 " + shape_str(nc));
  }
  const std::size_t NC = nc[0] * nc[1], P = f.dim(2) * f.dim(3);
  std::vector<float> out(NC * P);
  const auto x = f.data(), s = scale_nc.data(), b = shift_nc.data();
  for (std::size_t r = 0; r < NC; ++r) {
    for (std::size_t p = 0; p < P; ++p) out[r * P + p] = x[r * P + p] * s[r] + b[r];
  }
  auto fi = f.impl(), si = scale_nc.impl();
  return Tape::current().record("channel_affine", {f, scale_nc, shift_nc}, f.shape(), std::move(out),
                                [=](std::span<const float> g, std::span<float* const> gi) {
                                  for (std::size_t r = 0; r < NC; ++r) {
                                    const float* gr = g.data() + r * P;
                                    if (gi[0]) {
                                      const float sr = si->data[r];
                                      for (std::size_t p = 0; p < P; ++p) gi[0][r * P + p] += gr[p] * sr;
                                    }
                                    if (gi[1]) {
                                      double acc = 0.0;
                                      for (std::size_t p = 0; p < P; ++p) acc += gr[p] * fi->data[r * P + p];
                                      gi[1][r] += static_cast<float>(acc);
                                    }
                                    if (gi[2]) {
                                      double acc = 0.0;
                                      for (std::size_t p = 0; p < P; ++p) acc += gr[p];
                                      gi[2][r] += static_cast<float>(acc);
                                    }
                                  }
                                });
}

Tensor scale_rows(const Tensor& t, const Tensor& v) {
  require_rank("scale_rows", t, 2, "[N,C]");
  require_rank("scale_rows", v, 1, "[N]");
  const std::size_t N = t.dim(0), C = t.dim(1);
  if (v.dim(0) != N) {
    throw DimensionError("scale_rows: vector axis 0 = " + std::to_string(v.dim(0)) + " but matrix axis 0 = " +
                         std::to_string(N));
  }
  std::vector<float> out(N * C);
  const auto x = t.data(), s = v.data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) out[n * C + c] = x[n * C + c] * s[n];
  auto ti = t.impl(), vi = v.impl();
  return Tape::current().record("scale_rows", {t, v}, t.shape(), std::move(out),
                                [=](std::span<const float> g, std::span<float* const> gi) {
                                  for (std::size_t n = 0; n < N; ++n) {
                                    for (std::size_t c = 0; c < C; ++c) {
                                      if (gi[0]) gi[0][n * C + c] += g[n * C + c] * vi->data[n];
                                      if (gi[1]) gi[1][n] += g[n * C + c] * ti->data[n * C + c];
                                    }
                                  }
                                });
}

Tensor scale_cols(const Tensor& t, const Tensor& v) {
  require_rank("scale_cols", t, 2, "[N,C]");
  require_rank("scale_cols", v, 1, "[C]");
  const std::size_t N = t.dim(0), C = t.dim(1);
  if (v.dim(0) != C) {
    throw DimensionError("scale_cols: vector axis 0 = " + std::to_string(v.dim(0)) + " but matrix axis 1 = " +
                         std::to_string(C));
  }
  std::vector<float> out(N * C);
  const auto x = t.data(), s = v.data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) out[n * C + c] = x[n * C + c] * s[c];
  auto ti = t.impl(), vi = v.impl();
  return Tape::current().record("scale_cols", {t, v}, t.shape(), std::move(out),
                                [=](std::span<const float> g, std::span<float* const> gi) {
                                  for (std::size_t n = 0; n < N; ++n) {
                                    for (std::size_t c = 0; c < C; ++c) {
                                      if (gi[0]) gi[0][n * C + c] += g[n * C + c] * vi->data[c];
                                      if (gi[1]) gi[1][c] += g[n * C + c] * ti->data[n * C + c];
                                    }
                                  }
                                });
}

Tensor gather_rows(const Tensor& t, std::span<const std::size_t> index) {
  if (t.rank() == 0) throw DimensionError("gather_rows: rank-0 tensor");
  const std::size_t rows = t.dim(0), width = t.numel() / rows;
  Shape shape = t.shape();
  shape[0] = index.size();
  std::vector<float> out(index.size() * width);
  const auto x = t.data();
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= rows) throw DimensionError("gather_rows: index out of range on axis 0");
    std::copy_n(x.data() + index[i] * width, width, out.data() + i * width);
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return Tape::current().record("gather_rows", {t}, shape, std::move(out),
                                [=](std::span<const float> g, std::span<float* const> gi) {
                                  for (std::size_t i = 0; i < idx.size(); ++i) {
                                    for (std::size_t w = 0; w < width; ++w) gi[0][idx[i] * width + w] += g[i * width + w];
                                  }
                                });
}

IntTensor argmax_channels(const Tensor& logits) {
  require_rank("argmax_channels", logits, 4, "[N,K,H,W]");
  const std::size_t N = logits.dim(0), K = logits.dim(1), P = logits.dim(2) * logits.dim(3);
  IntTensor out = IntTensor::zeros({N, logits.dim(2), logits.dim(3)});
  const auto z = logits.data();
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t p = 0; p < P; ++p) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < K; ++k) {
        if (z[n * K * P + k * P + p] > z[n * K * P + best * P + p]) best = k;
      }
      out.data[n * P + p] = static_cast<std::int32_t>(best);
    }
  }
  return out;
}

Tensor finite_diff_grad(const std::function<float(const Tensor&)>& f, const Tensor& x, float h) {
  if (!(h > 0.0f)) throw ValidationError("finite_diff_grad: step must be positive");
  NoGradGuard guard;
  Tensor probe = x.detach();
  std::vector<float> grad(x.numel());
  auto buf = probe.mutable_data();
  for (std::size_t i = 0; i < buf.size(); ++i) {
    const float orig = buf[i];
    const float up = orig + h, down = orig - h;
    buf[i] = up;
    const double fu = f(probe);
    buf[i] = down;
    const double fd = f(probe);
    buf[i] = orig;
    grad[i] = static_cast<float>((fu - fd) / (static_cast<double>(up) - static_cast<double>(down)));
  }
  return Tensor(x.shape(), std::move(grad));
}

// ---------------------------------------------------------------------------
// TNS1

void write_tns(std::ostream& out, const Tensor& t) {
  if (t.rank() > 255) throw IoError("TNS1: rank exceeds 255");
  out.write("TNS1", 4);
  const char rank = static_cast<char>(t.rank());
  out.write(&rank, 1);
  for (std::size_t d : t.shape()) {
    if (d > std::numeric_limits<std::uint32_t>::max()) throw IoError("TNS1: dimension exceeds u32");
    put_u32(out, static_cast<std::uint32_t>(d));
  }
  for (float v : t.data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  if (!out) throw IoError("TNS1: write failed");
}

Tensor read_tns(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "TNS1", 4) != 0) throw IoError("TNS1: bad magic");
  char rank_byte = 0;
  if (!in.read(&rank_byte, 1)) throw IoError("TNS1: truncated header");
  const auto rank = static_cast<unsigned char>(rank_byte);
  Shape shape(rank);
  for (auto& d : shape) {
    d = get_u32(in);
    if (d == 0) throw IoError("TNS1: zero-sized dimension");
  }
  std::vector<float> data(shape_numel(shape));
  for (auto& v : data) v = std::bit_cast<float>(get_u32(in));
  return Tensor(std::move(shape), std::move(data));
}

void save_tns(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_tns(out, t);
}

Tensor load_tns(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return read_tns(in);
}

}  // namespace maxstyle
