#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace maxstyle {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorImpl;
}

/// Dense row-major float32 array with optional participation in the
/// reverse-mode tape.
///
/// Tensor is a handle: copies share the underlying buffer, which is how a
/// model and its optimizer see the same parameters. Every operation below
/// allocates a fresh output buffer; use clone() for an explicit deep copy.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<float> data, bool requires_grad = false);

  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, float value);
  static Tensor scalar(float value);

  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const float> data() const;
  /// Direct write access. Only valid on tensors that are not recorded on the
  /// tape (parameters between steps, freshly built inputs).
  std::span<float> mutable_data();
  float item() const;
  float at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool value);
  bool is_leaf() const;

  bool has_grad() const;
  /// Gradient buffer; empty span when no gradient has been accumulated.
  std::span<const float> grad() const;
  /// Gradient as a constant tensor (zeros when absent).
  Tensor grad_tensor() const;
  void zero_grad();

  /// Deep copy cut from the tape.
  Tensor detach() const;
  /// Deep copy that keeps the requires_grad flag but starts a fresh leaf.
  Tensor clone() const;

  bool valid() const { return static_cast<bool>(impl_); }
  bool shares_storage_with(const Tensor& other) const { return impl_ == other.impl_; }

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Integer label map (class indices). Never differentiable.
struct IntTensor {
  Shape shape;
  std::vector<std::int32_t> data;

  IntTensor() = default;
  IntTensor(Shape s, std::vector<std::int32_t> d);
  static IntTensor zeros(const Shape& s);
  std::size_t numel() const { return data.size(); }
};

// ---------------------------------------------------------------------------
// Tape

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until first accumulation
  bool requires_grad = false;
  // Position on the tape and the tape generation it belongs to.
  std::optional<std::size_t> node;
  std::uint64_t generation = 0;
};

}  // namespace detail

/// Backward closure: receives the output gradient and one gradient buffer per
/// input (nullptr when that input does not need a gradient). Must accumulate.
using BackwardFn = std::function<void(std::span<const float> grad_out, std::span<float* const> grad_in)>;

struct TapeNode {
  std::string op;
  std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
  std::shared_ptr<detail::TensorImpl> output;
  BackwardFn backward;
};

/// Define-by-run recording of differentiable operations, one per thread.
/// Nodes are stored in recording order, which is a topological order.
/// backward() consumes the tape.
class Tape {
 public:
  static Tape& current();

  bool active() const;
  std::size_t size() const { return nodes_.size(); }
  std::uint64_t generation() const { return generation_; }
  const std::vector<TapeNode>& nodes() const { return nodes_; }
  void clear();

  /// Records an op if grad mode is on and any input requires grad; returns
  /// the output tensor either way.
  Tensor record(std::string op, std::vector<Tensor> inputs, Shape out_shape, std::vector<float> out_data,
                BackwardFn backward);

  void backward(const Tensor& loss);

 private:
  std::vector<TapeNode> nodes_;
  std::uint64_t generation_ = 1;
};

/// Grad mode switch (thread local).
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool value);
};

class NoGradGuard {
 public:
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Populates grads of every requires_grad leaf reachable from a scalar loss.
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Operations. No broadcasting except where a signature says so.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float factor);
Tensor add_scalar(const Tensor& a, float value);
Tensor sqrt(const Tensor& a);
Tensor reciprocal(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor reshape(const Tensor& a, const Shape& shape);

Tensor relu(const Tensor& x);

/// Cross-correlation. input [N,Cin,H,W], kernel [Cout,Cin,kh,kw], bias [Cout].
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t padding);
Tensor upsample_nearest2x(const Tensor& x);
Tensor avgpool2x(const Tensor& x);

/// Mean over N*H*W pixels of -log softmax(logits)[label].
Tensor softmax_cross_entropy(const Tensor& logits, const IntTensor& labels);
Tensor mse(const Tensor& a, const Tensor& b);

// Per-instance, per-channel helpers used by the style transforms.

/// [N,C,H,W] -> [N,C] spatial mean.
Tensor spatial_mean(const Tensor& f);
/// f[n,c,:,:] * scale[n,c] + shift[n,c].
Tensor channel_affine(const Tensor& f, const Tensor& scale, const Tensor& shift);
/// t[n,c] * v[n].
Tensor scale_rows(const Tensor& t, const Tensor& v);
/// t[n,c] * v[c].
Tensor scale_cols(const Tensor& t, const Tensor& v);
/// out[i] = t[index[i]] along axis 0.
Tensor gather_rows(const Tensor& t, std::span<const std::size_t> index);

/// Argmax over axis 1 of [N,K,H,W] -> [N,H,W].
IntTensor argmax_channels(const Tensor& logits);

/// Central differences (f(x+h e_i) - f(x-h e_i)) / 2h for every element.
Tensor finite_diff_grad(const std::function<float(const Tensor&)>& f, const Tensor& x, float h = 1e-3f);

// ---------------------------------------------------------------------------
// TNS1: "TNS1", u8 rank, rank x u32 LE dims, LE float32 payload.

void write_tns(std::ostream& out, const Tensor& t);
Tensor read_tns(std::istream& in);
void save_tns(const std::filesystem::path& path, const Tensor& t);
Tensor load_tns(const std::filesystem::path& path);

}  // namespace maxstyle
