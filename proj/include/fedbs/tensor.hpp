#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedbs/rng.hpp"

namespace fedbs {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

namespace detail {

inline void check_arg(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until first needed; same length as data

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

/// Dense row-major f64 tensor. Copying a Tensor copies the handle (shared
/// storage); use clone() for an independent copy.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0);

  static Tensor from_vector(Shape shape, std::vector<double> values);
  static Tensor scalar(double value);
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::int64_t ndim() const { return static_cast<std::int64_t>(impl_->shape.size()); }
  std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

  /// Value buffer. Handles share storage (shared_ptr semantics), so a const
  /// handle reaches the same mutable buffer; use clone() for a detached copy.
  std::vector<double>& data() const { return impl_->data; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool value) { impl_->requires_grad = value; }

  /// Gradient buffer; allocated (zero-filled) on first access. Handles share
  /// storage, so a const handle reaches the same mutable buffer.
  std::vector<double>& grad() const {
    impl_->ensure_grad();
    return impl_->grad;
  }
  bool has_grad() const { return !impl_->grad.empty(); }
  void zero_grad() {
    if (!impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  }

  /// Deep copy (fresh storage, same values and requires_grad; grad not copied).
  Tensor clone() const;

  /// Value of a one-element tensor.
  double item() const;

  double at(const std::vector<std::int64_t>& index) const;

  /// True if every stored value is finite.
  bool all_finite() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

  std::shared_ptr<detail::TensorImpl> impl_;

  friend class Tape;
};

/// Records executed operations in order; one reverse sweep computes
/// gradients for every requires_grad leaf reachable from the loss.
///
/// Contract: run backward() before mutating any input tensor of a recorded
/// op (backward rules read inputs through their handles).
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool enabled() const { return enabled_; }
  void set_enabled(bool value) { enabled_ = value; }

  /// Marks `output` as produced on this tape and registers its backward rule.
  void record(const Tensor& output, std::function<void()> backward_rule);

  /// Reverse sweep from a scalar loss. Leaf gradients accumulate across
  /// repeated calls; intermediate gradients are reset each call.
  void backward(const Tensor& loss);

  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

 private:
  struct Entry {
    std::shared_ptr<detail::TensorImpl> output;
    std::function<void()> fn;
  };
  bool enabled_ = true;
  std::vector<Entry> entries_;
};

struct Conv2dOpts {
  std::int64_t stride_h = 1;
  std::int64_t stride_w = 1;
  std::int64_t pad_top = 0;
  std::int64_t pad_bottom = 0;
  std::int64_t pad_left = 0;
  std::int64_t pad_right = 0;
  std::int64_t groups = 1;
};

// --- differentiable operations -------------------------------------------

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);

/// Cross-correlation over x[B,Cin,H,W] with kernel[Cout,Cin/g,kh,kw].
Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& kernel,
              const Conv2dOpts& opts = {});

/// Non-overlapping average pooling (stride == kernel), floor output extents.
Tensor avg_pool2d(Tape& tape, const Tensor& x, std::int64_t kh, std::int64_t kw);

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
/// x[B,F] + bias[F], broadcast over rows.
Tensor add_bias(Tape& tape, const Tensor& x, const Tensor& bias);
Tensor add_scalar(Tape& tape, const Tensor& x, double c);
Tensor scale(Tape& tape, const Tensor& x, double c);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor square(Tape& tape, const Tensor& x);
Tensor sqrt(Tape& tape, const Tensor& x);
Tensor log(Tape& tape, const Tensor& x);
Tensor elu(Tape& tape, const Tensor& x);
Tensor relu(Tape& tape, const Tensor& x);
Tensor mean_all(Tape& tape, const Tensor& x);
Tensor sum_all(Tape& tape, const Tensor& x);
Tensor reshape(Tape& tape, const Tensor& x, Shape new_shape);

/// Training-mode dropout: keeps a unit with probability 1-p and scales it by
/// 1/(1-p); identity when training is false. The generated mask can be
/// captured via mask_out and replayed through dropout_apply.
Tensor dropout(Tape& tape, const Tensor& x, double p, Rng& rng, bool training,
               std::vector<double>* mask_out = nullptr);
Tensor dropout_apply(Tape& tape, const Tensor& x, const std::vector<double>& mask);

/// Mean over the batch of -log softmax(logits)[label]; labels are 1-based
/// class ids in {1..N_c}.
Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits,
                             const std::vector<int>& labels);

// --- non-differentiable utilities ----------------------------------------

/// Row-wise argmax of a [B,N] tensor (first index on ties).
std::vector<std::int64_t> argmax_rows(const Tensor& t);

}  // namespace fedbs
