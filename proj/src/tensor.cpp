#include "fedbs/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace fedbs {

namespace {

using detail::check_arg;

using MatrixRM =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatrixRM>;
using ConstMapRM = Eigen::Map<const MatrixRM>;

bool wants_grad(const Tape& tape, const Tensor& t) {
  return tape.enabled() && t.requires_grad();
}

}  // namespace

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (std::int64_t d : shape) {
    check_arg(d >= 0, "negative extent in shape " + shape_to_string(shape));
    n *= d;
  }
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) {
  const std::int64_t n = shape_numel(shape);
  impl_ = std::make_shared<detail::TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data.assign(static_cast<std::size_t>(n), fill);
}

Tensor Tensor::from_vector(Shape shape, std::vector<double> values) {
  const std::int64_t n = shape_numel(shape);
  check_arg(n == static_cast<std::int64_t>(values.size()),
            "value count does not match shape " + shape_to_string(shape));
  for (double v : values) {
    check_arg(std::isfinite(v), "non-finite value in tensor payload");
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value) { return from_vector({1}, {value}); }

Tensor Tensor::clone() const {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  impl->requires_grad = impl_->requires_grad;
  return Tensor(std::move(impl));
}

double Tensor::item() const {
  check_arg(numel() == 1, "item() on tensor with " + std::to_string(numel()) +
                              " elements");
  return impl_->data[0];
}

double Tensor::at(const std::vector<std::int64_t>& index) const {
  check_arg(index.size() == impl_->shape.size(), "index rank mismatch");
  std::int64_t flat = 0;
  for (std::size_t i = 0; i < index.size(); ++i) {
    check_arg(index[i] >= 0 && index[i] < impl_->shape[i], "index out of range");
    flat = flat * impl_->shape[i] + index[i];
  }
  return impl_->data[static_cast<std::size_t>(flat)];
}

bool Tensor::all_finite() const {
  for (double v : impl_->data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Tape::record(const Tensor& output, std::function<void()> backward_rule) {
  if (!enabled_) return;
  output.impl_->requires_grad = true;
  entries_.push_back({output.impl_, std::move(backward_rule)});
}

void Tape::backward(const Tensor& loss) {
  check_arg(loss.defined() && loss.numel() == 1,
            "backward requires a scalar loss");
  // Intermediates are zeroed so repeated sweeps accumulate only into leaves.
  for (Entry& e : entries_) {
    e.output->ensure_grad();
    std::fill(e.output->grad.begin(), e.output->grad.end(), 0.0);
  }
  loss.impl_->ensure_grad();
  loss.impl_->grad[0] = 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    it->fn();
  }
}

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  check_arg(a.ndim() == 2 && b.ndim() == 2, "matmul expects 2-D tensors");
  const std::int64_t m = a.shape()[0], k = a.shape()[1];
  const std::int64_t k2 = b.shape()[0], n = b.shape()[1];
  check_arg(k == k2, "matmul inner extents disagree: " +
                         shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
  Tensor out({m, n});
  {
    ConstMapRM ma(a.data().data(), m, k);
    ConstMapRM mb(b.data().data(), k, n);
    MapRM mo(out.data().data(), m, n);
    mo.noalias() = ma * mb;
  }
  if (wants_grad(tape, a) || wants_grad(tape, b)) {
    tape.record(out, [a, b, out, m, k, n]() mutable {
      ConstMapRM go(out.grad().data(), m, n);
      if (a.requires_grad()) {
        MapRM ga(a.grad().data(), m, k);
        ConstMapRM mb(b.data().data(), k, n);
        ga.noalias() += go * mb.transpose();
      }
      if (b.requires_grad()) {
        MapRM gb(b.grad().data(), k, n);
        ConstMapRM ma(a.data().data(), m, k);
        gb.noalias() += ma.transpose() * go;
      }
    });
  }
  return out;
}

namespace {

struct ConvDims {
  std::int64_t batch, cin, h, w;
  std::int64_t cout, cg, kh, kw;  // cg = input channels per group
  std::int64_t groups, cog;       // cog = output channels per group
  std::int64_t ho, wo;
};

ConvDims conv_dims(const Tensor& x, const Tensor& kernel, const Conv2dOpts& o) {
  check_arg(x.ndim() == 4 && kernel.ndim() == 4,
            "conv2d expects 4-D input and kernel");
  ConvDims d{};
  d.batch = x.shape()[0];
  d.cin = x.shape()[1];
  d.h = x.shape()[2];
  d.w = x.shape()[3];
  d.cout = kernel.shape()[0];
  d.cg = kernel.shape()[1];
  d.kh = kernel.shape()[2];
  d.kw = kernel.shape()[3];
  d.groups = o.groups;
  check_arg(o.groups >= 1, "conv2d groups must be >= 1");
  check_arg(d.cin % o.groups == 0,
            "conv2d input channels not divisible by groups");
  check_arg(d.cout % o.groups == 0,
            "conv2d output channels not divisible by groups");
  check_arg(d.cg == d.cin / o.groups, "conv2d kernel channel extent mismatch");
  check_arg(o.stride_h >= 1 && o.stride_w >= 1, "conv2d stride must be >= 1");
  check_arg(o.pad_top >= 0 && o.pad_bottom >= 0 && o.pad_left >= 0 &&
                o.pad_right >= 0,
            "conv2d padding must be >= 0");
  d.cog = d.cout / o.groups;
  d.ho = (d.h + o.pad_top + o.pad_bottom - d.kh) / o.stride_h + 1;
  d.wo = (d.w + o.pad_left + o.pad_right - d.kw) / o.stride_w + 1;
  check_arg(d.ho >= 1 && d.wo >= 1,
            "conv2d output would be empty for input " +
                shape_to_string(x.shape()) + " and kernel " +
                shape_to_string(kernel.shape()));
  return d;
}

// The backbone's convolutions are all 1-by-k or full-height k-by-1; both get
// dedicated data paths (row-local panels / zero-copy slab GEMM) that avoid
// materializing a whole-batch im2col matrix. Everything else takes the
// general im2col route. Path choice depends only on shapes, so results stay
// deterministic run to run.
enum class ConvPath { RowPanel, SlabGemm, General };

ConvPath select_conv_path(const ConvDims& d, const Conv2dOpts& o) {
  if (d.kw == 1 && d.kh == d.h && o.stride_h == 1 && o.stride_w == 1 &&
      o.pad_top == 0 && o.pad_bottom == 0 && o.pad_left == 0 &&
      o.pad_right == 0) {
    return ConvPath::SlabGemm;
  }
  if (d.kh == 1 && o.stride_h == 1 && o.pad_top == 0 && o.pad_bottom == 0) {
    return ConvPath::RowPanel;
  }
  return ConvPath::General;
}

// --- general path: whole-batch im2col + one GEMM per group -----------------

// Gathers the group-g input patches into a (cg*kh*kw) x (batch*ho*wo) matrix.
void im2col(const std::vector<double>& x, const ConvDims& d,
            const Conv2dOpts& o, std::int64_t g, Eigen::MatrixXd& col) {
  const std::int64_t patch = d.cg * d.kh * d.kw;
  const std::int64_t cols = d.batch * d.ho * d.wo;
  col.resize(patch, cols);
  std::int64_t n = 0;
  for (std::int64_t b = 0; b < d.batch; ++b) {
    for (std::int64_t oh = 0; oh < d.ho; ++oh) {
      const std::int64_t ih0 = oh * o.stride_h - o.pad_top;
      for (std::int64_t ow = 0; ow < d.wo; ++ow, ++n) {
        const std::int64_t iw0 = ow * o.stride_w - o.pad_left;
        double* dst = col.data() + n * patch;
        for (std::int64_t c = 0; c < d.cg; ++c) {
          const std::int64_t ch = g * d.cg + c;
          const double* src = x.data() + ((b * d.cin + ch) * d.h) * d.w;
          for (std::int64_t ki = 0; ki < d.kh; ++ki) {
            const std::int64_t ih = ih0 + ki;
            if (ih < 0 || ih >= d.h) {
              for (std::int64_t kj = 0; kj < d.kw; ++kj) *dst++ = 0.0;
              continue;
            }
            const double* row = src + ih * d.w;
            for (std::int64_t kj = 0; kj < d.kw; ++kj) {
              const std::int64_t iw = iw0 + kj;
              *dst++ = (iw >= 0 && iw < d.w) ? row[iw] : 0.0;
            }
          }
        }
      }
    }
  }
}

void col2im_accumulate(const Eigen::MatrixXd& col, const ConvDims& d,
                       const Conv2dOpts& o, std::int64_t g,
                       std::vector<double>& dx) {
  const std::int64_t patch = d.cg * d.kh * d.kw;
  std::int64_t n = 0;
  for (std::int64_t b = 0; b < d.batch; ++b) {
    for (std::int64_t oh = 0; oh < d.ho; ++oh) {
      const std::int64_t ih0 = oh * o.stride_h - o.pad_top;
      for (std::int64_t ow = 0; ow < d.wo; ++ow, ++n) {
        const std::int64_t iw0 = ow * o.stride_w - o.pad_left;
        const double* src = col.data() + n * patch;
        for (std::int64_t c = 0; c < d.cg; ++c) {
          const std::int64_t ch = g * d.cg + c;
          double* dst = dx.data() + ((b * d.cin + ch) * d.h) * d.w;
          for (std::int64_t ki = 0; ki < d.kh; ++ki) {
            const std::int64_t ih = ih0 + ki;
            if (ih < 0 || ih >= d.h) {
              src += d.kw;
              continue;
            }
            double* row = dst + ih * d.w;
            for (std::int64_t kj = 0; kj < d.kw; ++kj) {
              const std::int64_t iw = iw0 + kj;
              if (iw >= 0 && iw < d.w) row[iw] += src[kj];
            }
            src += d.kw;
          }
        }
      }
    }
  }
}

void conv_general_forward(const Tensor& x, const Tensor& kernel, Tensor& out,
                          const ConvDims& d, const Conv2dOpts& o) {
  const std::int64_t patch = d.cg * d.kh * d.kw;
  const std::int64_t ncols = d.batch * d.ho * d.wo;
  Eigen::MatrixXd col;
  Eigen::MatrixXd y(d.cog, ncols);
  for (std::int64_t g = 0; g < d.groups; ++g) {
    im2col(x.data(), d, o, g, col);
    ConstMapRM wg(kernel.data().data() + g * d.cog * patch, d.cog, patch);
    y.noalias() = wg * col;
    // y is (cog x [b,oh,ow]); scatter into the [b][cout][oh][ow] layout.
    for (std::int64_t co = 0; co < d.cog; ++co) {
      const std::int64_t ch = g * d.cog + co;
      std::int64_t n = 0;
      for (std::int64_t b = 0; b < d.batch; ++b) {
        double* dst = out.data().data() + ((b * d.cout + ch) * d.ho) * d.wo;
        for (std::int64_t i = 0; i < d.ho * d.wo; ++i, ++n) dst[i] = y(co, n);
      }
    }
  }
}

void conv_general_backward(const Tensor& x, const Tensor& kernel,
                           const Tensor& out, const ConvDims& d,
                           const Conv2dOpts& o) {
  const std::int64_t patch = d.cg * d.kh * d.kw;
  const std::int64_t ncols = d.batch * d.ho * d.wo;
  Eigen::MatrixXd col;
  Eigen::MatrixXd gy(d.cog, ncols);
  for (std::int64_t g = 0; g < d.groups; ++g) {
    for (std::int64_t co = 0; co < d.cog; ++co) {
      const std::int64_t ch = g * d.cog + co;
      std::int64_t n = 0;
      for (std::int64_t b = 0; b < d.batch; ++b) {
        const double* src =
            out.grad().data() + ((b * d.cout + ch) * d.ho) * d.wo;
        for (std::int64_t i = 0; i < d.ho * d.wo; ++i, ++n) gy(co, n) = src[i];
      }
    }
    if (kernel.requires_grad()) {
      im2col(x.data(), d, o, g, col);
      MapRM gw(kernel.grad().data() + g * d.cog * patch, d.cog, patch);
      gw.noalias() += gy * col.transpose();
    }
    if (x.requires_grad()) {
      ConstMapRM wg(kernel.data().data() + g * d.cog * patch, d.cog, patch);
      Eigen::MatrixXd gcol = wg.transpose() * gy;
      col2im_accumulate(gcol, d, o, g, x.grad());
    }
  }
}

// --- row-panel path: kh == 1, vertical geometry untouched ------------------
//
// Every (batch, row, group) triple is independent. A zero-padded copy of one
// input row exposes its kw x wo sliding window as a (stride_w, 1)-strided
// map, so the row's contribution is a small GEMM with cache-resident
// operands instead of a slice of a batch-sized im2col matrix.

using PanelMap =
    Eigen::Map<const Eigen::MatrixXd, 0, Eigen::Stride<Eigen::Dynamic, 1>>;
using KernelSliceMap = Eigen::Map<const MatrixRM, 0, Eigen::OuterStride<>>;
using MutKernelSliceMap = Eigen::Map<MatrixRM, 0, Eigen::OuterStride<>>;

void conv_rowpanel_forward(const Tensor& x, const Tensor& kernel, Tensor& out,
                           const ConvDims& d, const Conv2dOpts& o) {
  const std::int64_t padw = d.w + o.pad_left + o.pad_right;
  std::vector<double> prow(static_cast<std::size_t>(padw), 0.0);
  MatrixRM y(d.cog, d.wo);
  const double* xv = x.data().data();
  const double* kv = kernel.data().data();
  double* yv = out.data().data();
  for (std::int64_t b = 0; b < d.batch; ++b) {
    for (std::int64_t g = 0; g < d.groups; ++g) {
      for (std::int64_t r = 0; r < d.h; ++r) {
        y.setZero();
        for (std::int64_t c = 0; c < d.cg; ++c) {
          const double* src = xv + ((b * d.cin + g * d.cg + c) * d.h + r) * d.w;
          std::memcpy(prow.data() + o.pad_left, src,
                      static_cast<std::size_t>(d.w) * sizeof(double));
          PanelMap panel(prow.data(), d.kw, d.wo,
                         Eigen::Stride<Eigen::Dynamic, 1>(o.stride_w, 1));
          KernelSliceMap wc(kv + (g * d.cog * d.cg + c) * d.kw, d.cog, d.kw,
                            Eigen::OuterStride<>(d.cg * d.kw));
          y.noalias() += wc * panel;
        }
        for (std::int64_t co = 0; co < d.cog; ++co) {
          double* dst = yv + ((b * d.cout + g * d.cog + co) * d.ho + r) * d.wo;
          std::memcpy(dst, y.data() + co * d.wo,
                      static_cast<std::size_t>(d.wo) * sizeof(double));
        }
      }
    }
  }
}

void conv_rowpanel_backward(const Tensor& x, const Tensor& kernel,
                            const Tensor& out, const ConvDims& d,
                            const Conv2dOpts& o) {
  const std::int64_t padw = d.w + o.pad_left + o.pad_right;
  std::vector<double> prow(static_cast<std::size_t>(padw), 0.0);
  Eigen::MatrixXd dpanel(d.kw, d.wo);
  const double* xv = x.data().data();
  const double* kv = kernel.data().data();
  const double* yg = out.grad().data();
  const bool need_dw = kernel.requires_grad();
  const bool need_dx = x.requires_grad();
  for (std::int64_t b = 0; b < d.batch; ++b) {
    for (std::int64_t g = 0; g < d.groups; ++g) {
      for (std::int64_t r = 0; r < d.h; ++r) {
        // dy rows for this (b, r) sit ho*wo apart across output channels.
        KernelSliceMap dy(yg + ((b * d.cout + g * d.cog) * d.ho + r) * d.wo,
                          d.cog, d.wo, Eigen::OuterStride<>(d.ho * d.wo));
        for (std::int64_t c = 0; c < d.cg; ++c) {
          if (need_dw) {
            const double* src =
                xv + ((b * d.cin + g * d.cg + c) * d.h + r) * d.w;
            std::memcpy(prow.data() + o.pad_left, src,
                        static_cast<std::size_t>(d.w) * sizeof(double));
            PanelMap panel(prow.data(), d.kw, d.wo,
                           Eigen::Stride<Eigen::Dynamic, 1>(o.stride_w, 1));
            MutKernelSliceMap dwc(
                kernel.grad().data() + (g * d.cog * d.cg + c) * d.kw, d.cog,
                d.kw, Eigen::OuterStride<>(d.cg * d.kw));
            dwc.noalias() += dy * panel.transpose();
          }
          if (need_dx) {
            KernelSliceMap wc(kv + (g * d.cog * d.cg + c) * d.kw, d.cog, d.kw,
                              Eigen::OuterStride<>(d.cg * d.kw));
            // Window positions overlap in the input row, so the panel
            // gradient must be materialized and scatter-added.
            dpanel.noalias() = wc.transpose() * dy;
            double* dst = x.grad().data() +
                          ((b * d.cin + g * d.cg + c) * d.h + r) * d.w;
            for (std::int64_t t = 0; t < d.wo; ++t) {
              const std::int64_t base = t * o.stride_w - o.pad_left;
              for (std::int64_t j = 0; j < d.kw; ++j) {
                const std::int64_t iw = base + j;
                if (iw >= 0 && iw < d.w) dst[iw] += dpanel(j, t);
              }
            }
          }
        }
      }
    }
  }
}

// --- slab path: kw == 1, kernel spans the full height, no padding ----------
//
// Each patch is an entire (cg*h) column, so the im2col matrix IS the input
// slab already in memory: one zero-copy GEMM per (batch, group).

void conv_slab_forward(const Tensor& x, const Tensor& kernel, Tensor& out,
                       const ConvDims& d) {
  const std::int64_t k = d.cg * d.kh;
  const double* xv = x.data().data();
  const double* kv = kernel.data().data();
  double* yv = out.data().data();
  for (std::int64_t b = 0; b < d.batch; ++b) {
    for (std::int64_t g = 0; g < d.groups; ++g) {
      ConstMapRM slab(xv + (b * d.cin + g * d.cg) * d.h * d.w, k, d.w);
      ConstMapRM wg(kv + g * d.cog * k, d.cog, k);
      MapRM y(yv + (b * d.cout + g * d.cog) * d.wo, d.cog, d.wo);
      y.noalias() = wg * slab;
    }
  }
}

void conv_slab_backward(const Tensor& x, const Tensor& kernel,
                        const Tensor& out, const ConvDims& d) {
  const std::int64_t k = d.cg * d.kh;
  const double* xv = x.data().data();
  const double* kv = kernel.data().data();
  const double* yg = out.grad().data();
  for (std::int64_t b = 0; b < d.batch; ++b) {
    for (std::int64_t g = 0; g < d.groups; ++g) {
      ConstMapRM dy(yg + (b * d.cout + g * d.cog) * d.wo, d.cog, d.wo);
      if (kernel.requires_grad()) {
        ConstMapRM slab(xv + (b * d.cin + g * d.cg) * d.h * d.w, k, d.w);
        MapRM dw(kernel.grad().data() + g * d.cog * k, d.cog, k);
        dw.noalias() += dy * slab.transpose();
      }
      if (x.requires_grad()) {
        ConstMapRM wg(kv + g * d.cog * k, d.cog, k);
        MapRM dslab(x.grad().data() + (b * d.cin + g * d.cg) * d.h * d.w, k,
                    d.w);
        dslab.noalias() += wg.transpose() * dy;
      }
    }
  }
}

}  // namespace

Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& kernel,
              const Conv2dOpts& opts) {
  const ConvDims d = conv_dims(x, kernel, opts);
  Tensor out({d.batch, d.cout, d.ho, d.wo});
  const ConvPath path = select_conv_path(d, opts);
  switch (path) {
    case ConvPath::RowPanel:
      conv_rowpanel_forward(x, kernel, out, d, opts);
      break;
    case ConvPath::SlabGemm:
      conv_slab_forward(x, kernel, out, d);
      break;
    case ConvPath::General:
      conv_general_forward(x, kernel, out, d, opts);
      break;
  }

  if (wants_grad(tape, x) || wants_grad(tape, kernel)) {
    tape.record(out, [x, kernel, out, d, opts, path]() mutable {
      switch (path) {
        case ConvPath::RowPanel:
          conv_rowpanel_backward(x, kernel, out, d, opts);
          break;
        case ConvPath::SlabGemm:
          conv_slab_backward(x, kernel, out, d);
          break;
        case ConvPath::General:
          conv_general_backward(x, kernel, out, d, opts);
          break;
      }
    });
  }
  return out;
}

Tensor avg_pool2d(Tape& tape, const Tensor& x, std::int64_t kh,
                  std::int64_t kw) {
  check_arg(x.ndim() == 4, "avg_pool2d expects a 4-D tensor");
  check_arg(kh >= 1 && kw >= 1, "avg_pool2d kernel must be >= 1");
  const std::int64_t batch = x.shape()[0], ch = x.shape()[1];
  const std::int64_t h = x.shape()[2], w = x.shape()[3];
  const std::int64_t ho = h / kh, wo = w / kw;
  check_arg(ho >= 1 && wo >= 1, "avg_pool2d output would be empty");
  Tensor out({batch, ch, ho, wo});
  const double inv = 1.0 / static_cast<double>(kh * kw);
  for (std::int64_t bc = 0; bc < batch * ch; ++bc) {
    const double* src = x.data().data() + bc * h * w;
    double* dst = out.data().data() + bc * ho * wo;
    for (std::int64_t oh = 0; oh < ho; ++oh) {
      for (std::int64_t ow = 0; ow < wo; ++ow) {
        double acc = 0.0;
        for (std::int64_t ki = 0; ki < kh; ++ki) {
          const double* row = src + (oh * kh + ki) * w + ow * kw;
          for (std::int64_t kj = 0; kj < kw; ++kj) acc += row[kj];
        }
        dst[oh * wo + ow] = acc * inv;
      }
    }
  }
  if (wants_grad(tape, x)) {
    tape.record(out, [x, out, batch, ch, h, w, ho, wo, kh, kw, inv]() mutable {
      for (std::int64_t bc = 0; bc < batch * ch; ++bc) {
        double* dst = x.grad().data() + bc * h * w;
        const double* src = out.grad().data() + bc * ho * wo;
        for (std::int64_t oh = 0; oh < ho; ++oh) {
          for (std::int64_t ow = 0; ow < wo; ++ow) {
            const double g = src[oh * wo + ow] * inv;
            for (std::int64_t ki = 0; ki < kh; ++ki) {
              double* row = dst + (oh * kh + ki) * w + ow * kw;
              for (std::int64_t kj = 0; kj < kw; ++kj) row[kj] += g;
            }
          }
        }
      }
    });
  }
  return out;
}

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  check_arg(a.shape() == b.shape(),
            std::string(op) + " shape mismatch: " + shape_to_string(a.shape()) +
                " vs " + shape_to_string(b.shape()));
}

}  // namespace

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out(a.shape());
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i)
    out.data()[i] = a.data()[i] + b.data()[i];
  if (wants_grad(tape, a) || wants_grad(tape, b)) {
    tape.record(out, [a, b, out, n]() mutable {
      if (a.requires_grad()) {
        for (std::int64_t i = 0; i < n; ++i) a.grad()[i] += out.grad()[i];
      }
      if (b.requires_grad()) {
        for (std::int64_t i = 0; i < n; ++i) b.grad()[i] += out.grad()[i];
      }
    });
  }
  return out;
}

Tensor add_bias(Tape& tape, const Tensor& x, const Tensor& bias) {
  check_arg(
      x.ndim() == 2 && bias.ndim() == 1 && bias.shape()[0] == x.shape()[1],
      "add_bias expects x[B,F] and bias[F]");
  const std::int64_t rows = x.shape()[0], cols = x.shape()[1];
  Tensor out(x.shape());
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::int64_t c = 0; c < cols; ++c) {
      out.data()[r * cols + c] = x.data()[r * cols + c] + bias.data()[c];
    }
  }
  if (wants_grad(tape, x) || wants_grad(tape, bias)) {
    tape.record(out, [x, bias, out, rows, cols]() mutable {
      if (x.requires_grad()) {
        for (std::int64_t i = 0; i < rows * cols; ++i)
          x.grad()[i] += out.grad()[i];
      }
      if (bias.requires_grad()) {
        for (std::int64_t r = 0; r < rows; ++r) {
          for (std::int64_t c = 0; c < cols; ++c)
            bias.grad()[c] += out.grad()[r * cols + c];
        }
      }
    });
  }
  return out;
}

Tensor add_scalar(Tape& tape, const Tensor& x, double c) {
  Tensor out(x.shape());
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] + c;
  if (wants_grad(tape, x)) {
    tape.record(out, [x, out, n]() mutable {
      for (std::int64_t i = 0; i < n; ++i) x.grad()[i] += out.grad()[i];
    });
  }
  return out;
}

Tensor scale(Tape& tape, const Tensor& x, double c) {
  Tensor out(x.shape());
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] * c;
  if (wants_grad(tape, x)) {
    tape.record(out, [x, out, c, n]() mutable {
      for (std::int64_t i = 0; i < n; ++i) x.grad()[i] += c * out.grad()[i];
    });
  }
  return out;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Tensor out(a.shape());
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i)
    out.data()[i] = a.data()[i] * b.data()[i];
  if (wants_grad(tape, a) || wants_grad(tape, b)) {
    tape.record(out, [a, b, out, n]() mutable {
      if (a.requires_grad()) {
        for (std::int64_t i = 0; i < n; ++i)
          a.grad()[i] += b.data()[i] * out.grad()[i];
      }
      if (b.requires_grad()) {
        for (std::int64_t i = 0; i < n; ++i)
          b.grad()[i] += a.data()[i] * out.grad()[i];
      }
    });
  }
  return out;
}

Tensor square(Tape& tape, const Tensor& x) {
  Tensor out(x.shape());
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i)
    out.data()[i] = x.data()[i] * x.data()[i];
  if (wants_grad(tape, x)) {
    tape.record(out, [x, out, n]() mutable {
      for (std::int64_t i = 0; i < n; ++i)
        x.grad()[i] += 2.0 * x.data()[i] * out.grad()[i];
    });
  }
  return out;
}

Tensor sqrt(Tape& tape, const Tensor& x) {
  const std::int64_t n = x.numel();
  Tensor out(x.shape());
  for (std::int64_t i = 0; i < n; ++i) {
    check_arg(x.data()[i] >= 0.0, "sqrt of negative value");
    out.data()[i] = std::sqrt(x.data()[i]);
  }
  if (wants_grad(tape, x)) {
    tape.record(out, [x, out, n]() mutable {
      for (std::int64_t i = 0; i < n; ++i)
        x.grad()[i] += 0.5 / out.data()[i] * out.grad()[i];
    });
  }
  return out;
}

Tensor log(Tape& tape, const Tensor& x) {
  const std::int64_t n = x.numel();
  Tensor out(x.shape());
  for (std::int64_t i = 0; i < n; ++i) {
    check_arg(x.data()[i] > 0.0, "log of non-positive value");
    out.data()[i] = std::log(x.data()[i]);
  }
  if (wants_grad(tape, x)) {
    tape.record(out, [x, out, n]() mutable {
      for (std::int64_t i = 0; i < n; ++i)
        x.grad()[i] += out.grad()[i] / x.data()[i];
    });
  }
  return out;
}

Tensor elu(Tape& tape, const Tensor& x) {
  const std::int64_t n = x.numel();
  Tensor out(x.shape());
  for (std::int64_t i = 0; i < n; ++i) {
    const double v = x.data()[i];
    out.data()[i] = v > 0.0 ? v : std::expm1(v);
  }
  if (wants_grad(tape, x)) {
    tape.record(out, [x, out, n]() mutable {
      for (std::int64_t i = 0; i < n; ++i) {
        const double v = x.data()[i];
        const double d = v > 0.0 ? 1.0 : out.data()[i] + 1.0;
        x.grad()[i] += d * out.grad()[i];
      }
    });
  }
  return out;
}

Tensor relu(Tape& tape, const Tensor& x) {
  const std::int64_t n = x.numel();
  Tensor out(x.shape());
  for (std::int64_t i = 0; i < n; ++i)
    out.data()[i] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
  if (wants_grad(tape, x)) {
    tape.record(out, [x, out, n]() mutable {
      for (std::int64_t i = 0; i < n; ++i) {
        if (x.data()[i] > 0.0) x.grad()[i] += out.grad()[i];
      }
    });
  }
  return out;
}

Tensor mean_all(Tape& tape, const Tensor& x) {
  const std::int64_t n = x.numel();
  check_arg(n >= 1, "mean of empty tensor");
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  Tensor out = Tensor::from_vector({1}, {acc / static_cast<double>(n)});
  if (wants_grad(tape, x)) {
    tape.record(out, [x, out, n]() mutable {
      const double g = out.grad()[0] / static_cast<double>(n);
      for (std::int64_t i = 0; i < n; ++i) x.grad()[i] += g;
    });
  }
  return out;
}

Tensor sum_all(Tape& tape, const Tensor& x) {
  const std::int64_t n = x.numel();
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  Tensor out = Tensor::from_vector({1}, {acc});
  if (wants_grad(tape, x)) {
    tape.record(out, [x, out, n]() mutable {
      const double g = out.grad()[0];
      for (std::int64_t i = 0; i < n; ++i) x.grad()[i] += g;
    });
  }
  return out;
}

Tensor reshape(Tape& tape, const Tensor& x, Shape new_shape) {
  check_arg(shape_numel(new_shape) == x.numel(),
            "reshape to incompatible shape " + shape_to_string(new_shape));
  Tensor out(new_shape);
  out.data() = x.data();
  if (wants_grad(tape, x)) {
    const std::int64_t n = x.numel();
    tape.record(out, [x, out, n]() mutable {
      for (std::int64_t i = 0; i < n; ++i) x.grad()[i] += out.grad()[i];
    });
  }
  return out;
}

Tensor dropout(Tape& tape, const Tensor& x, double p, Rng& rng, bool training,
               std::vector<double>* mask_out) {
  check_arg(p >= 0.0 && p < 1.0, "dropout p must be in [0,1)");
  if (!training) {
    if (mask_out) mask_out->clear();
    return x;
  }
  const std::int64_t n = x.numel();
  std::vector<double> mask(static_cast<std::size_t>(n));
  const double keep_scale = 1.0 / (1.0 - p);
  for (std::int64_t i = 0; i < n; ++i) {
    mask[i] = rng.uniform() < p ? 0.0 : keep_scale;
  }
  if (mask_out) *mask_out = mask;
  return dropout_apply(tape, x, mask);
}

Tensor dropout_apply(Tape& tape, const Tensor& x,
                     const std::vector<double>& mask) {
  const std::int64_t n = x.numel();
  check_arg(static_cast<std::int64_t>(mask.size()) == n,
            "dropout mask size mismatch");
  Tensor out(x.shape());
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] * mask[i];
  if (wants_grad(tape, x)) {
    tape.record(out, [x, out, mask, n]() mutable {
      for (std::int64_t i = 0; i < n; ++i)
        x.grad()[i] += mask[i] * out.grad()[i];
    });
  }
  return out;
}

Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits,
                             const std::vector<int>& labels) {
  check_arg(logits.ndim() == 2, "softmax_cross_entropy expects [B,N] logits");
  const std::int64_t batch = logits.shape()[0], classes = logits.shape()[1];
  check_arg(static_cast<std::int64_t>(labels.size()) == batch,
            "label count does not match batch");
  for (int y : labels) {
    check_arg(y >= 1 && y <= classes,
              "label " + std::to_string(y) + " out of range 1.." +
                  std::to_string(classes));
  }
  // Stabilized log-softmax; probabilities kept for the backward rule.
  auto probs = std::make_shared<std::vector<double>>(
      static_cast<std::size_t>(batch * classes));
  double total = 0.0;
  for (std::int64_t r = 0; r < batch; ++r) {
    const double* row = logits.data().data() + r * classes;
    double m = row[0];
    for (std::int64_t c = 1; c < classes; ++c) m = std::max(m, row[c]);
    double z = 0.0;
    for (std::int64_t c = 0; c < classes; ++c) z += std::exp(row[c] - m);
    const double log_z = std::log(z);
    total += log_z - (row[labels[r] - 1] - m);
    for (std::int64_t c = 0; c < classes; ++c) {
      (*probs)[r * classes + c] = std::exp(row[c] - m) / z;
    }
  }
  Tensor out = Tensor::from_vector({1}, {total / static_cast<double>(batch)});
  if (wants_grad(tape, logits)) {
    tape.record(out, [logits, out, labels, probs, batch, classes]() mutable {
      const double g = out.grad()[0] / static_cast<double>(batch);
      for (std::int64_t r = 0; r < batch; ++r) {
        for (std::int64_t c = 0; c < classes; ++c) {
          const double onehot = (c == labels[r] - 1) ? 1.0 : 0.0;
          logits.grad()[r * classes + c] +=
              g * ((*probs)[r * classes + c] - onehot);
        }
      }
    });
  }
  return out;
}

std::vector<std::int64_t> argmax_rows(const Tensor& t) {
  check_arg(t.ndim() == 2, "argmax_rows expects a 2-D tensor");
  const std::int64_t rows = t.shape()[0], cols = t.shape()[1];
  std::vector<std::int64_t> out(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* row = t.data().data() + r * cols;
    std::int64_t best = 0;
    for (std::int64_t c = 1; c < cols; ++c) {
      if (row[c] > row[best]) best = c;
    }
    out[r] = best;
  }
  return out;
}

}  // namespace fedbs
