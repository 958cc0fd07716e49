#include "fedbs/nn.hpp"

#include "io_util.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <unordered_map>
#include <utility>

namespace fedbs {

namespace {

using detail::check_arg;

Tensor uniform_init(Shape shape, std::int64_t fan_in, Rng& rng) {
  check_arg(fan_in >= 1, "fan_in must be positive");
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (double& x : v) x = rng.uniform(-bound, bound);
  Tensor t = Tensor::from_vector(std::move(shape), std::move(v));
  t.set_requires_grad(true);
  return t;
}

class Conv2dLayer final : public Layer {
 public:
  Conv2dLayer(std::string name, Shape kernel_shape, Conv2dOpts opts, Rng& rng)
      : name_(std::move(name)), opts_(opts) {
    const std::int64_t fan_in =
        kernel_shape[1] * kernel_shape[2] * kernel_shape[3];
    weight_ = uniform_init(std::move(kernel_shape), fan_in, rng);
  }

  Tensor forward(Tape& tape, const Tensor& x, ForwardContext&) override {
    return conv2d(tape, x, weight_, opts_);
  }

  void collect_params(std::vector<ParamRef>& out) override {
    out.push_back({name_ + ".weight", weight_, false, true});
  }

 private:
  std::string name_;
  Tensor weight_;
  Conv2dOpts opts_;
};

class Dense final : public Layer {
 public:
  Dense(std::string name, std::int64_t in_features, std::int64_t out_features,
        Rng& rng)
      : name_(std::move(name)) {
    weight_ = uniform_init({in_features, out_features}, in_features, rng);
    bias_ = uniform_init({out_features}, in_features, rng);
  }

  Tensor forward(Tape& tape, const Tensor& x, ForwardContext&) override {
    return add_bias(tape, matmul(tape, x, weight_), bias_);
  }

  void collect_params(std::vector<ParamRef>& out) override {
    out.push_back({name_ + ".weight", weight_, false, true});
    out.push_back({name_ + ".bias", bias_, false, true});
  }

 private:
  std::string name_;
  Tensor weight_, bias_;
};

class EluLayer final : public Layer {
 public:
  Tensor forward(Tape& tape, const Tensor& x, ForwardContext&) override {
    return elu(tape, x);
  }
};

class ReluLayer final : public Layer {
 public:
  Tensor forward(Tape& tape, const Tensor& x, ForwardContext&) override {
    return relu(tape, x);
  }
};

class AvgPoolLayer final : public Layer {
 public:
  AvgPoolLayer(std::int64_t kh, std::int64_t kw) : kh_(kh), kw_(kw) {}
  Tensor forward(Tape& tape, const Tensor& x, ForwardContext&) override {
    return avg_pool2d(tape, x, kh_, kw_);
  }

 private:
  std::int64_t kh_, kw_;
};

class DropoutLayer final : public Layer {
 public:
  explicit DropoutLayer(double p) : p_(p) {
    check_arg(p >= 0.0 && p < 1.0, "dropout p must be in [0,1)");
  }

  Tensor forward(Tape& tape, const Tensor& x, ForwardContext& ctx) override {
    if (!ctx.training || p_ == 0.0) return x;
    if (ctx.reuse_dropout_mask) {
      check_arg(mask_.size() == static_cast<std::size_t>(x.numel()),
                "dropout mask replay: no mask of matching size from a "
                "previous forward");
      return dropout_apply(tape, x, mask_);
    }
    check_arg(ctx.rng != nullptr, "training-mode dropout requires ctx.rng");
    return dropout(tape, x, p_, *ctx.rng, true, &mask_);
  }

 private:
  double p_;
  std::vector<double> mask_;
};

class FlattenLayer final : public Layer {
 public:
  Tensor forward(Tape& tape, const Tensor& x, ForwardContext&) override {
    check_arg(x.ndim() >= 2, "flatten expects a batch dimension");
    const std::int64_t batch = x.shape()[0];
    if (x.ndim() == 2) return x;
    return reshape(tape, x, {batch, x.numel() / batch});
  }
};

/// Adapts [B, C, T] trial batches to the [B, 1, C, T] layout convs expect.
class TrialInputLayer final : public Layer {
 public:
  TrialInputLayer(std::int64_t channels, std::int64_t samples)
      : channels_(channels), samples_(samples) {}

  Tensor forward(Tape& tape, const Tensor& x, ForwardContext&) override {
    if (x.ndim() == 4) {
      check_arg(x.shape()[1] == 1 && x.shape()[2] == channels_ &&
                    x.shape()[3] == samples_,
                "input shape " + shape_to_string(x.shape()) +
                    " does not match backbone spec");
      return x;
    }
    check_arg(x.ndim() == 3 && x.shape()[1] == channels_ &&
                  x.shape()[2] == samples_,
              "input shape " + shape_to_string(x.shape()) +
                  " does not match backbone spec");
    return reshape(tape, x, {x.shape()[0], 1, channels_, samples_});
  }

 private:
  std::int64_t channels_, samples_;
};

}  // namespace

const ParamSetEntry* ParamSet::find(std::string_view name) const {
  for (const auto& e : entries) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

ParamSetEntry* ParamSet::find(std::string_view name) {
  for (auto& e : entries) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

Tensor batchnorm(Tape& tape, const Tensor& x, const Tensor& gamma,
                 const Tensor& beta, double eps,
                 const std::vector<double>* fixed_mean,
                 const std::vector<double>* fixed_var,
                 std::vector<double>* mean_out, std::vector<double>* var_out) {
  check_arg(x.ndim() >= 2, "batchnorm expects a [B, Ch, ...] tensor");
  check_arg(eps > 0.0, "batchnorm eps must be positive");
  const std::int64_t outer = x.shape()[0];
  const std::int64_t channels = x.shape()[1];
  const std::int64_t inner = x.numel() / (outer * channels);
  const std::int64_t n = outer * inner;  // elements per channel
  check_arg(n >= 1, "batchnorm needs at least one element per channel");
  check_arg(gamma.ndim() == 1 && gamma.shape()[0] == channels &&
                beta.ndim() == 1 && beta.shape()[0] == channels,
            "gamma/beta must be 1-D of length " + std::to_string(channels));

  const bool use_fixed = fixed_mean != nullptr;
  check_arg(use_fixed == (fixed_var != nullptr),
            "fixed mean and variance must be supplied together");

  auto mean = std::make_shared<std::vector<double>>(
      static_cast<std::size_t>(channels), 0.0);
  auto var = std::make_shared<std::vector<double>>(
      static_cast<std::size_t>(channels), 0.0);
  if (use_fixed) {
    check_arg(static_cast<std::int64_t>(fixed_mean->size()) == channels &&
                  static_cast<std::int64_t>(fixed_var->size()) == channels,
              "fixed statistics length mismatch");
    *mean = *fixed_mean;
    *var = *fixed_var;
    for (double v : *var) check_arg(v >= 0.0, "negative fixed variance");
  } else {
    const double* xd = x.data().data();
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t c = 0; c < channels; ++c) {
        const double* p = xd + (o * channels + c) * inner;
        double acc = 0.0;
        for (std::int64_t i = 0; i < inner; ++i) acc += p[i];
        (*mean)[c] += acc;
      }
    }
    for (std::int64_t c = 0; c < channels; ++c) {
      (*mean)[c] /= static_cast<double>(n);
    }
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t c = 0; c < channels; ++c) {
        const double* p = xd + (o * channels + c) * inner;
        const double mu = (*mean)[c];
        double acc = 0.0;
        for (std::int64_t i = 0; i < inner; ++i) {
          const double d = p[i] - mu;
          acc += d * d;
        }
        (*var)[c] += acc;
      }
    }
    for (std::int64_t c = 0; c < channels; ++c) {
      (*var)[c] /= static_cast<double>(n);
    }
  }
  if (mean_out) *mean_out = *mean;
  if (var_out) *var_out = *var;

  auto inv_std = std::make_shared<std::vector<double>>(
      static_cast<std::size_t>(channels));
  for (std::int64_t c = 0; c < channels; ++c) {
    (*inv_std)[c] = 1.0 / std::sqrt((*var)[c] + eps);
  }

  Tensor out(x.shape());
  {
    const double* xd = x.data().data();
    double* yd = out.data().data();
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t c = 0; c < channels; ++c) {
        const double mu = (*mean)[c];
        const double k = gamma.data()[c] * (*inv_std)[c];
        const double b = beta.data()[c];
        const double* p = xd + (o * channels + c) * inner;
        double* q = yd + (o * channels + c) * inner;
        for (std::int64_t i = 0; i < inner; ++i) q[i] = k * (p[i] - mu) + b;
      }
    }
  }

  const bool any_grad =
      x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  if (tape.enabled() && any_grad) {
    tape.record(out, [x, gamma, beta, out, mean, var, inv_std, use_fixed,
                      outer, channels, inner, n]() mutable {
      // Per channel: s1 = Σ dy, s2 = Σ dy·x̂ with x̂ = (x−μ)/√(σ²+eps).
      std::vector<double> s1(static_cast<std::size_t>(channels), 0.0);
      std::vector<double> s2(static_cast<std::size_t>(channels), 0.0);
      const double* xd = x.data().data();
      const double* gd = out.grad().data();
      for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t c = 0; c < channels; ++c) {
          const double mu = (*mean)[c];
          const double is = (*inv_std)[c];
          const double* px = xd + (o * channels + c) * inner;
          const double* pg = gd + (o * channels + c) * inner;
          double a1 = 0.0, a2 = 0.0;
          for (std::int64_t i = 0; i < inner; ++i) {
            a1 += pg[i];
            a2 += pg[i] * (px[i] - mu) * is;
          }
          s1[c] += a1;
          s2[c] += a2;
        }
      }
      if (beta.requires_grad()) {
        for (std::int64_t c = 0; c < channels; ++c) beta.grad()[c] += s1[c];
      }
      if (gamma.requires_grad()) {
        for (std::int64_t c = 0; c < channels; ++c) gamma.grad()[c] += s2[c];
      }
      if (x.requires_grad()) {
        double* xg = x.grad().data();
        for (std::int64_t o = 0; o < outer; ++o) {
          for (std::int64_t c = 0; c < channels; ++c) {
            const double mu = (*mean)[c];
            const double is = (*inv_std)[c];
            const double g = gamma.data()[c];
            const double* px = xd + (o * channels + c) * inner;
            const double* pg = gd + (o * channels + c) * inner;
            double* pxg = xg + (o * channels + c) * inner;
            if (use_fixed) {
              const double k = g * is;
              for (std::int64_t i = 0; i < inner; ++i) pxg[i] += k * pg[i];
            } else {
              const double m1 = s1[c] / static_cast<double>(n);
              const double m2 = s2[c] / static_cast<double>(n);
              const double k = g * is;
              for (std::int64_t i = 0; i < inner; ++i) {
                const double xhat = (px[i] - mu) * is;
                pxg[i] += k * (pg[i] - m1 - xhat * m2);
              }
            }
          }
        }
      }
    });
  }
  return out;
}

BatchNorm::BatchNorm(std::string name, std::int64_t channels, BnMode mode,
                     double eps, double momentum)
    : name_(std::move(name)), mode_(mode), eps_(eps), momentum_(momentum) {
  check_arg(channels >= 1, "batchnorm needs at least one channel");
  check_arg(eps > 0.0, "batchnorm eps must be positive");
  check_arg(momentum > 0.0 && momentum <= 1.0,
            "batchnorm momentum must be in (0,1]");
  gamma_ = Tensor::ones({channels});
  beta_ = Tensor::zeros({channels});
  running_mean_ = Tensor::zeros({channels});
  running_var_ = Tensor::ones({channels});
  gamma_.set_requires_grad(true);
  beta_.set_requires_grad(true);
}

Tensor BatchNorm::forward(Tape& tape, const Tensor& x, ForwardContext& ctx) {
  const bool use_batch_stats =
      mode_ == BnMode::BatchSpecific || ctx.training;
  if (!use_batch_stats) {
    return batchnorm(tape, x, gamma_, beta_, eps_, &running_mean_.data(),
                     &running_var_.data());
  }
  std::vector<double> mean, var;
  Tensor y = batchnorm(tape, x, gamma_, beta_, eps_, nullptr, nullptr, &mean,
                       &var);
  if (ctx.training && ctx.update_running_stats) {
    for (std::size_t c = 0; c < mean.size(); ++c) {
      running_mean_.data()[c] =
          (1.0 - momentum_) * running_mean_.data()[c] + momentum_ * mean[c];
      running_var_.data()[c] =
          (1.0 - momentum_) * running_var_.data()[c] + momentum_ * var[c];
    }
  }
  return y;
}

void BatchNorm::collect_params(std::vector<ParamRef>& out) {
  out.push_back({name_ + ".gamma", gamma_, true, true});
  out.push_back({name_ + ".beta", beta_, true, true});
  out.push_back({name_ + ".running_mean", running_mean_, true, false});
  out.push_back({name_ + ".running_var", running_var_, true, false});
}

Model::Model(const BackboneSpec& spec, BnMode bn_mode, Rng& rng)
    : spec_(spec), bn_mode_(bn_mode) {
  check_arg(spec.channels >= 1 && spec.samples >= 1 && spec.n_classes >= 1,
            "backbone spec extents must be positive");
  check_arg(spec.dropout_p >= 0.0 && spec.dropout_p < 1.0,
            "dropout_p must be in [0,1)");

  if (spec.arch == Architecture::EEGNetLite) {
    check_arg(spec.f1 >= 1 && spec.depth_mult >= 1 && spec.f2 >= 1,
              "EEGNet width parameters must be positive");
    check_arg(spec.samples >= 32,
              "samples too small for the 4x8 pooling chain");
    const std::int64_t kt = std::min<std::int64_t>(spec.samples, 64);
    const std::int64_t fd = spec.f1 * spec.depth_mult;

    layers_.push_back(
        std::make_unique<TrialInputLayer>(spec.channels, spec.samples));

    Conv2dOpts temporal_opts;  // same padding in time, left-biased
    temporal_opts.pad_left = kt / 2;
    temporal_opts.pad_right = (kt - 1) / 2;
    layers_.push_back(std::make_unique<Conv2dLayer>(
        "temporal", Shape{spec.f1, 1, 1, kt}, temporal_opts, rng));
    layers_.push_back(
        std::make_unique<BatchNorm>("bn1", spec.f1, bn_mode));

    Conv2dOpts spatial_opts;
    spatial_opts.groups = spec.f1;
    layers_.push_back(std::make_unique<Conv2dLayer>(
        "spatial", Shape{fd, 1, spec.channels, 1}, spatial_opts, rng));
    layers_.push_back(std::make_unique<BatchNorm>("bn2", fd, bn_mode));
    layers_.push_back(std::make_unique<EluLayer>());
    layers_.push_back(std::make_unique<AvgPoolLayer>(1, 4));
    layers_.push_back(std::make_unique<DropoutLayer>(spec.dropout_p));

    Conv2dOpts sep_opts;
    sep_opts.groups = fd;
    sep_opts.pad_left = 8;
    sep_opts.pad_right = 7;
    layers_.push_back(std::make_unique<Conv2dLayer>(
        "sep_depth", Shape{fd, 1, 1, 16}, sep_opts, rng));
    layers_.push_back(std::make_unique<Conv2dLayer>(
        "sep_point", Shape{spec.f2, fd, 1, 1}, Conv2dOpts{}, rng));
    layers_.push_back(std::make_unique<BatchNorm>("bn3", spec.f2, bn_mode));
    layers_.push_back(std::make_unique<EluLayer>());
    layers_.push_back(std::make_unique<AvgPoolLayer>(1, 8));
    layers_.push_back(std::make_unique<DropoutLayer>(spec.dropout_p));
    layers_.push_back(std::make_unique<FlattenLayer>());

    const std::int64_t pooled = (spec.samples / 4) / 8;
    check_arg(pooled >= 1, "samples too small for the 4x8 pooling chain");
    layers_.push_back(std::make_unique<Dense>("head", spec.f2 * pooled,
                                              spec.n_classes, rng));
    bn_layer_count_ = 3;
  } else {
    layers_.push_back(std::make_unique<FlattenLayer>());
    layers_.push_back(std::make_unique<Dense>(
        "fc1", spec.channels * spec.samples, 64, rng));
    layers_.push_back(std::make_unique<BatchNorm>("bn1", 64, bn_mode));
    layers_.push_back(std::make_unique<ReluLayer>());
    layers_.push_back(std::make_unique<Dense>("head", 64, spec.n_classes, rng));
    bn_layer_count_ = 1;
  }

  for (auto& layer : layers_) layer->collect_params(params_);
}

Tensor Model::run(Tape& tape, const Tensor& x, ForwardContext& ctx,
                  std::size_t layer_count) {
  Tensor h = x;
  for (std::size_t i = 0; i < layer_count; ++i) {
    h = layers_[i]->forward(tape, h, ctx);
  }
  return h;
}

Tensor Model::forward(Tape& tape, const Tensor& x, ForwardContext& ctx) {
  return run(tape, x, ctx, layers_.size());
}

Tensor Model::features(Tape& tape, const Tensor& x, ForwardContext& ctx) {
  return run(tape, x, ctx, layers_.size() - 1);
}

ParamSet Model::extract_params(bool include_bn) const {
  ParamSet ps;
  for (const ParamRef& p : params_) {
    if (p.is_bn && !include_bn) continue;
    ps.entries.push_back({p.name, p.is_bn, p.value.clone()});
  }
  return ps;
}

std::int64_t Model::load_params(const ParamSet& ps, bool include_bn) {
  for (const ParamSetEntry& e : ps.entries) {
    bool known = false;
    for (const ParamRef& p : params_) {
      if (p.name == e.name) {
        known = true;
        break;
      }
    }
    check_arg(known, "unknown parameter name: " + e.name);
  }
  std::int64_t skipped = 0;
  for (ParamRef& p : params_) {
    if (p.is_bn && !include_bn) {
      ++skipped;
      continue;
    }
    const ParamSetEntry* e = ps.find(p.name);
    check_arg(e != nullptr, "missing parameter: " + p.name);
    check_arg(e->value.shape() == p.value.shape(),
              "shape mismatch for " + p.name + ": expected " +
                  shape_to_string(p.value.shape()) + ", got " +
                  shape_to_string(e->value.shape()));
    p.value.data() = e->value.data();
  }
  return skipped;
}

void Model::set_bn_mode(BnMode mode) {
  bn_mode_ = mode;
  for (auto& layer : layers_) layer->set_bn_mode(mode);
}

void Model::zero_grads() {
  for (ParamRef& p : params_) p.value.zero_grad();
}

namespace {

constexpr char kParamMagic[4] = {'F', 'B', 'P', 'S'};
constexpr std::uint32_t kParamVersion = 1;
constexpr char kCheckpointKind[] = "checkpoint";

std::uint32_t read_u32(std::istream& is, const char* what) {
  return ioutil::read_u32(is, kCheckpointKind, what);
}

double read_f64(std::istream& is, const char* what) {
  return ioutil::read_f64(is, kCheckpointKind, what);
}

using ioutil::write_f64;
using ioutil::write_u32;

}  // namespace

void write_paramset(std::ostream& os, const ParamSet& ps) {
  os.write(kParamMagic, 4);
  write_u32(os, kParamVersion);
  write_u32(os, static_cast<std::uint32_t>(ps.entries.size()));
  for (const ParamSetEntry& e : ps.entries) {
    write_u32(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    const char flag = e.is_bn ? 1 : 0;
    os.write(&flag, 1);
    write_u32(os, static_cast<std::uint32_t>(e.value.ndim()));
    for (std::int64_t d : e.value.shape()) {
      write_u32(os, static_cast<std::uint32_t>(d));
    }
    for (double v : e.value.data()) write_f64(os, v);
  }
  if (!os) throw std::runtime_error("checkpoint write failed");
}

ParamSet read_paramset(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kParamMagic, 4) != 0) {
    throw std::runtime_error("not a parameter checkpoint (bad magic)");
  }
  const std::uint32_t version = read_u32(is, "version");
  if (version != kParamVersion) {
    throw std::runtime_error("unsupported checkpoint version " +
                             std::to_string(version));
  }
  const std::uint32_t count = read_u32(is, "entry count");
  ParamSet ps;
  ps.entries.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = read_u32(is, "name length");
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) {
      throw std::runtime_error("truncated checkpoint: entry name");
    }
    char flag;
    if (!is.read(&flag, 1)) {
      throw std::runtime_error("truncated checkpoint: is_bn flag");
    }
    const std::uint32_t ndim = read_u32(is, "rank");
    Shape shape(ndim);
    for (std::uint32_t d = 0; d < ndim; ++d) {
      shape[d] = static_cast<std::int64_t>(read_u32(is, "extent"));
    }
    std::vector<double> data(static_cast<std::size_t>(shape_numel(shape)));
    for (double& v : data) v = read_f64(is, "payload");
    ps.entries.push_back(
        {std::move(name), flag != 0,
         Tensor::from_vector(std::move(shape), std::move(data))});
  }
  return ps;
}

void write_paramset_file(const std::string& path, const ParamSet& ps) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  write_paramset(os, ps);
}

ParamSet read_paramset_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path);
  return read_paramset(is);
}

}  // namespace fedbs
