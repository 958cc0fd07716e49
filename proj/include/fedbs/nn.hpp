#pragma once

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "fedbs/rng.hpp"
#include "fedbs/tensor.hpp"

namespace fedbs {

enum class BnMode { RunningStats, BatchSpecific };

enum class Architecture { EEGNetLite, TestMLP };

struct BackboneSpec {
  Architecture arch = Architecture::EEGNetLite;
  std::int64_t channels = 22;   // C, electrode count
  std::int64_t samples = 1000;  // T, time points per trial
  std::int64_t n_classes = 4;   // N_c
  std::int64_t f1 = 8;          // temporal filter count
  std::int64_t depth_mult = 2;  // D, spatial filters per temporal filter
  std::int64_t f2 = 16;         // separable-stage filter count
  double dropout_p = 0.25;
};

/// Per-forward control flags. SAM's second pass sets reuse_dropout_mask so
/// both passes see the same stochastic loss, and clears update_running_stats
/// so the perturbed pass leaves BN running buffers alone.
struct ForwardContext {
  bool training = false;
  bool reuse_dropout_mask = false;
  bool update_running_stats = true;
  Rng* rng = nullptr;  // needed when training with dropout_p > 0
};

/// A parameter as seen through its owning model: the tensor shares storage
/// with the layer, so writes through `value` update the model.
struct ParamRef {
  std::string name;
  Tensor value;
  bool is_bn = false;
  bool trainable = true;
};

/// Value snapshot of named parameters; the unit exchanged between server and
/// clients and the checkpoint payload.
struct ParamSetEntry {
  std::string name;
  bool is_bn = false;
  Tensor value;
};

struct ParamSet {
  std::vector<ParamSetEntry> entries;

  const ParamSetEntry* find(std::string_view name) const;
  ParamSetEntry* find(std::string_view name);
};

/// Binary checkpoint stream: magic "FBPS", u32 version, u32 entry count,
/// then per entry: u32 name length, name bytes, u8 is_bn, u32 ndim,
/// u32 extents, f64 little-endian payload.
void write_paramset(std::ostream& os, const ParamSet& ps);
ParamSet read_paramset(std::istream& is);
void write_paramset_file(const std::string& path, const ParamSet& ps);
ParamSet read_paramset_file(const std::string& path);

/// Per-channel normalization over the batch and spatial axes (channel axis 1,
/// biased variance with divisor N). With fixed_mean/fixed_var null, batch
/// statistics are computed (and optionally reported through mean_out/var_out)
/// and the backward pass differentiates through them; with fixed statistics
/// supplied, they are treated as constants.
Tensor batchnorm(Tape& tape, const Tensor& x, const Tensor& gamma,
                 const Tensor& beta, double eps,
                 const std::vector<double>* fixed_mean = nullptr,
                 const std::vector<double>* fixed_var = nullptr,
                 std::vector<double>* mean_out = nullptr,
                 std::vector<double>* var_out = nullptr);

class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor forward(Tape& tape, const Tensor& x, ForwardContext& ctx) = 0;
  virtual void collect_params(std::vector<ParamRef>& out) {}
  virtual void set_bn_mode(BnMode /*mode*/) {}
};

class BatchNorm final : public Layer {
 public:
  BatchNorm(std::string name, std::int64_t channels, BnMode mode,
            double eps = 1e-5, double momentum = 0.1);

  Tensor forward(Tape& tape, const Tensor& x, ForwardContext& ctx) override;
  void collect_params(std::vector<ParamRef>& out) override;
  void set_bn_mode(BnMode mode) override { mode_ = mode; }

  BnMode mode() const { return mode_; }
  Tensor gamma() { return gamma_; }
  Tensor beta() { return beta_; }
  Tensor running_mean() { return running_mean_; }
  Tensor running_var() { return running_var_; }

 private:
  std::string name_;
  BnMode mode_;
  double eps_;
  double momentum_;
  Tensor gamma_, beta_, running_mean_, running_var_;
};

/// A backbone instance: layer stack plus the parameter table. The final
/// layer is always the linear classifier head; features() stops before it.
class Model {
 public:
  Model(const BackboneSpec& spec, BnMode bn_mode, Rng& rng);

  /// Logits [B, N_c] for x shaped [B, C, T] (EEGNetLite) or [B, ...] (TestMLP).
  Tensor forward(Tape& tape, const Tensor& x, ForwardContext& ctx);

  /// Activations feeding the classifier head, flattened to [B, feat_dim].
  Tensor features(Tape& tape, const Tensor& x, ForwardContext& ctx);

  const std::vector<ParamRef>& params() const { return params_; }

  /// Snapshot (deep copy) of parameters; BN-tagged entries skipped when
  /// include_bn is false.
  ParamSet extract_params(bool include_bn) const;

  /// Copies matching entries into the model. BN-tagged model parameters are
  /// left untouched when include_bn is false (entries for them may be absent
  /// from `ps`). Returns how many model parameters were skipped by the BN
  /// rule. Throws on unknown names, missing entries, or shape mismatches.
  std::int64_t load_params(const ParamSet& ps, bool include_bn);

  void set_bn_mode(BnMode mode);
  BnMode bn_mode() const { return bn_mode_; }
  const BackboneSpec& spec() const { return spec_; }
  std::int64_t bn_layer_count() const { return bn_layer_count_; }

  void zero_grads();

 private:
  Tensor run(Tape& tape, const Tensor& x, ForwardContext& ctx,
             std::size_t layer_count);

  BackboneSpec spec_;
  BnMode bn_mode_;
  std::int64_t bn_layer_count_ = 0;
  std::vector<std::unique_ptr<Layer>> layers_;
  std::vector<ParamRef> params_;
};

}  // namespace fedbs
