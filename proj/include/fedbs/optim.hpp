#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "fedbs/nn.hpp"
#include "fedbs/rng.hpp"
#include "fedbs/tensor.hpp"

namespace fedbs {

/// SGD with momentum and L2 weight decay. Velocity buffers are keyed by
/// parameter name and created (zero-filled) on first use, so a fresh state
/// is a fresh optimizer.
struct SgdState {
  double lr = 0.005;
  double momentum = 0.9;
  double weight_decay = 0.0001;
  std::map<std::string, std::vector<double>> velocity;
};

/// One step over every trainable parameter, reading each parameter's grad
/// buffer: g' = g + weight_decay * w;  v <- momentum * v + g';  w <- w - lr *
/// v. Weight decay applies uniformly to all trainable parameters (BN gamma
/// and beta included); running BN statistics are not trainable and are never
/// touched. Throws on non-finite gradients.
void sgd_step(const std::vector<ParamRef>& params, SgdState& state);

/// Sharpness-aware wrapper around SGD.
struct SamState {
  double rho = 0.1;  // ascent radius; 0 degenerates to plain SGD
  SgdState inner;
};

/// Runs one forward pass for the step's batch and returns the scalar loss.
/// The ForwardContext carries the dropout-mask and running-stat controls
/// that differ between the two SAM passes; implementations must honor it.
using LossFn = std::function<Tensor(Tape&, ForwardContext&)>;

/// The ascent offset rho * g / ||g||_2 per trainable parameter, where the
/// norm is one global L2 norm over the concatenation of all trainable
/// gradients. Empty when rho == 0 or the norm vanishes (no perturbation).
std::map<std::string, std::vector<double>> compute_sam_perturbation(
    const std::vector<ParamRef>& params, double rho);

/// One two-pass SAM step: backprop at w for g1, climb to w + eps* with
/// eps* = rho * g1/||g1||, backprop there for g2 (same dropout mask, batch
/// statistics recomputed, running stats untouched), restore w exactly, then
/// descend with g2 through sgd_step. Returns the first-pass loss. A zero
/// gradient norm skips the perturbation and steps on g1 directly.
double sam_step(const std::vector<ParamRef>& params, const LossFn& loss_fn,
                SamState& state, Rng& rng);

}  // namespace fedbs
