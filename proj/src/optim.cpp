#include "fedbs/optim.hpp"

#include <cmath>
#include <string>

namespace fedbs {

namespace {

using detail::check_arg;

void zero_trainable_grads(const std::vector<ParamRef>& params) {
  for (const ParamRef& p : params) {
    if (!p.trainable) continue;
    std::vector<double>& g = p.value.grad();
    std::fill(g.begin(), g.end(), 0.0);
  }
}

}  // namespace

void sgd_step(const std::vector<ParamRef>& params, SgdState& state) {
  check_arg(state.lr > 0.0, "sgd_step learning rate must be > 0");
  check_arg(state.momentum >= 0.0 && state.momentum < 1.0,
            "sgd_step momentum must be in [0,1)");
  for (const ParamRef& p : params) {
    if (!p.trainable) continue;
    std::vector<double>& w = p.value.data();
    const std::vector<double>& g = p.value.grad();
    std::vector<double>& v = state.velocity[p.name];
    if (v.empty()) v.assign(w.size(), 0.0);
    check_arg(v.size() == w.size(),
              "sgd_step velocity shape mismatch for " + p.name);
    for (std::size_t i = 0; i < w.size(); ++i) {
      check_arg(std::isfinite(g[i]), "non-finite gradient in " + p.name);
      const double gp = g[i] + state.weight_decay * w[i];
      v[i] = state.momentum * v[i] + gp;
      w[i] -= state.lr * v[i];
    }
  }
}

std::map<std::string, std::vector<double>> compute_sam_perturbation(
    const std::vector<ParamRef>& params, double rho) {
  check_arg(rho >= 0.0, "SAM radius must be >= 0");
  double norm_sq = 0.0;
  for (const ParamRef& p : params) {
    if (!p.trainable) continue;
    for (double g : p.value.grad()) {
      check_arg(std::isfinite(g), "non-finite gradient in " + p.name);
      norm_sq += g * g;
    }
  }
  std::map<std::string, std::vector<double>> eps;
  const double norm = std::sqrt(norm_sq);
  if (rho == 0.0 || norm == 0.0) return eps;
  const double scale = rho / norm;
  for (const ParamRef& p : params) {
    if (!p.trainable) continue;
    const std::vector<double>& g = p.value.grad();
    std::vector<double>& e = eps[p.name];
    e.resize(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) e[i] = scale * g[i];
  }
  return eps;
}

double sam_step(const std::vector<ParamRef>& params, const LossFn& loss_fn,
                SamState& state, Rng& rng) {
  zero_trainable_grads(params);
  ForwardContext ctx;
  ctx.training = true;
  ctx.reuse_dropout_mask = false;
  ctx.update_running_stats = true;
  ctx.rng = &rng;
  Tape tape1;
  Tensor loss1 = loss_fn(tape1, ctx);
  const double first_loss = loss1.item();
  check_arg(std::isfinite(first_loss), "non-finite loss in SAM first pass");
  tape1.backward(loss1);

  const auto eps = compute_sam_perturbation(params, state.rho);
  if (!eps.empty()) {
    // Transient ascent: save w, climb, take the gradient there, restore w.
    std::map<std::string, std::vector<double>> snapshot;
    for (const ParamRef& p : params) {
      if (!p.trainable) continue;
      snapshot[p.name] = p.value.data();
      std::vector<double>& w = p.value.data();
      const std::vector<double>& e = eps.at(p.name);
      for (std::size_t i = 0; i < w.size(); ++i) w[i] += e[i];
    }
    zero_trainable_grads(params);
    ForwardContext ctx2;
    ctx2.training = true;
    ctx2.reuse_dropout_mask = true;      // same stochastic loss as pass one
    ctx2.update_running_stats = false;   // the ascent point is not a model state
    ctx2.rng = &rng;
    Tape tape2;
    Tensor loss2 = loss_fn(tape2, ctx2);
    check_arg(std::isfinite(loss2.item()),
              "non-finite loss in SAM second pass");
    tape2.backward(loss2);
    for (const ParamRef& p : params) {
      if (!p.trainable) continue;
      p.value.data() = snapshot.at(p.name);
    }
  }
  sgd_step(params, state.inner);
  return first_loss;
}

}  // namespace fedbs
