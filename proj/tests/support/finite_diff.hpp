#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "fedbs/tensor.hpp"

namespace testsupport {

// Central-difference gradient of a scalar function with respect to the
// entries of x. Perturbs x in place and restores it after each probe.
inline std::vector<double> finite_diff_gradient(
    fedbs::Tensor x, const std::function<double()>& f, double step = 1e-5) {
  const std::int64_t n = x.numel();
  std::vector<double> g(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const double saved = x.data()[i];
    x.data()[i] = saved + step;
    const double up = f();
    x.data()[i] = saved - step;
    const double down = f();
    x.data()[i] = saved;
    g[i] = (up - down) / (2.0 * step);
  }
  return g;
}

// max_i |a_i - b_i| / max(1, |a_i|), the scale-floored relative error used
// throughout the gradient checks.
inline double max_rel_err(const std::vector<double>& analytic,
                          const std::vector<double>& numeric) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double denom = std::max(1.0, std::abs(analytic[i]));
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
  }
  return worst;
}

inline fedbs::Tensor rand_tensor(fedbs::Shape shape, fedbs::Rng& rng,
                                 double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(
      static_cast<std::size_t>(fedbs::shape_numel(shape)));
  for (double& x : v) x = rng.uniform(lo, hi);
  fedbs::Tensor t = fedbs::Tensor::from_vector(std::move(shape), std::move(v));
  t.set_requires_grad(true);
  return t;
}

// Analytic gradient (one tape + backward) vs central differences, where
// make_loss rebuilds the scalar loss from the inputs' current values.
// Returns the worst relative error over all listed inputs.
inline double fd_worst_rel_err(
    const std::function<fedbs::Tensor(fedbs::Tape&)>& make_loss,
    const std::vector<fedbs::Tensor>& inputs, double step = 1e-5) {
  fedbs::Tape tape;
  fedbs::Tensor loss = make_loss(tape);
  tape.backward(loss);
  const auto eval = [&make_loss]() {
    fedbs::Tape t;
    t.set_enabled(false);
    return make_loss(t).item();
  };
  double worst = 0.0;
  for (const fedbs::Tensor& x : inputs) {
    const auto numeric = finite_diff_gradient(x, eval, step);
    worst = std::max(worst, max_rel_err(x.grad(), numeric));
  }
  return worst;
}

// Contracts a tensor to a scalar against fixed weights so every element
// receives a distinct upstream gradient.
inline fedbs::Tensor weighted_sum(fedbs::Tape& tape, const fedbs::Tensor& x,
                                  const fedbs::Tensor& weights) {
  return fedbs::sum_all(tape, fedbs::mul(tape, x, weights));
}

}  // namespace testsupport
