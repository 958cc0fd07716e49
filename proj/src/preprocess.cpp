#include "fedbs/preprocess.hpp"

#include "fedbs/tensor.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>

namespace fedbs {

namespace {

using detail::check_arg;

using MatrixRM =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace

AlignmentReference compute_reference(const TrialSet& trials) {
  trials.validate();
  const std::int64_t c_n = trials.channels, t_n = trials.samples;
  const std::int64_t n = trials.size();

  Eigen::MatrixXd r = Eigen::MatrixXd::Zero(c_n, c_n);
  for (std::int64_t i = 0; i < n; ++i) {
    Eigen::Map<const MatrixRM> x(trials.trial(i), c_n, t_n);
    r.noalias() += x * x.transpose();
  }
  r /= static_cast<double>(n);
  // Covariance sums are symmetric up to rounding; keep it exactly so.
  r = ((r + r.transpose()) / 2.0).eval();

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(r);
  check_arg(eig.info() == Eigen::Success, "eigendecomposition failed");
  const double max_eig = eig.eigenvalues().maxCoeff();
  check_arg(max_eig > 0.0, "alignment reference is zero (all-zero trials)");

  AlignmentReference ref;
  ref.channels = c_n;
  ref.eig_floor = 1e-10 * max_eig;
  Eigen::VectorXd inv_sqrt_eigs(c_n);
  for (std::int64_t i = 0; i < c_n; ++i) {
    inv_sqrt_eigs[i] = 1.0 / std::sqrt(std::max(eig.eigenvalues()[i],
                                                ref.eig_floor));
  }
  MatrixRM r_inv_sqrt = eig.eigenvectors() * inv_sqrt_eigs.asDiagonal() *
                        eig.eigenvectors().transpose();
  ref.r.assign(r.data(), r.data() + c_n * c_n);
  // r is column-major but symmetric, so the row-major copy is identical.
  ref.r_inv_sqrt.assign(r_inv_sqrt.data(), r_inv_sqrt.data() + c_n * c_n);
  return ref;
}

TrialSet align(const TrialSet& trials, const AlignmentReference& ref) {
  trials.validate();
  check_arg(trials.channels == ref.channels,
            "alignment reference channel count mismatch");
  const std::int64_t c_n = trials.channels, t_n = trials.samples;
  TrialSet out = trials;
  Eigen::Map<const MatrixRM> w(ref.r_inv_sqrt.data(), c_n, c_n);
  for (std::int64_t i = 0; i < trials.size(); ++i) {
    Eigen::Map<const MatrixRM> x(trials.trial(i), c_n, t_n);
    Eigen::Map<MatrixRM> y(out.trial(i), c_n, t_n);
    y.noalias() = w * x;
  }
  return out;
}

}  // namespace fedbs
