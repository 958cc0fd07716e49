#pragma once

#include <cstdint>
#include <vector>

#include "fedbs/data.hpp"

namespace fedbs {

/// Euclidean-alignment reference for one subject: the mean trial covariance
/// R and its inverse square root, computed on a spectrum floored at
/// eig_floor = 1e-10 * max eigenvalue to tolerate rank deficiency.
struct AlignmentReference {
  std::int64_t channels = 0;
  std::vector<double> r;           // C x C, row-major
  std::vector<double> r_inv_sqrt;  // C x C, row-major
  double eig_floor = 0.0;
};

/// R = (1/n) sum_i X_i X_i^T over the subject's trials; R^{-1/2} through a
/// symmetric eigendecomposition. Throws if R is all zero.
AlignmentReference compute_reference(const TrialSet& trials);

/// X~_i = R^{-1/2} X_i for every trial; labels and metadata unchanged.
TrialSet align(const TrialSet& trials, const AlignmentReference& ref);

}  // namespace fedbs
