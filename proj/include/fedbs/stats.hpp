#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "fedbs/data.hpp"
#include "fedbs/nn.hpp"

namespace fedbs {

/// Paired comparison between two approaches. p_adjusted starts equal to
/// p_value; callers running several comparisons overwrite it after
/// benjamini_hochberg.
struct TestReport {
  double mean_a = 0.0;
  double mean_b = 0.0;
  double se_a = 0.0;
  double se_b = 0.0;
  double t_value = 0.0;
  std::int64_t df = 0;
  double cohen_d = 0.0;
  double p_value = 1.0;
  double p_adjusted = 1.0;
};

/// Accuracy grid keyed by (approach, subject, seed). Paired statistics align
/// two approaches on their shared (subject, seed) cells.
struct AccuracyTable {
  std::map<std::tuple<std::string, std::uint32_t, std::uint64_t>, double>
      cells;

  void set(const std::string& approach, std::uint32_t subject,
           std::uint64_t seed, double accuracy);

  /// Sorted unique approach names present in the table.
  std::vector<std::string> approaches() const;

  /// Accuracy samples for two approaches aligned on (subject, seed), sorted
  /// by key. Throws if the two approaches cover different cells.
  void paired_samples(const std::string& approach_a,
                      const std::string& approach_b,
                      std::vector<double>& out_a,
                      std::vector<double>& out_b) const;

  /// Per-subject mean over seeds first, then mean over subjects.
  double mean_accuracy(const std::string& approach) const;
};

/// Regularized incomplete beta I_x(a, b), continued-fraction evaluation,
/// |error| < 1e-10. Exposed for testing.
double regularized_incomplete_beta(double a, double b, double x);

/// Two-sided tail probability of Student's t with df degrees of freedom.
double student_t_two_sided_p(double t, std::int64_t df);

/// Paired t-test of a against b (differences a_i - b_i, sample sd with
/// divisor n-1, df = n-1, two-sided p). Throws on length mismatch, n < 2, or
/// zero-variance differences (degenerate pairing).
TestReport paired_t_test(const std::vector<double>& a,
                         const std::vector<double>& b);

/// Benjamini-Hochberg step-up adjustment; preserves input order.
std::vector<double> benjamini_hochberg(const std::vector<double>& p_values);

/// Generalized discrimination value of row-major features [n, dim]: z-score
/// each dimension (zero-variance dimensions contribute nothing), halve,
/// then (mean intra-class - mean inter-class) Manhattan distance over
/// 1/sqrt(dim). Requires at least two classes with two points each.
double gdv(const std::vector<double>& features, std::int64_t n,
           std::int64_t dim, const std::vector<int>& labels);

/// Fraction of correctly classified trials, batched at test_batch_size (the
/// final short batch is kept). The model is switched to bn_mode, so
/// BatchSpecific re-normalizes with each test batch's own statistics.
double evaluate(Model& model, const TrialSet& testset, BnMode bn_mode,
                std::int64_t test_batch_size);

/// CSV column order used by every emitted report.
std::string stats_csv_header();
std::string stats_csv_row(const std::string& comparison, const TestReport& r);

}  // namespace fedbs
