#include "fedbs/stats.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "fedbs/tensor.hpp"

namespace fedbs {

namespace {

double mean_of(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) /
         static_cast<double>(v.size());
}

double sample_sd(const std::vector<double>& v, double mean) {
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

void require_finite(const std::vector<double>& v, const char* which) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw std::invalid_argument(std::string("paired_t_test: non-finite ") +
                                  which + " sample");
    }
  }
}

// Continued fraction for the incomplete beta function (modified Lentz).
double beta_cont_fraction(double a, double b, double x) {
  constexpr double kEps = 1e-12;
  constexpr double kTiny = 1e-300;
  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 300; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) return h;
  }
  throw std::runtime_error(
      "incomplete beta continued fraction did not converge");
}

}  // namespace

double regularized_incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0) || !(b > 0.0)) {
    throw std::invalid_argument(
        "regularized_incomplete_beta: a and b must be positive");
  }
  if (!(x >= 0.0 && x <= 1.0)) {
    throw std::invalid_argument(
        "regularized_incomplete_beta: x must lie in [0, 1]");
  }
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  const double ln_front = std::lgamma(a + b) - std::lgamma(a) -
                          std::lgamma(b) + a * std::log(x) +
                          b * std::log1p(-x);
  const double front = std::exp(ln_front);
  // Use the continued fraction on whichever side converges fast and reflect
  // the other: I_x(a,b) = 1 - I_{1-x}(b,a).
  if (x < (a + 1.0) / (a + b + 2.0)) {
    return front * beta_cont_fraction(a, b, x) / a;
  }
  return 1.0 - front * beta_cont_fraction(b, a, 1.0 - x) / b;
}

double student_t_two_sided_p(double t, std::int64_t df) {
  if (df < 1) {
    throw std::invalid_argument("student_t_two_sided_p: df must be >= 1");
  }
  if (!std::isfinite(t)) {
    throw std::invalid_argument("student_t_two_sided_p: t must be finite");
  }
  const double nu = static_cast<double>(df);
  // P(|T| >= t) = I_x(nu/2, 1/2) with x = nu / (nu + t^2).
  const double x = nu / (nu + t * t);
  return regularized_incomplete_beta(nu / 2.0, 0.5, x);
}

TestReport paired_t_test(const std::vector<double>& a,
                         const std::vector<double>& b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("paired_t_test: sample sizes differ");
  }
  const std::size_t n = a.size();
  if (n < 2) {
    throw std::invalid_argument("paired_t_test: need at least two pairs");
  }
  require_finite(a, "first");
  require_finite(b, "second");

  std::vector<double> diff(n);
  for (std::size_t i = 0; i < n; ++i) diff[i] = a[i] - b[i];
  const double mean_d = mean_of(diff);
  const double sd_d = sample_sd(diff, mean_d);
  if (sd_d == 0.0) {
    throw std::invalid_argument(
        "paired_t_test: degenerate pairing (zero variance in differences)");
  }

  TestReport r;
  r.mean_a = mean_of(a);
  r.mean_b = mean_of(b);
  r.se_a = sample_sd(a, r.mean_a) / std::sqrt(static_cast<double>(n));
  r.se_b = sample_sd(b, r.mean_b) / std::sqrt(static_cast<double>(n));
  r.cohen_d = mean_d / sd_d;
  // t = mean/(sd/sqrt(n)) computed through d so t == cohen_d*sqrt(n) holds
  // bit-for-bit, not just algebraically.
  r.t_value = r.cohen_d * std::sqrt(static_cast<double>(n));
  r.df = static_cast<std::int64_t>(n) - 1;
  r.p_value = student_t_two_sided_p(r.t_value, r.df);
  r.p_adjusted = r.p_value;
  return r;
}

std::vector<double> benjamini_hochberg(const std::vector<double>& p_values) {
  for (double p : p_values) {
    if (!(p >= 0.0 && p <= 1.0)) {
      throw std::invalid_argument(
          "benjamini_hochberg: p-values must lie in [0, 1]");
    }
  }
  const std::size_t m = p_values.size();
  if (m == 0) return {};
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
    return p_values[i] < p_values[j];
  });
  // adj_(i) = min over j >= i of p_(j)*m/j, capped at 1, via a running
  // minimum from the largest rank down.
  std::vector<double> adjusted(m);
  double running = 1.0;
  for (std::size_t i = m; i-- > 0;) {
    const double raw =
        p_values[order[i]] * static_cast<double>(m) / static_cast<double>(i + 1);
    running = std::min(running, raw);
    adjusted[order[i]] = running;
  }
  return adjusted;
}

double gdv(const std::vector<double>& features, std::int64_t n,
           std::int64_t dim, const std::vector<int>& labels) {
  if (n <= 0 || dim <= 0) {
    throw std::invalid_argument("gdv: n and dim must be positive");
  }
  if (features.size() != static_cast<std::size_t>(n * dim)) {
    throw std::invalid_argument("gdv: features size does not match n*dim");
  }
  if (labels.size() != static_cast<std::size_t>(n)) {
    throw std::invalid_argument("gdv: label count does not match n");
  }
  for (double x : features) {
    if (!std::isfinite(x)) {
      throw std::invalid_argument("gdv: non-finite feature");
    }
  }

  std::map<int, std::vector<std::int64_t>> by_class;
  for (std::int64_t i = 0; i < n; ++i) by_class[labels[i]].push_back(i);
  if (by_class.size() < 2) {
    throw std::invalid_argument("gdv: need at least two classes");
  }
  for (const auto& [label, members] : by_class) {
    if (members.size() < 2) {
      throw std::invalid_argument("gdv: class " + std::to_string(label) +
                                  " has fewer than two points");
    }
  }

  // z-score each dimension, then halve. Zero-variance dimensions are mapped
  // to exactly 0 so they add nothing to any distance.
  std::vector<double> scaled(features.size());
  for (std::int64_t d = 0; d < dim; ++d) {
    double mu = 0.0;
    for (std::int64_t i = 0; i < n; ++i) mu += features[i * dim + d];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      const double c = features[i * dim + d] - mu;
      var += c * c;
    }
    var /= static_cast<double>(n);
    const double sd = std::sqrt(var);
    for (std::int64_t i = 0; i < n; ++i) {
      scaled[i * dim + d] =
          sd > 0.0 ? 0.5 * (features[i * dim + d] - mu) / sd : 0.0;
    }
  }

  auto manhattan = [&](std::int64_t i, std::int64_t j) {
    double s = 0.0;
    const double* a = scaled.data() + i * dim;
    const double* b = scaled.data() + j * dim;
    for (std::int64_t d = 0; d < dim; ++d) s += std::abs(a[d] - b[d]);
    return s;
  };

  double intra = 0.0;
  for (const auto& [label, members] : by_class) {
    double total = 0.0;
    for (std::size_t i = 0; i < members.size(); ++i) {
      for (std::size_t j = i + 1; j < members.size(); ++j) {
        total += manhattan(members[i], members[j]);
      }
    }
    const double pairs =
        0.5 * static_cast<double>(members.size()) *
        static_cast<double>(members.size() - 1);
    intra += total / pairs;
  }
  intra /= static_cast<double>(by_class.size());

  double inter = 0.0;
  std::int64_t class_pairs = 0;
  for (auto it_a = by_class.begin(); it_a != by_class.end(); ++it_a) {
    for (auto it_b = std::next(it_a); it_b != by_class.end(); ++it_b) {
      double total = 0.0;
      for (std::int64_t i : it_a->second) {
        for (std::int64_t j : it_b->second) total += manhattan(i, j);
      }
      inter += total / (static_cast<double>(it_a->second.size()) *
                        static_cast<double>(it_b->second.size()));
      ++class_pairs;
    }
  }
  inter /= static_cast<double>(class_pairs);

  return (intra - inter) / std::sqrt(static_cast<double>(dim));
}

double evaluate(Model& model, const TrialSet& testset, BnMode bn_mode,
                std::int64_t test_batch_size) {
  testset.validate();
  if (test_batch_size <= 0) {
    throw std::invalid_argument("evaluate: test_batch_size must be positive");
  }
  model.set_bn_mode(bn_mode);

  const std::int64_t n = testset.size();
  const std::int64_t trial_len = testset.channels * testset.samples;
  std::int64_t correct = 0;
  Tape tape;
  tape.set_enabled(false);
  for (std::int64_t start = 0; start < n; start += test_batch_size) {
    const std::int64_t b = std::min(test_batch_size, n - start);
    std::vector<double> buf(static_cast<std::size_t>(b * trial_len));
    std::memcpy(buf.data(), testset.trial(start),
                buf.size() * sizeof(double));
    const Tensor x = Tensor::from_vector(
        {b, testset.channels, testset.samples}, std::move(buf));
    ForwardContext ctx;  // inference: no dropout, no running-stat updates
    const Tensor logits = model.forward(tape, x, ctx);
    const std::vector<std::int64_t> pred = argmax_rows(logits);
    for (std::int64_t r = 0; r < b; ++r) {
      if (pred[static_cast<std::size_t>(r)] + 1 ==
          testset.labels[static_cast<std::size_t>(start + r)]) {
        ++correct;
      }
    }
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

void AccuracyTable::set(const std::string& approach, std::uint32_t subject,
                        std::uint64_t seed, double accuracy) {
  if (!(accuracy >= 0.0 && accuracy <= 1.0)) {
    throw std::invalid_argument("AccuracyTable: accuracy must lie in [0, 1]");
  }
  cells[{approach, subject, seed}] = accuracy;
}

std::vector<std::string> AccuracyTable::approaches() const {
  std::vector<std::string> out;
  for (const auto& [key, acc] : cells) {
    if (out.empty() || out.back() != std::get<0>(key)) {
      out.push_back(std::get<0>(key));
    }
  }
  return out;  // map order keeps approach names sorted and unique
}

void AccuracyTable::paired_samples(const std::string& approach_a,
                                   const std::string& approach_b,
                                   std::vector<double>& out_a,
                                   std::vector<double>& out_b) const {
  out_a.clear();
  out_b.clear();
  std::vector<std::pair<std::uint32_t, std::uint64_t>> keys_a, keys_b;
  for (const auto& [key, acc] : cells) {
    if (std::get<0>(key) == approach_a) {
      keys_a.emplace_back(std::get<1>(key), std::get<2>(key));
      out_a.push_back(acc);
    } else if (std::get<0>(key) == approach_b) {
      keys_b.emplace_back(std::get<1>(key), std::get<2>(key));
      out_b.push_back(acc);
    }
  }
  if (keys_a.empty() || keys_b.empty()) {
    throw std::invalid_argument("AccuracyTable: unknown approach \"" +
                                (keys_a.empty() ? approach_a : approach_b) +
                                "\"");
  }
  if (keys_a != keys_b) {
    throw std::invalid_argument(
        "AccuracyTable: approaches cover different (subject, seed) cells");
  }
}

double AccuracyTable::mean_accuracy(const std::string& approach) const {
  std::map<std::uint32_t, std::pair<double, std::int64_t>> per_subject;
  for (const auto& [key, acc] : cells) {
    if (std::get<0>(key) != approach) continue;
    auto& [sum, count] = per_subject[std::get<1>(key)];
    sum += acc;
    ++count;
  }
  if (per_subject.empty()) {
    throw std::invalid_argument("AccuracyTable: unknown approach \"" +
                                approach + "\"");
  }
  double total = 0.0;
  for (const auto& [subject, cell] : per_subject) {
    total += cell.first / static_cast<double>(cell.second);
  }
  return total / static_cast<double>(per_subject.size());
}

std::string stats_csv_header() {
  return "comparison,mean_a,mean_b,se_a,se_b,t_value,df,cohen_d,p_value,"
         "p_adjusted";
}

std::string stats_csv_row(const std::string& comparison, const TestReport& r) {
  std::ostringstream os;
  os << std::setprecision(10) << comparison << ',' << r.mean_a << ','
     << r.mean_b << ',' << r.se_a << ',' << r.se_b << ',' << r.t_value << ','
     << r.df << ',' << r.cohen_d << ',' << r.p_value << ',' << r.p_adjusted;
  return os.str();
}

}  // namespace fedbs
