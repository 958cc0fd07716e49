#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace fedbs {

/// One subject's recordings: n trials of C channels x T samples, with labels
/// in {1..n_classes}. Trials are stored row-major, trial-by-trial.
struct TrialSet {
  std::uint32_t subject_id = 0;
  std::int64_t channels = 0;
  std::int64_t samples = 0;
  std::int64_t n_classes = 0;
  std::vector<double> trials;
  std::vector<int> labels;

  std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
  const double* trial(std::int64_t i) const {
    return trials.data() + i * channels * samples;
  }
  double* trial(std::int64_t i) {
    return trials.data() + i * channels * samples;
  }

  /// Throws std::invalid_argument on shape/label/finiteness violations.
  void validate() const;
};

/// Controls for the synthetic multi-subject generator. Each class has a fixed
/// spatial pattern and a band-limited source; each subject sees them through
/// its own mixing perturbation, channel gains, and offsets, whose magnitudes
/// all scale with shift_strength (0 = i.i.d. subjects).
struct SyntheticSpec {
  std::int64_t subjects = 6;
  std::int64_t trials_per_subject = 200;
  std::int64_t channels = 8;
  std::int64_t samples = 128;
  std::int64_t n_classes = 2;
  double snr = 5.0;             // signal-to-noise power ratio, linear scale
  double shift_strength = 0.5;  // >= 0
  std::uint64_t seed = 0;
  double sample_rate = 250.0;   // Hz; sources live in the 8-30 Hz band
};

/// Deterministic in spec.seed. Labels are balanced round-robin.
std::vector<TrialSet> generate_synthetic(const SyntheticSpec& spec);

struct LosoSplit {
  std::vector<TrialSet> clients;
  TrialSet test;
};

/// Leave-one-subject-out: subject `test_index` becomes the held-out test set,
/// every other subject becomes one client (input order preserved).
LosoSplit loso_split(const std::vector<TrialSet>& all_subjects,
                     std::size_t test_index);

/// Binary trial format (.eegt): magic "EEGT", u32 version=1, u32 n, u32 C,
/// u32 T, u32 N_c, u32 subject_id, n*C*T little-endian f64, n u16 labels.
void write_trials(std::ostream& os, const TrialSet& t);
void write_trials_file(const std::string& path, const TrialSet& t);
TrialSet read_trials(std::istream& is);
TrialSet read_trials_file(const std::string& path);

/// CSV import: header subject,trial,label,channel,t0..t{T-1}; one row per
/// (trial, channel). Channel rows of a trial may appear in any order.
TrialSet read_trials_csv(std::istream& is);
TrialSet read_trials_csv_file(const std::string& path);

}  // namespace fedbs
