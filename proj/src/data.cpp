#include "fedbs/data.hpp"

#include "fedbs/rng.hpp"
#include "fedbs/tensor.hpp"
#include "io_util.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <utility>

namespace fedbs {

namespace {

using detail::check_arg;

constexpr char kTrialMagic[4] = {'E', 'E', 'G', 'T'};
constexpr std::uint32_t kTrialVersion = 1;
constexpr char kTrialKind[] = "trial file";

}  // namespace

void TrialSet::validate() const {
  check_arg(channels >= 1 && samples >= 1 && n_classes >= 1,
            "trial set extents must be positive");
  check_arg(!labels.empty(), "trial set is empty");
  check_arg(trials.size() ==
                labels.size() * static_cast<std::size_t>(channels * samples),
            "trial payload size does not match n*C*T");
  for (int y : labels) {
    check_arg(y >= 1 && y <= n_classes,
              "label " + std::to_string(y) + " out of range 1.." +
                  std::to_string(n_classes));
  }
  for (double v : trials) {
    check_arg(std::isfinite(v), "non-finite value in trial payload");
  }
}

std::vector<TrialSet> generate_synthetic(const SyntheticSpec& spec) {
  check_arg(spec.subjects >= 1 && spec.trials_per_subject >= 1 &&
                spec.channels >= 1 && spec.samples >= 1 && spec.n_classes >= 1,
            "synthetic spec extents must be positive");
  check_arg(spec.snr > 0.0, "synthetic snr must be > 0");
  check_arg(spec.shift_strength >= 0.0, "shift_strength must be >= 0");
  check_arg(spec.sample_rate > 0.0, "sample_rate must be > 0");

  const std::int64_t c_n = spec.channels, t_n = spec.samples;
  const std::int64_t n_classes = spec.n_classes;
  const double two_pi = 2.0 * M_PI;

  // Class-level structure shared by every subject: a spatial pattern and a
  // class-distinct source frequency inside the 8-30 Hz band.
  std::vector<std::vector<double>> pattern(n_classes);
  std::vector<double> freq(n_classes);
  for (std::int64_t c = 0; c < n_classes; ++c) {
    Rng rng(Rng::derive(spec.seed, 0xC1A5, static_cast<std::uint64_t>(c)));
    pattern[c].resize(c_n);
    for (double& v : pattern[c]) v = rng.normal();
    freq[c] = 8.0 + 22.0 * (static_cast<double>(c) + 0.5) /
                        static_cast<double>(n_classes);
  }

  std::vector<TrialSet> out(static_cast<std::size_t>(spec.subjects));
  std::vector<double> source(static_cast<std::size_t>(t_n));
  for (std::int64_t k = 0; k < spec.subjects; ++k) {
    Rng rng(Rng::derive(spec.seed, 0x5EED, static_cast<std::uint64_t>(k)));

    // Subject-specific view of the sources: mixing perturbation
    // M = I + shift*G/sqrt(C), channel gains, and channel offsets, all of
    // which vanish at shift_strength = 0.
    const double g_scale = spec.shift_strength / std::sqrt(double(c_n));
    std::vector<double> mix(static_cast<std::size_t>(c_n * c_n));
    for (std::int64_t r = 0; r < c_n; ++r) {
      for (std::int64_t c = 0; c < c_n; ++c) {
        mix[r * c_n + c] = (r == c ? 1.0 : 0.0) + g_scale * rng.normal();
      }
    }
    std::vector<double> gain(static_cast<std::size_t>(c_n));
    std::vector<double> offset(static_cast<std::size_t>(c_n));
    for (std::int64_t ch = 0; ch < c_n; ++ch) {
      gain[ch] = 1.0 + 0.2 * spec.shift_strength * rng.normal();
      offset[ch] = 0.1 * spec.shift_strength * rng.normal();
    }

    // Rank-1 trials: M (a_c s^T) = (M a_c) s^T, so mix each class pattern
    // through this subject once.
    std::vector<std::vector<double>> mixed(n_classes);
    for (std::int64_t c = 0; c < n_classes; ++c) {
      mixed[c].assign(static_cast<std::size_t>(c_n), 0.0);
      for (std::int64_t r = 0; r < c_n; ++r) {
        double acc = 0.0;
        for (std::int64_t j = 0; j < c_n; ++j) {
          acc += mix[r * c_n + j] * pattern[c][j];
        }
        mixed[c][r] = gain[r] * acc;
      }
    }

    TrialSet& set = out[static_cast<std::size_t>(k)];
    set.subject_id = static_cast<std::uint32_t>(k);
    set.channels = c_n;
    set.samples = t_n;
    set.n_classes = n_classes;
    set.labels.resize(static_cast<std::size_t>(spec.trials_per_subject));
    set.trials.resize(
        static_cast<std::size_t>(spec.trials_per_subject * c_n * t_n));

    for (std::int64_t i = 0; i < spec.trials_per_subject; ++i) {
      const std::int64_t cls = i % n_classes;
      set.labels[i] = static_cast<int>(cls) + 1;
      const double phase = two_pi * rng.uniform();
      const double omega = two_pi * freq[cls] / spec.sample_rate;
      double source_power = 0.0;
      for (std::int64_t t = 0; t < t_n; ++t) {
        source[t] = std::sin(omega * static_cast<double>(t) + phase);
        source_power += source[t] * source[t];
      }
      double spatial_power = 0.0;
      for (std::int64_t ch = 0; ch < c_n; ++ch) {
        spatial_power += mixed[cls][ch] * mixed[cls][ch];
      }
      const double signal_power =
          spatial_power * source_power / static_cast<double>(c_n * t_n);
      const double sigma = std::sqrt(signal_power / spec.snr);
      double* x = set.trial(i);
      for (std::int64_t ch = 0; ch < c_n; ++ch) {
        for (std::int64_t t = 0; t < t_n; ++t) {
          x[ch * t_n + t] =
              mixed[cls][ch] * source[t] + offset[ch] + sigma * rng.normal();
        }
      }
    }
    set.validate();
  }
  return out;
}

LosoSplit loso_split(const std::vector<TrialSet>& all_subjects,
                     std::size_t test_index) {
  check_arg(all_subjects.size() >= 2, "LOSO needs at least 2 subjects");
  check_arg(test_index < all_subjects.size(), "test subject index out of range");
  LosoSplit split;
  split.clients.reserve(all_subjects.size() - 1);
  for (std::size_t i = 0; i < all_subjects.size(); ++i) {
    if (i == test_index) {
      split.test = all_subjects[i];
    } else {
      split.clients.push_back(all_subjects[i]);
    }
  }
  return split;
}

void write_trials(std::ostream& os, const TrialSet& t) {
  t.validate();
  os.write(kTrialMagic, 4);
  ioutil::write_u32(os, kTrialVersion);
  ioutil::write_u32(os, static_cast<std::uint32_t>(t.size()));
  ioutil::write_u32(os, static_cast<std::uint32_t>(t.channels));
  ioutil::write_u32(os, static_cast<std::uint32_t>(t.samples));
  ioutil::write_u32(os, static_cast<std::uint32_t>(t.n_classes));
  ioutil::write_u32(os, t.subject_id);
  for (double v : t.trials) ioutil::write_f64(os, v);
  for (int y : t.labels) {
    ioutil::write_u16(os, static_cast<std::uint16_t>(y));
  }
  if (!os) throw std::runtime_error("trial file write failed");
}

TrialSet read_trials(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kTrialMagic, 4) != 0) {
    throw std::runtime_error("not a trial file (bad magic)");
  }
  const std::uint32_t version = ioutil::read_u32(is, kTrialKind, "version");
  if (version != kTrialVersion) {
    throw std::runtime_error("unsupported trial file version " +
                             std::to_string(version));
  }
  TrialSet t;
  const std::uint32_t n = ioutil::read_u32(is, kTrialKind, "trial count");
  t.channels = ioutil::read_u32(is, kTrialKind, "channel count");
  t.samples = ioutil::read_u32(is, kTrialKind, "sample count");
  t.n_classes = ioutil::read_u32(is, kTrialKind, "class count");
  t.subject_id = ioutil::read_u32(is, kTrialKind, "subject id");
  t.trials.resize(static_cast<std::size_t>(n) *
                  static_cast<std::size_t>(t.channels * t.samples));
  for (double& v : t.trials) {
    v = ioutil::read_f64(is, kTrialKind, "trial payload");
  }
  t.labels.resize(n);
  for (int& y : t.labels) {
    y = ioutil::read_u16(is, kTrialKind, "labels");
  }
  t.validate();
  return t;
}

void write_trials_file(const std::string& path, const TrialSet& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  write_trials(os, t);
}

TrialSet read_trials_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path);
  return read_trials(is);
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

[[noreturn]] void csv_error(std::size_t line_no, const std::string& msg) {
  throw std::runtime_error("CSV line " + std::to_string(line_no) + ": " + msg);
}

}  // namespace

TrialSet read_trials_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) {
    throw std::runtime_error("CSV is empty (missing header)");
  }
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const std::vector<std::string> header = split_csv_line(line);
  if (header.size() < 5 || header[0] != "subject" || header[1] != "trial" ||
      header[2] != "label" || header[3] != "channel" || header[4] != "t0") {
    throw std::runtime_error(
        "CSV header must start with subject,trial,label,channel,t0");
  }
  const std::int64_t t_n = static_cast<std::int64_t>(header.size()) - 4;
  for (std::int64_t t = 0; t < t_n; ++t) {
    if (header[4 + t] != "t" + std::to_string(t)) {
      throw std::runtime_error("CSV header sample columns must be t0..t" +
                               std::to_string(t_n - 1));
    }
  }

  struct TrialRows {
    int label = 0;
    std::map<long long, std::vector<double>> by_channel;
  };
  std::vector<long long> trial_order;
  std::map<long long, TrialRows> by_trial;
  long long subject = -1;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::vector<std::string> f = split_csv_line(line);
    if (static_cast<std::int64_t>(f.size()) != 4 + t_n) {
      csv_error(line_no, "expected " + std::to_string(4 + t_n) +
                             " fields, got " + std::to_string(f.size()));
    }
    long long subj, trial_id, channel;
    int label;
    std::vector<double> row(static_cast<std::size_t>(t_n));
    try {
      subj = std::stoll(f[0]);
      trial_id = std::stoll(f[1]);
      label = std::stoi(f[2]);
      channel = std::stoll(f[3]);
      for (std::int64_t t = 0; t < t_n; ++t) {
        row[t] = std::stod(f[4 + t]);
      }
    } catch (const std::exception&) {
      csv_error(line_no, "non-numeric field");
    }
    if (subject == -1) subject = subj;
    if (subj != subject) {
      csv_error(line_no, "multiple subject ids in one file");
    }
    if (label < 1) csv_error(line_no, "label must be >= 1");
    TrialRows& rows = by_trial[trial_id];
    if (rows.by_channel.empty()) {
      rows.label = label;
      trial_order.push_back(trial_id);
    } else if (rows.label != label) {
      csv_error(line_no, "conflicting labels for trial " +
                             std::to_string(trial_id));
    }
    if (!rows.by_channel.emplace(channel, std::move(row)).second) {
      csv_error(line_no, "duplicate channel " + std::to_string(channel) +
                             " for trial " + std::to_string(trial_id));
    }
  }
  if (trial_order.empty()) {
    throw std::runtime_error("CSV has no data rows");
  }

  const std::size_t c_n = by_trial[trial_order.front()].by_channel.size();
  TrialSet out;
  out.subject_id = static_cast<std::uint32_t>(subject);
  out.channels = static_cast<std::int64_t>(c_n);
  out.samples = t_n;
  out.labels.reserve(trial_order.size());
  out.trials.reserve(trial_order.size() * c_n * static_cast<std::size_t>(t_n));
  int max_label = 0;
  for (long long id : trial_order) {
    const TrialRows& rows = by_trial[id];
    if (rows.by_channel.size() != c_n) {
      throw std::runtime_error("trial " + std::to_string(id) + " has " +
                               std::to_string(rows.by_channel.size()) +
                               " channels, expected " + std::to_string(c_n));
    }
    out.labels.push_back(rows.label);
    max_label = std::max(max_label, rows.label);
    for (const auto& [channel, row] : rows.by_channel) {
      out.trials.insert(out.trials.end(), row.begin(), row.end());
    }
  }
  out.n_classes = max_label;
  out.validate();
  return out;
}

TrialSet read_trials_csv_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open: " + path);
  return read_trials_csv(is);
}

}  // namespace fedbs
