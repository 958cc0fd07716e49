#include "fedbs/experiment.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <charconv>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <mutex>
#include <sstream>
#include <thread>

#include "fedbs/preprocess.hpp"

namespace fedbs {

namespace {

std::string fmt_f64(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  (void)ec;
  return std::string(buf, ptr);
}

std::vector<TrialSet> load_subjects(const ExperimentConfig& cfg) {
  if (cfg.use_synthetic) return generate_synthetic(cfg.synthetic);
  namespace fs = std::filesystem;
  std::vector<fs::path> paths;
  for (const auto& entry : fs::directory_iterator(cfg.data_path)) {
    if (!entry.is_regular_file()) continue;
    const auto ext = entry.path().extension();
    if (ext == ".eegt" || ext == ".csv") paths.push_back(entry.path());
  }
  if (paths.empty()) {
    throw ConfigError("no .eegt or .csv trial files under \"" + cfg.data_path + "\"");
  }
  std::sort(paths.begin(), paths.end());
  std::vector<TrialSet> subjects;
  subjects.reserve(paths.size());
  for (const auto& p : paths) {
    subjects.push_back(p.extension() == ".csv" ? read_trials_csv_file(p.string())
                                               : read_trials_file(p.string()));
  }
  return subjects;
}

CellResult run_cell(const ExperimentConfig& cfg,
                    const std::vector<TrialSet>& subjects,
                    std::size_t subject_index, Strategy strategy,
                    std::uint64_t seed) {
  LosoSplit split = loso_split(subjects, subject_index);
  FederatedConfig fc = cfg.federated;
  fc.backbone = cfg.backbone;
  fc.backbone.channels = split.test.channels;
  fc.backbone.samples = split.test.samples;
  fc.backbone.n_classes = split.test.n_classes;
  fc.strategy = strategy;
  fc.seed = seed;

  std::ostringstream log;
  FederatedResult result;
  if (strategy == Strategy::CT) {
    fc.clients = 1;
    fc.participation = 1.0;
    result = run_centralized(fc, pool_subjects(split.clients), split.test, &log);
  } else {
    fc.clients = static_cast<std::int64_t>(split.clients.size());
    auto clients = make_clients(std::move(split.clients), fc);
    result = run_federated(fc, clients, split.test, &log, 1);
  }
  CellResult cell;
  cell.strategy = std::string(strategy_name(strategy));
  cell.subject = split.test.subject_id;
  cell.seed = seed;
  cell.accuracy = result.final_accuracy;
  cell.rounds_jsonl = log.str();
  return cell;
}

void write_file_atomically(const std::filesystem::path& target,
                           const std::string& content) {
  const std::filesystem::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write \"" + tmp.string() + "\"");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw std::runtime_error("short write to \"" + tmp.string() + "\"");
  }
  std::filesystem::rename(tmp, target);
}

}  // namespace

TrialSet pool_subjects(const std::vector<TrialSet>& sets) {
  if (sets.empty()) throw std::invalid_argument("pool_subjects: no sets");
  TrialSet pooled;
  pooled.subject_id = sets.front().subject_id;
  pooled.channels = sets.front().channels;
  pooled.samples = sets.front().samples;
  pooled.n_classes = sets.front().n_classes;
  for (const TrialSet& s : sets) {
    if (s.channels != pooled.channels || s.samples != pooled.samples ||
        s.n_classes != pooled.n_classes) {
      throw std::invalid_argument("pool_subjects: sets differ in shape or class count");
    }
    pooled.trials.insert(pooled.trials.end(), s.trials.begin(), s.trials.end());
    pooled.labels.insert(pooled.labels.end(), s.labels.begin(), s.labels.end());
  }
  return pooled;
}

std::vector<TrialSet> load_experiment_subjects(const ExperimentConfig& cfg) {
  std::vector<TrialSet> subjects = load_subjects(cfg);
  for (const TrialSet& s : subjects) s.validate();
  if (cfg.apply_ea) {
    for (TrialSet& s : subjects) s = align(s, compute_reference(s));
  }
  return subjects;
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, int worker_threads,
                                std::ostream* progress) {
  cfg.validate();
  std::vector<TrialSet> subjects = load_experiment_subjects(cfg);
  if (subjects.size() < 2) {
    throw ConfigError("leave-one-subject-out needs at least 2 subjects, got " +
                      std::to_string(subjects.size()));
  }

  struct Cell {
    Strategy strategy;
    std::size_t subject_index;
    std::uint64_t seed;
  };
  std::vector<Cell> grid;
  for (Strategy strategy : cfg.strategies)
    for (std::size_t si = 0; si < subjects.size(); ++si)
      for (std::uint64_t seed : cfg.seeds) grid.push_back({strategy, si, seed});

  ExperimentResult res;
  res.cells.resize(grid.size());

  int workers = worker_threads;
  if (workers <= 0) workers = static_cast<int>(std::thread::hardware_concurrency());
  if (workers <= 0) workers = 1;
  workers = std::min<int>(workers, static_cast<int>(grid.size()));

  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::exception_ptr first_error;
  auto worker = [&] {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= grid.size()) return;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (first_error) return;
      }
      try {
        const Cell& c = grid[i];
        res.cells[i] = run_cell(cfg, subjects, c.subject_index, c.strategy, c.seed);
        if (progress) {
          std::lock_guard<std::mutex> lock(mu);
          (*progress) << "cell " << res.cells[i].strategy << " subject="
                      << res.cells[i].subject << " seed=" << res.cells[i].seed
                      << " accuracy=" << fmt_f64(res.cells[i].accuracy) << "\n";
        }
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (first_error) std::rethrow_exception(first_error);

  for (const CellResult& cell : res.cells)
    res.table.set(cell.strategy, cell.subject, cell.seed, cell.accuracy);

  std::string baseline;
  std::vector<std::string> others;
  for (Strategy s : cfg.strategies)
    if (s == Strategy::FedBS) baseline = std::string(strategy_name(s));
  if (baseline.empty()) baseline = std::string(strategy_name(cfg.strategies.front()));
  for (Strategy s : cfg.strategies) {
    const std::string name(strategy_name(s));
    if (name != baseline) others.push_back(name);
  }
  ComparisonSet cs = compare_strategies(res.table, baseline, others,
                                        /*skip_degenerate=*/true);
  res.comparisons = std::move(cs.comparisons);
  res.reports = std::move(cs.reports);
  return res;
}

ComparisonSet compare_strategies(const AccuracyTable& table,
                                 const std::string& baseline,
                                 const std::vector<std::string>& others,
                                 bool skip_degenerate) {
  ComparisonSet cs;
  std::vector<double> a;
  std::vector<double> b;
  for (const std::string& other : others) {
    table.paired_samples(baseline, other, a, b);
    try {
      cs.reports.push_back(paired_t_test(a, b));
    } catch (const std::invalid_argument&) {
      if (skip_degenerate) continue;
      throw;
    }
    cs.comparisons.push_back(baseline + "_vs_" + other);
  }
  std::vector<double> ps;
  ps.reserve(cs.reports.size());
  for (const TestReport& r : cs.reports) ps.push_back(r.p_value);
  const std::vector<double> adjusted = benjamini_hochberg(ps);
  for (std::size_t i = 0; i < cs.reports.size(); ++i)
    cs.reports[i].p_adjusted = adjusted[i];
  return cs;
}

std::string accuracy_csv(const AccuracyTable& table) {
  std::string out = "approach,subject,seed,accuracy\n";
  for (const auto& [key, accuracy] : table.cells) {
    out += std::get<0>(key);
    out += ',';
    out += std::to_string(std::get<1>(key));
    out += ',';
    out += std::to_string(std::get<2>(key));
    out += ',';
    out += fmt_f64(accuracy);
    out += '\n';
  }
  return out;
}

AccuracyTable read_accuracy_csv(std::istream& in) {
  AccuracyTable table;
  std::string line;
  int line_no = 0;
  auto fail = [&](const std::string& msg) -> void {
    throw ConfigError("accuracy csv line " + std::to_string(line_no) + ": " + msg);
  };
  if (!std::getline(in, line)) throw ConfigError("accuracy csv is empty");
  ++line_no;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "approach,subject,seed,accuracy")
    fail("expected header approach,subject,seed,accuracy");
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::array<std::string, 4> field;
    std::size_t pos = 0;
    for (int f = 0; f < 3; ++f) {
      const auto comma = line.find(',', pos);
      if (comma == std::string::npos) fail("expected 4 comma-separated fields");
      field[static_cast<std::size_t>(f)] = line.substr(pos, comma - pos);
      pos = comma + 1;
    }
    if (line.find(',', pos) != std::string::npos)
      fail("expected 4 comma-separated fields");
    field[3] = line.substr(pos);
    if (field[0].empty()) fail("empty approach name");

    std::uint32_t subject = 0;
    std::uint64_t seed = 0;
    double accuracy = 0.0;
    auto parse = [&](const std::string& text, auto& value, const char* what) {
      auto [ptr, ec] =
          std::from_chars(text.data(), text.data() + text.size(), value);
      if (ec != std::errc{} || ptr != text.data() + text.size())
        fail(std::string("bad ") + what + " \"" + text + "\"");
    };
    parse(field[1], subject, "subject");
    parse(field[2], seed, "seed");
    parse(field[3], accuracy, "accuracy");
    if (!(accuracy >= 0.0 && accuracy <= 1.0)) fail("accuracy out of [0, 1]");
    if (table.cells.count({field[0], subject, seed}))
      fail("duplicate cell");
    table.set(field[0], subject, seed, accuracy);
  }
  return table;
}

std::string stats_csv(const std::vector<std::string>& comparisons,
                      const std::vector<TestReport>& reports) {
  if (comparisons.size() != reports.size())
    throw std::invalid_argument("stats_csv: comparisons/reports length mismatch");
  std::string out = stats_csv_header();
  out += '\n';
  for (std::size_t i = 0; i < reports.size(); ++i) {
    out += stats_csv_row(comparisons[i], reports[i]);
    out += '\n';
  }
  return out;
}

std::string merged_rounds_jsonl(const ExperimentResult& res) {
  std::string out;
  for (const CellResult& cell : res.cells) out += cell.rounds_jsonl;
  return out;
}

void write_experiment_outputs(const ExperimentConfig& cfg,
                              const ExperimentResult& res) {
  namespace fs = std::filesystem;
  const fs::path dir(cfg.out_dir);
  fs::create_directories(dir);
  write_file_atomically(dir / "rounds.jsonl", merged_rounds_jsonl(res));
  write_file_atomically(dir / "accuracy.csv", accuracy_csv(res.table));
  write_file_atomically(dir / "stats.csv", stats_csv(res.comparisons, res.reports));
}

std::vector<double> test_batch_accuracies(
    const BackboneSpec& backbone, Strategy strategy, const ParamSet& params,
    const TrialSet& testset, const std::vector<std::int64_t>& sizes) {
  Rng rng(0);
  Model model(backbone, strategy_bn_mode(strategy), rng);
  model.load_params(params, true);
  std::vector<double> out;
  out.reserve(sizes.size());
  for (const std::int64_t size : sizes)
    out.push_back(evaluate(model, testset, strategy_bn_mode(strategy), size));
  return out;
}

std::vector<double> model_features(Model& model, const TrialSet& set,
                                   BnMode mode, std::int64_t batch_size,
                                   std::int64_t* dim_out) {
  set.validate();
  if (batch_size <= 0)
    throw std::invalid_argument("model_features: batch_size must be positive");
  model.set_bn_mode(mode);
  const std::int64_t n = set.size();
  const std::int64_t trial_len = set.channels * set.samples;
  std::vector<double> features;
  std::int64_t dim = 0;
  Tape tape;
  tape.set_enabled(false);
  for (std::int64_t start = 0; start < n; start += batch_size) {
    const std::int64_t b = std::min(batch_size, n - start);
    std::vector<double> buf(static_cast<std::size_t>(b * trial_len));
    std::memcpy(buf.data(), set.trial(start), buf.size() * sizeof(double));
    const Tensor x =
        Tensor::from_vector({b, set.channels, set.samples}, std::move(buf));
    ForwardContext ctx;  // inference: no dropout, no running-stat updates
    const Tensor f = model.features(tape, x, ctx);
    dim = f.shape()[1];
    const auto& fv = f.data();
    features.insert(features.end(), fv.begin(), fv.end());
  }
  if (dim_out) *dim_out = dim;
  return features;
}

}  // namespace fedbs
