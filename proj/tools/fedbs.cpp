// fedbs: federated EEG classification experiments from the command line.
//
// Subcommands:
//   run       full seed x test-subject x strategy grid; writes rounds.jsonl,
//             accuracy.csv, stats.csv under --out
//   gen-data  write synthetic per-subject .eegt files
//   stats     recompute paired reports from an accuracy.csv
//   sweep     vary participation, local epochs, or test batch size
//
// Exit codes: 0 success, 2 bad configuration or input, 3 runtime failure
// (for example a non-finite training loss).

#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fedbs/config.hpp"
#include "fedbs/experiment.hpp"

namespace {

using fedbs::ConfigError;
using fedbs::ExperimentConfig;
using fedbs::Strategy;

struct CommonFlags {
  std::string config_path;
  std::string strategy_list;
  std::int64_t seed_count = -1;
  std::string out_dir;
  bool synthetic = false;
  std::string data_dir;
  double rho = -1.0;
  double participation = -1.0;
  std::int64_t local_epochs = -1;
  std::int64_t test_batch = -1;
  std::int64_t rounds = -1;
  int threads = 0;
};

void add_common_flags(CLI::App& cmd, CommonFlags& f) {
  cmd.add_option("--config", f.config_path, "Config file; defaults apply when omitted");
  cmd.add_option("--strategy", f.strategy_list,
                 "Comma-separated strategies (ct, fedavg, fedprox, fedbs, fedavg_bn, fedavg_sam)");
  cmd.add_option("--seeds", f.seed_count, "Run seeds 0..N-1");
  cmd.add_option("--out", f.out_dir, "Output directory");
  cmd.add_flag("--synthetic", f.synthetic, "Use the synthetic generator as the data source");
  cmd.add_option("--data", f.data_dir, "Directory of per-subject .eegt/.csv files");
  cmd.add_option("--rho", f.rho, "SAM neighborhood radius");
  cmd.add_option("--participation", f.participation, "Fraction of clients per round, in (0, 1]");
  cmd.add_option("--local-epochs", f.local_epochs, "Local epochs per round");
  cmd.add_option("--test-batch", f.test_batch, "Evaluation batch size");
  cmd.add_option("--rounds", f.rounds, "Communication rounds");
  cmd.add_option("--threads", f.threads, "Worker threads (0 = all cores)");
}

ExperimentConfig build_config(const CommonFlags& f) {
  ExperimentConfig cfg;
  if (!f.config_path.empty()) cfg = fedbs::parse_config_file(f.config_path);
  if (f.synthetic) cfg.use_synthetic = true;
  if (!f.data_dir.empty()) {
    cfg.use_synthetic = false;
    cfg.data_path = f.data_dir;
  }
  if (!f.strategy_list.empty()) {
    cfg.strategies.clear();
    std::stringstream ss(f.strategy_list);
    std::string name;
    while (std::getline(ss, name, ','))
      cfg.strategies.push_back(fedbs::parse_strategy(name));
  }
  if (f.seed_count >= 0) {
    if (f.seed_count < 1) throw ConfigError("--seeds must be at least 1");
    cfg.seeds.clear();
    for (std::int64_t s = 0; s < f.seed_count; ++s)
      cfg.seeds.push_back(static_cast<std::uint64_t>(s));
  }
  if (!f.out_dir.empty()) cfg.out_dir = f.out_dir;
  if (f.rho >= 0.0) cfg.federated.rho = f.rho;
  if (f.participation >= 0.0) cfg.federated.participation = f.participation;
  if (f.local_epochs >= 0) cfg.federated.local_epochs = f.local_epochs;
  if (f.test_batch >= 0) cfg.federated.test_batch_size = f.test_batch;
  if (f.rounds >= 0) cfg.federated.rounds = f.rounds;
  cfg.validate();
  return cfg;
}

int cmd_run(const CommonFlags& flags) {
  const ExperimentConfig cfg = build_config(flags);
  const fedbs::ExperimentResult res =
      fedbs::run_experiment(cfg, flags.threads, &std::cerr);
  fedbs::write_experiment_outputs(cfg, res);
  for (const std::string& name : res.table.approaches())
    std::cout << name << " mean_accuracy=" << res.table.mean_accuracy(name) << "\n";
  for (std::size_t i = 0; i < res.comparisons.size(); ++i)
    std::cout << res.comparisons[i] << " p=" << res.reports[i].p_value
              << " p_adj=" << res.reports[i].p_adjusted << "\n";
  std::cout << "wrote " << cfg.out_dir << "/rounds.jsonl, accuracy.csv, stats.csv\n";
  return 0;
}

int cmd_gen_data(const fedbs::SyntheticSpec& spec, const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const std::vector<fedbs::TrialSet> subjects = fedbs::generate_synthetic(spec);
  for (const fedbs::TrialSet& s : subjects) {
    std::ostringstream name;
    name << "subject_" << s.subject_id << ".eegt";
    fedbs::write_trials_file((fs::path(out_dir) / name.str()).string(), s);
  }
  std::cout << "wrote " << subjects.size() << " subject files to " << out_dir << "\n";
  return 0;
}

int cmd_stats(const std::string& csv_path, const std::string& baseline,
              const std::string& out_file) {
  std::ifstream in(csv_path);
  if (!in) throw ConfigError("cannot open \"" + csv_path + "\"");
  const fedbs::AccuracyTable table = fedbs::read_accuracy_csv(in);
  const std::vector<std::string> approaches = table.approaches();
  std::vector<std::string> others;
  bool have_baseline = false;
  for (const std::string& a : approaches) {
    if (a == baseline) {
      have_baseline = true;
    } else {
      others.push_back(a);
    }
  }
  if (!have_baseline)
    throw ConfigError("baseline approach \"" + baseline + "\" not present in " + csv_path);
  const fedbs::ComparisonSet cs =
      fedbs::compare_strategies(table, baseline, others, /*skip_degenerate=*/true);
  const std::string csv = fedbs::stats_csv(cs.comparisons, cs.reports);
  if (out_file.empty()) {
    std::cout << csv;
  } else {
    std::ofstream out(out_file, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write \"" + out_file + "\"");
    out << csv;
  }
  return 0;
}

// Mean accuracy per (axis value, strategy). The test-batch axis trains each
// cell once and re-evaluates the frozen parameters, since only inference
// changes; the other axes retrain per value.
int cmd_sweep(const CommonFlags& flags, const std::string& axis,
              const std::vector<double>& values) {
  const ExperimentConfig base = build_config(flags);
  if (values.empty()) throw ConfigError("--values must list at least one value");
  std::string csv = "axis,value,approach,mean_accuracy\n";
  auto fmt = [](double v) {
    std::ostringstream os;
    os << std::setprecision(10) << v;
    return os.str();
  };

  if (axis == "test_batch") {
    std::vector<std::int64_t> sizes;
    for (const double v : values) {
      const auto size = static_cast<std::int64_t>(v);
      if (size < 1 || static_cast<double>(size) != v)
        throw ConfigError("test_batch values must be positive integers");
      sizes.push_back(size);
    }
    const std::vector<fedbs::TrialSet> subjects = fedbs::load_experiment_subjects(base);
    if (subjects.size() < 2) throw ConfigError("need at least 2 subjects");
    // accumulated over cells: accuracy sums per (size index, strategy index)
    std::vector<std::vector<double>> sums(sizes.size(),
                                          std::vector<double>(base.strategies.size(), 0.0));
    std::int64_t cells = 0;
    for (std::size_t si = 0; si < base.strategies.size(); ++si) {
      for (std::size_t subject = 0; subject < subjects.size(); ++subject) {
        for (const std::uint64_t seed : base.seeds) {
          fedbs::LosoSplit split = fedbs::loso_split(subjects, subject);
          fedbs::FederatedConfig fc = base.federated;
          fc.backbone = base.backbone;
          fc.backbone.channels = split.test.channels;
          fc.backbone.samples = split.test.samples;
          fc.backbone.n_classes = split.test.n_classes;
          fc.strategy = base.strategies[si];
          fc.seed = seed;
          fedbs::FederatedResult r;
          if (fc.strategy == Strategy::CT) {
            fc.clients = 1;
            fc.participation = 1.0;
            r = fedbs::run_centralized(fc, fedbs::pool_subjects(split.clients), split.test);
          } else {
            fc.clients = static_cast<std::int64_t>(split.clients.size());
            auto clients = fedbs::make_clients(std::move(split.clients), fc);
            r = fedbs::run_federated(fc, clients, split.test);
          }
          const std::vector<double> accs = fedbs::test_batch_accuracies(
              fc.backbone, fc.strategy, r.final_params, split.test, sizes);
          for (std::size_t vi = 0; vi < sizes.size(); ++vi) sums[vi][si] += accs[vi];
        }
      }
      if (si == 0) cells = static_cast<std::int64_t>(subjects.size() * base.seeds.size());
    }
    for (std::size_t vi = 0; vi < sizes.size(); ++vi)
      for (std::size_t si = 0; si < base.strategies.size(); ++si)
        csv += axis + "," + std::to_string(sizes[vi]) + "," +
               std::string(fedbs::strategy_name(base.strategies[si])) + "," +
               fmt(sums[vi][si] / static_cast<double>(cells)) + "\n";
  } else if (axis == "participation" || axis == "local_epochs") {
    for (const double v : values) {
      ExperimentConfig cfg = base;
      if (axis == "participation") {
        cfg.federated.participation = v;
      } else {
        const auto epochs = static_cast<std::int64_t>(v);
        if (epochs < 1 || static_cast<double>(epochs) != v)
          throw ConfigError("local_epochs values must be positive integers");
        cfg.federated.local_epochs = epochs;
      }
      cfg.validate();
      const fedbs::ExperimentResult res =
          fedbs::run_experiment(cfg, flags.threads, &std::cerr);
      for (const Strategy s : cfg.strategies) {
        const std::string name(fedbs::strategy_name(s));
        csv += axis + "," + fmt(v) + "," + name + "," +
               fmt(res.table.mean_accuracy(name)) + "\n";
      }
    }
  } else {
    throw ConfigError("unknown sweep axis \"" + axis +
                      "\" (expected participation, local_epochs, or test_batch)");
  }

  namespace fs = std::filesystem;
  fs::create_directories(base.out_dir);
  const fs::path target = fs::path(base.out_dir) / "sweep.csv";
  std::ofstream out(target, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write \"" + target.string() + "\"");
  out << csv;
  std::cout << csv;
  std::cout << "wrote " << target.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated EEG classification with local batch normalization and SAM"};
  app.require_subcommand(1);

  CommonFlags run_flags;
  CLI::App* run = app.add_subcommand("run", "Run the experiment grid");
  add_common_flags(*run, run_flags);

  fedbs::SyntheticSpec gen_spec;
  std::string gen_out = "data";
  CLI::App* gen = app.add_subcommand("gen-data", "Write synthetic subject files");
  gen->add_option("--out", gen_out, "Output directory");
  gen->add_option("--subjects", gen_spec.subjects, "Subject count");
  gen->add_option("--trials", gen_spec.trials_per_subject, "Trials per subject");
  gen->add_option("--channels", gen_spec.channels, "Channel count");
  gen->add_option("--samples", gen_spec.samples, "Samples per trial");
  gen->add_option("--classes", gen_spec.n_classes, "Class count");
  gen->add_option("--snr", gen_spec.snr, "Signal-to-noise power ratio");
  gen->add_option("--shift", gen_spec.shift_strength, "Inter-subject shift strength");
  gen->add_option("--seed", gen_spec.seed, "Generator seed");

  std::string stats_csv_path;
  std::string stats_baseline = "fedbs";
  std::string stats_out;
  CLI::App* stats = app.add_subcommand("stats", "Recompute reports from an accuracy.csv");
  stats->add_option("csv", stats_csv_path, "accuracy.csv to read")->required();
  stats->add_option("--baseline", stats_baseline, "Approach compared against the rest");
  stats->add_option("--out", stats_out, "Write stats.csv here instead of stdout");

  CommonFlags sweep_flags;
  std::string sweep_axis;
  std::vector<double> sweep_values;
  CLI::App* sweep = app.add_subcommand("sweep", "Vary one knob and report mean accuracy");
  add_common_flags(*sweep, sweep_flags);
  sweep->add_option("--axis", sweep_axis, "participation, local_epochs, or test_batch")
      ->required();
  sweep->add_option("--values", sweep_values, "Axis values (comma-separated)")
      ->required()
      ->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (run->parsed()) return cmd_run(run_flags);
    if (gen->parsed()) return cmd_gen_data(gen_spec, gen_out);
    if (stats->parsed()) return cmd_stats(stats_csv_path, stats_baseline, stats_out);
    if (sweep->parsed()) return cmd_sweep(sweep_flags, sweep_axis, sweep_values);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
