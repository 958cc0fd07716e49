#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "fedbs/config.hpp"
#include "fedbs/federated.hpp"
#include "fedbs/stats.hpp"

namespace fedbs {

/// One grid cell: a strategy trained with one seed against one held-out
/// subject. rounds_jsonl holds the cell's round log so workers never share
/// an output stream; the merged log concatenates cells in grid order.
struct CellResult {
  std::string strategy;
  std::uint32_t subject = 0;  // held-out subject id
  std::uint64_t seed = 0;
  double accuracy = 0.0;
  std::string rounds_jsonl;
};

struct ExperimentResult {
  AccuracyTable table;
  std::vector<CellResult> cells;  // strategy-major, then subject, then seed
  std::vector<std::string> comparisons;
  std::vector<TestReport> reports;  // aligned with comparisons, BH-adjusted
};

/// Runs the full seed x test-subject x strategy grid with leave-one-subject-
/// out splits, one worker per cell. Alignment references are computed per
/// subject on that subject's own trials only. Results are identical for any
/// worker count. `progress`, when given, receives one line per finished cell.
ExperimentResult run_experiment(const ExperimentConfig& cfg,
                                int worker_threads = 0,
                                std::ostream* progress = nullptr);

/// Paired comparisons of `baseline` against every name in `others` over the
/// (subject, seed) cells, with Benjamini-Hochberg-adjusted p-values. A
/// comparison whose differences have zero variance supports no t-test; with
/// skip_degenerate it is dropped (adjustment then spans the kept rows),
/// otherwise it throws.
struct ComparisonSet {
  std::vector<std::string> comparisons;  // "a_vs_b"
  std::vector<TestReport> reports;
};
ComparisonSet compare_strategies(const AccuracyTable& table,
                                 const std::string& baseline,
                                 const std::vector<std::string>& others,
                                 bool skip_degenerate = false);

/// accuracy.csv: header approach,subject,seed,accuracy; one row per cell in
/// key order; accuracies printed shortest-round-trip so a read-back is exact.
std::string accuracy_csv(const AccuracyTable& table);
AccuracyTable read_accuracy_csv(std::istream& in);

/// stats.csv built from aligned comparison names and reports.
std::string stats_csv(const std::vector<std::string>& comparisons,
                      const std::vector<TestReport>& reports);

/// Concatenated per-cell round logs, cells in grid order.
std::string merged_rounds_jsonl(const ExperimentResult& res);

/// Writes rounds.jsonl, accuracy.csv, and stats.csv under cfg.out_dir,
/// creating the directory if needed. Each file is written to a temporary
/// name and renamed into place.
void write_experiment_outputs(const ExperimentConfig& cfg,
                              const ExperimentResult& res);

/// Concatenates subjects' trials into one set for the centralized baseline.
/// All sets must agree on shape and class count.
TrialSet pool_subjects(const std::vector<TrialSet>& sets);

/// The subject sets an experiment trains on: synthetic generation or the
/// files under cfg.data_path, aligned per subject when cfg.apply_ea is set.
std::vector<TrialSet> load_experiment_subjects(const ExperimentConfig& cfg);

/// Evaluates frozen parameters at several test batch sizes; used to probe
/// robustness of the inference-time normalization choice.
std::vector<double> test_batch_accuracies(const BackboneSpec& backbone,
                                          Strategy strategy,
                                          const ParamSet& params,
                                          const TrialSet& testset,
                                          const std::vector<std::int64_t>& sizes);

/// Penultimate-layer features of every trial in `set`, batched like
/// evaluation; returns row-major n x dim and stores dim in *dim_out.
std::vector<double> model_features(Model& model, const TrialSet& set,
                                   BnMode mode, std::int64_t batch_size,
                                   std::int64_t* dim_out);

}  // namespace fedbs
