#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fedbs/config.hpp"
#include "fedbs/experiment.hpp"
#include "fedbs/preprocess.hpp"

using fedbs::accuracy_csv;
using fedbs::AccuracyTable;
using fedbs::compare_strategies;
using fedbs::ConfigError;
using fedbs::ExperimentConfig;
using fedbs::ExperimentResult;
using fedbs::load_experiment_subjects;
using fedbs::model_features;
using fedbs::parse_config;
using fedbs::pool_subjects;
using fedbs::read_accuracy_csv;
using fedbs::run_experiment;
using fedbs::Strategy;
using fedbs::TrialSet;

namespace {

ExperimentConfig parse_text(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

// A grid small enough to train in milliseconds: 3 subjects, a tiny MLP, two
// rounds of single-epoch updates.
std::string small_grid_text(const std::string& strategies,
                            const std::string& seeds) {
  return "[data]\n"
         "subjects = 3\n"
         "trials_per_subject = 12\n"
         "channels = 4\n"
         "samples = 16\n"
         "classes = 2\n"
         "[backbone]\n"
         "arch = mlp\n"
         "dropout = 0\n"
         "[federated]\n"
         "rounds = 2\n"
         "local_epochs = 1\n"
         "batch_size = 6\n"
         "test_batch_size = 4\n"
         "[experiment]\n"
         "seeds = " + seeds + "\n"
         "strategies = " + strategies + "\n";
}

std::filesystem::path fresh_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("experiment: 4 subjects x 2 strategies x 2 seeds gives 16 cells") {
  ExperimentConfig cfg = parse_text(small_grid_text("fedbs,fedavg", "0,1"));
  cfg.synthetic.subjects = 4;
  const ExperimentResult res = run_experiment(cfg, 1);

  CHECK(res.cells.size() == 16);
  CHECK(res.table.cells.size() == 16);

  // one entry per (approach, subject, seed), accuracy echoed into the table
  for (const auto& cell : res.cells) {
    const auto key = std::make_tuple(cell.strategy, cell.subject, cell.seed);
    REQUIRE(res.table.cells.count(key) == 1);
    CHECK(res.table.cells.at(key) == cell.accuracy);
    CHECK(cell.accuracy >= 0.0);
    CHECK(cell.accuracy <= 1.0);
  }

  // strategy-major grid order: subjects then seeds nested inside
  REQUIRE(res.cells.size() == 16);
  for (std::size_t i = 0; i < 8; ++i) CHECK(res.cells[i].strategy == "fedbs");
  for (std::size_t i = 8; i < 16; ++i) CHECK(res.cells[i].strategy == "fedavg");
  CHECK(res.cells[0].subject == 0);
  CHECK(res.cells[0].seed == 0);
  CHECK(res.cells[1].subject == 0);
  CHECK(res.cells[1].seed == 1);
  CHECK(res.cells[2].subject == 1);

  // accuracy.csv: header plus one row per cell
  const std::string csv = accuracy_csv(res.table);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 17);
  CHECK(csv.rfind("approach,subject,seed,accuracy\n", 0) == 0);
}

TEST_CASE("experiment: reruns and worker counts do not change a byte") {
  const ExperimentConfig cfg = parse_text(small_grid_text("fedbs,fedprox", "0,1"));
  const ExperimentResult a = run_experiment(cfg, 1);
  const ExperimentResult b = run_experiment(cfg, 3);
  const ExperimentResult c = run_experiment(cfg, 0);  // auto worker count

  CHECK(accuracy_csv(a.table) == accuracy_csv(b.table));
  CHECK(accuracy_csv(a.table) == accuracy_csv(c.table));
  CHECK(fedbs::merged_rounds_jsonl(a) == fedbs::merged_rounds_jsonl(b));
  CHECK(fedbs::merged_rounds_jsonl(a) == fedbs::merged_rounds_jsonl(c));
  CHECK(fedbs::stats_csv(a.comparisons, a.reports) ==
        fedbs::stats_csv(b.comparisons, b.reports));
}

TEST_CASE("experiment: default strategy list is the ablation matrix") {
  ExperimentConfig cfg = parse_text(small_grid_text("fedbs,fedavg", "0,1"));
  cfg.strategies = parse_text("").strategies;  // the default four
  const ExperimentResult res = run_experiment(cfg, 3);

  // 4 strategies x 3 subjects x 2 seeds
  CHECK(res.cells.size() == 24);
  const std::vector<std::string> names = res.table.approaches();
  CHECK(names == std::vector<std::string>{"fedavg", "fedavg_bn", "fedavg_sam", "fedbs"});

  // FedBS is the baseline of every paired report, others in listed order
  REQUIRE(res.comparisons.size() == 3);
  CHECK(res.comparisons[0] == "fedbs_vs_fedavg");
  CHECK(res.comparisons[1] == "fedbs_vs_fedavg_bn");
  CHECK(res.comparisons[2] == "fedbs_vs_fedavg_sam");
  for (const auto& r : res.reports) {
    CHECK(r.df == 5);  // 3 subjects x 2 seeds - 1
    CHECK(r.p_value > 0.0);
    CHECK(r.p_value <= 1.0);
    CHECK(r.p_adjusted >= r.p_value);
  }
  const std::string csv = fedbs::stats_csv(res.comparisons, res.reports);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
}

TEST_CASE("experiment: round log lines are well-formed and in grid order") {
  const ExperimentConfig cfg = parse_text(small_grid_text("fedavg,fedbs", "7"));
  const ExperimentResult res = run_experiment(cfg, 2);
  REQUIRE(res.cells.size() == 6);

  const std::string merged = fedbs::merged_rounds_jsonl(res);
  std::istringstream lines(merged);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(lines, line)) {
    const auto rec = nlohmann::json::parse(line);
    REQUIRE(rec.size() == 6);
    const auto& cell = res.cells[line_no / 2];  // two rounds per cell
    CHECK(rec.at("round").get<std::int64_t>() ==
          static_cast<std::int64_t>(line_no % 2) + 1);
    CHECK(rec.at("strategy").get<std::string>() == cell.strategy);
    CHECK(rec.at("seed").get<std::uint64_t>() == cell.seed);
    CHECK(rec.at("selected").is_array());
    CHECK(std::isfinite(rec.at("mean_train_loss").get<double>()));
    const double acc = rec.at("test_accuracy").get<double>();
    CHECK(acc >= 0.0);
    CHECK(acc <= 1.0);
    ++line_no;
  }
  CHECK(line_no == 12);  // cells x rounds

  // the last round of each cell is the accuracy the table records
  for (std::size_t i = 0; i < res.cells.size(); ++i) {
    std::istringstream cell_lines(res.cells[i].rounds_jsonl);
    std::string last;
    std::string cur;
    while (std::getline(cell_lines, cur)) last = cur;
    CHECK(nlohmann::json::parse(last).at("test_accuracy").get<double>() ==
          res.cells[i].accuracy);
  }
}

TEST_CASE("experiment: centralized baseline joins the grid") {
  const ExperimentConfig cfg = parse_text(small_grid_text("ct,fedbs", "0"));
  const ExperimentResult res = run_experiment(cfg, 2);
  CHECK(res.cells.size() == 6);
  CHECK(res.table.approaches() == std::vector<std::string>{"ct", "fedbs"});
  REQUIRE(res.comparisons.size() == 1);
  CHECK(res.comparisons[0] == "fedbs_vs_ct");
  // a ct round log still carries the shared schema
  const auto rec = nlohmann::json::parse(
      res.cells[0].rounds_jsonl.substr(0, res.cells[0].rounds_jsonl.find('\n')));
  CHECK(rec.at("strategy").get<std::string>() == "ct");
}

TEST_CASE("experiment: alignment really is applied per subject") {
  ExperimentConfig cfg = parse_text(small_grid_text("fedbs", "0"));
  cfg.synthetic.samples = 64;  // full-rank covariance for a clean identity
  cfg.apply_ea = true;
  const std::vector<TrialSet> aligned = load_experiment_subjects(cfg);
  REQUIRE(aligned.size() == 3);
  const auto c = static_cast<std::size_t>(cfg.synthetic.channels);
  for (const TrialSet& s : aligned) {
    // mean trial covariance of an aligned subject is the identity
    std::vector<double> mean_cov(c * c, 0.0);
    for (std::int64_t i = 0; i < s.size(); ++i) {
      const double* x = s.trial(i);
      for (std::size_t r = 0; r < c; ++r)
        for (std::size_t q = 0; q < c; ++q) {
          double dot = 0.0;
          for (std::int64_t t = 0; t < s.samples; ++t)
            dot += x[r * static_cast<std::size_t>(s.samples) + static_cast<std::size_t>(t)] *
                   x[q * static_cast<std::size_t>(s.samples) + static_cast<std::size_t>(t)];
          mean_cov[r * c + q] += dot / static_cast<double>(s.size());
        }
    }
    for (std::size_t r = 0; r < c; ++r)
      for (std::size_t q = 0; q < c; ++q)
        CHECK(mean_cov[r * c + q] ==
              doctest::Approx(r == q ? 1.0 : 0.0).epsilon(1e-8).scale(1.0));
  }

  cfg.apply_ea = false;
  const std::vector<TrialSet> raw = load_experiment_subjects(cfg);
  const std::vector<TrialSet> direct = fedbs::generate_synthetic(cfg.synthetic);
  REQUIRE(raw.size() == direct.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    CHECK(raw[i].trials == direct[i].trials);
    CHECK(raw[i].labels == direct[i].labels);
  }
}

TEST_CASE("experiment: file data source round-trips through gen-data format") {
  ExperimentConfig cfg = parse_text(small_grid_text("fedbs", "0"));
  cfg.apply_ea = false;
  const std::vector<TrialSet> direct = fedbs::generate_synthetic(cfg.synthetic);

  const auto dir = fresh_dir("fedbs_test_subjects");
  for (const TrialSet& s : direct) {
    fedbs::write_trials_file(
        (dir / ("subject_" + std::to_string(s.subject_id) + ".eegt")).string(), s);
  }
  cfg.use_synthetic = false;
  cfg.data_path = dir.string();
  const std::vector<TrialSet> loaded = load_experiment_subjects(cfg);
  REQUIRE(loaded.size() == direct.size());
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    CHECK(loaded[i].subject_id == direct[i].subject_id);
    CHECK(loaded[i].trials == direct[i].trials);
    CHECK(loaded[i].labels == direct[i].labels);
  }

  const auto empty = fresh_dir("fedbs_test_empty");
  cfg.data_path = empty.string();
  CHECK_THROWS_WITH_AS(load_experiment_subjects(cfg),
                       doctest::Contains("no .eegt or .csv"), ConfigError);

  std::filesystem::remove_all(dir);
  std::filesystem::remove_all(empty);
}

TEST_CASE("experiment: output files land on disk and match the result") {
  ExperimentConfig cfg = parse_text(small_grid_text("fedbs,fedavg", "0"));
  const auto dir = fresh_dir("fedbs_test_outputs");
  cfg.out_dir = (dir / "nested" / "run1").string();  // created on demand

  const ExperimentResult res = run_experiment(cfg, 2);
  fedbs::write_experiment_outputs(cfg, res);

  auto slurp = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
  };
  const std::filesystem::path out(cfg.out_dir);
  CHECK(slurp(out / "rounds.jsonl") == fedbs::merged_rounds_jsonl(res));
  CHECK(slurp(out / "accuracy.csv") == accuracy_csv(res.table));
  CHECK(slurp(out / "stats.csv") == fedbs::stats_csv(res.comparisons, res.reports));
  CHECK_FALSE(std::filesystem::exists(out / "rounds.jsonl.tmp"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("experiment: accuracy csv round-trips exact doubles") {
  AccuracyTable table;
  table.set("fedbs", 3, 11, 1.0 / 3.0);
  table.set("fedbs", 4, 11, 0.7251);
  table.set("fedavg", 3, 11, std::nextafter(0.5, 1.0));
  table.set("fedavg", 4, 11, 0.0);

  const std::string csv = accuracy_csv(table);
  std::istringstream in(csv);
  const AccuracyTable back = read_accuracy_csv(in);
  REQUIRE(back.cells.size() == 4);
  CHECK(back.cells == table.cells);  // exact, including the awkward doubles

  SUBCASE("header is mandatory") {
    std::istringstream bad("fedbs,1,2,0.5\n");
    CHECK_THROWS_WITH_AS(read_accuracy_csv(bad), doctest::Contains("header"),
                         ConfigError);
  }
  SUBCASE("field count is checked") {
    std::istringstream bad("approach,subject,seed,accuracy\nfedbs,1,2\n");
    CHECK_THROWS_WITH_AS(read_accuracy_csv(bad),
                         doctest::Contains("4 comma-separated fields"), ConfigError);
    std::istringstream bad5("approach,subject,seed,accuracy\nfedbs,1,2,0.5,9\n");
    CHECK_THROWS_AS(read_accuracy_csv(bad5), ConfigError);
  }
  SUBCASE("values are validated") {
    std::istringstream bad("approach,subject,seed,accuracy\nfedbs,1,2,1.5\n");
    CHECK_THROWS_WITH_AS(read_accuracy_csv(bad), doctest::Contains("accuracy"),
                         ConfigError);
    std::istringstream bad2("approach,subject,seed,accuracy\nfedbs,x,2,0.5\n");
    CHECK_THROWS_WITH_AS(read_accuracy_csv(bad2), doctest::Contains("bad subject"),
                         ConfigError);
    std::istringstream dupe(
        "approach,subject,seed,accuracy\nfedbs,1,2,0.5\nfedbs,1,2,0.6\n");
    CHECK_THROWS_WITH_AS(read_accuracy_csv(dupe), doctest::Contains("duplicate"),
                         ConfigError);
  }
}

TEST_CASE("experiment: compare_strategies matches a direct paired test") {
  AccuracyTable table;
  const std::vector<double> base = {0.75, 0.5, 0.875, 0.625};
  const std::vector<double> weak = {0.5, 0.375, 0.75, 0.625};
  const std::vector<double> mid = {0.75, 0.375, 0.875, 0.5};
  for (std::uint32_t i = 0; i < 4; ++i) {
    table.set("fedbs", i / 2, i % 2, base[i]);
    table.set("fedavg", i / 2, i % 2, weak[i]);
    table.set("fedprox", i / 2, i % 2, mid[i]);
  }

  const auto cs = compare_strategies(table, "fedbs", {"fedavg", "fedprox"});
  REQUIRE(cs.reports.size() == 2);
  CHECK(cs.comparisons[0] == "fedbs_vs_fedavg");
  CHECK(cs.comparisons[1] == "fedbs_vs_fedprox");

  const auto direct0 = fedbs::paired_t_test(base, weak);
  const auto direct1 = fedbs::paired_t_test(base, mid);
  CHECK(cs.reports[0].t_value == direct0.t_value);
  CHECK(cs.reports[0].p_value == direct0.p_value);
  CHECK(cs.reports[1].t_value == direct1.t_value);
  CHECK(cs.reports[1].p_value == direct1.p_value);

  // two comparisons: BH multiplies the smaller p by 2, capped by the larger
  const double p0 = direct0.p_value;
  const double p1 = direct1.p_value;
  const double lo = std::min(p0, p1);
  const double hi = std::max(p0, p1);
  const double adj_lo = std::min(std::min(2.0 * lo, hi), 1.0);
  const double adj_hi = std::min(hi, 1.0);
  const double got_lo = p0 < p1 ? cs.reports[0].p_adjusted : cs.reports[1].p_adjusted;
  const double got_hi = p0 < p1 ? cs.reports[1].p_adjusted : cs.reports[0].p_adjusted;
  CHECK(got_lo == doctest::Approx(adj_lo).epsilon(1e-15));
  CHECK(got_hi == doctest::Approx(adj_hi).epsilon(1e-15));

  CHECK_THROWS_AS(compare_strategies(table, "nope", {"fedavg"}),
                  std::invalid_argument);

  SUBCASE("zero-variance differences throw unless skipped") {
    AccuracyTable tied;
    for (std::uint32_t i = 0; i < 4; ++i) {
      tied.set("fedbs", i, 0, base[i]);
      tied.set("clone", i, 0, base[i]);  // identical cells: no variance
      tied.set("fedavg", i, 0, weak[i]);
    }
    CHECK_THROWS_WITH_AS(compare_strategies(tied, "fedbs", {"clone", "fedavg"}),
                         doctest::Contains("degenerate"), std::invalid_argument);
    const auto kept =
        compare_strategies(tied, "fedbs", {"clone", "fedavg"}, true);
    REQUIRE(kept.comparisons.size() == 1);
    CHECK(kept.comparisons[0] == "fedbs_vs_fedavg");
    // with the degenerate row gone, one comparison remains: BH is identity
    CHECK(kept.reports[0].p_adjusted == kept.reports[0].p_value);
  }
}

TEST_CASE("experiment: pool_subjects concatenates in order") {
  ExperimentConfig cfg = parse_text(small_grid_text("fedbs", "0"));
  const std::vector<TrialSet> subjects = fedbs::generate_synthetic(cfg.synthetic);
  const TrialSet pooled = pool_subjects(subjects);
  CHECK(pooled.size() == 36);
  CHECK(pooled.channels == subjects[0].channels);
  CHECK(pooled.n_classes == subjects[0].n_classes);
  // first subject's trials lead, byte for byte
  CHECK(std::equal(subjects[0].trials.begin(), subjects[0].trials.end(),
                   pooled.trials.begin()));
  CHECK(std::equal(subjects[2].trials.begin(), subjects[2].trials.end(),
                   pooled.trials.end() - static_cast<std::ptrdiff_t>(
                                             subjects[2].trials.size())));
  pooled.validate();

  TrialSet odd = subjects[0];
  odd.samples /= 2;
  odd.trials.resize(static_cast<std::size_t>(odd.size() * odd.channels * odd.samples));
  CHECK_THROWS_WITH_AS(pool_subjects({subjects[0], odd}),
                       doctest::Contains("differ"), std::invalid_argument);
  CHECK_THROWS_AS(pool_subjects({}), std::invalid_argument);
}

TEST_CASE("experiment: frozen-parameter evaluation matches evaluate()") {
  ExperimentConfig cfg = parse_text(small_grid_text("fedbs", "0"));
  const std::vector<TrialSet> subjects = fedbs::generate_synthetic(cfg.synthetic);
  fedbs::BackboneSpec spec = cfg.backbone;
  spec.channels = subjects[0].channels;
  spec.samples = subjects[0].samples;
  spec.n_classes = subjects[0].n_classes;

  fedbs::Rng rng(99);
  fedbs::Model model(spec, fedbs::BnMode::BatchSpecific, rng);
  const fedbs::ParamSet params = model.extract_params(true);

  const std::vector<double> accs = fedbs::test_batch_accuracies(
      spec, Strategy::FedBS, params, subjects[0], {1, 4, 12});
  REQUIRE(accs.size() == 3);
  CHECK(accs[1] == fedbs::evaluate(model, subjects[0],
                                   fedbs::BnMode::BatchSpecific, 4));
  CHECK(accs[0] == fedbs::evaluate(model, subjects[0],
                                   fedbs::BnMode::BatchSpecific, 1));

  // running-stats evaluation ignores the test batch size entirely
  const std::vector<double> fixed = fedbs::test_batch_accuracies(
      spec, Strategy::FedAvg, params, subjects[0], {1, 4, 12});
  CHECK(fixed[0] == fixed[1]);
  CHECK(fixed[1] == fixed[2]);
}

TEST_CASE("experiment: model_features shape and batching") {
  ExperimentConfig cfg = parse_text(small_grid_text("fedbs", "0"));
  const std::vector<TrialSet> subjects = fedbs::generate_synthetic(cfg.synthetic);
  fedbs::BackboneSpec spec = cfg.backbone;
  spec.channels = subjects[0].channels;
  spec.samples = subjects[0].samples;
  spec.n_classes = subjects[0].n_classes;

  fedbs::Rng rng(5);
  fedbs::Model model(spec, fedbs::BnMode::RunningStats, rng);
  std::int64_t dim = 0;
  const std::vector<double> feats =
      model_features(model, subjects[0], fedbs::BnMode::RunningStats, 5, &dim);
  REQUIRE(dim > 0);
  CHECK(feats.size() ==
        static_cast<std::size_t>(subjects[0].size()) * static_cast<std::size_t>(dim));
  for (const double v : feats) CHECK(std::isfinite(v));

  // with running statistics the batch split cannot matter
  std::int64_t dim_all = 0;
  const std::vector<double> whole =
      model_features(model, subjects[0], fedbs::BnMode::RunningStats, 64, &dim_all);
  CHECK(dim_all == dim);
  CHECK(whole == feats);

  CHECK_THROWS_AS(model_features(model, subjects[0],
                                 fedbs::BnMode::RunningStats, 0, &dim),
                  std::invalid_argument);
}
