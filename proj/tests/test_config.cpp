#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "fedbs/config.hpp"

using fedbs::ConfigError;
using fedbs::ExperimentConfig;
using fedbs::parse_config;
using fedbs::serialize_config;
using fedbs::Strategy;

namespace {

ExperimentConfig parse_text(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

}  // namespace

TEST_CASE("config: empty input yields every documented default") {
  const ExperimentConfig cfg = parse_text("");

  CHECK(cfg.use_synthetic);
  CHECK(cfg.data_path.empty());
  CHECK(cfg.apply_ea);
  CHECK(cfg.synthetic.subjects == 6);
  CHECK(cfg.synthetic.trials_per_subject == 200);
  CHECK(cfg.synthetic.channels == 8);
  CHECK(cfg.synthetic.samples == 128);
  CHECK(cfg.synthetic.n_classes == 2);
  CHECK(cfg.synthetic.snr == 5.0);
  CHECK(cfg.synthetic.shift_strength == 0.5);
  CHECK(cfg.synthetic.seed == 0);

  CHECK(cfg.federated.participation == 0.5);
  CHECK(cfg.federated.local_epochs == 2);
  CHECK(cfg.federated.rounds == 200);
  CHECK(cfg.federated.batch_size == 32);
  CHECK(cfg.federated.lr == 0.005);
  CHECK(cfg.federated.rho == 0.1);
  CHECK(cfg.federated.weight_decay == 0.0001);
  CHECK(cfg.federated.momentum == 0.9);
  CHECK(cfg.federated.mu_prox == 1.0);
  CHECK(cfg.federated.test_batch_size == 8);

  CHECK(cfg.seeds == std::vector<std::uint64_t>{0, 1, 2, 3, 4, 5});
  REQUIRE(cfg.strategies.size() == 4);
  CHECK(cfg.strategies[0] == Strategy::FedAvg);
  CHECK(cfg.strategies[1] == Strategy::FedAvgBN);
  CHECK(cfg.strategies[2] == Strategy::FedAvgSAM);
  CHECK(cfg.strategies[3] == Strategy::FedBS);
  CHECK(cfg.out_dir == "results");
}

TEST_CASE("config: comments, blank lines, and spacing are tolerated") {
  const ExperimentConfig cfg = parse_text(
      "# leading comment\n"
      "\n"
      "  [federated]  \n"
      "\tlr\t=\t0.25\t# trailing comment\n"
      "rounds=7\n");
  CHECK(cfg.federated.lr == 0.25);
  CHECK(cfg.federated.rounds == 7);
  // untouched siblings keep their defaults
  CHECK(cfg.federated.batch_size == 32);
}

TEST_CASE("config: every section key lands in the right field") {
  const ExperimentConfig cfg = parse_text(
      "[data]\n"
      "source = synthetic\n"
      "subjects = 9\n"
      "trials_per_subject = 50\n"
      "channels = 16\n"
      "samples = 256\n"
      "classes = 4\n"
      "snr = 2.5\n"
      "shift = 0.75\n"
      "sample_rate = 128\n"
      "data_seed = 42\n"
      "apply_ea = false\n"
      "[backbone]\n"
      "arch = mlp\n"
      "f1 = 4\n"
      "depth_mult = 3\n"
      "f2 = 12\n"
      "dropout = 0.5\n"
      "[federated]\n"
      "participation = 0.25\n"
      "local_epochs = 5\n"
      "rounds = 11\n"
      "batch_size = 16\n"
      "lr = 0.01\n"
      "rho = 0.05\n"
      "weight_decay = 0.001\n"
      "momentum = 0.8\n"
      "mu_prox = 2\n"
      "test_batch_size = 4\n"
      "[experiment]\n"
      "seeds = 3,1,4\n"
      "strategies = fedbs,ct\n"
      "out = /tmp/somewhere\n");
  CHECK(cfg.synthetic.subjects == 9);
  CHECK(cfg.synthetic.trials_per_subject == 50);
  CHECK(cfg.synthetic.channels == 16);
  CHECK(cfg.synthetic.samples == 256);
  CHECK(cfg.synthetic.n_classes == 4);
  CHECK(cfg.synthetic.snr == 2.5);
  CHECK(cfg.synthetic.shift_strength == 0.75);
  CHECK(cfg.synthetic.sample_rate == 128.0);
  CHECK(cfg.synthetic.seed == 42);
  CHECK_FALSE(cfg.apply_ea);
  CHECK(cfg.backbone.arch == fedbs::Architecture::TestMLP);
  CHECK(cfg.backbone.f1 == 4);
  CHECK(cfg.backbone.depth_mult == 3);
  CHECK(cfg.backbone.f2 == 12);
  CHECK(cfg.backbone.dropout_p == 0.5);
  CHECK(cfg.federated.participation == 0.25);
  CHECK(cfg.federated.local_epochs == 5);
  CHECK(cfg.federated.rounds == 11);
  CHECK(cfg.federated.batch_size == 16);
  CHECK(cfg.federated.lr == 0.01);
  CHECK(cfg.federated.rho == 0.05);
  CHECK(cfg.federated.weight_decay == 0.001);
  CHECK(cfg.federated.momentum == 0.8);
  CHECK(cfg.federated.mu_prox == 2.0);
  CHECK(cfg.federated.test_batch_size == 4);
  CHECK(cfg.seeds == std::vector<std::uint64_t>{3, 1, 4});
  REQUIRE(cfg.strategies.size() == 2);
  CHECK(cfg.strategies[0] == Strategy::FedBS);
  CHECK(cfg.strategies[1] == Strategy::CT);
  CHECK(cfg.out_dir == "/tmp/somewhere");
}

TEST_CASE("config: diagnostics name the offending line") {
  SUBCASE("unknown key") {
    CHECK_THROWS_WITH_AS(parse_text("[federated]\nlr = 0.1\nlearning_rate = 0.1\n"),
                         doctest::Contains("config line 3"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_text("[federated]\nlr = 0.1\nlearning_rate = 0.1\n"),
                         doctest::Contains("unknown key \"learning_rate\""),
                         ConfigError);
  }
  SUBCASE("unknown section") {
    CHECK_THROWS_WITH_AS(parse_text("\n[server]\n"),
                         doctest::Contains("config line 2"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_text("\n[server]\n"),
                         doctest::Contains("unknown section [server]"), ConfigError);
  }
  SUBCASE("participation out of range") {
    CHECK_THROWS_WITH_AS(parse_text("[federated]\nparticipation = 1.5\n"),
                         doctest::Contains("config line 2"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_text("[federated]\nparticipation = 1.5\n"),
                         doctest::Contains("(0, 1]"), ConfigError);
  }
  SUBCASE("type mismatch") {
    CHECK_THROWS_WITH_AS(parse_text("[federated]\nrounds = soon\n"),
                         doctest::Contains("expects an integer"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_text("[federated]\nlr = fast\n"),
                         doctest::Contains("expects a number"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_text("[data]\napply_ea = yes\n"),
                         doctest::Contains("expects true or false"), ConfigError);
  }
  SUBCASE("structure errors") {
    CHECK_THROWS_WITH_AS(parse_text("lr = 0.1\n"),
                         doctest::Contains("before any [section]"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_text("[federated\n"),
                         doctest::Contains("unterminated section header"),
                         ConfigError);
    CHECK_THROWS_WITH_AS(parse_text("[federated]\nlr 0.1\n"),
                         doctest::Contains("expected key = value"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_text("[federated]\n= 0.1\n"),
                         doctest::Contains("empty key"), ConfigError);
  }
  SUBCASE("bad strategy name carries the line number") {
    CHECK_THROWS_WITH_AS(parse_text("[experiment]\nstrategies = fedavg,fedsgd\n"),
                         doctest::Contains("config line 2"), ConfigError);
  }
  SUBCASE("more range guards") {
    CHECK_THROWS_AS(parse_text("[federated]\nmomentum = 1\n"), ConfigError);
    CHECK_THROWS_AS(parse_text("[federated]\nlr = 0\n"), ConfigError);
    CHECK_THROWS_AS(parse_text("[federated]\nrho = -0.1\n"), ConfigError);
    CHECK_THROWS_AS(parse_text("[federated]\ntest_batch_size = 0\n"), ConfigError);
    CHECK_THROWS_AS(parse_text("[federated]\nrounds = -1\n"), ConfigError);
    CHECK_THROWS_AS(parse_text("[backbone]\ndropout = 1\n"), ConfigError);
    CHECK_THROWS_AS(parse_text("[data]\nclasses = 1\n"), ConfigError);
    CHECK_THROWS_AS(parse_text("[data]\nsnr = 0\n"), ConfigError);
    CHECK_THROWS_AS(parse_text("[data]\nshift = -1\n"), ConfigError);
  }
}

TEST_CASE("config: semantic validation beyond single keys") {
  // one synthetic subject cannot support leave-one-subject-out
  CHECK_THROWS_WITH_AS(parse_text("[data]\nsubjects = 1\n"),
                       doctest::Contains("at least 2 subjects"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_text("[data]\nsource = path\n"),
                       doctest::Contains("no path was given"), ConfigError);
  CHECK_THROWS_WITH_AS(
      parse_text("[experiment]\nstrategies = fedbs,fedavg,fedbs\n"),
      doctest::Contains("duplicate strategy \"fedbs\""), ConfigError);
  CHECK_THROWS_AS(parse_text("[experiment]\nseeds = \n"), ConfigError);
  CHECK_THROWS_AS(parse_text("[experiment]\nseeds = 1,,2\n"), ConfigError);
  CHECK_THROWS_AS(parse_text("[experiment]\nout =\n"), ConfigError);
}

TEST_CASE("config: parse-serialize-parse is lossless") {
  SUBCASE("defaults") {
    const ExperimentConfig a = parse_text("");
    const std::string text = serialize_config(a);
    const ExperimentConfig b = parse_text(text);
    CHECK(serialize_config(b) == text);
  }
  SUBCASE("non-default values with awkward doubles") {
    const ExperimentConfig a = parse_text(
        "[data]\n"
        "source = path\n"
        "path = /srv/recordings\n"
        "snr = 3.3000000000000003\n"
        "shift = 0.1\n"
        "[federated]\n"
        "lr = 1e-07\n"
        "participation = 0.6666666666666666\n"
        "weight_decay = 2.5e-05\n"
        "[experiment]\n"
        "seeds = 10,20\n"
        "strategies = fedprox,fedbs\n"
        "out = runs/exp 01\n");
    const std::string text = serialize_config(a);
    const ExperimentConfig b = parse_text(text);
    CHECK(serialize_config(b) == text);
    // shortest-round-trip float printing must restore the exact bits
    CHECK(b.federated.lr == a.federated.lr);
    CHECK(b.federated.participation == a.federated.participation);
    CHECK(b.federated.weight_decay == a.federated.weight_decay);
    CHECK(b.synthetic.snr == 3.3000000000000003);
    CHECK(b.data_path == "/srv/recordings");
    CHECK(b.out_dir == "runs/exp 01");
    CHECK_FALSE(b.use_synthetic);
    REQUIRE(b.strategies.size() == 2);
    CHECK(b.strategies[0] == Strategy::FedProx);
    CHECK(b.strategies[1] == Strategy::FedBS);
  }
}

TEST_CASE("config: later assignments win within one file") {
  const ExperimentConfig cfg = parse_text(
      "[federated]\nlr = 0.1\n[experiment]\nout = a\n[federated]\nlr = 0.2\n");
  CHECK(cfg.federated.lr == 0.2);
  CHECK(cfg.out_dir == "a");
}
