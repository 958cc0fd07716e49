#pragma once

#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedbs/data.hpp"
#include "fedbs/federated.hpp"
#include "fedbs/nn.hpp"

namespace fedbs {

/// Raised for malformed or out-of-range configuration input; the CLI maps it
/// to exit code 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A full experiment: data source, backbone, federated hyperparameters, and
/// the seed/strategy grid. The default strategy list is the ablation matrix
/// (plain FedAvg, BN localization only, SAM only, both).
struct ExperimentConfig {
  bool use_synthetic = true;
  std::string data_path;  // directory of per-subject trial files
  SyntheticSpec synthetic;
  bool apply_ea = true;  // Euclidean alignment before splitting

  BackboneSpec backbone;  // channels/samples/classes are taken from the data

  FederatedConfig federated;  // strategy, seed, and K are set per grid cell

  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4, 5};
  std::vector<Strategy> strategies = {Strategy::FedAvg, Strategy::FedAvgBN,
                                      Strategy::FedAvgSAM, Strategy::FedBS};
  std::string out_dir = "results";

  void validate() const;
};

/// Parses the `[section]` / `key = value` config text. Unknown sections or
/// keys, malformed values, and out-of-range values are rejected with the
/// offending line number. An empty stream yields all defaults.
ExperimentConfig parse_config(std::istream& in);
ExperimentConfig parse_config_file(const std::string& path);

/// Canonical text form; parse_config(serialize_config(c)) reproduces c
/// exactly (doubles are printed shortest-round-trip).
std::string serialize_config(const ExperimentConfig& cfg);

}  // namespace fedbs
