#pragma once

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "fedbs/data.hpp"
#include "fedbs/nn.hpp"
#include "fedbs/rng.hpp"

namespace fedbs {

/// Training approaches. CT pools everything on one node; the others differ
/// in what the server distributes (BN kept local or not) and in the local
/// optimizer (SAM or plain SGD):
///
///              distribute BN   local optimizer   BN normalization
///   FedAvg          yes             SGD           running stats
///   FedProx         yes        SGD + proximal     running stats
///   FedAvgBN        no              SGD           batch-specific
///   FedAvgSAM       yes             SAM           running stats
///   FedBS           no              SAM           batch-specific
enum class Strategy { CT, FedAvg, FedProx, FedBS, FedAvgBN, FedAvgSAM };

std::string_view strategy_name(Strategy s);
Strategy parse_strategy(std::string_view name);

/// True when clients keep their own BN entries across distribution.
bool strategy_keeps_local_bn(Strategy s);
/// True when local updates use sharpness-aware minimization.
bool strategy_uses_sam(Strategy s);
/// BN normalization mode used for both local training and evaluation.
BnMode strategy_bn_mode(Strategy s);

struct FederatedConfig {
  std::int64_t clients = 1;        // K
  double participation = 0.5;      // P, selection weight in (0, 1]
  std::int64_t batch_size = 32;    // B
  std::int64_t local_epochs = 2;   // E
  std::int64_t rounds = 200;       // N_t (0 degenerates to initialization)
  double lr = 0.005;
  double rho = 0.1;                // SAM radius
  double weight_decay = 0.0001;
  double momentum = 0.9;
  double mu_prox = 1.0;            // FedProx proximal coefficient
  Strategy strategy = Strategy::FedBS;
  std::uint64_t seed = 0;
  std::int64_t test_batch_size = 8;
  BackboneSpec backbone;

  void validate() const;
};

/// One client: its private trials and its local model. Under strategies that
/// keep BN local, the model's BN entries persist across rounds; everything
/// else is overwritten by each distribution.
struct ClientState {
  std::int64_t id = 0;
  TrialSet data;
  std::unique_ptr<Model> model;
};

/// Everything a client sends back: parameters (always including BN), its
/// sample count for weighting, and the mean training loss. Raw trials never
/// cross this boundary.
struct ClientUpload {
  std::int64_t client_id = 0;
  std::int64_t n_k = 0;
  double mean_loss = 0.0;
  ParamSet params;
};

struct RoundRecord {
  std::int64_t round = 0;                 // 1-based
  std::vector<std::int64_t> selected;     // sorted client ids, size m
  std::vector<double> client_losses;      // aligned with selected
  double mean_train_loss = 0.0;           // step-weighted mean over clients
  double test_accuracy = 0.0;
  double wall_time_s = 0.0;
};

struct FederatedResult {
  std::vector<RoundRecord> records;
  ParamSet final_params;     // full parameter set including BN entries
  double final_accuracy = 0.0;
};

/// m = max(floor(P*K), 1).
std::int64_t selection_count(std::int64_t clients, double participation);

/// Uniform subset of {0..K-1} of size m, without replacement, sorted.
std::vector<std::int64_t> select_clients(std::int64_t clients,
                                         double participation, Rng& rng);

/// Sample-count-weighted mean of every entry (BN included). Uploads are
/// combined in client-id order, so the result is independent of list order
/// and of parallel completion order, bit for bit.
ParamSet aggregate(const std::vector<ClientUpload>& uploads);

/// Loads the global parameters into the client's model, keeping the client's
/// BN entries when the strategy localizes BN.
void distribute(const ParamSet& global, ClientState& client,
                Strategy strategy);

/// One local optimization pass: distribute, then E epochs over shuffled
/// batches of size B (last short batch kept), stepping with SAM or SGD per
/// the strategy; FedProx adds (mu/2)*||w - w_global||^2 over trainable
/// parameters. The client's random stream is derived from
/// (seed, client id, round), so scheduling order cannot change results.
ClientUpload client_update(ClientState& client, const ParamSet& global,
                           const FederatedConfig& cfg, std::int64_t round);

/// Builds clients 0..K-1 around the given datasets. Every model starts from
/// the same seeded global initialization the server uses.
std::vector<ClientState> make_clients(std::vector<TrialSet> datasets,
                                      const FederatedConfig& cfg);

/// The server loop: N_t rounds of select -> client updates -> weighted
/// aggregation, evaluating the aggregated model on the test set after every
/// round. Client updates within a round run on worker_threads workers when
/// asked; results are identical either way. Per-round JSON lines go to
/// round_log when provided.
FederatedResult run_federated(const FederatedConfig& cfg,
                              std::vector<ClientState>& clients,
                              const TrialSet& testset,
                              std::ostream* round_log = nullptr,
                              int worker_threads = 1);

/// Centralized baseline: the same local solver applied to the pooled set for
/// N_t blocks of E epochs, RunningStats BN throughout. With a single client
/// and full participation, run_federated(FedAvg) reproduces this bit for
/// bit.
FederatedResult run_centralized(const FederatedConfig& cfg,
                                const TrialSet& pooled,
                                const TrialSet& testset,
                                std::ostream* round_log = nullptr);

/// One JSON object per line: {round, selected, mean_train_loss,
/// test_accuracy, strategy, seed}.
void write_round_jsonl(std::ostream& os, const RoundRecord& rec,
                       Strategy strategy, std::uint64_t seed);

}  // namespace fedbs
