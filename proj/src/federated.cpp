#include "fedbs/federated.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstring>
#include <mutex>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <thread>
#include <utility>

#include "fedbs/optim.hpp"
#include "fedbs/stats.hpp"
#include "fedbs/tensor.hpp"

namespace fedbs {

namespace {

// Stream tags keep the initialization and selection draws out of the
// per-(client, round) training streams.
constexpr std::uint64_t kStreamInit = 0x696E69742D303031ULL;
constexpr std::uint64_t kStreamSelect = 0x73656C632D303031ULL;

void shuffle_indices(std::vector<std::int64_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::swap(v[i - 1], v[rng.below(i)]);
  }
}

struct Batch {
  Tensor x;
  std::vector<int> labels;
};

Batch gather_batch(const TrialSet& data, const std::vector<std::int64_t>& order,
                   std::int64_t start, std::int64_t count) {
  const std::int64_t len = data.channels * data.samples;
  std::vector<double> buf(static_cast<std::size_t>(count * len));
  std::vector<int> labels(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) {
    const std::int64_t idx = order[static_cast<std::size_t>(start + i)];
    std::memcpy(buf.data() + i * len, data.trial(idx),
                static_cast<std::size_t>(len) * sizeof(double));
    labels[static_cast<std::size_t>(i)] =
        data.labels[static_cast<std::size_t>(idx)];
  }
  return {Tensor::from_vector({count, data.channels, data.samples},
                              std::move(buf)),
          std::move(labels)};
}

// Steps a client contributes per round; weights the round's mean loss.
double step_count(const FederatedConfig& cfg, std::int64_t n_k) {
  const double batches = std::ceil(static_cast<double>(n_k) /
                                   static_cast<double>(cfg.batch_size));
  return static_cast<double>(cfg.local_epochs) * batches;
}

double mean_round_loss(const FederatedConfig& cfg,
                       const std::vector<ClientUpload>& uploads) {
  double weighted = 0.0;
  double total = 0.0;
  for (const ClientUpload& u : uploads) {
    const double steps = step_count(cfg, u.n_k);
    weighted += u.mean_loss * steps;
    total += steps;
  }
  return weighted / total;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

}  // namespace

std::string_view strategy_name(Strategy s) {
  switch (s) {
    case Strategy::CT: return "ct";
    case Strategy::FedAvg: return "fedavg";
    case Strategy::FedProx: return "fedprox";
    case Strategy::FedBS: return "fedbs";
    case Strategy::FedAvgBN: return "fedavg_bn";
    case Strategy::FedAvgSAM: return "fedavg_sam";
  }
  throw std::logic_error("strategy_name: unknown strategy");
}

Strategy parse_strategy(std::string_view name) {
  for (Strategy s : {Strategy::CT, Strategy::FedAvg, Strategy::FedProx,
                     Strategy::FedBS, Strategy::FedAvgBN,
                     Strategy::FedAvgSAM}) {
    if (name == strategy_name(s)) return s;
  }
  throw std::invalid_argument(
      "unknown strategy \"" + std::string(name) +
      "\" (expected ct, fedavg, fedprox, fedbs, fedavg_bn, or fedavg_sam)");
}

bool strategy_keeps_local_bn(Strategy s) {
  return s == Strategy::FedBS || s == Strategy::FedAvgBN;
}

bool strategy_uses_sam(Strategy s) {
  return s == Strategy::FedBS || s == Strategy::FedAvgSAM;
}

BnMode strategy_bn_mode(Strategy s) {
  return strategy_keeps_local_bn(s) ? BnMode::BatchSpecific
                                    : BnMode::RunningStats;
}

void FederatedConfig::validate() const {
  if (clients < 1) {
    throw std::invalid_argument("FederatedConfig: clients must be >= 1");
  }
  if (!(participation > 0.0 && participation <= 1.0)) {
    throw std::invalid_argument(
        "FederatedConfig: participation must lie in (0, 1]");
  }
  if (batch_size < 1) {
    throw std::invalid_argument("FederatedConfig: batch_size must be >= 1");
  }
  if (local_epochs < 1) {
    throw std::invalid_argument("FederatedConfig: local_epochs must be >= 1");
  }
  if (rounds < 0) {
    throw std::invalid_argument("FederatedConfig: rounds must be >= 0");
  }
  if (!(lr > 0.0)) {
    throw std::invalid_argument("FederatedConfig: lr must be positive");
  }
  if (!(rho >= 0.0)) {
    throw std::invalid_argument("FederatedConfig: rho must be >= 0");
  }
  if (!(weight_decay >= 0.0)) {
    throw std::invalid_argument("FederatedConfig: weight_decay must be >= 0");
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) {
    throw std::invalid_argument(
        "FederatedConfig: momentum must lie in [0, 1)");
  }
  if (!(mu_prox >= 0.0)) {
    throw std::invalid_argument("FederatedConfig: mu_prox must be >= 0");
  }
  if (test_batch_size < 1) {
    throw std::invalid_argument(
        "FederatedConfig: test_batch_size must be >= 1");
  }
}

std::int64_t selection_count(std::int64_t clients, double participation) {
  if (clients < 1) {
    throw std::invalid_argument("selection_count: need at least one client");
  }
  if (!(participation > 0.0 && participation <= 1.0)) {
    throw std::invalid_argument(
        "selection_count: participation must lie in (0, 1]");
  }
  const auto m = static_cast<std::int64_t>(
      std::floor(participation * static_cast<double>(clients)));
  return std::max<std::int64_t>(m, 1);
}

std::vector<std::int64_t> select_clients(std::int64_t clients,
                                         double participation, Rng& rng) {
  const std::int64_t m = selection_count(clients, participation);
  std::vector<std::int64_t> ids(static_cast<std::size_t>(clients));
  std::iota(ids.begin(), ids.end(), std::int64_t{0});
  // Partial Fisher-Yates: after m swaps the prefix is a uniform subset.
  for (std::int64_t i = 0; i < m; ++i) {
    const std::int64_t j =
        i + static_cast<std::int64_t>(
                rng.below(static_cast<std::uint64_t>(clients - i)));
    std::swap(ids[static_cast<std::size_t>(i)],
              ids[static_cast<std::size_t>(j)]);
  }
  ids.resize(static_cast<std::size_t>(m));
  std::sort(ids.begin(), ids.end());
  return ids;
}

ParamSet aggregate(const std::vector<ClientUpload>& uploads) {
  if (uploads.empty()) {
    throw std::invalid_argument("aggregate: no uploads");
  }
  // Canonical client-id order makes the floating-point sum independent of
  // list order and of parallel completion order.
  std::vector<const ClientUpload*> ordered;
  ordered.reserve(uploads.size());
  for (const ClientUpload& u : uploads) ordered.push_back(&u);
  std::sort(ordered.begin(), ordered.end(),
            [](const ClientUpload* a, const ClientUpload* b) {
              return a->client_id < b->client_id;
            });
  for (std::size_t i = 1; i < ordered.size(); ++i) {
    if (ordered[i]->client_id == ordered[i - 1]->client_id) {
      throw std::invalid_argument("aggregate: duplicate client id " +
                                  std::to_string(ordered[i]->client_id));
    }
  }

  std::int64_t total = 0;
  for (const ClientUpload* u : ordered) {
    if (u->n_k < 0) {
      throw std::invalid_argument("aggregate: negative sample count");
    }
    total += u->n_k;
  }
  if (total <= 0) {
    throw std::invalid_argument("aggregate: total sample count is zero");
  }

  const ParamSet& proto = ordered.front()->params;
  ParamSet out;
  out.entries.reserve(proto.entries.size());
  for (const ParamSetEntry& e : proto.entries) {
    out.entries.push_back({e.name, e.is_bn, Tensor::zeros(e.value.shape())});
  }
  for (const ClientUpload* u : ordered) {
    if (u->params.entries.size() != proto.entries.size()) {
      throw std::invalid_argument(
          "aggregate: parameter sets have different entry counts");
    }
    const double w =
        static_cast<double>(u->n_k) / static_cast<double>(total);
    for (std::size_t i = 0; i < proto.entries.size(); ++i) {
      const ParamSetEntry& src = u->params.entries[i];
      ParamSetEntry& dst = out.entries[i];
      if (src.name != dst.name || src.is_bn != dst.is_bn ||
          src.value.shape() != dst.value.shape()) {
        throw std::invalid_argument("aggregate: parameter sets differ at \"" +
                                    dst.name + "\"");
      }
      const std::vector<double>& sv = src.value.data();
      std::vector<double>& dv = dst.value.data();
      for (std::size_t j = 0; j < dv.size(); ++j) dv[j] += w * sv[j];
    }
  }
  return out;
}

void distribute(const ParamSet& global, ClientState& client,
                Strategy strategy) {
  if (!client.model) {
    throw std::invalid_argument("distribute: client has no model");
  }
  client.model->load_params(global, !strategy_keeps_local_bn(strategy));
}

ClientUpload client_update(ClientState& client, const ParamSet& global,
                           const FederatedConfig& cfg, std::int64_t round) {
  cfg.validate();
  if (!client.model) {
    throw std::invalid_argument("client_update: client has no model");
  }
  client.data.validate();

  Model& model = *client.model;
  distribute(global, client, cfg.strategy);
  model.set_bn_mode(strategy_bn_mode(cfg.strategy));

  const bool use_sam = strategy_uses_sam(cfg.strategy);
  const bool use_prox =
      cfg.strategy == Strategy::FedProx && cfg.mu_prox > 0.0;

  // Proximal anchors: constant negated copies of the freshly distributed
  // trainable values, so (mu/2)*||w - w_global||^2 assembles on the tape as
  // scale(sum(square(add(w, -anchor))), mu/2).
  std::vector<std::pair<Tensor, Tensor>> prox;
  if (use_prox) {
    for (const ParamRef& p : model.params()) {
      if (!p.trainable) continue;
      std::vector<double> neg(p.value.data());
      for (double& v : neg) v = -v;
      prox.emplace_back(
          p.value, Tensor::from_vector(p.value.shape(), std::move(neg)));
    }
  }

  SgdState sgd;
  sgd.lr = cfg.lr;
  sgd.momentum = cfg.momentum;
  sgd.weight_decay = cfg.weight_decay;
  SamState sam;
  sam.rho = cfg.rho;
  sam.inner = sgd;

  Rng rng(Rng::derive(cfg.seed, static_cast<std::uint64_t>(client.id),
                      static_cast<std::uint64_t>(round)));

  const std::int64_t n = client.data.size();
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), std::int64_t{0});

  Batch batch;
  const LossFn loss_fn = [&](Tape& tape, ForwardContext& ctx) -> Tensor {
    const Tensor logits = model.forward(tape, batch.x, ctx);
    Tensor loss = softmax_cross_entropy(tape, logits, batch.labels);
    for (const auto& [param, neg_anchor] : prox) {
      const Tensor diff = add(tape, param, neg_anchor);
      loss = add(tape, loss,
                 scale(tape, sum_all(tape, square(tape, diff)),
                       cfg.mu_prox / 2.0));
    }
    return loss;
  };

  double total_loss = 0.0;
  std::int64_t steps = 0;
  for (std::int64_t epoch = 0; epoch < cfg.local_epochs; ++epoch) {
    shuffle_indices(order, rng);
    for (std::int64_t start = 0; start < n; start += cfg.batch_size) {
      const std::int64_t b = std::min(cfg.batch_size, n - start);
      batch = gather_batch(client.data, order, start, b);
      double loss_value = 0.0;
      if (use_sam) {
        try {
          loss_value = sam_step(model.params(), loss_fn, sam, rng);
        } catch (const std::runtime_error& e) {
          throw std::runtime_error(std::string(e.what()) + " (client " +
                                   std::to_string(client.id) + ", round " +
                                   std::to_string(round) + ")");
        }
      } else {
        model.zero_grads();
        Tape tape;
        ForwardContext ctx;
        ctx.training = true;
        ctx.rng = &rng;
        const Tensor loss = loss_fn(tape, ctx);
        loss_value = loss.data()[0];
        if (!std::isfinite(loss_value)) {
          throw std::runtime_error(
              "non-finite loss in client update (client " +
              std::to_string(client.id) + ", round " +
              std::to_string(round) + ")");
        }
        tape.backward(loss);
        sgd_step(model.params(), sgd);
      }
      total_loss += loss_value;
      ++steps;
    }
  }

  ClientUpload up;
  up.client_id = client.id;
  up.n_k = n;
  up.mean_loss = total_loss / static_cast<double>(steps);
  up.params = model.extract_params(/*include_bn=*/true);
  return up;
}

std::vector<ClientState> make_clients(std::vector<TrialSet> datasets,
                                      const FederatedConfig& cfg) {
  if (datasets.empty()) {
    throw std::invalid_argument("make_clients: no datasets");
  }
  std::vector<ClientState> out;
  out.reserve(datasets.size());
  for (std::size_t k = 0; k < datasets.size(); ++k) {
    datasets[k].validate();
    ClientState c;
    c.id = static_cast<std::int64_t>(k);
    c.data = std::move(datasets[k]);
    // Every client re-derives the same initialization stream the server
    // uses, so all parties start from one global initialization.
    Rng init(Rng::derive(cfg.seed, kStreamInit, 0));
    c.model = std::make_unique<Model>(cfg.backbone,
                                      strategy_bn_mode(cfg.strategy), init);
    out.push_back(std::move(c));
  }
  return out;
}

FederatedResult run_federated(const FederatedConfig& cfg,
                              std::vector<ClientState>& clients,
                              const TrialSet& testset,
                              std::ostream* round_log, int worker_threads) {
  cfg.validate();
  if (static_cast<std::int64_t>(clients.size()) != cfg.clients) {
    throw std::invalid_argument(
        "run_federated: client list size does not match cfg.clients");
  }
  testset.validate();
  for (const ClientState& c : clients) {
    if (!c.model) {
      throw std::invalid_argument("run_federated: client " +
                                  std::to_string(c.id) + " has no model");
    }
  }

  Rng init_rng(Rng::derive(cfg.seed, kStreamInit, 0));
  Model server(cfg.backbone, strategy_bn_mode(cfg.strategy), init_rng);
  ParamSet global = server.extract_params(/*include_bn=*/true);
  Rng select_rng(Rng::derive(cfg.seed, kStreamSelect, 0));

  FederatedResult result;
  for (std::int64_t t = 1; t <= cfg.rounds; ++t) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::vector<std::int64_t> selected =
        select_clients(cfg.clients, cfg.participation, select_rng);

    std::vector<ClientUpload> uploads(selected.size());
    auto run_one = [&](std::size_t i) {
      uploads[i] = client_update(
          clients[static_cast<std::size_t>(selected[i])], global, cfg, t);
    };
    if (worker_threads <= 1 || selected.size() <= 1) {
      for (std::size_t i = 0; i < selected.size(); ++i) run_one(i);
    } else {
      std::atomic<std::size_t> next{0};
      std::mutex error_mutex;
      std::exception_ptr error;
      auto worker = [&] {
        for (;;) {
          const std::size_t i = next.fetch_add(1);
          if (i >= selected.size()) return;
          try {
            run_one(i);
          } catch (...) {
            const std::lock_guard<std::mutex> lock(error_mutex);
            if (!error) error = std::current_exception();
            return;
          }
        }
      };
      const std::size_t pool_size =
          std::min<std::size_t>(static_cast<std::size_t>(worker_threads),
                                selected.size());
      std::vector<std::thread> pool;
      pool.reserve(pool_size);
      for (std::size_t i = 0; i < pool_size; ++i) pool.emplace_back(worker);
      for (std::thread& th : pool) th.join();
      if (error) std::rethrow_exception(error);
    }

    global = aggregate(uploads);
    server.load_params(global, /*include_bn=*/true);

    RoundRecord rec;
    rec.round = t;
    rec.selected = selected;
    rec.client_losses.reserve(uploads.size());
    for (const ClientUpload& u : uploads) {
      rec.client_losses.push_back(u.mean_loss);
    }
    rec.mean_train_loss = mean_round_loss(cfg, uploads);
    rec.test_accuracy = evaluate(server, testset, strategy_bn_mode(cfg.strategy),
                                 cfg.test_batch_size);
    rec.wall_time_s = seconds_since(t0);
    if (round_log) write_round_jsonl(*round_log, rec, cfg.strategy, cfg.seed);
    result.records.push_back(std::move(rec));
  }

  result.final_accuracy =
      result.records.empty()
          ? evaluate(server, testset, strategy_bn_mode(cfg.strategy),
                     cfg.test_batch_size)
          : result.records.back().test_accuracy;
  result.final_params = std::move(global);
  return result;
}

FederatedResult run_centralized(const FederatedConfig& cfg,
                                const TrialSet& pooled,
                                const TrialSet& testset,
                                std::ostream* round_log) {
  FederatedConfig ct = cfg;
  ct.strategy = Strategy::CT;
  ct.clients = 1;
  ct.participation = 1.0;
  ct.validate();
  testset.validate();

  std::vector<ClientState> solo = make_clients({pooled}, ct);
  ClientState& client = solo.front();
  ParamSet global = client.model->extract_params(/*include_bn=*/true);

  FederatedResult result;
  for (std::int64_t t = 1; t <= ct.rounds; ++t) {
    const auto t0 = std::chrono::steady_clock::now();
    ClientUpload up = client_update(client, global, ct, t);

    RoundRecord rec;
    rec.round = t;
    rec.selected = {0};
    rec.client_losses = {up.mean_loss};
    rec.mean_train_loss = up.mean_loss;
    rec.test_accuracy = evaluate(*client.model, testset,
                                 BnMode::RunningStats, ct.test_batch_size);
    rec.wall_time_s = seconds_since(t0);
    if (round_log) write_round_jsonl(*round_log, rec, ct.strategy, ct.seed);
    result.records.push_back(std::move(rec));

    global = std::move(up.params);
  }

  result.final_accuracy =
      result.records.empty()
          ? evaluate(*client.model, testset, BnMode::RunningStats,
                     ct.test_batch_size)
          : result.records.back().test_accuracy;
  result.final_params = std::move(global);
  return result;
}

void write_round_jsonl(std::ostream& os, const RoundRecord& rec,
                       Strategy strategy, std::uint64_t seed) {
  nlohmann::json j;
  j["round"] = rec.round;
  j["selected"] = rec.selected;
  j["mean_train_loss"] = rec.mean_train_loss;
  j["test_accuracy"] = rec.test_accuracy;
  j["strategy"] = std::string(strategy_name(strategy));
  j["seed"] = seed;
  os << j.dump() << '\n';
}

}  // namespace fedbs
