#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "fpb/data.hpp"
#include "fpb/nn.hpp"
#include "fpb/protect.hpp"
#include "fpb/rng.hpp"

namespace fpb::fed {

struct FedConfig {
  std::size_t clients = 10;
  std::size_t rounds = 20;
  std::size_t local_epochs = 1;
  std::size_t batch_size = 10;
  double lr = 0.01;
  double momentum = 0.9;
  double lr_decay = 0.99;  // per-round multiplicative decay
};

struct ClientState {
  nn::Model model;
  nn::PassportMap passports;                 // empty unless passport mode
  std::vector<std::size_t> shard;            // indices into the training set
  std::map<std::string, Tensor> velocity;    // momentum buffers, keyed like gradients
};

// Accepts any parameter key; passport autoencoder keys are "P<i>.*".
using KeyFilter = std::function<bool(const std::string&)>;

// In-place SGD-with-momentum update: v <- momentum*v + g; p <- p - lr*v.
// Only keys passing `trainable` move; their buffers update, others stay.
void sgd_step(nn::ParamMap& model_params, nn::PassportMap& passports,
              std::map<std::string, Tensor>& velocity,
              const std::map<std::string, Tensor>& grads, double lr, double momentum,
              const KeyFilter& trainable);

struct TrainPhaseStats {
  double mean_loss = 0.0;
  std::size_t batches = 0;
};

// One local phase: `epochs` passes over the client's shard in a seeded
// shuffle, minimizing mean cross-entropy. Throws if the loss turns
// non-finite, reporting where.
TrainPhaseStats local_train(ClientState& c, const data::Dataset& train, std::size_t epochs,
                            std::size_t batch_size, double lr, double momentum,
                            const KeyFilter& trainable, Rng rng);

// Raw single-sample loss gradient at the client's current parameters; keys
// mirror the model parameter map (passport autoencoder grads are omitted —
// they never leave the client anyway).
nn::ParamMap gradient_record(const ClientState& c, const data::Dataset& train,
                             std::size_t sample_index);

// Activation after the first `boundary_layers` layers for one sample.
Tensor boundary_activation(const ClientState& c, const Tensor& sample,
                           std::size_t boundary_layers);

// Weighted mean of parameter maps. Key sets and shapes must agree; weights
// must be positive and are normalized by their sum.
nn::ParamMap fedavg(const std::vector<nn::ParamMap>& updates, const std::vector<double>& weights);

// Mean pairwise squared distance sum_{i,j} ||p_i - p_j||^2 / N^2 over the
// flattened concatenation (sorted key order) of each client's map.
double weight_distance(const std::vector<nn::ParamMap>& clients);

double test_accuracy(const nn::Model& model, const nn::PassportMap* passports,
                     const data::Dataset& test, std::size_t eval_batch = 200);

struct RoundLog {
  int round = -1;
  double lr = 0.0;
  std::vector<double> client_loss;       // phase-1 mean loss per client
  double test_acc = 0.0;                 // evaluated on the victim client's synced model
  double private_weight_distance = -1.0; // over private-visibility params; -1 if none
  double mean_scale_norm = -1.0;         // mean over clients of max|gamma|; -1 if no modulation layer
  double mean_effective_rank = -1.0;     // of diag(gamma) * W of the modulated layer; -1 if n/a
};

struct FederatedSetup {
  nn::ModelSpec spec;
  protect::ProtectionConfig prot;
  FedConfig fed;
  std::uint64_t seed = 0;
  // Layers whose output is the recorded activation leak on the victim's
  // observation. Must equal the private prefix under a split; 0 disables.
  std::size_t observe_boundary = 0;
};

// Called at the end of each round with the round log, the clients (post
// update), the aggregated share, and the per-client wire observations
// (index 0 carries the victim's gradient record and boundary activation).
using RoundHook = std::function<void(const RoundLog&, const std::vector<ClientState>&,
                                     const nn::Model& global,
                                     const std::vector<protect::Observation>&)>;

struct RunResult {
  std::vector<RoundLog> rounds;
  std::vector<ClientState> clients;
  nn::Model global;  // aggregated share: public keys under a split, all keys otherwise
};

// Full federated run. Every client starts from the same seeded init; each
// round clients train locally, expose their share through the protection
// config, the server averages what it can see, and clients resync. In
// passport mode the shared phase trains public layers only and a second
// local phase trains the private segment with public layers frozen.
RunResult run_federated(const FederatedSetup& setup, const data::Dataset& train,
                        const data::Dataset& test, const RoundHook& hook = {});

}  // namespace fpb::fed
