#include "fpb/fed.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "fpb/autodiff.hpp"
#include "fpb/linalg.hpp"

namespace fpb::fed {

namespace {

// Resolves a gradient key to the tensor it updates: model parameters are
// "L<i>.*", passport autoencoder weights are "P<i>.enc_w" etc.
Tensor* param_slot(nn::ParamMap& params, nn::PassportMap& passports, const std::string& key) {
  if (auto it = params.find(key); it != params.end()) return &it->second;
  if (!key.empty() && key[0] == 'P') {
    const auto dot = key.find('.');
    if (dot != std::string::npos && dot > 1) {
      const std::size_t idx = std::stoul(key.substr(1, dot - 1));
      if (auto pit = passports.find(idx); pit != passports.end()) {
        const std::string field = key.substr(dot + 1);
        nn::Passport& pp = pit->second;
        if (field == "enc_w") return &pp.enc_w;
        if (field == "enc_b") return &pp.enc_b;
        if (field == "dec_w") return &pp.dec_w;
        if (field == "dec_b") return &pp.dec_b;
      }
    }
  }
  return nullptr;
}

struct BatchLoss {
  double loss = 0.0;
  std::map<std::string, Tensor> grads;
};

// One loss-and-gradient evaluation on a batch. `wants_grad` selects which
// parameter keys get gradients (null = all).
BatchLoss batch_loss_grads(const nn::Model& model, const nn::PassportMap* passports,
                           const Tensor& x, const Tensor& y, const KeyFilter& wants_grad) {
  ad::Graph g;
  nn::ParamNodes pn = nn::make_param_nodes(g, model, passports);
  const ad::NodeId xn = g.leaf(x, false, "x");
  nn::ForwardNodes fwd = nn::forward_graph(g, model, xn, pn, passports);
  const ad::NodeId yn = g.leaf(y, false, "y");
  const ad::NodeId loss = nn::cross_entropy(g, fwd.output, yn);

  BatchLoss out;
  out.loss = g.value(loss)[0];
  std::vector<std::string> keys;
  std::vector<ad::NodeId> wrt;
  for (const auto& [k, nid] : pn.nodes) {
    if (wants_grad && !wants_grad(k)) continue;
    keys.push_back(k);
    wrt.push_back(nid);
  }
  std::vector<Tensor> grads = g.grad(loss, wrt);
  for (std::size_t i = 0; i < keys.size(); ++i) out.grads.emplace(keys[i], std::move(grads[i]));
  return out;
}

KeyFilter public_filter(std::size_t boundary) {
  return [boundary](const std::string& k) { return !protect::key_is_private(k, boundary); };
}

KeyFilter private_filter(std::size_t boundary) {
  return [boundary](const std::string& k) { return protect::key_is_private(k, boundary); };
}

}  // namespace

void sgd_step(nn::ParamMap& model_params, nn::PassportMap& passports,
              std::map<std::string, Tensor>& velocity,
              const std::map<std::string, Tensor>& grads, double lr, double momentum,
              const KeyFilter& trainable) {
  for (const auto& [key, grad] : grads) {
    if (trainable && !trainable(key)) continue;
    Tensor* p = param_slot(model_params, passports, key);
    if (p == nullptr) {
      throw std::invalid_argument("sgd_step: gradient for unknown parameter '" + key + "'");
    }
    if (!shape_eq(p->shape(), grad.shape())) {
      throw std::invalid_argument("sgd_step: gradient shape mismatch for '" + key + "'");
    }
    auto [vit, inserted] = velocity.try_emplace(key, Tensor::zeros(grad.shape()));
    Tensor& v = vit->second;
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = momentum * v[i] + grad[i];
      (*p)[i] -= lr * v[i];
    }
  }
}

TrainPhaseStats local_train(ClientState& c, const data::Dataset& train, std::size_t epochs,
                            std::size_t batch_size, double lr, double momentum,
                            const KeyFilter& trainable, Rng rng) {
  if (batch_size == 0) throw std::invalid_argument("local_train: batch size must be positive");
  if (c.shard.empty()) throw std::invalid_argument("local_train: client shard is empty");
  const nn::PassportMap* pp = c.passports.empty() ? nullptr : &c.passports;

  TrainPhaseStats stats;
  double loss_sum = 0.0;
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    std::vector<std::size_t> order = c.shard;
    Rng erng = rng.child("epoch").child(epoch);
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[erng.index(i)]);
    }
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::size_t end = std::min(start + batch_size, order.size());
      const std::vector<std::size_t> idx(order.begin() + start, order.begin() + end);
      const Tensor x = data::gather_batch(train.images, idx);
      std::vector<int> labels;
      labels.reserve(idx.size());
      for (std::size_t j : idx) labels.push_back(train.labels[j]);
      const Tensor y = nn::one_hot(labels, train.classes);

      BatchLoss bl = batch_loss_grads(c.model, pp, x, y, trainable);
      if (!std::isfinite(bl.loss)) {
        std::ostringstream msg;
        msg << "local_train: non-finite loss (epoch " << epoch << ", batch at sample offset "
            << start << ", batch size " << idx.size() << ")";
        throw std::runtime_error(msg.str());
      }
      sgd_step(c.model.params, c.passports, c.velocity, bl.grads, lr, momentum, trainable);
      loss_sum += bl.loss;
      ++stats.batches;
    }
  }
  stats.mean_loss = stats.batches > 0 ? loss_sum / static_cast<double>(stats.batches) : 0.0;
  return stats;
}

nn::ParamMap gradient_record(const ClientState& c, const data::Dataset& train,
                             std::size_t sample_index) {
  if (sample_index >= train.size()) {
    throw std::out_of_range("gradient_record: sample index out of range");
  }
  const nn::PassportMap* pp = c.passports.empty() ? nullptr : &c.passports;
  const Tensor x = train.sample(sample_index);
  const Tensor y = nn::one_hot({train.labels[sample_index]}, train.classes);
  // Model parameters only: autoencoder gradients never leave the client.
  const KeyFilter model_only = [](const std::string& k) { return !k.empty() && k[0] == 'L'; };
  BatchLoss bl = batch_loss_grads(c.model, pp, x, y, model_only);
  return std::move(bl.grads);
}

Tensor boundary_activation(const ClientState& c, const Tensor& sample,
                           std::size_t boundary_layers) {
  if (boundary_layers == 0 || boundary_layers > c.model.spec.layers.size()) {
    throw std::invalid_argument("boundary_activation: layer count out of range");
  }
  const nn::PassportMap* pp = c.passports.empty() ? nullptr : &c.passports;
  nn::ForwardResult fr = nn::forward(c.model, sample, pp);
  auto it = fr.boundary.find(boundary_layers - 1);
  if (it == fr.boundary.end()) {
    throw std::logic_error("boundary_activation: forward pass did not record the layer");
  }
  return it->second;
}

nn::ParamMap fedavg(const std::vector<nn::ParamMap>& updates, const std::vector<double>& weights) {
  if (updates.empty()) throw std::invalid_argument("fedavg: no updates");
  if (weights.size() != updates.size()) {
    throw std::invalid_argument("fedavg: one weight per update required");
  }
  double wsum = 0.0;
  for (double w : weights) {
    if (!(w > 0.0)) throw std::invalid_argument("fedavg: weights must be positive");
    wsum += w;
  }
  for (std::size_t i = 1; i < updates.size(); ++i) {
    if (updates[i].size() != updates[0].size()) {
      throw std::invalid_argument("fedavg: key sets differ across updates");
    }
  }
  nn::ParamMap out;
  for (const auto& [key, ref] : updates[0]) {
    Tensor acc = Tensor::zeros(ref.shape());
    for (std::size_t i = 0; i < updates.size(); ++i) {
      const auto it = updates[i].find(key);
      if (it == updates[i].end()) {
        throw std::invalid_argument("fedavg: key '" + key + "' missing from an update");
      }
      if (!shape_eq(it->second.shape(), ref.shape())) {
        throw std::invalid_argument("fedavg: shape mismatch for key '" + key + "'");
      }
      axpy(weights[i] / wsum, it->second, acc);
    }
    out.emplace(key, std::move(acc));
  }
  return out;
}

double weight_distance(const std::vector<nn::ParamMap>& clients) {
  const std::size_t n = clients.size();
  if (n < 2) throw std::invalid_argument("weight_distance: need at least two clients");
  std::vector<std::vector<double>> flat(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (const auto& [key, t] : clients[i]) {  // sorted key order fixes the layout
      flat[i].insert(flat[i].end(), t.vec().begin(), t.vec().end());
    }
    if (flat[i].size() != flat[0].size()) {
      throw std::invalid_argument("weight_distance: clients have mismatched parameter sizes");
    }
  }
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double d2 = 0.0;
      for (std::size_t k = 0; k < flat[i].size(); ++k) {
        const double d = flat[i][k] - flat[j][k];
        d2 += d * d;
      }
      total += d2;
    }
  }
  return total / static_cast<double>(n * n);
}

double test_accuracy(const nn::Model& model, const nn::PassportMap* passports,
                     const data::Dataset& test, std::size_t eval_batch) {
  if (test.size() == 0) throw std::invalid_argument("test_accuracy: empty dataset");
  if (eval_batch == 0) eval_batch = 1;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < test.size(); start += eval_batch) {
    const std::size_t end = std::min(start + eval_batch, test.size());
    std::vector<std::size_t> idx(end - start);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
    const Tensor x = data::gather_batch(test.images, idx);
    const nn::ForwardResult fr = nn::forward(model, x, passports);
    const Tensor& logits = fr.output;
    for (std::size_t r = 0; r < logits.rows(); ++r) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < logits.cols(); ++c) {
        if (logits.at(r, c) > logits.at(r, best)) best = c;
      }
      if (static_cast<int>(best) == test.labels[start + r]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

namespace {

// Per-round diagnostics over the clients' modulated layer (if any): mean of
// max|scale| and mean effective rank of diag(scale) * W of the layer feeding
// the modulation. Returns {-1, -1} when the model has no modulation layer.
struct ModulationStats {
  double mean_scale_norm = -1.0;
  double mean_effective_rank = -1.0;
};

ModulationStats modulation_stats(const std::vector<ClientState>& clients) {
  const nn::ModelSpec& spec = clients.front().model.spec;
  std::size_t mod_idx = 0;
  bool found = false;
  for (std::size_t i = 1; i < spec.layers.size() && !found; ++i) {
    const nn::LayerKind k = spec.layers[i].kind;
    if ((k == nn::LayerKind::ScaleBias || k == nn::LayerKind::Passport) &&
        (spec.layers[i - 1].kind == nn::LayerKind::Conv ||
         spec.layers[i - 1].kind == nn::LayerKind::Linear)) {
      mod_idx = i;
      found = true;
    }
  }
  if (!found) return {};

  ModulationStats stats;
  double norm_sum = 0.0;
  double rank_sum = 0.0;
  for (const ClientState& c : clients) {
    Tensor gamma;
    if (spec.layers[mod_idx].kind == nn::LayerKind::Passport) {
      const auto pit = c.passports.find(mod_idx);
      if (pit == c.passports.end()) return {};  // passport layer without passports: no stats
      gamma = nn::passport_layer_params(c.model, mod_idx, pit->second).gamma;
    } else {
      gamma = c.model.params.at("L" + std::to_string(mod_idx) + ".gamma");
    }
    norm_sum += max_abs(gamma);  // spectral norm of the diagonal scale matrix

    const std::string wkey = "L" + std::to_string(mod_idx - 1) + ".w";
    Tensor w = c.model.params.at(wkey);  // [out_ch, fan_in]; rows scaled per channel
    for (std::size_t r = 0; r < w.rows(); ++r) {
      for (std::size_t col = 0; col < w.cols(); ++col) w.at(r, col) *= gamma[r];
    }
    rank_sum += static_cast<double>(effective_rank(w, 0.99));
  }
  stats.mean_scale_norm = norm_sum / static_cast<double>(clients.size());
  stats.mean_effective_rank = rank_sum / static_cast<double>(clients.size());
  return stats;
}

}  // namespace

RunResult run_federated(const FederatedSetup& setup, const data::Dataset& train,
                        const data::Dataset& test, const RoundHook& hook) {
  nn::validate_spec(setup.spec);
  protect::validate(setup.prot, setup.spec);
  if (setup.fed.clients == 0) throw std::invalid_argument("run_federated: need >= 1 client");
  if (train.size() < setup.fed.clients) {
    throw std::invalid_argument("run_federated: fewer training samples than clients");
  }
  if (setup.prot.split() && setup.observe_boundary != setup.prot.private_layer_count) {
    throw std::invalid_argument(
        "run_federated: under a split the observed boundary must be the private prefix");
  }

  Rng root(setup.seed);
  nn::Model init = nn::init_model(setup.spec, root.child("init"));
  const auto shards = data::iid_shards(train.size(), setup.fed.clients, root.child("shards"));

  const bool split = setup.prot.split();
  const bool passport = setup.prot.passport();
  const std::size_t boundary = setup.prot.private_layer_count;

  std::vector<ClientState> clients(setup.fed.clients);
  for (std::size_t i = 0; i < clients.size(); ++i) {
    clients[i].model = init;  // every client starts from the same seeded init
    clients[i].shard = shards[i];
    if (passport) {
      clients[i].passports = nn::init_passports(setup.spec, root.child("passports").child(i),
                                                setup.prot.passport_init_scale);
    }
  }

  RunResult res;
  res.global.spec = setup.spec;
  res.global.params = split ? nn::split_params(init).public_params : init.params;

  for (std::size_t round = 0; round < setup.fed.rounds; ++round) {
    const double lr_round = setup.fed.lr * std::pow(setup.fed.lr_decay, static_cast<double>(round));
    RoundLog log;
    log.round = static_cast<int>(round);
    log.lr = lr_round;

    Rng round_rng = root.child("round").child(round);
    std::vector<protect::Observation> observations;
    std::vector<nn::ParamMap> wire_updates;
    observations.reserve(clients.size());
    wire_updates.reserve(clients.size());

    for (std::size_t i = 0; i < clients.size(); ++i) {
      ClientState& c = clients[i];
      Rng crng = round_rng.child("client").child(i);

      // Shared phase: with passports in play the private prefix stays frozen
      // here and trains in the local phase below; otherwise everything moves.
      const KeyFilter phase1 = passport ? public_filter(boundary) : KeyFilter{};
      const TrainPhaseStats st = local_train(c, train, setup.fed.local_epochs,
                                             setup.fed.batch_size, lr_round, setup.fed.momentum,
                                             phase1, crng.child("train"));
      log.client_loss.push_back(st.mean_loss);

      // Wire view for the server and any eavesdropper. Client 0 is the
      // designated victim: its view carries the single-sample gradient
      // record and (when configured) the boundary activation leak.
      nn::ParamMap grec;
      Tensor bout;
      std::string target_ref;
      if (i == 0) {
        const std::size_t victim = c.shard.front();
        grec = gradient_record(c, train, victim);
        if (setup.observe_boundary > 0) {
          bout = boundary_activation(c, train.sample(victim), setup.observe_boundary);
        }
        target_ref = "train/" + std::to_string(victim);
      }
      protect::Observation obs =
          protect::exposed_view(c.model, setup.prot, grec, bout, setup.observe_boundary,
                                static_cast<int>(round), target_ref, crng.child("wire"));
      wire_updates.push_back(obs.params);
      observations.push_back(std::move(obs));
    }

    // Server step: average what crossed the wire, then push it back down.
    const std::vector<double> weights(clients.size(), 1.0);
    nn::ParamMap aggregated = fedavg(wire_updates, weights);
    for (ClientState& c : clients) {
      for (const auto& [k, v] : aggregated) c.model.params.at(k) = v;
    }

    // Local private phase (passport mode): public layers frozen.
    if (passport) {
      for (std::size_t i = 0; i < clients.size(); ++i) {
        Rng crng = round_rng.child("client").child(i);
        local_train(clients[i], train, setup.fed.local_epochs, setup.fed.batch_size, lr_round,
                    setup.fed.momentum, private_filter(boundary), crng.child("private"));
      }
    }

    log.test_acc = test_accuracy(clients[0].model,
                                 clients[0].passports.empty() ? nullptr : &clients[0].passports,
                                 test);

    if (clients.size() >= 2) {
      std::vector<nn::ParamMap> private_maps;
      private_maps.reserve(clients.size());
      for (const ClientState& c : clients) {
        nn::SplitParams sp = nn::split_params(c.model);
        private_maps.push_back(std::move(sp.private_params));
      }
      if (!private_maps.front().empty()) log.private_weight_distance = weight_distance(private_maps);
    }
    const ModulationStats mstats = modulation_stats(clients);
    log.mean_scale_norm = mstats.mean_scale_norm;
    log.mean_effective_rank = mstats.mean_effective_rank;

    res.global.params = std::move(aggregated);
    if (hook) hook(log, clients, res.global, observations);
    res.rounds.push_back(std::move(log));
  }

  res.clients = std::move(clients);
  return res;
}

}  // namespace fpb::fed
