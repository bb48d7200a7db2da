#include "fpb/protect.hpp"

#include <cmath>
#include <stdexcept>

namespace fpb::protect {

Mechanism mechanism_from_string(const std::string& s) {
  if (s == "none") return Mechanism::None;
  if (s == "randomization") return Mechanism::Randomization;
  if (s == "sparsity_split") return Mechanism::SparsitySplit;
  if (s == "sparsity_prune") return Mechanism::SparsityPrune;
  if (s == "modulation_passport") return Mechanism::ModulationPassport;
  throw std::invalid_argument("protection: unknown mechanism '" + s + "'");
}

std::string mechanism_to_string(Mechanism m) {
  switch (m) {
    case Mechanism::None: return "none";
    case Mechanism::Randomization: return "randomization";
    case Mechanism::SparsitySplit: return "sparsity_split";
    case Mechanism::SparsityPrune: return "sparsity_prune";
    case Mechanism::ModulationPassport: return "modulation_passport";
  }
  return "?";
}

void validate(const ProtectionConfig& cfg, const nn::ModelSpec& spec) {
  if (cfg.mechanisms.empty()) {
    throw std::invalid_argument("protection: mechanism set must not be empty");
  }
  if (cfg.has(Mechanism::None) && cfg.mechanisms.size() > 1) {
    throw std::invalid_argument("protection: 'none' cannot be combined with other mechanisms");
  }
  if (cfg.has(Mechanism::Randomization) && cfg.sigma < 0) {
    throw std::invalid_argument("protection: noise sigma must be non-negative");
  }
  if (cfg.has(Mechanism::SparsityPrune) && cfg.prune_threshold < 0) {
    throw std::invalid_argument("protection: prune threshold must be non-negative");
  }
  if (cfg.split()) {
    if (cfg.private_layer_count == 0) {
      throw std::invalid_argument("protection: split requires a non-empty private prefix");
    }
    if (cfg.private_layer_count >= spec.layers.size()) {
      throw std::invalid_argument(
          "protection: private prefix must leave at least one public layer");
    }
  }
  if (cfg.passport()) {
    bool found = false;
    for (std::size_t i = 0; i < cfg.private_layer_count && i < spec.layers.size(); ++i) {
      if (spec.layers[i].kind == nn::LayerKind::Passport) found = true;
    }
    if (!found) {
      throw std::invalid_argument(
          "protection: passport mode requires a passport layer inside the private prefix");
    }
  }
}

nn::ParamMap apply_randomization(const nn::ParamMap& update, double sigma, Rng rng) {
  if (sigma < 0) throw std::invalid_argument("apply_randomization: sigma must be non-negative");
  if (sigma == 0.0) return update;
  nn::ParamMap out;
  for (const auto& [k, v] : update) {  // std::map order fixes the draw sequence
    Tensor t = v;
    for (std::size_t i = 0; i < t.size(); ++i) t[i] += sigma * rng.normal();
    out.emplace(k, std::move(t));
  }
  return out;
}

nn::ParamMap apply_prune(const nn::ParamMap& gradients, double threshold) {
  if (threshold < 0) throw std::invalid_argument("apply_prune: threshold must be non-negative");
  nn::ParamMap out;
  for (const auto& [k, v] : gradients) {
    Tensor t = v;
    for (std::size_t i = 0; i < t.size(); ++i)
      if (std::fabs(t[i]) < threshold) t[i] = 0.0;
    out.emplace(k, std::move(t));
  }
  return out;
}

bool key_is_private(const std::string& key, std::size_t boundary) {
  if (key.rfind("P", 0) == 0) return true;  // passport bundle keys
  if (key.rfind("L", 0) != 0) return false;
  const std::size_t dotpos = key.find('.');
  const std::size_t idx = std::stoul(key.substr(1, dotpos - 1));
  return idx < boundary;
}

Observation exposed_view(const nn::Model& model, const ProtectionConfig& cfg,
                         const nn::ParamMap& gradient_record, const Tensor& boundary_output,
                         std::size_t boundary_layers, int round, const std::string& target_ref,
                         Rng rng) {
  validate(cfg, model.spec);
  if (cfg.split() && boundary_layers != cfg.private_layer_count) {
    throw std::invalid_argument(
        "exposed_view: under a split the recorded boundary must be the private prefix");
  }
  Observation obs;
  obs.spec = model.spec;
  obs.round = round;
  obs.target_ref = target_ref;
  obs.boundary_layers = boundary_layers;
  if (boundary_output.size() > 0) obs.boundary_output = boundary_output;

  nn::ParamMap params;
  nn::ParamMap grads;
  if (cfg.split()) {
    for (const auto& [k, v] : model.params)
      if (!key_is_private(k, cfg.private_layer_count)) params.emplace(k, v);
    for (const auto& [k, v] : gradient_record)
      if (!key_is_private(k, cfg.private_layer_count)) grads.emplace(k, v);
  } else {
    params = model.params;
    grads = gradient_record;
  }
  if (cfg.has(Mechanism::SparsityPrune)) grads = apply_prune(grads, cfg.prune_threshold);
  if (cfg.has(Mechanism::Randomization)) {
    params = apply_randomization(params, cfg.sigma, rng.child("params"));
    grads = apply_randomization(grads, cfg.sigma, rng.child("grads"));
  }
  obs.params = std::move(params);
  obs.gradient = std::move(grads);
  return obs;
}

std::set<std::string> forbidden_keys(const nn::ModelSpec& spec, const ProtectionConfig& cfg) {
  std::set<std::string> keys;
  if (!cfg.split()) return keys;
  for (std::size_t i = 0; i < cfg.private_layer_count && i < spec.layers.size(); ++i) {
    for (const char* f : {"w", "b", "gamma", "beta"})
      keys.insert("L" + std::to_string(i) + "." + std::string(f));
    for (const char* f : {"enc_w", "enc_b", "dec_w", "dec_b", "p_gamma", "p_beta"})
      keys.insert("P" + std::to_string(i) + "." + std::string(f));
  }
  return keys;
}

}  // namespace fpb::protect
