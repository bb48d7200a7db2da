#pragma once

#include <optional>
#include <set>
#include <string>

#include "fpb/nn.hpp"
#include "fpb/rng.hpp"

namespace fpb::protect {

// Protection mechanisms applied to what a participant shares. Mechanisms
// compose; channel modulation implies a layer split (a modulated layer that
// everyone can read would protect nothing).
enum class Mechanism { None, Randomization, SparsitySplit, SparsityPrune, ModulationPassport };

Mechanism mechanism_from_string(const std::string& s);
std::string mechanism_to_string(Mechanism m);

struct ProtectionConfig {
  std::set<Mechanism> mechanisms{Mechanism::None};
  double sigma = 0.0;             // randomization noise stddev (mean 0)
  double prune_threshold = 0.0;   // |g| below this is dropped
  std::size_t private_layer_count = 0;  // leading layers kept local under a split
  double passport_init_scale = 0.7;

  bool has(Mechanism m) const { return mechanisms.count(m) > 0; }
  bool split() const { return has(Mechanism::SparsitySplit) || has(Mechanism::ModulationPassport); }
  bool passport() const { return has(Mechanism::ModulationPassport); }
};

void validate(const ProtectionConfig& cfg, const nn::ModelSpec& spec);

// Everything an adversary observes about one client in one round. Built
// exclusively from shareable state: under a split, only public-segment
// parameters and gradients appear; passports and autoencoder weights never
// do. The activation at the split boundary models the intermediate-feature
// leak that the inversion threat assumes, and is present in every mode.
struct Observation {
  nn::ModelSpec spec;                     // architecture is common knowledge
  nn::ParamMap params;                    // exposed parameters (noised under randomization)
  nn::ParamMap gradient;                  // exposed single-sample gradient record
  std::optional<Tensor> boundary_output;  // activation after the protected prefix
  std::size_t boundary_layers = 0;        // layer count of the protected prefix
  int round = -1;
  std::string target_ref;                 // opaque scoring handle, carries no pixel data
};

// Adds N(0, sigma^2) to every entry of every tensor; sigma == 0 returns the
// input unchanged without consuming randomness. The input map is not modified.
nn::ParamMap apply_randomization(const nn::ParamMap& update, double sigma, Rng rng);

// Zeroes entries with |g| < threshold.
nn::ParamMap apply_prune(const nn::ParamMap& gradients, double threshold);

// Assembles the adversary's view for one client/round. `gradient_record` is
// the raw recorded gradient keyed like model params; `boundary_output` is the
// victim sample's activation after `boundary_layers` layers (zero-size tensor
// = no activation leak recorded). Under a split, `boundary_layers` must equal
// the private prefix; plain/noised runs may still record the leak so the
// inversion attack has a target there too.
Observation exposed_view(const nn::Model& model, const ProtectionConfig& cfg,
                         const nn::ParamMap& gradient_record, const Tensor& boundary_output,
                         std::size_t boundary_layers, int round, const std::string& target_ref,
                         Rng rng);

// True for private-segment parameter keys ("L<i>.*" with i inside the prefix)
// and all passport keys ("P<i>.*").
bool key_is_private(const std::string& key, std::size_t boundary);

// Keys a split-mode adversary must never see (private-segment params and any
// passport material). Used by the wire-discipline audit.
std::set<std::string> forbidden_keys(const nn::ModelSpec& spec,
                                     const ProtectionConfig& cfg);

}  // namespace fpb::protect
