#pragma once

#include <string>
#include <vector>

#include "fpb/nn.hpp"
#include "fpb/protect.hpp"
#include "fpb/rng.hpp"

namespace fpb::attacks {

enum class AttackKind { Dlg, Mia, PinvSurrogate };
AttackKind attack_kind_from_string(const std::string& s);
std::string attack_kind_to_string(AttackKind k);

enum class AttackOptimizer { Lbfgs, Gd };
enum class GradientPath { Graph, FiniteDiff };

struct AttackConfig {
  AttackKind kind = AttackKind::Dlg;
  std::size_t restarts = 10;
  std::size_t iterations = 300;
  double lr = 0.001;    // step size when optimizer == Gd
  double lambda_tv = 0.01;
  AttackOptimizer optimizer = AttackOptimizer::Lbfgs;
  GradientPath gradient_path = GradientPath::Graph;
  bool constrain_labels = true;  // dummy labels parameterized through softmax
  double fd_step = 1e-4;         // central-difference step for FiniteDiff
};

void validate(const AttackConfig& cfg);

struct AttackOutcome {
  std::vector<Tensor> restored;             // one per restart, victim-input shape
  std::vector<std::vector<double>> traces;  // objective at x0 and after every step
  std::vector<std::vector<bool>> trace_accepted;  // per step: monotone-accepted or flagged
  std::vector<double> final_objective;      // per restart (best iterate)
  std::string target_ref;                   // scoring handle, carries no pixel data
  std::size_t nan_restarts = 0;             // fresh-init retries after non-finite aborts
};

// The attacker's working model assembled from an Observation alone: exposed
// parameters fill in what the wire reveals; everything the wire withholds
// (private segment, passports) is freshly initialized — the attacker
// substitutes its own weights for what it cannot see.
struct SurrogateModel {
  nn::Model model;
  nn::PassportMap passports;  // fresh draws; only present for passport specs
};
SurrogateModel surrogate_from_observation(const protect::Observation& obs, Rng rng,
                                          double passport_init_scale = 0.7);

// First `layers` layers as a standalone model (parameters copied, keys kept).
nn::Model prefix_model(const nn::Model& full, std::size_t layers);

// Gradient-matching restoration: optimizes a dummy input (and label) so the
// single-sample gradient through the attacker's model matches the observed
// gradient record, plus a total-variation prior on the input. Uses only the
// Observation; never any victim-private state.
AttackOutcome dlg_attack(const protect::Observation& obs, const AttackConfig& cfg, Rng rng);

// Activation-matching inversion: optimizes an input whose output under the
// attacker's front segment matches the victim's leaked activation.
// `segment` must be a prefix model; `passports` are the attacker's own.
AttackOutcome mia_attack(const nn::Model& segment, const nn::PassportMap* passports,
                         const Tensor& leaked_activation, const AttackConfig& cfg, Rng rng);

// Exact input recovery from a fully-connected layer's loss gradients:
// grad_w = outer(grad_b, input) row-wise, so input = grad_w[i] / grad_b[i]
// for any row with non-negligible |grad_b[i]|.
struct LayerInputReconstruction {
  Tensor input;                    // [n]
  double max_disagreement = 0.0;   // max abs difference across usable rows
  std::size_t row = 0;             // row actually used (largest |grad_b|)
};
LayerInputReconstruction reconstruct_layer_input(const Tensor& grad_w, const Tensor& grad_b,
                                                 double tolerance = 1e-12);

// Closed-form surrogate restoration through one modulated linear map:
// x = pinv(diag(d_gamma) * w) * (act_inverse(o_leaked) - shift), with a
// leaky-relu activation of slope `leaky_alpha`. `shift` is the effective
// additive offset in pre-activation units (bias and modulation shift
// combined by the caller); empty tensors mean zero shift / unit scale.
Tensor pinv_surrogate_restore(const Tensor& w, const Tensor& shift, const Tensor& d_gamma,
                              const Tensor& o_leaked, double leaky_alpha);

}  // namespace fpb::attacks
