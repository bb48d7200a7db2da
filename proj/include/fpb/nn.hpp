#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fpb/autodiff.hpp"
#include "fpb/rng.hpp"
#include "fpb/tensor.hpp"

namespace fpb::nn {

enum class LayerKind { Linear, Conv, Activation, AvgPool, ScaleBias, Passport };
enum class Visibility { Public, Private };

struct LayerSpec {
  LayerKind kind = LayerKind::Linear;
  Visibility visibility = Visibility::Public;
  // Linear
  std::size_t in = 0, out = 0;
  // Conv (stride 1)
  std::size_t in_ch = 0, out_ch = 0, kh = 0, kw = 0, pad = 0;
  // Activation slope
  double alpha = 0.2;
  // AvgPool window (stride == window)
  std::size_t pool = 2;
  // ScaleBias / Passport channel count
  std::size_t channels = 0;
};

struct ModelSpec {
  std::string name;
  Shape input_shape;  // per-sample shape: [d] or [c,h,w]
  std::size_t classes = 0;
  std::vector<LayerSpec> layers;
};

using ParamMap = std::map<std::string, Tensor>;

struct Model {
  ModelSpec spec;
  ParamMap params;
};

// Per-client secret bundle for a channel-modulation layer. The two passport
// tensors are drawn once and never trained or serialized off the client; the
// autoencoder weights are trainable client-local state.
struct Passport {
  Tensor p_gamma;  // shaped like the modulated layer's input sample
  Tensor p_beta;
  Tensor enc_w, enc_b;  // [h, C], [h]
  Tensor dec_w, dec_b;  // [C, h], [C]
};

using PassportMap = std::map<std::size_t, Passport>;  // layer index -> passport

// --- construction -----------------------------------------------------------

// Registry of desk-scale architectures.
//   "linear":  single fully-connected layer (input_dim -> classes)
//   "mlp":     linear -> [scale] -> act -> linear
//   "lenet":   conv stack for 1x28x28 inputs
//   "alexnet": conv stack for 3x32x32 inputs (config provided, untested at scale)
// `with_scale_layer` inserts a per-channel scale/bias slot after the first
// linear/conv layer; passport_mode turns that slot into a passport layer.
struct ModelOptions {
  std::size_t input_dim = 8;   // linear / mlp
  std::size_t hidden = 16;     // mlp
  std::size_t classes = 10;
  bool with_scale_layer = false;
  bool passport_mode = false;
  std::size_t private_prefix = 0;  // leading layers marked Private
};
ModelSpec make_model_spec(const std::string& name, const ModelOptions& opt);

void validate_spec(const ModelSpec& spec);

// Parameter names are "L<i>.w", "L<i>.b", "L<i>.gamma", "L<i>.beta".
Model init_model(const ModelSpec& spec, Rng rng);

// Samples passports plus autoencoder weights for every passport layer.
// init_scale sets the autoencoder weight magnitude (the derived scales start
// small but non-zero so training can move).
PassportMap init_passports(const ModelSpec& spec, Rng rng, double init_scale = 0.7);

std::size_t autoencoder_hidden(std::size_t channels);  // max(channels/4, 4)

// --- forward ----------------------------------------------------------------

struct ForwardNodes {
  ad::NodeId output = -1;                       // logits [B, classes]
  std::map<std::size_t, ad::NodeId> boundary;   // layer index -> output after that layer
  std::map<std::string, ad::NodeId> derived;    // "L<i>.gamma"/"L<i>.beta" of modulation layers
};

// Maps every trainable tensor to its graph leaf. Passport autoencoder
// parameters are keyed "P<i>.enc_w" etc.; derived scale/shift values are
// reported through `derived` for inspection.
struct ParamNodes {
  std::map<std::string, ad::NodeId> nodes;
  std::map<std::string, ad::NodeId> derived;  // "L<i>.gamma", "L<i>.beta" of passport layers
};

// Builds leaves for all model parameters (and passport autoencoders when
// passports are supplied).
ParamNodes make_param_nodes(ad::Graph& g, const Model& model, const PassportMap* passports);

// Builds the forward graph for a batch x of shape [B, ...input_shape].
// Boundary outputs are canonical per-layer activations (images stay [B,C,H,W]).
ForwardNodes forward_graph(ad::Graph& g, const Model& model, ad::NodeId x,
                           const ParamNodes& params, const PassportMap* passports);

// Evaluation-only forward; returns logits and the boundary map as tensors.
struct ForwardResult {
  Tensor output;
  std::map<std::size_t, Tensor> boundary;
};
ForwardResult forward(const Model& model, const Tensor& x, const PassportMap* passports);

// Derived per-channel scale and shift of a passport layer given the current
// weights of the preceding linear/conv layer: scale = Avg(D(E(W ? P))).
struct DerivedScaleShift {
  Tensor gamma, beta;  // [channels]
};
DerivedScaleShift passport_layer_params(const Model& model, std::size_t layer_index,
                                        const Passport& pp);

// --- losses -----------------------------------------------------------------

// Mean cross-entropy with a row-stabilized log-softmax. `target` must be a
// [B, classes] node (one-hot or soft).
ad::NodeId cross_entropy(ad::Graph& g, ad::NodeId logits, ad::NodeId target);

// One-hot encoding; throws on out-of-range labels.
Tensor one_hot(const std::vector<int>& labels, std::size_t classes);

// Softmax over rows (stabilized), differentiable.
ad::NodeId softmax(ad::Graph& g, ad::NodeId logits);

// Anisotropic total variation of a [B,C,H,W] (or [B,D], treated as [B,1,1,D])
// node, averaged over the batch.
ad::NodeId total_variation(ad::Graph& g, ad::NodeId x);

// Penalty tying a passport layer's free scale/shift parameters to the values
// derived from the passports. In derived mode (the default, no free
// parameters) this is identically zero by construction.
ad::NodeId passport_constraint(ad::Graph& g, ad::NodeId free_gamma, ad::NodeId free_beta,
                               ad::NodeId derived_gamma, ad::NodeId derived_beta);

// --- structure --------------------------------------------------------------

struct SplitParams {
  ParamMap public_params;
  ParamMap private_params;
};
SplitParams split_params(const Model& model);

// First layer index at or after `boundary` split: layers [0, boundary) are the
// protected prefix. Used by attacks to know where leaked activations live.
std::size_t private_prefix_count(const ModelSpec& spec);

// Conv layer weight viewed as [out_ch, in_ch*kh*kw].
Tensor conv_weight_2d(const Tensor& w, const LayerSpec& layer);

// Explicit matrix of the linear map x -> conv(x) for a single sample, rows
// indexed by (channel, position): [out_ch*oh*ow, in_ch*h*w]. Desk-scale only.
Tensor conv_unrolled_matrix(const Model& model, std::size_t layer_index);

// im2col index table for a conv layer on a batch of B samples, plus the
// table converting the [B*oh*ow, out_ch] matmul result to [B,out_ch,oh,ow].
struct ConvPlan {
  ad::IndexTable cols;     // gather table: [B*oh*ow, K]
  ad::IndexTable to_image; // gather table: [B,C,oh,ow] from matmul output
  std::size_t oh = 0, ow = 0, k = 0;
};
ConvPlan conv_plan(const LayerSpec& layer, std::size_t batch, std::size_t h, std::size_t w);

// Average-pool gather table: [B*C*oh*ow, k*k] from [B,C,H,W].
ad::IndexTable pool_table(std::size_t b, std::size_t c, std::size_t h, std::size_t w,
                          std::size_t k);

}  // namespace fpb::nn
