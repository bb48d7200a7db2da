#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fpb/attacks.hpp"
#include "fpb/data.hpp"
#include "fpb/fed.hpp"
#include "fpb/nn.hpp"
#include "fpb/protect.hpp"

namespace fpb::config {

struct DatasetConfig {
  std::string kind = "synthetic_blobs";  // or "mnist_subset"
  // mnist_subset (IDX file pairs)
  std::string train_images, train_labels, test_images, test_labels;
  std::size_t train_n = 0, test_n = 0;  // 0 = use every record
  // synthetic_blobs
  std::size_t classes = 2, dim = 8, n_per_class = 100;
  double spread = 0.3;
};

struct ModelConfig {
  std::string name = "mlp";  // linear | mlp | lenet | alexnet
  std::size_t input_dim = 8;
  std::size_t hidden = 16;
  std::size_t classes = 10;
  bool scale_layer = false;  // insert a plain scale/shift slot after the first conv/linear
};

struct MetricsConfig {
  std::size_t bins = 100;
  double smoothing = 1e-6;
};

struct ObserveConfig {
  std::size_t boundary_layers = 0;          // 0 = no activation leak recorded
  std::vector<std::size_t> retain_rounds;   // empty = final round only
};

struct ExperimentConfig {
  int version = 1;
  std::uint64_t seed = 1;
  std::string output_dir = "run_out";
  DatasetConfig dataset;
  ModelConfig model;
  fed::FedConfig fed;
  protect::ProtectionConfig protection;
  ObserveConfig observe;
  std::vector<attacks::AttackConfig> attack_list;
  MetricsConfig metrics;
};

// Strict parse: unknown keys anywhere are an error naming the key path;
// "version" must be present and supported. Throws std::invalid_argument.
ExperimentConfig parse_config_text(const std::string& json_text);
ExperimentConfig load_config(const std::string& path);

// Canonical serialization (every field explicit). parse(serialize(c)) is a
// fixed point.
std::string serialize_config(const ExperimentConfig& cfg);

// Model spec implied by the config: architecture from the model section,
// layer visibility and passport slots from the protection section.
nn::ModelSpec build_model_spec(const ExperimentConfig& cfg);

// Materializes the dataset pair (train, test) described by the config.
struct DatasetPair {
  data::Dataset train;
  data::Dataset test;
};
DatasetPair load_datasets(const ExperimentConfig& cfg);

// Model-spec serialization shared by run persistence (observations carry
// their architecture so attacks can be replayed from disk alone).
std::string model_spec_to_json(const nn::ModelSpec& spec);
nn::ModelSpec model_spec_from_json(const std::string& text);

}  // namespace fpb::config
