#include "fpb/config.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace fpb::config {

namespace {

using Json = nlohmann::ordered_json;

[[noreturn]] void fail(const std::string& path, const std::string& what) {
  throw std::invalid_argument("config: " + path + ": " + what);
}

void reject_unknown(const Json& obj, const std::string& path,
                    const std::set<std::string>& allowed) {
  for (const auto& [key, _] : obj.items()) {
    if (!allowed.count(key)) fail(path.empty() ? key : path + "." + key, "unknown key");
  }
}

const Json* get(const Json& obj, const char* key) {
  auto it = obj.find(key);
  return it == obj.end() ? nullptr : &*it;
}

template <typename T>
void read_number(const Json& obj, const std::string& path, const char* key, T& out) {
  if (const Json* v = get(obj, key)) {
    if (!v->is_number()) fail(path + "." + key, "expected a number");
    out = v->get<T>();
  }
}

void read_count(const Json& obj, const std::string& path, const char* key, std::size_t& out) {
  if (const Json* v = get(obj, key)) {
    if (!v->is_number_unsigned()) fail(path + "." + key, "expected a non-negative integer");
    out = v->get<std::size_t>();
  }
}

void read_string(const Json& obj, const std::string& path, const char* key, std::string& out) {
  if (const Json* v = get(obj, key)) {
    if (!v->is_string()) fail(path + "." + key, "expected a string");
    out = v->get<std::string>();
  }
}

void read_bool(const Json& obj, const std::string& path, const char* key, bool& out) {
  if (const Json* v = get(obj, key)) {
    if (!v->is_boolean()) fail(path + "." + key, "expected a boolean");
    out = v->get<bool>();
  }
}

DatasetConfig parse_dataset(const Json& j) {
  reject_unknown(j, "dataset",
                 {"kind", "train_images", "train_labels", "test_images", "test_labels",
                  "train_n", "test_n", "classes", "dim", "n_per_class", "spread"});
  DatasetConfig d;
  read_string(j, "dataset", "kind", d.kind);
  if (d.kind != "mnist_subset" && d.kind != "synthetic_blobs") {
    fail("dataset.kind", "must be 'mnist_subset' or 'synthetic_blobs'");
  }
  read_string(j, "dataset", "train_images", d.train_images);
  read_string(j, "dataset", "train_labels", d.train_labels);
  read_string(j, "dataset", "test_images", d.test_images);
  read_string(j, "dataset", "test_labels", d.test_labels);
  read_count(j, "dataset", "train_n", d.train_n);
  read_count(j, "dataset", "test_n", d.test_n);
  read_count(j, "dataset", "classes", d.classes);
  read_count(j, "dataset", "dim", d.dim);
  read_count(j, "dataset", "n_per_class", d.n_per_class);
  read_number(j, "dataset", "spread", d.spread);
  return d;
}

ModelConfig parse_model(const Json& j) {
  reject_unknown(j, "model", {"name", "input_dim", "hidden", "classes", "scale_layer"});
  ModelConfig m;
  read_string(j, "model", "name", m.name);
  read_count(j, "model", "input_dim", m.input_dim);
  read_count(j, "model", "hidden", m.hidden);
  read_count(j, "model", "classes", m.classes);
  read_bool(j, "model", "scale_layer", m.scale_layer);
  return m;
}

fed::FedConfig parse_fed(const Json& j) {
  reject_unknown(j, "fed",
                 {"clients", "rounds", "local_epochs", "batch_size", "lr", "momentum",
                  "lr_decay"});
  fed::FedConfig f;
  read_count(j, "fed", "clients", f.clients);
  read_count(j, "fed", "rounds", f.rounds);
  read_count(j, "fed", "local_epochs", f.local_epochs);
  read_count(j, "fed", "batch_size", f.batch_size);
  read_number(j, "fed", "lr", f.lr);
  read_number(j, "fed", "momentum", f.momentum);
  read_number(j, "fed", "lr_decay", f.lr_decay);
  return f;
}

protect::ProtectionConfig parse_protection(const Json& j) {
  reject_unknown(j, "protection",
                 {"mechanisms", "sigma", "prune_threshold", "private_layers",
                  "passport_init_scale"});
  protect::ProtectionConfig p;
  if (const Json* v = get(j, "mechanisms")) {
    if (!v->is_array() || v->empty()) fail("protection.mechanisms", "expected a non-empty list");
    p.mechanisms.clear();
    for (const auto& m : *v) {
      if (!m.is_string()) fail("protection.mechanisms", "entries must be strings");
      p.mechanisms.insert(protect::mechanism_from_string(m.get<std::string>()));
    }
  }
  read_number(j, "protection", "sigma", p.sigma);
  read_number(j, "protection", "prune_threshold", p.prune_threshold);
  read_count(j, "protection", "private_layers", p.private_layer_count);
  read_number(j, "protection", "passport_init_scale", p.passport_init_scale);
  return p;
}

ObserveConfig parse_observe(const Json& j) {
  reject_unknown(j, "observe", {"boundary_layers", "retain_rounds"});
  ObserveConfig o;
  read_count(j, "observe", "boundary_layers", o.boundary_layers);
  if (const Json* v = get(j, "retain_rounds")) {
    if (!v->is_array()) fail("observe.retain_rounds", "expected a list of round indices");
    for (const auto& r : *v) {
      if (!r.is_number_unsigned()) fail("observe.retain_rounds", "entries must be round indices");
      o.retain_rounds.push_back(r.get<std::size_t>());
    }
  }
  return o;
}

attacks::AttackConfig parse_attack(const Json& j, const std::string& path) {
  reject_unknown(j, path,
                 {"kind", "restarts", "iterations", "lr", "lambda_tv", "optimizer",
                  "gradient_path", "constrain_labels", "fd_step"});
  attacks::AttackConfig a;
  std::string kind = "dlg", optimizer = "lbfgs", gradient_path = "graph";
  read_string(j, path, "kind", kind);
  a.kind = attacks::attack_kind_from_string(kind);
  read_count(j, path, "restarts", a.restarts);
  read_count(j, path, "iterations", a.iterations);
  read_number(j, path, "lr", a.lr);
  read_number(j, path, "lambda_tv", a.lambda_tv);
  read_string(j, path, "optimizer", optimizer);
  if (optimizer == "lbfgs") {
    a.optimizer = attacks::AttackOptimizer::Lbfgs;
  } else if (optimizer == "gd") {
    a.optimizer = attacks::AttackOptimizer::Gd;
  } else {
    fail(path + ".optimizer", "must be 'lbfgs' or 'gd'");
  }
  read_string(j, path, "gradient_path", gradient_path);
  if (gradient_path == "graph") {
    a.gradient_path = attacks::GradientPath::Graph;
  } else if (gradient_path == "finite_diff") {
    a.gradient_path = attacks::GradientPath::FiniteDiff;
  } else {
    fail(path + ".gradient_path", "must be 'graph' or 'finite_diff'");
  }
  read_bool(j, path, "constrain_labels", a.constrain_labels);
  read_number(j, path, "fd_step", a.fd_step);
  attacks::validate(a);
  return a;
}

MetricsConfig parse_metrics(const Json& j) {
  reject_unknown(j, "metrics", {"bins", "smoothing"});
  MetricsConfig m;
  read_count(j, "metrics", "bins", m.bins);
  read_number(j, "metrics", "smoothing", m.smoothing);
  return m;
}

Json attack_to_json(const attacks::AttackConfig& a) {
  Json j;
  j["kind"] = attacks::attack_kind_to_string(a.kind);
  j["restarts"] = a.restarts;
  j["iterations"] = a.iterations;
  j["lr"] = a.lr;
  j["lambda_tv"] = a.lambda_tv;
  j["optimizer"] = a.optimizer == attacks::AttackOptimizer::Lbfgs ? "lbfgs" : "gd";
  j["gradient_path"] =
      a.gradient_path == attacks::GradientPath::Graph ? "graph" : "finite_diff";
  j["constrain_labels"] = a.constrain_labels;
  j["fd_step"] = a.fd_step;
  return j;
}

}  // namespace

ExperimentConfig parse_config_text(const std::string& json_text) {
  Json j;
  try {
    j = Json::parse(json_text);
  } catch (const std::exception& e) {
    throw std::invalid_argument(std::string("config: invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw std::invalid_argument("config: top level must be an object");
  reject_unknown(j, "",
                 {"version", "seed", "output_dir", "dataset", "model", "fed", "protection",
                  "observe", "attacks", "metrics"});
  const Json* ver = get(j, "version");
  if (!ver) fail("version", "required");
  if (!ver->is_number_integer() || ver->get<int>() != 1) fail("version", "unsupported (expected 1)");

  ExperimentConfig cfg;
  cfg.version = 1;
  read_number(j, "", "seed", cfg.seed);
  read_string(j, "", "output_dir", cfg.output_dir);
  if (const Json* v = get(j, "dataset")) cfg.dataset = parse_dataset(*v);
  if (const Json* v = get(j, "model")) cfg.model = parse_model(*v);
  if (const Json* v = get(j, "fed")) cfg.fed = parse_fed(*v);
  if (const Json* v = get(j, "protection")) cfg.protection = parse_protection(*v);
  if (const Json* v = get(j, "observe")) cfg.observe = parse_observe(*v);
  if (const Json* v = get(j, "attacks")) {
    if (!v->is_array()) fail("attacks", "expected a list");
    for (std::size_t i = 0; i < v->size(); ++i) {
      cfg.attack_list.push_back(parse_attack((*v)[i], "attacks[" + std::to_string(i) + "]"));
    }
  }
  if (const Json* v = get(j, "metrics")) cfg.metrics = parse_metrics(*v);
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("config: cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

std::string serialize_config(const ExperimentConfig& cfg) {
  Json j;
  j["version"] = cfg.version;
  j["seed"] = cfg.seed;
  j["output_dir"] = cfg.output_dir;
  {
    Json d;
    d["kind"] = cfg.dataset.kind;
    d["train_images"] = cfg.dataset.train_images;
    d["train_labels"] = cfg.dataset.train_labels;
    d["test_images"] = cfg.dataset.test_images;
    d["test_labels"] = cfg.dataset.test_labels;
    d["train_n"] = cfg.dataset.train_n;
    d["test_n"] = cfg.dataset.test_n;
    d["classes"] = cfg.dataset.classes;
    d["dim"] = cfg.dataset.dim;
    d["n_per_class"] = cfg.dataset.n_per_class;
    d["spread"] = cfg.dataset.spread;
    j["dataset"] = std::move(d);
  }
  {
    Json m;
    m["name"] = cfg.model.name;
    m["input_dim"] = cfg.model.input_dim;
    m["hidden"] = cfg.model.hidden;
    m["classes"] = cfg.model.classes;
    m["scale_layer"] = cfg.model.scale_layer;
    j["model"] = std::move(m);
  }
  {
    Json f;
    f["clients"] = cfg.fed.clients;
    f["rounds"] = cfg.fed.rounds;
    f["local_epochs"] = cfg.fed.local_epochs;
    f["batch_size"] = cfg.fed.batch_size;
    f["lr"] = cfg.fed.lr;
    f["momentum"] = cfg.fed.momentum;
    f["lr_decay"] = cfg.fed.lr_decay;
    j["fed"] = std::move(f);
  }
  {
    Json p;
    Json mechs = Json::array();
    for (const auto& m : cfg.protection.mechanisms) {
      mechs.push_back(protect::mechanism_to_string(m));
    }
    p["mechanisms"] = std::move(mechs);
    p["sigma"] = cfg.protection.sigma;
    p["prune_threshold"] = cfg.protection.prune_threshold;
    p["private_layers"] = cfg.protection.private_layer_count;
    p["passport_init_scale"] = cfg.protection.passport_init_scale;
    j["protection"] = std::move(p);
  }
  {
    Json o;
    o["boundary_layers"] = cfg.observe.boundary_layers;
    o["retain_rounds"] = cfg.observe.retain_rounds;
    j["observe"] = std::move(o);
  }
  {
    Json list = Json::array();
    for (const auto& a : cfg.attack_list) list.push_back(attack_to_json(a));
    j["attacks"] = std::move(list);
  }
  {
    Json m;
    m["bins"] = cfg.metrics.bins;
    m["smoothing"] = cfg.metrics.smoothing;
    j["metrics"] = std::move(m);
  }
  return j.dump(2) + "\n";
}

nn::ModelSpec build_model_spec(const ExperimentConfig& cfg) {
  nn::ModelOptions opt;
  opt.input_dim = cfg.model.input_dim;
  opt.hidden = cfg.model.hidden;
  opt.classes = cfg.model.classes;
  opt.with_scale_layer = cfg.model.scale_layer;
  opt.passport_mode = cfg.protection.passport();
  opt.private_prefix = cfg.protection.private_layer_count;
  return nn::make_model_spec(cfg.model.name, opt);
}

DatasetPair load_datasets(const ExperimentConfig& cfg) {
  DatasetPair pair;
  if (cfg.dataset.kind == "mnist_subset") {
    pair.train = data::load_mnist_idx(cfg.dataset.train_images, cfg.dataset.train_labels,
                                      cfg.dataset.train_n);
    pair.test = data::load_mnist_idx(cfg.dataset.test_images, cfg.dataset.test_labels,
                                     cfg.dataset.test_n);
    return pair;
  }
  Rng rng(cfg.seed);
  pair.train = data::gen_synthetic_blobs(cfg.dataset.classes, cfg.dataset.dim,
                                         cfg.dataset.n_per_class, cfg.dataset.spread,
                                         rng.child("blobs_train"));
  pair.test = data::gen_synthetic_blobs(cfg.dataset.classes, cfg.dataset.dim,
                                        cfg.dataset.n_per_class, cfg.dataset.spread,
                                        rng.child("blobs_test"));
  return pair;
}

std::string model_spec_to_json(const nn::ModelSpec& spec) {
  Json j;
  j["name"] = spec.name;
  j["input_shape"] = spec.input_shape;
  j["classes"] = spec.classes;
  Json layers = Json::array();
  for (const auto& l : spec.layers) {
    Json lj;
    switch (l.kind) {
      case nn::LayerKind::Linear: lj["kind"] = "linear"; break;
      case nn::LayerKind::Conv: lj["kind"] = "conv"; break;
      case nn::LayerKind::Activation: lj["kind"] = "activation"; break;
      case nn::LayerKind::AvgPool: lj["kind"] = "avg_pool"; break;
      case nn::LayerKind::ScaleBias: lj["kind"] = "scale_bias"; break;
      case nn::LayerKind::Passport: lj["kind"] = "passport"; break;
    }
    lj["visibility"] = l.visibility == nn::Visibility::Private ? "private" : "public";
    lj["in"] = l.in;
    lj["out"] = l.out;
    lj["in_ch"] = l.in_ch;
    lj["out_ch"] = l.out_ch;
    lj["kh"] = l.kh;
    lj["kw"] = l.kw;
    lj["pad"] = l.pad;
    lj["alpha"] = l.alpha;
    lj["pool"] = l.pool;
    lj["channels"] = l.channels;
    layers.push_back(std::move(lj));
  }
  j["layers"] = std::move(layers);
  return j.dump(2) + "\n";
}

nn::ModelSpec model_spec_from_json(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const std::exception& e) {
    throw std::invalid_argument(std::string("model spec: invalid JSON: ") + e.what());
  }
  nn::ModelSpec spec;
  spec.name = j.at("name").get<std::string>();
  spec.input_shape = j.at("input_shape").get<Shape>();
  spec.classes = j.at("classes").get<std::size_t>();
  for (const auto& lj : j.at("layers")) {
    nn::LayerSpec l;
    const std::string kind = lj.at("kind").get<std::string>();
    if (kind == "linear") {
      l.kind = nn::LayerKind::Linear;
    } else if (kind == "conv") {
      l.kind = nn::LayerKind::Conv;
    } else if (kind == "activation") {
      l.kind = nn::LayerKind::Activation;
    } else if (kind == "avg_pool") {
      l.kind = nn::LayerKind::AvgPool;
    } else if (kind == "scale_bias") {
      l.kind = nn::LayerKind::ScaleBias;
    } else if (kind == "passport") {
      l.kind = nn::LayerKind::Passport;
    } else {
      throw std::invalid_argument("model spec: unknown layer kind '" + kind + "'");
    }
    l.visibility = lj.at("visibility").get<std::string>() == "private"
                       ? nn::Visibility::Private
                       : nn::Visibility::Public;
    l.in = lj.at("in").get<std::size_t>();
    l.out = lj.at("out").get<std::size_t>();
    l.in_ch = lj.at("in_ch").get<std::size_t>();
    l.out_ch = lj.at("out_ch").get<std::size_t>();
    l.kh = lj.at("kh").get<std::size_t>();
    l.kw = lj.at("kw").get<std::size_t>();
    l.pad = lj.at("pad").get<std::size_t>();
    l.alpha = lj.at("alpha").get<double>();
    l.pool = lj.at("pool").get<std::size_t>();
    l.channels = lj.at("channels").get<std::size_t>();
    spec.layers.push_back(l);
  }
  return spec;
}

}  // namespace fpb::config
