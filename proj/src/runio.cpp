#include "fpb/runio.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "fpb/checkpoint.hpp"
#include "fpb/config.hpp"

namespace fpb::runio {

namespace {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

std::string join(const std::string& a, const std::string& b) {
  return (fs::path(a) / b).string();
}

std::string pad(std::size_t v, int width) {
  std::string s = std::to_string(v);
  while (static_cast<int>(s.size()) < width) s.insert(s.begin(), '0');
  return s;
}

// Shortest-round-trip rendering shared with the JSON artifacts, so CSV and
// JSON agree byte-for-byte on the same value.
std::string render_double(double v) { return Json(v).dump(); }

}  // namespace

std::string RunPaths::config_file() const { return join(root, "config.json"); }
std::string RunPaths::manifest_file() const { return join(root, "manifest.json"); }
std::string RunPaths::round_log_file() const { return join(root, "round_logs.jsonl"); }
std::string RunPaths::timing_file() const { return join(root, "timing.json"); }
std::string RunPaths::checkpoint_dir() const { return join(root, "checkpoints"); }
std::string RunPaths::observation_dir() const { return join(root, "observations"); }
std::string RunPaths::attack_dir(const std::string& kind) const {
  return join(join(root, "attacks"), kind);
}
std::string RunPaths::report_dir() const { return join(root, "reports"); }
std::string RunPaths::series_dir() const { return join(root, "series"); }
std::string RunPaths::target_dir() const { return join(root, "targets"); }

std::string RunPaths::observation_base(std::size_t round, std::size_t client) const {
  return join(observation_dir(), "round_" + pad(round, 6) + "_client_" + pad(client, 2));
}
std::string RunPaths::victim_target_file() const { return join(target_dir(), "victim.fpbc"); }
std::string RunPaths::report_file(const std::string& kind) const {
  return join(report_dir(), "privacy_" + kind + ".json");
}

void ensure_layout(const RunPaths& p) {
  fs::create_directories(p.root);
  fs::create_directories(p.checkpoint_dir());
  fs::create_directories(p.observation_dir());
  fs::create_directories(join(p.root, "attacks"));
  fs::create_directories(p.report_dir());
  fs::create_directories(p.series_dir());
  fs::create_directories(p.target_dir());
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << text;
  if (!out) throw std::runtime_error("short write to '" + path + "'");
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void append_line(const std::string& path, const std::string& line) {
  std::ofstream out(path, std::ios::binary | std::ios::app);
  if (!out) throw std::runtime_error("cannot append to '" + path + "'");
  out << line << '\n';
  if (!out) throw std::runtime_error("short write to '" + path + "'");
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read '" + path + "'");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

std::string round_log_to_json(const fed::RoundLog& log) {
  Json j;
  j["round"] = log.round;
  j["lr"] = log.lr;
  j["client_loss"] = log.client_loss;
  j["test_acc"] = log.test_acc;
  j["private_weight_distance"] = log.private_weight_distance;
  j["mean_scale_norm"] = log.mean_scale_norm;
  j["mean_effective_rank"] = log.mean_effective_rank;
  return j.dump();
}

fed::RoundLog round_log_from_json(const std::string& line) {
  Json j = Json::parse(line);
  fed::RoundLog log;
  log.round = j.at("round").get<int>();
  log.lr = j.at("lr").get<double>();
  log.client_loss = j.at("client_loss").get<std::vector<double>>();
  log.test_acc = j.at("test_acc").get<double>();
  log.private_weight_distance = j.at("private_weight_distance").get<double>();
  log.mean_scale_norm = j.at("mean_scale_norm").get<double>();
  log.mean_effective_rank = j.at("mean_effective_rank").get<double>();
  return log;
}

std::vector<fed::RoundLog> load_round_logs(const std::string& path) {
  std::vector<fed::RoundLog> logs;
  for (const auto& line : read_lines(path)) logs.push_back(round_log_from_json(line));
  return logs;
}

void save_observation(const protect::Observation& obs, const std::string& base) {
  std::map<std::string, Tensor> tensors;
  for (const auto& [k, v] : obs.params) tensors["p/" + k] = v;
  for (const auto& [k, v] : obs.gradient) tensors["g/" + k] = v;
  if (obs.boundary_output.has_value()) tensors["boundary"] = *obs.boundary_output;
  io::save_tensors(base + ".fpbc", tensors);

  Json meta;
  meta["version"] = kRunFormatVersion;
  meta["round"] = obs.round;
  meta["boundary_layers"] = obs.boundary_layers;
  meta["target_ref"] = obs.target_ref;
  meta["has_boundary"] = obs.boundary_output.has_value();
  meta["spec"] = Json::parse(config::model_spec_to_json(obs.spec));
  write_text(base + ".json", meta.dump(2) + "\n");
}

protect::Observation load_observation(const std::string& base) {
  const Json meta = Json::parse(read_text(base + ".json"));
  if (meta.at("version").get<int>() != kRunFormatVersion) {
    throw std::runtime_error("observation '" + base + "': unsupported format version");
  }
  protect::Observation obs;
  obs.round = meta.at("round").get<int>();
  obs.boundary_layers = meta.at("boundary_layers").get<std::size_t>();
  obs.target_ref = meta.at("target_ref").get<std::string>();
  obs.spec = config::model_spec_from_json(meta.at("spec").dump());

  auto tensors = io::load_tensors(base + ".fpbc");
  for (auto& [k, v] : tensors) {
    if (k.rfind("p/", 0) == 0) {
      obs.params.emplace(k.substr(2), std::move(v));
    } else if (k.rfind("g/", 0) == 0) {
      obs.gradient.emplace(k.substr(2), std::move(v));
    } else if (k == "boundary") {
      obs.boundary_output = std::move(v);
    } else {
      throw std::runtime_error("observation '" + base + "': unexpected tensor key '" + k + "'");
    }
  }
  if (meta.at("has_boundary").get<bool>() != obs.boundary_output.has_value()) {
    throw std::runtime_error("observation '" + base + "': boundary flag disagrees with payload");
  }
  return obs;
}

std::vector<std::string> list_observation_bases(const std::string& dir) {
  std::vector<std::string> bases;
  if (!fs::exists(dir)) return bases;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const fs::path p = entry.path();
    if (p.extension() == ".fpbc") bases.push_back((p.parent_path() / p.stem()).string());
  }
  std::sort(bases.begin(), bases.end());
  return bases;
}

void save_model(const nn::Model& model, const std::string& base) {
  write_text(base + ".json", config::model_spec_to_json(model.spec));
  io::save_tensors(base + ".fpbc", model.params);
}

nn::Model load_model(const std::string& base) {
  nn::Model model;
  model.spec = config::model_spec_from_json(read_text(base + ".json"));
  model.params = io::load_tensors(base + ".fpbc");
  return model;
}

void save_passports(const nn::PassportMap& passports, const std::string& path) {
  std::map<std::string, Tensor> tensors;
  for (const auto& [idx, pp] : passports) {
    const std::string prefix = "P" + std::to_string(idx) + ".";
    tensors[prefix + "p_gamma"] = pp.p_gamma;
    tensors[prefix + "p_beta"] = pp.p_beta;
    tensors[prefix + "enc_w"] = pp.enc_w;
    tensors[prefix + "enc_b"] = pp.enc_b;
    tensors[prefix + "dec_w"] = pp.dec_w;
    tensors[prefix + "dec_b"] = pp.dec_b;
  }
  io::save_tensors(path, tensors);
}

nn::PassportMap load_passports(const std::string& path) {
  nn::PassportMap passports;
  for (auto& [key, v] : io::load_tensors(path)) {
    if (key.empty() || key[0] != 'P') {
      throw std::runtime_error("passport file '" + path + "': bad key '" + key + "'");
    }
    const auto dotpos = key.find('.');
    if (dotpos == std::string::npos || dotpos == 1) {
      throw std::runtime_error("passport file '" + path + "': bad key '" + key + "'");
    }
    const std::size_t idx = std::stoul(key.substr(1, dotpos - 1));
    const std::string field = key.substr(dotpos + 1);
    nn::Passport& pp = passports[idx];
    if (field == "p_gamma") {
      pp.p_gamma = std::move(v);
    } else if (field == "p_beta") {
      pp.p_beta = std::move(v);
    } else if (field == "enc_w") {
      pp.enc_w = std::move(v);
    } else if (field == "enc_b") {
      pp.enc_b = std::move(v);
    } else if (field == "dec_w") {
      pp.dec_w = std::move(v);
    } else if (field == "dec_b") {
      pp.dec_b = std::move(v);
    } else {
      throw std::runtime_error("passport file '" + path + "': bad field '" + field + "'");
    }
  }
  return passports;
}

void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<double>>& rows) {
  std::ostringstream out;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (i) out << ',';
    out << header[i];
  }
  out << '\n';
  for (const auto& row : rows) {
    if (row.size() != header.size()) {
      throw std::invalid_argument("csv row width does not match header");
    }
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) out << ',';
      out << render_double(row[i]);
    }
    out << '\n';
  }
  write_text(path, out.str());
}

}  // namespace fpb::runio
