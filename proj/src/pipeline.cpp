#include "fpb/pipeline.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <filesystem>
#include <map>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "fpb/attacks.hpp"
#include "fpb/checkpoint.hpp"
#include "fpb/runio.hpp"

namespace fpb::pipeline {

namespace {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;
using runio::RunPaths;

std::string pad2(std::size_t v) { return (v < 10 ? "0" : "") + std::to_string(v); }

std::string pad6(std::size_t v) {
  std::string s = std::to_string(v);
  while (s.size() < 6) s.insert(s.begin(), '0');
  return s;
}

// --- manifest / timing bookkeeping -------------------------------------------

Json load_or_init(const std::string& path, const char* root_key) {
  if (fs::exists(path)) return Json::parse(runio::read_text(path));
  Json j;
  j["version"] = runio::kRunFormatVersion;
  j[root_key] = Json::object();
  return j;
}

void record_stage(const RunPaths& p, const std::string& stage, bool ok,
                  const std::string& message = "") {
  Json j = load_or_init(p.manifest_file(), "stages");
  Json entry;
  entry["status"] = ok ? "ok" : "failed";
  if (!message.empty()) entry["error"] = message;
  j["stages"][stage] = std::move(entry);
  runio::write_text(p.manifest_file(), j.dump(2) + "\n");
}

void record_timing(const RunPaths& p, const std::string& key, double seconds) {
  Json j = load_or_init(p.timing_file(), "seconds");
  j["seconds"][key] = seconds;
  runio::write_text(p.timing_file(), j.dump(2) + "\n");
}

class StageClock {
 public:
  StageClock() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

// Runs `body` as a named stage: success and failure both land in the
// manifest, the wall time in the timing file, and failures propagate.
template <typename Fn>
void run_stage(const RunPaths& p, const std::string& stage, Fn&& body) {
  StageClock clock;
  try {
    body();
  } catch (const std::exception& e) {
    record_stage(p, stage, false, e.what());
    record_timing(p, stage, clock.seconds());
    throw;
  }
  record_stage(p, stage, true);
  record_timing(p, stage, clock.seconds());
}

// --- train stage ---------------------------------------------------------------

void save_client_checkpoints(const RunPaths& paths, const fed::RunResult& result) {
  const std::string dir = paths.checkpoint_dir();
  runio::save_model(result.global, dir + "/final_global");
  const std::size_t keep = std::min<std::size_t>(result.clients.size(), 2);
  for (std::size_t i = 0; i < keep; ++i) {
    const std::string base = dir + "/final_client" + pad2(i);
    runio::save_model(result.clients[i].model, base);
    if (!result.clients[i].passports.empty()) {
      runio::save_passports(result.clients[i].passports, base + "_passports.fpbc");
    }
  }
}

}  // namespace

fed::RunResult run_train(const config::ExperimentConfig& cfg) {
  const RunPaths paths{cfg.output_dir};
  runio::ensure_layout(paths);

  fed::RunResult result;
  run_stage(paths, "train", [&] {
    runio::write_text(paths.config_file(), config::serialize_config(cfg));

    const nn::ModelSpec spec = config::build_model_spec(cfg);
    protect::validate(cfg.protection, spec);
    const config::DatasetPair data = config::load_datasets(cfg);

    fed::FederatedSetup setup;
    setup.spec = spec;
    setup.prot = cfg.protection;
    setup.fed = cfg.fed;
    setup.seed = cfg.seed;
    setup.observe_boundary = cfg.observe.boundary_layers;

    // Zero-round replay pins down the seeded initialization and the shard
    // assignment so the init checkpoint and the victim target exist even
    // before (or without) any training.
    fed::FederatedSetup init_setup = setup;
    init_setup.fed.rounds = 0;
    const fed::RunResult at_init = fed::run_federated(init_setup, data.train, data.test);
    runio::save_model(at_init.clients.front().model, paths.checkpoint_dir() + "/init_global");

    const std::size_t victim = at_init.clients.front().shard.front();
    {
      std::map<std::string, Tensor> target;
      target["original"] = data.train.sample(victim);
      target["label"] = Tensor::scalar(static_cast<double>(data.train.labels.at(victim)));
      io::save_tensors(paths.victim_target_file(), target);
    }

    std::set<std::size_t> retain(cfg.observe.retain_rounds.begin(),
                                 cfg.observe.retain_rounds.end());
    if (retain.empty() && cfg.fed.rounds > 0) retain.insert(cfg.fed.rounds - 1);

    runio::write_text(paths.round_log_file(), "");  // fresh log for this run

    const fed::RoundHook hook = [&](const fed::RoundLog& log,
                                    const std::vector<fed::ClientState>& clients,
                                    const nn::Model& /*global*/,
                                    const std::vector<protect::Observation>& observations) {
      runio::append_line(paths.round_log_file(), runio::round_log_to_json(log));

      const std::size_t round = static_cast<std::size_t>(log.round);

      // Private-segment snapshot of every client, for the assumption series
      // and post-hoc inspection. Local state, so private keys are fine here.
      std::map<std::string, Tensor> private_snap;
      for (std::size_t i = 0; i < clients.size(); ++i) {
        nn::SplitParams sp = nn::split_params(clients[i].model);
        for (auto& [k, v] : sp.private_params) {
          private_snap["client" + pad2(i) + "/" + k] = std::move(v);
        }
      }
      if (!private_snap.empty()) {
        io::save_tensors(paths.checkpoint_dir() + "/round_" + pad6(round) + "_private.fpbc",
                         private_snap);
      }

      if (retain.count(round)) {
        for (std::size_t i = 0; i < observations.size(); ++i) {
          runio::save_observation(observations[i], paths.observation_base(round, i));
        }
      }
    };

    result = fed::run_federated(setup, data.train, data.test, hook);
    save_client_checkpoints(paths, result);

    // Plot-ready series.
    {
      std::vector<std::vector<double>> acc, assumptions;
      for (const fed::RoundLog& log : result.rounds) {
        double mean_loss = 0.0;
        for (double l : log.client_loss) mean_loss += l;
        if (!log.client_loss.empty()) mean_loss /= static_cast<double>(log.client_loss.size());
        acc.push_back({static_cast<double>(log.round), log.lr, mean_loss, log.test_acc});
        assumptions.push_back({static_cast<double>(log.round), log.private_weight_distance,
                               log.mean_scale_norm, log.mean_effective_rank});
      }
      runio::write_csv(paths.series_dir() + "/accuracy.csv",
                       {"round", "lr", "mean_loss", "test_acc"}, acc);
      runio::write_csv(paths.series_dir() + "/assumptions.csv",
                       {"round", "weight_distance", "scale_norm", "effective_rank"},
                       assumptions);
    }
  });
  return result;
}

// --- attack stage ----------------------------------------------------------------

namespace {

protect::Observation load_victim_observation(const RunPaths& paths) {
  const auto bases = runio::list_observation_bases(paths.observation_dir());
  std::string best;
  for (const auto& base : bases) {
    const std::string tail = "_client_00";
    if (base.size() >= tail.size() && base.compare(base.size() - tail.size(), tail.size(), tail) == 0) {
      best = base;  // sorted ascending: the last hit is the latest round
    }
  }
  if (best.empty()) {
    throw std::runtime_error("no stored observation for the victim client; run training first");
  }
  return runio::load_observation(best);
}

// The inversion front segment: the colluding client's own trained prefix
// under a split (its passports included), otherwise a surrogate assembled
// from the exposed parameters.
struct MiaFront {
  nn::Model segment;
  nn::PassportMap passports;
};

MiaFront mia_front(const RunPaths& paths, const config::ExperimentConfig& cfg,
                   const protect::Observation& obs, Rng rng) {
  MiaFront front;
  if (cfg.protection.split()) {
    const std::string base = paths.checkpoint_dir() + "/final_client01";
    const nn::Model colluder = runio::load_model(base);
    front.segment = attacks::prefix_model(colluder, obs.boundary_layers);
    if (cfg.protection.passport()) {
      front.passports = runio::load_passports(base + "_passports.fpbc");
    }
  } else {
    attacks::SurrogateModel s = attacks::surrogate_from_observation(
        obs, rng.child("surrogate"), cfg.protection.passport_init_scale);
    front.segment = attacks::prefix_model(s.model, obs.boundary_layers);
    front.passports = std::move(s.passports);
  }
  return front;
}

// Closed-form restoration pieces for a [conv|linear] -> [scale]? -> [act]?
// prefix, taken from the attacker-side model `src`.
attacks::AttackOutcome pinv_attack(const nn::Model& src, const nn::PassportMap& passports,
                                   const protect::Observation& obs) {
  if (!obs.boundary_output.has_value()) {
    throw std::runtime_error("closed-form restoration needs a recorded boundary activation");
  }
  const std::size_t boundary = obs.boundary_layers;
  if (boundary == 0 || boundary > src.spec.layers.size()) {
    throw std::runtime_error("closed-form restoration: bad boundary layer count");
  }
  const nn::LayerSpec& head = src.spec.layers.front();
  if (head.kind != nn::LayerKind::Conv && head.kind != nn::LayerKind::Linear) {
    throw std::runtime_error("closed-form restoration: prefix must start with conv or linear");
  }

  // Scan the rest of the prefix: at most one modulation layer and one
  // activation; anything else (pooling, a second conv) has no closed form.
  double alpha = 1.0;
  Tensor gamma, beta;
  for (std::size_t i = 1; i < boundary; ++i) {
    const nn::LayerSpec& l = src.spec.layers[i];
    if (l.kind == nn::LayerKind::Activation) {
      alpha = l.alpha;
    } else if (l.kind == nn::LayerKind::ScaleBias) {
      gamma = src.params.at("L" + std::to_string(i) + ".gamma");
      beta = src.params.at("L" + std::to_string(i) + ".beta");
    } else if (l.kind == nn::LayerKind::Passport) {
      const nn::DerivedScaleShift d = nn::passport_layer_params(src, i, passports.at(i));
      gamma = d.gamma;
      beta = d.beta;
    } else {
      throw std::runtime_error("closed-form restoration: unsupported layer inside the prefix");
    }
  }

  const Tensor& bias = src.params.at("L0.b");
  Tensor w2d;
  std::size_t channels = 0;
  if (head.kind == nn::LayerKind::Conv) {
    w2d = nn::conv_unrolled_matrix(src, 0);
    channels = head.out_ch;
  } else {
    w2d = src.params.at("L0.w");
    channels = head.out;
  }
  const std::size_t rows = w2d.rows();
  const std::size_t positions = rows / channels;  // 1 for linear

  Tensor d_gamma({rows}), shift({rows});
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t c = r / positions;
    const double g = gamma.size() > 0 ? gamma[c] : 1.0;
    const double bt = beta.size() > 0 ? beta[c] : 0.0;
    d_gamma[r] = g;
    shift[r] = g * bias[c] + bt;
  }

  const Tensor leaked = obs.boundary_output->reshaped({obs.boundary_output->size()});
  if (leaked.size() != rows) {
    throw std::runtime_error("closed-form restoration: leaked activation does not match the map");
  }
  const Tensor flat = attacks::pinv_surrogate_restore(w2d, shift, d_gamma, leaked, alpha);

  Shape out_shape{1};
  for (std::size_t d : src.spec.input_shape) out_shape.push_back(d);

  attacks::AttackOutcome outcome;
  outcome.restored.push_back(flat.reshaped(out_shape));
  outcome.traces.push_back({});
  outcome.final_objective.push_back(0.0);
  outcome.target_ref = obs.target_ref;
  return outcome;
}

void save_outcome(const RunPaths& paths, const std::string& kind,
                  const attacks::AttackOutcome& outcome) {
  const std::string dir = paths.attack_dir(kind);
  fs::create_directories(dir);

  std::map<std::string, Tensor> restored;
  for (std::size_t r = 0; r < outcome.restored.size(); ++r) {
    restored["restart/" + pad2(r)] = outcome.restored[r];
  }
  io::save_tensors(dir + "/restored.fpbc", restored);

  runio::write_text(dir + "/traces.jsonl", "");
  for (std::size_t r = 0; r < outcome.traces.size(); ++r) {
    Json line;
    line["restart"] = r;
    line["objective"] = outcome.traces[r];
    if (r < outcome.trace_accepted.size()) {
      line["accepted"] = outcome.trace_accepted[r];
    }
    runio::append_line(dir + "/traces.jsonl", line.dump());
  }

  Json meta;
  meta["version"] = runio::kRunFormatVersion;
  meta["kind"] = kind;
  meta["target_ref"] = outcome.target_ref;
  meta["restarts"] = outcome.restored.size();
  meta["nan_restarts"] = outcome.nan_restarts;
  meta["final_objective"] = outcome.final_objective;
  runio::write_text(dir + "/outcome.json", meta.dump(2) + "\n");
}

}  // namespace

std::vector<std::string> run_attacks(const std::string& run_dir, const std::string& kind) {
  const RunPaths paths{run_dir};
  const config::ExperimentConfig cfg = config::load_config(paths.config_file());

  std::vector<attacks::AttackConfig> selected;
  std::set<std::string> seen;
  for (const attacks::AttackConfig& a : cfg.attack_list) {
    const std::string name = attacks::attack_kind_to_string(a.kind);
    if (!kind.empty() && name != kind) continue;
    if (!seen.insert(name).second) {
      throw std::invalid_argument("config lists attack kind '" + name + "' more than once");
    }
    selected.push_back(a);
  }
  if (selected.empty()) {
    throw std::invalid_argument(kind.empty() ? "config lists no attacks"
                                             : "config has no attack of kind '" + kind + "'");
  }

  const protect::Observation obs = load_victim_observation(paths);

  std::vector<std::string> ran;
  for (const attacks::AttackConfig& acfg : selected) {
    const std::string name = attacks::attack_kind_to_string(acfg.kind);
    run_stage(paths, "attack/" + name, [&] {
      Rng rng = Rng(cfg.seed).child("attack").child(name);
      attacks::AttackOutcome outcome;
      switch (acfg.kind) {
        case attacks::AttackKind::Dlg:
          outcome = attacks::dlg_attack(obs, acfg, rng.child("search"));
          break;
        case attacks::AttackKind::Mia: {
          if (!obs.boundary_output.has_value()) {
            throw std::runtime_error("inversion needs a recorded boundary activation");
          }
          MiaFront front = mia_front(paths, cfg, obs, rng);
          outcome = attacks::mia_attack(front.segment,
                                        front.passports.empty() ? nullptr : &front.passports,
                                        *obs.boundary_output, acfg, rng.child("search"));
          outcome.target_ref = obs.target_ref;
          break;
        }
        case attacks::AttackKind::PinvSurrogate: {
          if (cfg.protection.split()) {
            const std::string base = paths.checkpoint_dir() + "/final_client01";
            const nn::Model colluder = runio::load_model(base);
            nn::PassportMap pp;
            if (cfg.protection.passport()) {
              pp = runio::load_passports(base + "_passports.fpbc");
            }
            outcome = pinv_attack(colluder, pp, obs);
          } else {
            nn::Model exposed;
            exposed.spec = obs.spec;
            exposed.params = obs.params;
            outcome = pinv_attack(exposed, {}, obs);
          }
          break;
        }
      }
      save_outcome(paths, name, outcome);
    });
    ran.push_back(name);
  }
  return ran;
}

// --- metrics stage ------------------------------------------------------------------

std::vector<std::string> run_metrics(const std::string& run_dir) {
  const RunPaths paths{run_dir};
  const config::ExperimentConfig cfg = config::load_config(paths.config_file());

  std::vector<std::string> kinds;
  run_stage(paths, "metrics", [&] {
    const auto targets = io::load_tensors(paths.victim_target_file());
    const Tensor& original = targets.at("original");

    const std::string attacks_root = (fs::path(run_dir) / "attacks").string();
    if (fs::exists(attacks_root)) {
      for (const auto& entry : fs::directory_iterator(attacks_root)) {
        if (entry.is_directory()) kinds.push_back(entry.path().filename().string());
      }
    }
    std::sort(kinds.begin(), kinds.end());
    if (kinds.empty()) throw std::runtime_error("no attack outcomes to score; run attacks first");

    for (const std::string& name : kinds) {
      const std::string dir = paths.attack_dir(name);
      std::vector<Tensor> restored;
      for (auto& [key, t] : io::load_tensors(dir + "/restored.fpbc")) {
        (void)key;
        restored.push_back(std::move(t));
      }
      const Json outcome_meta = Json::parse(runio::read_text(dir + "/outcome.json"));

      const metrics::PrivacyReport report =
          metrics::score_attack(original, restored, cfg.metrics.bins, cfg.metrics.smoothing);

      Json j;
      j["version"] = runio::kRunFormatVersion;
      j["kind"] = name;
      j["target_ref"] = outcome_meta.at("target_ref").get<std::string>();
      j["bins"] = report.bins;
      j["smoothing"] = report.smoothing;
      j["restarts"] = report.restarts;
      {
        Json m;
        m["mean"] = report.mse.summary.mean;
        m["std"] = report.mse.summary.std;
        m["per_restart"] = report.mse.per_restart;
        j["bp_mse"] = std::move(m);
      }
      {
        Json k;
        k["mean"] = report.ki.summary.mean;
        k["std"] = report.ki.summary.std;
        k["per_restart"] = report.ki.per_restart;
        j["bp_ki"] = std::move(k);
      }
      runio::write_text(paths.report_file(name), j.dump(2) + "\n");
    }
  });
  return kinds;
}

StoredReport load_privacy_report(const std::string& path) {
  const Json j = Json::parse(runio::read_text(path));
  StoredReport out;
  out.kind = j.at("kind").get<std::string>();
  out.target_ref = j.at("target_ref").get<std::string>();
  out.report.bins = j.at("bins").get<std::size_t>();
  out.report.smoothing = j.at("smoothing").get<double>();
  out.report.restarts = j.at("restarts").get<std::size_t>();
  out.report.mse.summary.mean = j.at("bp_mse").at("mean").get<double>();
  out.report.mse.summary.std = j.at("bp_mse").at("std").get<double>();
  out.report.mse.per_restart = j.at("bp_mse").at("per_restart").get<std::vector<double>>();
  out.report.ki.summary.mean = j.at("bp_ki").at("mean").get<double>();
  out.report.ki.summary.std = j.at("bp_ki").at("std").get<double>();
  out.report.ki.per_restart = j.at("bp_ki").at("per_restart").get<std::vector<double>>();
  return out;
}

// --- orchestration --------------------------------------------------------------------

PipelineResult run_pipeline(const config::ExperimentConfig& cfg) {
  PipelineResult res;
  std::string stage = "train";
  try {
    run_train(cfg);
    for (const attacks::AttackConfig& a : cfg.attack_list) {
      const std::string name = attacks::attack_kind_to_string(a.kind);
      stage = "attack/" + name;
      run_attacks(cfg.output_dir, name);
    }
    stage = "metrics";
    if (!cfg.attack_list.empty()) run_metrics(cfg.output_dir);
  } catch (const std::exception& e) {
    res.ok = false;
    res.failed_stage = stage;
    res.message = e.what();
  }
  return res;
}

// --- wire-discipline audit ----------------------------------------------------------

AuditResult audit_observations(const std::string& run_dir) {
  const RunPaths paths{run_dir};
  const config::ExperimentConfig cfg = config::load_config(paths.config_file());
  const nn::ModelSpec spec = config::build_model_spec(cfg);
  const std::set<std::string> forbidden = protect::forbidden_keys(spec, cfg.protection);

  const auto passport_like = [](const std::string& key) {
    if (key.size() < 3 || key[0] != 'P') return false;
    std::size_t i = 1;
    while (i < key.size() && std::isdigit(static_cast<unsigned char>(key[i]))) ++i;
    return i > 1 && i < key.size() && key[i] == '.';
  };

  AuditResult res;
  for (const std::string& base : runio::list_observation_bases(paths.observation_dir())) {
    ++res.files;
    for (const auto& [key, tensor] : io::load_tensors(base + ".fpbc")) {
      (void)tensor;
      if (key == "boundary") continue;
      std::string inner;
      if (key.rfind("p/", 0) == 0 || key.rfind("g/", 0) == 0) {
        inner = key.substr(2);
      } else {
        res.violations.push_back(base + ": unexpected wire key '" + key + "'");
        continue;
      }
      if (forbidden.count(inner)) {
        res.violations.push_back(base + ": private-segment key on the wire: '" + inner + "'");
      } else if (passport_like(inner)) {
        res.violations.push_back(base + ": passport material on the wire: '" + inner + "'");
      }
    }
  }
  return res;
}

}  // namespace fpb::pipeline
