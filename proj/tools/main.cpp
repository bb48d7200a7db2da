// Command-line front end: train a federated run, attack it, score the
// leakage, and numerically verify the restoration bounds.
//
// Exit codes: 0 success, 1 usage/config error, 2 stage failure,
//             3 bound-suite violation.

#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "fpb/config.hpp"
#include "fpb/pipeline.hpp"
#include "fpb/runio.hpp"
#include "fpb/theory.hpp"

namespace {

constexpr const char* kVersion = "0.1.0";

int cmd_train(const std::string& config_path) {
  fpb::config::ExperimentConfig cfg;
  try {
    cfg = fpb::config::load_config(config_path);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  try {
    const fpb::fed::RunResult res = fpb::pipeline::run_train(cfg);
    const double final_acc = res.rounds.empty() ? 0.0 : res.rounds.back().test_acc;
    std::printf("trained %zu round(s) into %s (final test accuracy %.4f)\n",
                res.rounds.size(), cfg.output_dir.c_str(), final_acc);
    return 0;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "train stage failed: %s\n", e.what());
    return 2;
  }
}

int cmd_attack(const std::string& run_dir, std::string kind) {
  if (kind == "pinv") kind = "pinv_surrogate";  // CLI shorthand
  if (!kind.empty() && kind != "dlg" && kind != "mia" && kind != "pinv_surrogate") {
    std::fprintf(stderr, "error: unknown attack '%s' (expected dlg, mia, or pinv)\n",
                 kind.c_str());
    return 1;
  }
  try {
    const auto ran = fpb::pipeline::run_attacks(run_dir, kind);
    for (const std::string& name : ran) {
      std::printf("attack %s complete (artifacts under %s/attacks/%s)\n", name.c_str(),
                  run_dir.c_str(), name.c_str());
    }
    return 0;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "attack stage failed: %s\n", e.what());
    return 2;
  }
}

int cmd_metrics(const std::string& run_dir) {
  try {
    const auto kinds = fpb::pipeline::run_metrics(run_dir);
    for (const std::string& name : kinds) {
      const auto report = fpb::pipeline::load_privacy_report(
          fpb::runio::RunPaths{run_dir}.report_file(name));
      std::printf("%s: BP_MSE %.6g +/- %.6g, BP_KI %.6g +/- %.6g (%zu restarts)\n",
                  name.c_str(), report.report.mse.summary.mean, report.report.mse.summary.std,
                  report.report.ki.summary.mean, report.report.ki.summary.std,
                  report.report.restarts);
    }
    return 0;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "metrics stage failed: %s\n", e.what());
    return 2;
  }
}

int cmd_verify_theory(std::size_t trials, std::uint64_t seed, const std::string& report_path) {
  fpb::theory::TheorySuiteResult res;
  try {
    fpb::theory::TheorySuiteConfig cfg;
    cfg.trials = trials;
    cfg.seed = seed;
    res = fpb::theory::run_theory_suite(cfg);

    nlohmann::ordered_json j;
    j["version"] = fpb::runio::kRunFormatVersion;
    j["trials"] = trials;
    j["seed"] = seed;
    j["wedin_constant"] = res.wedin_constant;
    j["case1_constant"] = res.case1_constant;
    j["case1_slope"] = res.case1_slope;
    j["violations"] = res.violations;
    j["pass"] = res.pass;
    nlohmann::ordered_json checks = nlohmann::ordered_json::array();
    for (const fpb::theory::BoundCheck& c : res.checks) {
      nlohmann::ordered_json cj;
      cj["name"] = c.name;
      cj["direction"] = c.direction;
      cj["lhs"] = c.lhs;
      cj["rhs"] = c.rhs;
      cj["constant_estimate"] = c.constant_estimate;
      cj["satisfied"] = c.satisfied;
      cj["note"] = c.note;
      checks.push_back(std::move(cj));
    }
    j["checks"] = std::move(checks);
    fpb::runio::write_text(report_path, j.dump(2) + "\n");
  } catch (const std::exception& e) {
    std::fprintf(stderr, "bound suite failed to run: %s\n", e.what());
    return 2;
  }

  std::printf("checks: %zu, constant-free violations: %zu\n", res.checks.size(),
              res.violations);
  std::printf("fitted constants: pseudo-inverse perturbation %.6g, no-passport case %.6g\n",
              res.wedin_constant, res.case1_constant);
  std::printf("no-passport error scaling slope: %.4f (expected ~1)\n", res.case1_slope);
  std::printf("report written to %s\n", report_path.c_str());
  std::printf("%s\n", res.pass ? "PASS" : "FAIL");
  return res.pass ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated-learning privacy testbed: protected training, restoration "
               "attacks, leakage metrics, and restoration-bound verification"};
  app.set_version_flag("--version", std::string("fpb ") + kVersion);
  app.require_subcommand(1);

  std::string config_path;
  CLI::App* train = app.add_subcommand("train", "Run federated training into the output dir");
  train->add_option("--config", config_path, "experiment config (JSON)")->required();

  std::string attack_run, attack_kind;
  CLI::App* attack = app.add_subcommand("attack", "Attack a stored run's observations");
  attack->add_option("--run", attack_run, "run directory produced by train")->required();
  attack->add_option("--attack", attack_kind, "dlg | mia | pinv (default: all configured)");

  std::string metrics_run;
  CLI::App* metrics = app.add_subcommand("metrics", "Score stored attacks into privacy reports");
  metrics->add_option("--run", metrics_run, "run directory produced by train")->required();

  std::size_t trials = 100;
  std::uint64_t seed = 424242;
  std::string report_path = "theory_report.json";
  CLI::App* verify =
      app.add_subcommand("verify-theory", "Numerically check the restoration bounds");
  verify->add_option("--trials", trials, "Monte-Carlo trials per bound family");
  verify->add_option("--seed", seed, "suite seed");
  verify->add_option("--report", report_path, "where to write the JSON report");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  if (train->parsed()) return cmd_train(config_path);
  if (attack->parsed()) return cmd_attack(attack_run, attack_kind);
  if (metrics->parsed()) return cmd_metrics(metrics_run);
  if (verify->parsed()) return cmd_verify_theory(trials, seed, report_path);
  return 1;
}
