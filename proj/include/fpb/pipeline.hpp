#pragma once

#include <string>
#include <vector>

#include "fpb/config.hpp"
#include "fpb/fed.hpp"
#include "fpb/metrics.hpp"

namespace fpb::pipeline {

// Training stage: runs the configured federated experiment and persists the
// run directory (config snapshot, round logs, checkpoints, observations at
// the retained rounds, victim target, assumption/accuracy series).
fed::RunResult run_train(const config::ExperimentConfig& cfg);

// Attack stage against a stored run. Empty `kind` runs every attack in the
// stored config; otherwise only the named one ("dlg", "mia",
// "pinv_surrogate"). Returns the kinds executed.
std::vector<std::string> run_attacks(const std::string& run_dir, const std::string& kind = "");

// Metrics stage: scores every stored attack ensemble against the stored
// victim sample and writes one privacy report per attack. Returns the kinds
// scored.
std::vector<std::string> run_metrics(const std::string& run_dir);

// End-to-end orchestration (train -> attacks -> metrics) with per-stage
// bookkeeping in the run manifest. A failing stage is recorded there along
// with its message; artifacts written before the failure are kept.
struct PipelineResult {
  bool ok = true;
  std::string failed_stage;
  std::string message;
};
PipelineResult run_pipeline(const config::ExperimentConfig& cfg);

// Wire-discipline audit: scans every serialized observation in the run for
// private-segment parameters or passport material. `files` counts
// observations scanned; any hit is reported as a human-readable violation.
struct AuditResult {
  std::size_t files = 0;
  std::vector<std::string> violations;
  bool ok() const { return violations.empty(); }
};
AuditResult audit_observations(const std::string& run_dir);

// Reads back a stored privacy report (for cross-run comparisons and tests).
struct StoredReport {
  std::string kind;
  std::string target_ref;
  metrics::PrivacyReport report;
};
StoredReport load_privacy_report(const std::string& path);

}  // namespace fpb::pipeline
