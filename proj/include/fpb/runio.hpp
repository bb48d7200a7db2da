#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "fpb/fed.hpp"
#include "fpb/protect.hpp"

namespace fpb::runio {

// Format version stamped into every JSON artifact a run emits.
inline constexpr int kRunFormatVersion = 1;

// Canonical locations inside one run directory. Everything a run produces
// lives under `root`; nothing is written elsewhere.
struct RunPaths {
  std::string root;

  std::string config_file() const;     // config snapshot (canonical serialization)
  std::string manifest_file() const;   // stage ledger
  std::string round_log_file() const;  // one JSON object per round
  std::string timing_file() const;     // wall-clock per stage, kept out of the logs

  std::string checkpoint_dir() const;
  std::string observation_dir() const;
  std::string attack_dir(const std::string& kind) const;
  std::string report_dir() const;
  std::string series_dir() const;
  std::string target_dir() const;

  // Leaf paths (no extension where a .fpbc/.json pair is written).
  std::string observation_base(std::size_t round, std::size_t client) const;
  std::string victim_target_file() const;
  std::string report_file(const std::string& kind) const;
};

// Creates the directory tree (idempotent).
void ensure_layout(const RunPaths& p);

// --- plain text -------------------------------------------------------------

void write_text(const std::string& path, const std::string& text);
std::string read_text(const std::string& path);
void append_line(const std::string& path, const std::string& line);  // adds '\n'
std::vector<std::string> read_lines(const std::string& path);

// --- round logs ---------------------------------------------------------------

// Canonical single-line JSON for one round (stable key order, shortest
// round-trip doubles) — the byte-reproducibility contract rests on this.
std::string round_log_to_json(const fed::RoundLog& log);
fed::RoundLog round_log_from_json(const std::string& line);
std::vector<fed::RoundLog> load_round_logs(const std::string& path);

// --- observations -------------------------------------------------------------

// Writes base + ".fpbc" (tensors: "p/<key>", "g/<key>", optional "boundary")
// and base + ".json" (architecture, boundary layer count, round, target ref).
void save_observation(const protect::Observation& obs, const std::string& base);
protect::Observation load_observation(const std::string& base);

// Sorted .fpbc basenames (without extension) found in an observation directory.
std::vector<std::string> list_observation_bases(const std::string& dir);

// --- models and passports -------------------------------------------------------

void save_model(const nn::Model& model, const std::string& base);  // .json + .fpbc
nn::Model load_model(const std::string& base);
void save_passports(const nn::PassportMap& passports, const std::string& path);
nn::PassportMap load_passports(const std::string& path);

// --- series CSV -----------------------------------------------------------------

// Header row plus numeric rows; numbers are rendered with shortest
// round-trip formatting so identical runs emit identical bytes.
void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<double>>& rows);

}  // namespace fpb::runio
