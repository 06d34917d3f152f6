#pragma once

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "tsdp/attacks.hpp"
#include "tsdp/lab.hpp"
#include "tsdp/plan.hpp"
#include "tsdp/sweetspot.hpp"

// End-to-end experiment driver behind `tsdp run`: validates the config,
// sweeps each scheme over every seed and writes the artifact tree
//   models/ datasets/ plans/ reports/ sweeps/ logs/ cache/
namespace tsdp::experiment {

class ConfigError : public std::invalid_argument {
 public:
  ConfigError(const std::string& what, std::vector<std::string> errors)
      : std::invalid_argument(what), errors_(std::move(errors)) {}
  const std::vector<std::string>& errors() const { return errors_; }

 private:
  std::vector<std::string> errors_;
};

struct SchemeEntry {
  Scheme scheme = Scheme::Deep;
  // Empty: the scheme's default grid for the lab architecture.
  std::vector<double> grid;
};

struct ExperimentConfig {
  std::filesystem::path output_dir;
  std::vector<std::uint64_t> seeds;
  std::size_t workers = 1;
  lab::LabConfig lab;
  std::vector<SchemeEntry> schemes;
  sweetspot::Metric metric = sweetspot::Metric::MsAccuracy;
  double delta = 0.05;
  bool absolute = false;
  attacks::Assumption assumption = attacks::Assumption::BackboneOnly;
};

// The published schema, compiled in from schemas/experiment.schema.json.
const nlohmann::json& experiment_schema();

// Schema check first, then semantic checks. Throws ConfigError listing every
// violation.
ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const ExperimentConfig& c);

struct RunSummary {
  std::size_t cells_computed = 0;
  std::size_t cells_cached = 0;
  std::vector<std::string> failures;
  int exit_code() const { return failures.empty() ? 0 : 1; }
};

// Deterministic per-scheme grid used when a config leaves it empty.
std::vector<double> resolve_grid(const SchemeEntry& e, const lab::LabConfig& cfg);

// Schemes x metrics table of per-(scheme, config) means over seeds. The
// largest value of each row is marked "+", the smallest "-"; rows relative
// to the black-box column follow when it is present.
std::string render_matrix(const std::vector<attacks::AttackReport>& reports);

RunSummary run_experiment(const ExperimentConfig& cfg, std::ostream* progress = nullptr);

}  // namespace tsdp::experiment
