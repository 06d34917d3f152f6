#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tsdp/attacks.hpp"
#include "tsdp/plan.hpp"

// Configuration search: evaluate every grid cell of a scheme and pick the
// cheapest one whose attack accuracy stays within delta of the black-box
// baseline.
namespace tsdp::sweetspot {

enum class Metric { MsAccuracy, Fidelity, Asr, ConfMia, GradMia, GeneralizationGap, ConfidenceGap };
std::string_view to_string(Metric m);
Metric metric_from_string(std::string_view s);
double metric_value(const attacks::AttackReport& r, Metric m);

// Mean of every metric and utility field; metadata from the first report,
// skip reasons merged without duplicates.
attacks::AttackReport average_reports(const std::vector<attacks::AttackReport>& reports);

struct SweepSpec {
  Scheme scheme = Scheme::Deep;
  // Ignored for schemes without a configuration (single point).
  std::vector<double> grid;
  Metric metric = Metric::MsAccuracy;
  double delta = 0.05;
  std::vector<std::uint64_t> seeds{1};
  // Two-sided |Security - black| < delta instead of Security - black < delta.
  bool absolute = false;

  void validate() const;
};

nlohmann::json spec_to_json(const SweepSpec& s);
SweepSpec spec_from_json(const nlohmann::json& j);

struct Cell {
  std::optional<double> config;
  attacks::AttackReport mean;
  std::vector<attacks::AttackReport> per_seed;
};

struct SweepResult {
  Scheme scheme = Scheme::Deep;
  Metric metric = Metric::MsAccuracy;
  double delta = 0.0;
  bool absolute = false;
  std::vector<Cell> cells;  // grid order
  double security_black = 0.0;
  double security_noshield = 0.0;
  std::optional<std::size_t> chosen_index;
  std::optional<double> chosen;
};

bool satisfies(double security, double black, double delta, bool absolute);

// Minimal pct_flops_tee among satisfying cells; ties to the smaller index.
std::optional<std::size_t> choose(const std::vector<Cell>& cells, Metric metric, double black, double delta,
                                  bool absolute);

// Cell reports on disk, one JSON file per key. The directory defaults to
// $TSDP_CACHE_DIR when set.
class CellCache {
 public:
  explicit CellCache(std::filesystem::path dir);
  static std::filesystem::path resolve_dir(const std::filesystem::path& fallback);

  std::optional<attacks::AttackReport> get(const std::string& key) const;
  void put(const std::string& key, const attacks::AttackReport& r) const;
  const std::filesystem::path& dir() const { return dir_; }

 private:
  std::filesystem::path file_for(const std::string& key) const;
  std::filesystem::path dir_;
};

// key: scheme, config, model hash, dataset hash, seed.
std::string cache_key(Scheme s, std::optional<double> config, std::uint64_t model_hash,
                      std::uint64_t dataset_hash, std::uint64_t seed);

using Evaluator = std::function<attacks::AttackReport(Scheme, std::optional<double>, std::uint64_t seed)>;

struct SweepOptions {
  const CellCache* cache = nullptr;
  std::uint64_t model_hash = 0;
  std::uint64_t dataset_hash = 0;
  std::size_t workers = 1;
  // Called once per evaluated or cached cell, from worker threads.
  std::function<void(const std::string& key, bool cached)> on_cell;
};

// Evaluates every (config, seed) of the spec plus the BlackBox and NoShield
// baselines. The result is independent of worker count and completion order.
SweepResult sweep(const SweepSpec& spec, const Evaluator& eval, const SweepOptions& opt = {});

struct FrontierPoint {
  double pct_flops_tee = 0.0;
  double security = 0.0;
  std::vector<std::optional<double>> configs;  // merged cells with equal utility
};

// Cells sorted by strictly increasing utility; equal utilities merged with
// their mean security.
std::vector<FrontierPoint> frontier(const SweepResult& r);
std::string frontier_csv(const SweepResult& r);

nlohmann::json result_to_json(const SweepResult& r);
SweepResult result_from_json(const nlohmann::json& j);

}  // namespace tsdp::sweetspot
