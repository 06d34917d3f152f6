#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "tsdp/graph.hpp"

namespace tsdp {

enum class Placement { TEE, GPU, OBFUSCATED };

enum class Scheme {
  Deep,
  Shallow,
  Magnitude,
  Intermediate,
  NonLinearObf,
  Ennclave,
  TeeSlice,
  NoShield,
  BlackBox,
};

std::string_view to_string(Placement p);
Placement placement_from_string(std::string_view s);
std::string_view to_string(Scheme s);
Scheme scheme_from_string(std::string_view s);

class PlanError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Placement of every node of one graph. For Magnitude plans, a node may be
// TEE while a mask marks which of its weight entries are shielded; the
// unmasked entries run on the GPU.
struct PartitionPlan {
  Scheme scheme = Scheme::NoShield;
  // Scheme parameter (depth, ratio, ...); absent for parameterless schemes.
  std::optional<double> config;
  std::uint64_t seed = 0;
  std::vector<Placement> placements;
  // Magnitude only: node index -> per-entry shield mask over its "weight"
  // (conv/linear) or "gamma" (batchnorm) tensor.
  std::map<std::size_t, std::vector<bool>> weight_masks;
  // Intermediate only: node index -> blinding scalar of an offloaded layer.
  std::map<std::size_t, double> scalars;
  // Free-form notes recorded with the plan (selection rule, warnings).
  std::vector<std::string> notes;

  std::size_t size() const { return placements.size(); }
  Placement at(std::size_t node) const { return placements.at(node); }
  // Fraction of `node`'s weight entries that are shielded: 1 for TEE without
  // a mask, 0 for GPU/OBFUSCATED, mask density otherwise.
  double shielded_fraction(std::size_t node) const;

  // Throws PlanError unless the plan covers g exactly and the optional
  // tables match the scheme.
  void check_against(const ModelGraph& g) const;
};

// Name of the parameter tensor covered by a magnitude mask for this kind, or
// empty for kinds without one.
std::string_view mask_param(LayerKind k);

nlohmann::json plan_to_json(const PartitionPlan& p, const ModelGraph& g);
PartitionPlan plan_from_json(const nlohmann::json& j, const ModelGraph& g);

}  // namespace tsdp
