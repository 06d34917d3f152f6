#include "tsdp/partition.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tsdp/rng.hpp"

namespace tsdp::partition {

std::vector<std::vector<std::size_t>> layer_units(const ModelGraph& g) {
  std::vector<std::vector<std::size_t>> units;
  bool unit_has_weighted = false;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const bool weighted = is_linear_kind(g.node(i).layer.kind);
    if (units.empty() || (weighted && unit_has_weighted)) {
      units.emplace_back();
      unit_has_weighted = false;
    }
    units.back().push_back(i);
    unit_has_weighted = unit_has_weighted || weighted;
  }
  return units;
}

namespace {

PartitionPlan uniform(const ModelGraph& g, Scheme s, Placement p) {
  PartitionPlan plan;
  plan.scheme = s;
  plan.placements.assign(g.size(), p);
  return plan;
}

// Marks the units containing the selected nodes.
PartitionPlan from_node_prefix(const ModelGraph& g, Scheme s, std::size_t n, bool from_end) {
  if (n > g.size()) {
    throw PlanError("depth " + std::to_string(n) + " exceeds layer count " +
                    std::to_string(g.size()));
  }
  PartitionPlan plan = uniform(g, s, Placement::GPU);
  plan.config = static_cast<double>(n);
  std::vector<bool> chosen(g.size(), false);
  for (std::size_t k = 0; k < n; ++k) chosen[from_end ? g.size() - 1 - k : k] = true;
  for (const auto& unit : layer_units(g)) {
    const bool any = std::any_of(unit.begin(), unit.end(), [&](std::size_t i) { return chosen[i]; });
    if (!any) continue;
    for (std::size_t i : unit) plan.placements[i] = Placement::TEE;
  }
  return plan;
}

}  // namespace

PartitionPlan plan_noshield(const ModelGraph& g) { return uniform(g, Scheme::NoShield, Placement::GPU); }

PartitionPlan plan_blackbox(const ModelGraph& g) { return uniform(g, Scheme::BlackBox, Placement::TEE); }

PartitionPlan plan_deep(const ModelGraph& g, std::size_t n_deep) {
  return from_node_prefix(g, Scheme::Deep, n_deep, true);
}

PartitionPlan plan_shallow(const ModelGraph& g, std::size_t n_shallow) {
  return from_node_prefix(g, Scheme::Shallow, n_shallow, false);
}

PartitionPlan plan_magnitude(const ModelGraph& g, double mag_ratio) {
  if (!(mag_ratio >= 0.0 && mag_ratio <= 1.0)) throw PlanError("mag_ratio must lie in [0, 1]");
  struct Entry {
    double mag;
    std::size_t node;
    std::size_t k;
  };
  std::vector<Entry> pool;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const auto param = mask_param(g.node(i).layer.kind);
    if (param.empty()) continue;
    const Tensor& w = g.node(i).layer.params.at(std::string(param));
    for (std::size_t k = 0; k < w.size(); ++k) pool.push_back({std::abs(w[k]), i, k});
  }
  const auto count = static_cast<std::size_t>(std::llround(mag_ratio * static_cast<double>(pool.size())));
  // Pool order is the flat index, so comparing positions breaks ties.
  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return pool[a].mag > pool[b].mag; });
  PartitionPlan plan = uniform(g, Scheme::Magnitude, Placement::GPU);
  plan.config = mag_ratio;
  plan.notes.push_back("global top-k over conv/linear weights and batchnorm gamma");
  for (std::size_t r = 0; r < count; ++r) {
    const Entry& e = pool[order[r]];
    auto& mask = plan.weight_masks[e.node];
    if (mask.empty()) {
      mask.assign(g.node(e.node).layer.params.at(std::string(mask_param(g.node(e.node).layer.kind))).size(),
                  false);
    }
    mask[e.k] = true;
  }
  for (auto& [node, mask] : plan.weight_masks) plan.placements[node] = Placement::TEE;
  // Fully shielded layers need no mask.
  for (auto it = plan.weight_masks.begin(); it != plan.weight_masks.end();) {
    if (std::all_of(it->second.begin(), it->second.end(), [](bool b) { return b; })) {
      it = plan.weight_masks.erase(it);
    } else {
      ++it;
    }
  }
  if (count > 0) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!has_params(g.node(i).layer.kind)) plan.placements[i] = Placement::TEE;
    }
  }
  return plan;
}

PartitionPlan plan_intermediate(const ModelGraph& g, double soter_ratio, std::uint64_t seed,
                                double scalar_lo, double scalar_hi) {
  if (!(soter_ratio >= 0.0 && soter_ratio <= 1.0)) throw PlanError("soter_ratio must lie in [0, 1]");
  if (scalar_lo == 0.0 || scalar_hi == 0.0) throw PlanError("blinding scalar must be non-zero");
  if (!(scalar_lo > 0.0 && scalar_hi >= scalar_lo)) throw PlanError("invalid blinding scalar range");
  const auto units = layer_units(g);
  std::vector<std::size_t> weighted;
  for (std::size_t u = 0; u < units.size(); ++u) {
    if (std::any_of(units[u].begin(), units[u].end(),
                    [&](std::size_t i) { return is_linear_kind(g.node(i).layer.kind); })) {
      weighted.push_back(u);
    }
  }
  const auto n_tee = static_cast<std::size_t>(
      std::ceil(soter_ratio * static_cast<double>(weighted.size()) - 1e-12));
  Rng rng(derive_seed(seed, "plan_intermediate"));
  std::vector<std::size_t> perm = rng.permutation(weighted.size());
  PartitionPlan plan = uniform(g, Scheme::Intermediate, Placement::GPU);
  plan.config = soter_ratio;
  plan.seed = seed;
  std::vector<bool> tee_unit(units.size(), false);
  for (std::size_t k = 0; k < n_tee; ++k) tee_unit[weighted[perm[k]]] = true;
  // Units without a weighted layer (e.g. a leading pool) follow the ratio
  // extremes only.
  for (std::size_t u = 0; u < units.size(); ++u) {
    const bool tee = tee_unit[u] || (soter_ratio >= 1.0);
    for (std::size_t i : units[u]) plan.placements[i] = tee ? Placement::TEE : Placement::GPU;
  }
  Rng srng = rng.split("scalars");
  const double llo = std::log(scalar_lo), lhi = std::log(scalar_hi);
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (is_linear_kind(g.node(i).layer.kind) && plan.placements[i] == Placement::GPU) {
      plan.scalars[i] = std::exp(srng.uniform(llo, lhi));
    }
  }
  return plan;
}

PartitionPlan plan_nonlinear_obf(const ModelGraph& g) {
  PartitionPlan plan = uniform(g, Scheme::NonLinearObf, Placement::GPU);
  bool any_tee = false;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const LayerKind k = g.node(i).layer.kind;
    if (is_linear_kind(k)) {
      plan.placements[i] = Placement::OBFUSCATED;
    } else if (!has_params(k)) {
      plan.placements[i] = Placement::TEE;
      any_tee = true;
    }
  }
  if (!any_tee) plan.notes.push_back("warning: model has no non-linear layers; TEE set is empty");
  return plan;
}

EnnclaveResult plan_ennclave(const ModelGraph& victim, const ModelGraph& backbone) {
  auto last_linear = [](const ModelGraph& g) {
    for (std::size_t i = g.size(); i-- > 0;) {
      if (g.node(i).layer.kind == LayerKind::Linear) return i;
    }
    throw PlanError("model has no linear classifier layer");
  };
  const std::size_t vh = last_linear(victim), bh = last_linear(backbone);
  const LayerSpec& vl = victim.node(vh).layer;
  const LayerSpec& bl = backbone.node(bh).layer;
  if (vl.c_in != bl.c_in || bl.in_shape != vl.in_shape) {
    throw PlanError("backbone features " + shape_str(bl.in_shape) +
                    " do not fit the victim head input " + shape_str(vl.in_shape));
  }
  std::vector<Node> nodes = backbone.nodes();
  nodes[bh].layer = vl;
  nodes[bh].role = "head";
  ModelGraph model(backbone.input_shape(), std::move(nodes), victim.output_mode());
  PartitionPlan plan = uniform(model, Scheme::Ennclave, Placement::GPU);
  for (std::size_t i = bh; i < model.size(); ++i) plan.placements[i] = Placement::TEE;
  return {std::move(model), std::move(plan)};
}

std::optional<double> default_config(Scheme s) {
  switch (s) {
    case Scheme::Deep:
      return 1.0;
    case Scheme::Shallow:
      return 4.0;
    case Scheme::Magnitude:
      return 0.01;
    case Scheme::Intermediate:
      return 0.2;
    default:
      return std::nullopt;
  }
}

std::vector<double> default_grid(Scheme s, const ModelGraph& g) {
  switch (s) {
    case Scheme::Deep:
    case Scheme::Shallow: {
      // Unit boundaries expressed as node counts.
      std::vector<double> grid{0.0};
      const auto units = layer_units(g);
      std::size_t acc = 0;
      if (s == Scheme::Deep) {
        for (std::size_t u = units.size(); u-- > 0;) {
          acc += units[u].size();
          grid.push_back(static_cast<double>(acc));
        }
      } else {
        for (const auto& unit : units) {
          acc += unit.size();
          grid.push_back(static_cast<double>(acc));
        }
      }
      return grid;
    }
    case Scheme::Magnitude:
      return {0, 0.01, 0.1, 0.3, 0.5, 0.7, 0.9, 1};
    case Scheme::Intermediate:
      return {0, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9, 1};
    default:
      return {0.0};
  }
}

PartitionPlan make_plan(Scheme s, const ModelGraph& g, double config, std::uint64_t seed) {
  switch (s) {
    case Scheme::Deep:
      return plan_deep(g, static_cast<std::size_t>(config));
    case Scheme::Shallow:
      return plan_shallow(g, static_cast<std::size_t>(config));
    case Scheme::Magnitude:
      return plan_magnitude(g, config);
    case Scheme::Intermediate:
      return plan_intermediate(g, config, seed);
    case Scheme::NonLinearObf:
      return plan_nonlinear_obf(g);
    case Scheme::NoShield:
      return plan_noshield(g);
    case Scheme::BlackBox:
      return plan_blackbox(g);
    case Scheme::Ennclave:
    case Scheme::TeeSlice:
      break;
  }
  throw PlanError(std::string(to_string(s)) + " plans need extra inputs; use its own builder");
}

}  // namespace tsdp::partition
