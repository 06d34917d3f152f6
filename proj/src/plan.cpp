#include "tsdp/plan.hpp"

#include <algorithm>

namespace tsdp {

namespace {

constexpr std::pair<Scheme, std::string_view> kSchemeNames[] = {
    {Scheme::Deep, "deep"},
    {Scheme::Shallow, "shallow"},
    {Scheme::Magnitude, "magnitude"},
    {Scheme::Intermediate, "intermediate"},
    {Scheme::NonLinearObf, "nonlinear_obf"},
    {Scheme::Ennclave, "ennclave"},
    {Scheme::TeeSlice, "teeslice"},
    {Scheme::NoShield, "noshield"},
    {Scheme::BlackBox, "blackbox"},
};

}  // namespace

std::string_view to_string(Placement p) {
  switch (p) {
    case Placement::TEE:
      return "tee";
    case Placement::GPU:
      return "gpu";
    case Placement::OBFUSCATED:
      return "obfuscated";
  }
  return "?";
}

Placement placement_from_string(std::string_view s) {
  if (s == "tee") return Placement::TEE;
  if (s == "gpu") return Placement::GPU;
  if (s == "obfuscated") return Placement::OBFUSCATED;
  throw PlanError("unknown placement '" + std::string(s) + "'");
}

std::string_view to_string(Scheme s) {
  for (const auto& [k, name] : kSchemeNames) {
    if (k == s) return name;
  }
  return "?";
}

Scheme scheme_from_string(std::string_view s) {
  for (const auto& [k, name] : kSchemeNames) {
    if (name == s) return k;
  }
  throw PlanError("unknown scheme '" + std::string(s) + "'");
}

std::string_view mask_param(LayerKind k) {
  if (is_linear_kind(k)) return "weight";
  if (k == LayerKind::BatchNorm) return "gamma";
  return {};
}

double PartitionPlan::shielded_fraction(std::size_t node) const {
  if (placements.at(node) != Placement::TEE) return 0.0;
  auto it = weight_masks.find(node);
  if (it == weight_masks.end() || it->second.empty()) return 1.0;
  const auto on = std::count(it->second.begin(), it->second.end(), true);
  return static_cast<double>(on) / static_cast<double>(it->second.size());
}

void PartitionPlan::check_against(const ModelGraph& g) const {
  if (placements.size() != g.size()) {
    throw PlanError("plan places " + std::to_string(placements.size()) +
                    " nodes but the model has " + std::to_string(g.size()));
  }
  if (!weight_masks.empty() && scheme != Scheme::Magnitude) {
    throw PlanError("weight masks are only valid for the magnitude scheme");
  }
  if (!scalars.empty() && scheme != Scheme::Intermediate) {
    throw PlanError("blinding scalars are only valid for the intermediate scheme");
  }
  for (const auto& [node, mask] : weight_masks) {
    const auto& l = g.node(node).layer;
    const auto param = mask_param(l.kind);
    if (param.empty() || mask.size() != l.params.at(std::string(param)).size()) {
      throw PlanError("mask for " + l.name + " does not match its weights");
    }
  }
  for (const auto& [node, s] : scalars) {
    if (s == 0.0) throw PlanError("zero blinding scalar on " + g.node(node).layer.name);
    if (placements.at(node) != Placement::GPU) {
      throw PlanError("blinding scalar on non-offloaded layer " + g.node(node).layer.name);
    }
  }
}

nlohmann::json plan_to_json(const PartitionPlan& p, const ModelGraph& g) {
  nlohmann::json table = nlohmann::json::array();
  for (std::size_t i = 0; i < p.size(); ++i) {
    nlohmann::json row{{"node", g.node(i).layer.name}, {"placement", std::string(to_string(p.at(i)))}};
    if (auto it = p.weight_masks.find(i); it != p.weight_masks.end()) {
      std::vector<std::size_t> on;
      for (std::size_t k = 0; k < it->second.size(); ++k) {
        if (it->second[k]) on.push_back(k);
      }
      row["mask_size"] = it->second.size();
      row["mask_on"] = on;
    }
    if (auto it = p.scalars.find(i); it != p.scalars.end()) row["scalar"] = it->second;
    table.push_back(row);
  }
  return {{"scheme", std::string(to_string(p.scheme))},
          {"config", p.config ? nlohmann::json(*p.config) : nlohmann::json(nullptr)},
          {"seed", p.seed},
          {"notes", p.notes},
          {"placements", table}};
}

PartitionPlan plan_from_json(const nlohmann::json& j, const ModelGraph& g) {
  PartitionPlan p;
  p.scheme = scheme_from_string(j.at("scheme").get<std::string>());
  if (!j.at("config").is_null()) p.config = j.at("config").get<double>();
  p.seed = j.value("seed", std::uint64_t{0});
  p.notes = j.value("notes", std::vector<std::string>{});
  p.placements.assign(g.size(), Placement::GPU);
  for (const auto& row : j.at("placements")) {
    const std::size_t i = g.index_of(row.at("node").get<std::string>());
    p.placements[i] = placement_from_string(row.at("placement").get<std::string>());
    if (row.contains("mask_size")) {
      std::vector<bool> mask(row.at("mask_size").get<std::size_t>(), false);
      for (std::size_t k : row.at("mask_on").get<std::vector<std::size_t>>()) mask.at(k) = true;
      p.weight_masks[i] = std::move(mask);
    }
    if (row.contains("scalar")) p.scalars[i] = row.at("scalar").get<double>();
  }
  p.check_against(g);
  return p;
}

}  // namespace tsdp
