#include "tsdp/flops.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace tsdp::flops {

std::uint64_t flops_of_layer(const LayerSpec& l) {
  auto spatial = [&](const char* what) {
    if (l.out_shape.size() != 3) {
      throw PlanError(std::string(what) + " layer " + l.name +
                      " has unresolved spatial dims; build it inside a ModelGraph");
    }
    return static_cast<std::uint64_t>(l.out_shape[1] * l.out_shape[2]);
  };
  switch (l.kind) {
    case LayerKind::Linear:
      return 2ULL * l.c_in * l.c_out;
    case LayerKind::BatchNorm:
      return 2ULL * l.c_in * spatial("batchnorm");
    case LayerKind::Conv2d:
      return 2ULL * l.c_in * l.kernel * l.kernel * spatial("conv") * l.c_out;
    default:
      return 0;
  }
}

std::uint64_t flops_of_model(const ModelGraph& g) {
  std::uint64_t s = 0;
  for (const auto& n : g.nodes()) s += flops_of_layer(n.layer);
  return s;
}

double sim_latency(std::uint64_t flops_tee, std::uint64_t flops_gpu,
                   std::uint64_t elementwise_tee, std::uint64_t elementwise_gpu) {
  const double charged = kTeeSlowdown * static_cast<double>(flops_tee) +
                         static_cast<double>(flops_gpu) +
                         kElementwiseCharge * (kTeeSlowdown * static_cast<double>(elementwise_tee) +
                                               static_cast<double>(elementwise_gpu));
  return charged * kLatencyScale;
}

CostReport utility_of_plan(const ModelGraph& g, const PartitionPlan& plan) {
  plan.check_against(g);
  CostReport r;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const LayerSpec& l = g.node(i).layer;
    const std::uint64_t f = flops_of_layer(l);
    r.flops_total += f;
    if (f == 0) {
      const std::uint64_t elems = shape_numel(l.out_shape);
      (plan.at(i) == Placement::TEE ? r.elementwise_tee : r.elementwise_gpu) += elems;
      continue;
    }
    auto it = plan.weight_masks.find(i);
    if (plan.at(i) == Placement::TEE && it != plan.weight_masks.end()) {
      // Every weight entry takes part in the same number of multiply-adds, so
      // the shielded share is exact: f * on / size.
      const auto on = static_cast<std::uint64_t>(
          std::count(it->second.begin(), it->second.end(), true));
      const std::uint64_t tee = f / it->second.size() * on;
      r.flops_tee += tee;
      r.flops_gpu += f - tee;
    } else if (plan.at(i) == Placement::TEE) {
      r.flops_tee += f;
    } else {
      r.flops_gpu += f;
    }
  }
  r.pct_flops_tee = r.flops_total == 0 ? 0.0
                                       : static_cast<double>(r.flops_tee) /
                                             static_cast<double>(r.flops_total);
  r.sim_latency = sim_latency(r.flops_tee, r.flops_gpu, r.elementwise_tee, r.elementwise_gpu);
  return r;
}

std::string csv_header() { return "scheme,config,flops_tee,flops_gpu,pct,sim_latency"; }

std::string csv_row(std::string_view scheme, std::string_view config, const CostReport& c) {
  std::ostringstream os;
  os.precision(10);
  os << scheme << ',' << config << ',' << c.flops_tee << ',' << c.flops_gpu << ','
     << c.pct_flops_tee << ',' << c.sim_latency;
  return os.str();
}

}  // namespace tsdp::flops
