#pragma once

#include <cstdint>
#include <string>

#include "tsdp/graph.hpp"
#include "tsdp/plan.hpp"

namespace tsdp::flops {

// TEE execution is charged this many times the GPU cost.
inline constexpr double kTeeSlowdown = 30.0;
// Per-element charge for parameter-free layers, latency only.
inline constexpr double kElementwiseCharge = 1.0;
// Abstract time units per charged FLOP.
inline constexpr double kLatencyScale = 1e-6;

// linear 2*c_in*c_out; batchnorm 2*c*h*w; conv 2*c_in*k*k*h_out*w_out*c_out;
// every other kind 0.
std::uint64_t flops_of_layer(const LayerSpec& layer);
std::uint64_t flops_of_model(const ModelGraph& g);

struct CostReport {
  std::uint64_t flops_tee = 0;
  std::uint64_t flops_gpu = 0;
  std::uint64_t flops_total = 0;
  double pct_flops_tee = 0.0;
  double sim_latency = 0.0;
  // Elements processed by parameter-free layers per world (latency only).
  std::uint64_t elementwise_tee = 0;
  std::uint64_t elementwise_gpu = 0;
};

// Latency of a per-sample forward pass under the synthetic cost model.
double sim_latency(std::uint64_t flops_tee, std::uint64_t flops_gpu,
                   std::uint64_t elementwise_tee, std::uint64_t elementwise_gpu);

// Per-sample costs of executing g under plan. Magnitude-masked layers charge
// the shielded fraction of their FLOPs to the TEE.
CostReport utility_of_plan(const ModelGraph& g, const PartitionPlan& plan);

std::string csv_header();
std::string csv_row(std::string_view scheme, std::string_view config, const CostReport& c);

}  // namespace tsdp::flops
