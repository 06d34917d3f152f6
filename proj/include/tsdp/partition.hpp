#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "tsdp/graph.hpp"
#include "tsdp/plan.hpp"

namespace tsdp::partition {

// Nodes grouped so each Conv2d/Linear starts a unit and the parameter-free
// and batchnorm nodes after it belong to it. Nodes ahead of the first
// weighted layer join the first unit.
std::vector<std::vector<std::size_t>> layer_units(const ModelGraph& g);

PartitionPlan plan_noshield(const ModelGraph& g);
PartitionPlan plan_blackbox(const ModelGraph& g);

// The last (first) n nodes, widened to whole units, go to the TEE.
// 0 <= n <= g.size().
PartitionPlan plan_deep(const ModelGraph& g, std::size_t n_deep = 1);
PartitionPlan plan_shallow(const ModelGraph& g, std::size_t n_shallow = 4);

// Global top round(ratio * W) entries by |value| over all conv/linear
// weights and batchnorm gammas, ties to the lower flat index. Layers holding
// any shielded entry are TEE with a mask; parameter-free layers are TEE
// whenever ratio > 0.
PartitionPlan plan_magnitude(const ModelGraph& g, double mag_ratio);

// ceil(ratio * L) of the L conv/linear units chosen uniformly at random go to
// the TEE; every other conv/linear gets a blinding scalar drawn log-uniform
// from [scalar_lo, scalar_hi].
PartitionPlan plan_intermediate(const ModelGraph& g, double soter_ratio, std::uint64_t seed,
                                double scalar_lo = 0.5, double scalar_hi = 2.0);

// Conv/linear OBFUSCATED, parameter-free layers TEE, batchnorm GPU.
PartitionPlan plan_nonlinear_obf(const ModelGraph& g);

struct EnnclaveResult {
  ModelGraph model;
  PartitionPlan plan;
};

// Backbone feature layers (GPU) with the victim's classifier head (TEE).
EnnclaveResult plan_ennclave(const ModelGraph& victim, const ModelGraph& backbone);

// Grids for the configurable schemes.
std::vector<double> default_grid(Scheme s, const ModelGraph& g);

// Standard setting of each configurable scheme; nullopt for the others.
std::optional<double> default_config(Scheme s);

// Plan for scheme at config (ignored by parameterless schemes).
PartitionPlan make_plan(Scheme s, const ModelGraph& g, double config, std::uint64_t seed);

}  // namespace tsdp::partition
