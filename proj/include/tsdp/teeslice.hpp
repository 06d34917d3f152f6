#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "tsdp/dataset.hpp"
#include "tsdp/graph.hpp"
#include "tsdp/plan.hpp"
#include "tsdp/train.hpp"

// Partition-before-training: private slices trained next to a frozen public
// backbone, then pruned until the accuracy budget binds.
namespace tsdp::teeslice {

// Adapter from the output of backbone conv block `from` into the pre-ReLU
// sum of block `to` (1-based conv indices): 1x1 conv down to `rank`
// channels (strided to match resolution), 1x1 conv up, batchnorm, gate.
struct Slice {
  std::size_t from = 0;
  std::size_t to = 0;
  std::size_t rank = 0;
  std::string prefix;  // node name prefix, e.g. "slice1_3"

  std::string gate_name() const { return prefix + "/gate"; }
  std::vector<std::string> node_names() const;
};

struct HybridModel {
  ModelGraph graph;
  // Live slices, ordered by (from, to).
  std::vector<Slice> slices;
  // Names of the public nodes that stay frozen.
  std::vector<std::string> backbone_nodes;
  std::uint64_t backbone_checksum = 0;
  bool pruning_failed = false;

  double alpha(const Slice& s) const;
  std::vector<double> alphas() const;
  std::uint64_t slice_flops(const Slice& s) const;
  std::uint64_t backbone_flops() const;
  std::vector<std::size_t> backbone_indices() const;
  // Recomputes the checksum over the current backbone parameters.
  std::uint64_t current_backbone_checksum() const;
};

struct BuildOptions {
  std::size_t max_distance = 3;
  // Each adapter costs at most FLOPs(conv_to) / flops_divisor.
  std::size_t flops_divisor = 18;
  double init_logit = 0.0;  // alpha = 0.5
};

// Freezes every backbone node, adds one slice per eligible block pair and a
// fresh classifier head of `n_classes`. Throws GraphError when fewer than two
// conv blocks exist.
HybridModel build_dense(const ModelGraph& backbone, std::size_t n_classes, std::uint64_t seed,
                        const BuildOptions& opt = {});

// Cross-entropy plus lambda * sum_s alpha_s * flops(s) / flops(backbone).
nn::Regularizer complexity_penalty(const HybridModel& m, double lambda);

HybridModel train_dense(HybridModel m, const Dataset& d, const nn::TrainConfig& cfg,
                        double lambda = 0.1);

// Drops the given slices. Merge nodes keep the backbone input.
HybridModel remove_slices(const HybridModel& m, const std::vector<std::size_t>& slice_ids);

struct PruneConfig {
  double delta = 0.01;
  double alpha_setup = 0.05;
  std::size_t n = 2;
  std::size_t rounds = 10;
  double lambda = 0.1;
  void validate() const;
};

struct PruneRound {
  std::size_t round = 0;
  double accuracy = 0.0;
  std::size_t slices_before = 0;
  std::size_t slices_remaining = 0;
  double pct_flops_tee = 0.0;
  bool stored = false;
  // Pruned slice prefixes with their alpha at selection time.
  std::vector<std::pair<std::string, double>> pruned;
};

struct PruneResult {
  HybridModel model;
  double acc_tol = 0.0;
  std::size_t setup_pruned = 0;
  std::vector<PruneRound> log;
};

// Setup prune at alpha_setup, then per round: evaluate on `eval`; when
// ACC_r > ACC_tol store the model and prune the n smallest-alpha slices
// (ties to the lower (from, to)); retrain with `retrain`. Returns the last
// stored model, or the dense model flagged pruning_failed when none passed.
PruneResult iterative_prune(HybridModel m, const Dataset& train, const Dataset& eval,
                            const PruneConfig& pc, double acc_vic, const nn::TrainConfig& retrain);

// Slices, head, merges and backbone parameter-free layers in the TEE; the
// frozen backbone conv/linear/batchnorm layers on the GPU.
PartitionPlan deploy_plan(const HybridModel& m);

std::string prune_log_csv(const std::vector<PruneRound>& log);

nlohmann::json slice_table(const HybridModel& m);
void save_hybrid(const HybridModel& m, const std::filesystem::path& path);
HybridModel load_hybrid(const std::filesystem::path& path);

// Whole pipeline: dense and sparse phases each get half of `victim_epochs`.
struct PipelineConfig {
  std::size_t victim_epochs = 60;
  nn::TrainConfig train;  // epochs overridden per phase
  PruneConfig prune;
  BuildOptions build;
  std::uint64_t seed = 0;
};

struct PipelineResult {
  HybridModel dense;
  PruneResult pruned;
  double accuracy = 0.0;
};

PipelineResult run_pipeline(const ModelGraph& public_model, const Dataset& train,
                            const Dataset& eval, double acc_vic, const PipelineConfig& cfg);

}  // namespace tsdp::teeslice
