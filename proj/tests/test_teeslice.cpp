#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "tsdp/datagen.hpp"
#include "tsdp/engine.hpp"
#include "tsdp/flops.hpp"
#include "tsdp/models.hpp"
#include "tsdp/serialize.hpp"
#include "tsdp/teeslice.hpp"

using namespace tsdp;
using namespace tsdp::teeslice;

namespace {

const ModelGraph& public_model() {
  static const ModelGraph g = build_toy_cnn({}, 17);
  return g;
}

const Dataset& small_data() {
  static const Dataset d = data::gen_synthetic(4, 24, 12, 5, {.distribution = "private", .noise_sd = 0.3});
  return d;
}

nn::TrainConfig quick(std::size_t epochs) {
  nn::TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 16;
  c.seed = 3;
  return c;
}

std::vector<std::size_t> all_ids(const HybridModel& m) {
  std::vector<std::size_t> ids(m.slices.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
  return ids;
}

}  // namespace

TEST(BuildDense, EnumeratesPairsWithinDistance) {
  const HybridModel m = build_dense(public_model(), 4, 1);
  std::set<std::pair<std::size_t, std::size_t>> pairs;
  for (const auto& s : m.slices) pairs.insert({s.from, s.to});
  std::set<std::pair<std::size_t, std::size_t>> expect;
  for (std::size_t i = 1; i <= 4; ++i)
    for (std::size_t p = 1; p < i; ++p)
      if (i - p <= 3) expect.insert({p, i});
  EXPECT_EQ(pairs, expect);

  const HybridModel near = build_dense(public_model(), 4, 1, {.max_distance = 1});
  EXPECT_EQ(near.slices.size(), 3u);
  for (const auto& s : near.slices) EXPECT_EQ(s.to - s.from, 1u);
}

TEST(BuildDense, AdaptersRespectFlopsBudget) {
  const HybridModel m = build_dense(public_model(), 4, 1);
  for (const auto& s : m.slices) {
    const auto& conv = public_model().node(public_model().index_of("conv" + std::to_string(s.to))).layer;
    EXPECT_LE(m.slice_flops(s), flops::flops_of_layer(conv) / 18) << s.prefix;
    EXPECT_GE(s.rank, 1u);
  }
}

TEST(BuildDense, AlphasStartAtHalf) {
  const HybridModel m = build_dense(public_model(), 4, 1);
  for (double a : m.alphas()) EXPECT_DOUBLE_EQ(a, 0.5);
}

TEST(BuildDense, ShallowBackboneRejected) {
  GraphBuilder b({3, 8, 8}, 1);
  int x = b.conv(GraphBuilder::kInput, "conv1", 4, 3, 1, 1);
  x = b.relu(x, "relu1");
  x = b.avgpool(x, "pool", 8);
  b.linear(x, "fc", 2);
  EXPECT_THROW(build_dense(std::move(b).build(), 2, 1), GraphError);
}

TEST(BuildDense, BackboneCopiedBitExactAndFrozen) {
  const HybridModel m = build_dense(public_model(), 4, 1);
  for (const auto& name : m.backbone_nodes) {
    const Node& n = m.graph.node(m.graph.index_of(name));
    EXPECT_TRUE(n.frozen) << name;
    EXPECT_EQ(n.layer.params, public_model().node(public_model().index_of(name)).layer.params) << name;
  }
  EXPECT_EQ(m.current_backbone_checksum(), m.backbone_checksum);
}

TEST(BuildDense, NoSlicesEqualsPublicWithNewHead) {
  const HybridModel m = build_dense(public_model(), 4, 9);
  const HybridModel bare = remove_slices(m, all_ids(m));
  EXPECT_TRUE(bare.slices.empty());
  const ModelGraph ref = replace_head(public_model(), 4, 9);
  const Tensor x = small_data().images.slice_rows(0, 8);
  EXPECT_EQ(nn::forward(bare.graph, x), nn::forward(ref, x));
}

TEST(BuildDense, ClosedGatesSilenceSlices) {
  HybridModel m = build_dense(public_model(), 4, 9);
  for (const auto& s : m.slices) m.graph.node(m.graph.index_of(s.gate_name())).layer.params["logit"][0] = -60.0;
  const HybridModel bare = remove_slices(m, all_ids(m));
  const Tensor x = small_data().images.slice_rows(0, 8);
  EXPECT_LT(max_abs_diff(nn::forward(m.graph, x), nn::forward(bare.graph, x)), 1e-12);
}

TEST(TrainDense, BackboneUntouched) {
  const HybridModel m = train_dense(build_dense(public_model(), 4, 1), small_data(), quick(3), 0.1);
  EXPECT_EQ(m.current_backbone_checksum(), m.backbone_checksum);
  for (const auto& name : m.backbone_nodes) {
    EXPECT_EQ(m.graph.node(m.graph.index_of(name)).layer.params,
              public_model().node(public_model().index_of(name)).layer.params);
  }
}

TEST(TrainDense, AtLeastLinearProbeOnTrainingData) {
  // Oracle: the same hybrid with every slice removed is a linear probe on the
  // frozen backbone features; slices only add capacity.
  const HybridModel dense0 = build_dense(public_model(), 4, 2);
  const HybridModel probe = train_dense(remove_slices(dense0, all_ids(dense0)), small_data(), quick(20), 0.0);
  const HybridModel dense = train_dense(dense0, small_data(), quick(20), 0.0);
  EXPECT_GE(nn::accuracy(dense.graph, small_data()), nn::accuracy(probe.graph, small_data()));
}

TEST(TrainDense, HugePenaltyClosesAllGates) {
  const HybridModel m = train_dense(build_dense(public_model(), 4, 1), small_data(), quick(10), 1e5);
  for (double a : m.alphas()) EXPECT_LT(a, 0.05);
}

TEST(TrainDense, PenaltyGradientMatchesFiniteDifference) {
  const HybridModel m = build_dense(public_model(), 4, 1);
  const auto reg = complexity_penalty(m, 0.7);
  ModelGraph g = m.graph;
  const std::size_t gate = g.index_of(m.slices[2].gate_name());
  nn::ParamGrads grads(g.size());
  reg(g, grads);
  const double analytic = grads[gate]["logit"][0];
  const double h = 1e-6;
  nn::ParamGrads scratch(g.size());
  g.node(gate).layer.params["logit"][0] += h;
  const double up = reg(g, scratch);
  g.node(gate).layer.params["logit"][0] -= 2 * h;
  const double down = reg(g, scratch);
  EXPECT_NEAR(analytic, (up - down) / (2 * h), 1e-9);
}

TEST(IterativePrune, ZeroRoundsReturnsSetupPruned) {
  HybridModel m = build_dense(public_model(), 4, 1);
  m.graph.node(m.graph.index_of(m.slices[0].gate_name())).layer.params["logit"][0] = -5.0;
  const PruneResult r = iterative_prune(m, small_data(), small_data(), {.rounds = 0}, 0.5, quick(1));
  EXPECT_EQ(r.setup_pruned, 1u);
  EXPECT_EQ(r.model.slices.size(), m.slices.size() - 1);
  EXPECT_TRUE(r.log.empty());
  EXPECT_FALSE(r.model.pruning_failed);
}

TEST(IterativePrune, LogInvariants) {
  const HybridModel dense = train_dense(build_dense(public_model(), 4, 1), small_data(), quick(5), 0.1);
  const PruneResult r = iterative_prune(dense, small_data(), small_data(), {.n = 2, .rounds = 4}, 0.3, quick(2));
  ASSERT_EQ(r.log.size(), 4u);
  std::size_t prev = dense.slices.size();
  for (const auto& rec : r.log) {
    EXPECT_LE(rec.slices_remaining, rec.slices_before);
    EXPECT_LE(rec.slices_before, prev);
    prev = rec.slices_remaining;
    EXPECT_EQ(rec.stored, rec.accuracy > r.acc_tol);
    if (rec.stored) EXPECT_EQ(rec.pruned.size(), std::min<std::size_t>(2, rec.slices_before));
    else EXPECT_TRUE(rec.pruned.empty());
  }
  EXPECT_EQ(r.model.current_backbone_checksum(), dense.backbone_checksum);
  EXPECT_FALSE(r.model.pruning_failed);
}

TEST(IterativePrune, PrunesSmallestAlphaTiesToLowerPair) {
  HybridModel m = build_dense(public_model(), 4, 1);
  // Distinct alphas for all but a tie between the first two slices.
  const std::vector<double> logits{0.1, 0.1, -0.5, 1.0, 2.0, 3.0};
  for (std::size_t i = 0; i < m.slices.size(); ++i) {
    m.graph.node(m.graph.index_of(m.slices[i].gate_name())).layer.params["logit"][0] = logits[i];
  }
  const PruneResult r = iterative_prune(m, small_data(), small_data(), {.n = 2, .rounds = 1}, 0.01, quick(1));
  ASSERT_EQ(r.log.size(), 1u);
  ASSERT_EQ(r.log[0].pruned.size(), 2u);
  EXPECT_EQ(r.log[0].pruned[0].first, m.slices[2].prefix);
  EXPECT_EQ(r.log[0].pruned[1].first, m.slices[0].prefix);
}

TEST(IterativePrune, UnreachableToleranceFlagsFailure) {
  const HybridModel m = build_dense(public_model(), 4, 1);
  // An untrained head cannot reach 99% of a perfect victim.
  const PruneResult r = iterative_prune(m, small_data(), small_data(), {.rounds = 2}, 1.0, quick(1));
  EXPECT_TRUE(r.model.pruning_failed);
  EXPECT_EQ(r.model.slices.size(), m.slices.size());
  EXPECT_THROW(iterative_prune(m, small_data(), small_data(), {.delta = 0.0}, 0.9, quick(1)),
               std::invalid_argument);
  EXPECT_THROW(iterative_prune(m, small_data(), small_data(), {}, 0.0, quick(1)), std::invalid_argument);
}

TEST(DeployPlan, GpuHoldsOnlyPublicBackbone) {
  const HybridModel m = train_dense(build_dense(public_model(), 4, 1), small_data(), quick(2), 0.1);
  const PartitionPlan p = deploy_plan(m);
  p.check_against(m.graph);
  std::uint64_t slice_and_head = 0;
  for (const auto& s : m.slices) slice_and_head += m.slice_flops(s);
  for (std::size_t i = 0; i < m.graph.size(); ++i) {
    const Node& n = m.graph.node(i);
    if (p.at(i) == Placement::GPU) {
      EXPECT_EQ(n.role, "backbone");
      EXPECT_EQ(n.layer.params, public_model().node(public_model().index_of(n.layer.name)).layer.params);
    }
    if (n.role == "head") slice_and_head += flops::flops_of_layer(n.layer);
    if (n.role == "slice" || n.role == "head" || n.role == "merge" || is_nonlinear_kind(n.layer.kind)) {
      EXPECT_EQ(p.at(i), Placement::TEE) << n.layer.name;
    }
  }
  const auto cost = flops::utility_of_plan(m.graph, p);
  EXPECT_EQ(cost.flops_tee, slice_and_head);
  EXPECT_LT(cost.pct_flops_tee, 0.15);
}

TEST(HybridIo, RoundTripAndTamperDetection) {
  const auto dir = std::filesystem::temp_directory_path() / "tsdp_hybrid_io";
  std::filesystem::create_directories(dir);
  const HybridModel m = build_dense(public_model(), 4, 1);
  save_hybrid(m, dir / "h.tsdp");
  const HybridModel back = load_hybrid(dir / "h.tsdp");
  EXPECT_EQ(graph_hash(back.graph), graph_hash(m.graph));
  EXPECT_EQ(back.slices.size(), m.slices.size());
  EXPECT_EQ(back.backbone_checksum, m.backbone_checksum);

  io::save_model(m.graph, dir / "plain.tsdp");
  EXPECT_THROW(load_hybrid(dir / "plain.tsdp"), io::FormatError);

  HybridModel bad = m;
  bad.graph.node(bad.graph.index_of("conv2")).layer.params["weight"][0] += 1.0;
  save_hybrid(bad, dir / "bad.tsdp");
  EXPECT_THROW(load_hybrid(dir / "bad.tsdp"), io::FormatError);
  std::filesystem::remove_all(dir);
}

TEST(PruneLog, CsvHeaderAndRows) {
  std::vector<PruneRound> log(2);
  log[0].round = 1;
  log[1].round = 2;
  const std::string csv = prune_log_csv(log);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "round,acc_r,slices_remaining,pct_flops_tee");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
}
