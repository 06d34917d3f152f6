#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "tsdp/rng.hpp"
#include "tsdp/shadownet.hpp"

using namespace tsdp;
using namespace tsdp::shadownet;

TEST(Obfuscate, SizesFollowRatio) {
  const auto s = synthetic_layer(5, 9, 0.004, 0.0, 1);
  const ObfuscatedLayer o = obfuscate(s.victim, 3);
  EXPECT_EQ(o.m(), 6u);
  EXPECT_EQ(o.n, 5u);
  EXPECT_THROW(obfuscate(s.victim, 3, {.r = 1.0}), std::invalid_argument);
}

TEST(Obfuscate, DegenerateModeIsPaddedInput) {
  const auto s = synthetic_layer(5, 4, 0.004, 0.0, 1);
  const ObfuscatedLayer o = obfuscate(s.victim, 3, {.identity_permutation = true, .zero_masks = true});
  EXPECT_EQ(o.filters.slice_rows(0, 5), s.victim);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(o.filters[5 * 4 + k], 0.0);
}

TEST(Obfuscate, SeedDeterminism) {
  const auto s = synthetic_layer(8, 9, 0.004, 0.0, 2);
  EXPECT_EQ(obfuscate(s.victim, 5).filters, obfuscate(s.victim, 5).filters);
  EXPECT_NE(obfuscate(s.victim, 5).filters, obfuscate(s.victim, 6).filters);
}

TEST(Obfuscate, MaskVarianceScalesWithWeights) {
  const auto s = synthetic_layer(40, 144, 0.004, 0.0, 3);
  const ObfuscatedLayer o = obfuscate(s.victim, 1);
  const auto [a, b] = o.recovery_pair(0);
  const double mask_var = sample_variance(std::span<const double>(&o.filters.vec()[b * 144], 144));
  EXPECT_GT(mask_var, 0.2);
  EXPECT_LT(mask_var, 0.6);
}

TEST(Obfuscate, DefenderRecoversWeights) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto s = synthetic_layer(10, 27, 0.004, 0.0, seed);
    const ObfuscatedLayer o = obfuscate(s.victim, seed, {.mask_var = 0.5});
    EXPECT_LT(max_abs_diff(deobfuscate(o), s.victim), 1e-12);
  }
}

TEST(Obfuscate, OutputDeobfuscationMatchesLinearity) {
  // A linear op applied per filter commutes with the filter differences.
  const auto s = synthetic_layer(4, 6, 0.004, 0.0, 4);
  const ObfuscatedLayer o = obfuscate(s.victim, 2, {.mask_var = 0.5});
  Rng rng(9);
  Tensor x({6});
  for (auto& v : x.vec()) v = rng.uniform(-1, 1);
  Tensor y({1, o.m()});
  for (std::size_t j = 0; j < o.m(); ++j) {
    for (std::size_t k = 0; k < 6; ++k) y[j] += o.filters[j * 6 + k] * x[k];
  }
  const Tensor z = deobfuscate_outputs(o, y);
  for (std::size_t i = 0; i < 4; ++i) {
    double want = 0.0;
    for (std::size_t k = 0; k < 6; ++k) want += s.victim[i * 6 + k] * x[k];
    EXPECT_NEAR(z[i], want, 1e-12);
  }
}

TEST(AttackUnmask, TrueFiltersAmongCandidates) {
  const auto s = synthetic_layer(16, 144, 0.004, 0.0, 5);
  const ObfuscatedLayer o = obfuscate(s.victim, 5, {.mask_var = 0.5});
  const auto cands = attack_unmask(o.filters, 0.01);
  for (std::size_t i = 0; i < 16; ++i) {
    const auto [a, b] = o.recovery_pair(i);
    const bool found = std::any_of(cands.begin(), cands.end(),
                                   [&](const Candidate& c) { return c.a == a && c.b == b; });
    EXPECT_TRUE(found) << "filter " << i;
  }
}

TEST(AttackUnmask, OnlyMasksGiveNothing) {
  Rng rng(1);
  Tensor masks({4, 50});
  for (auto& v : masks.vec()) v = rng.normal(0.0, std::sqrt(0.5));
  EXPECT_TRUE(attack_unmask(masks, 0.01).empty());
  EXPECT_THROW(attack_unmask(masks, 0.0), std::invalid_argument);
}

TEST(AttackUnmask, SupersetPropertyOverSeeds) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto s = synthetic_layer(12, 144, 0.004, 0.01, seed);
    const ObfuscatedLayer o = obfuscate(s.victim, seed, {.mask_var = 0.5});
    const auto cands = attack_unmask(o.filters, 0.01);
    for (std::size_t i = 0; i < 12; ++i) {
      const auto pr = o.recovery_pair(i);
      ASSERT_TRUE(std::any_of(cands.begin(), cands.end(), [&](const Candidate& c) {
        return c.a == pr.first && c.b == pr.second;
      })) << "seed " << seed << " filter " << i;
    }
  }
}

TEST(RecoverPositions, ExactPublicFilters) {
  const auto s = synthetic_layer(6, 20, 0.004, 0.0, 7);
  std::vector<Candidate> cands;
  // A mask-free instance: each candidate is the public filter itself.
  for (std::size_t i = 0; i < 6; ++i) {
    cands.push_back({s.public_layer.slice_rows(i, i + 1).reshaped({20}), i, 100 + i, 0.0});
  }
  const auto rep = attack_recover_positions(cands, s.public_layer, AssignMode::Greedy, &s.public_layer);
  EXPECT_EQ(rep.position_recovery_rate, 1.0);
  EXPECT_EQ(rep.weight_recovery_rate, 1.0);
}

TEST(RecoverPositions, FineTunedVictimRecovered) {
  double pos = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto s = synthetic_layer(16, 144, 0.004, 0.01, seed);
    const ObfuscatedLayer o = obfuscate(s.victim, seed, {.mask_var = 0.5});
    const auto rep = attack_recover_positions(attack_unmask(o.filters, 0.01), s.public_layer,
                                              AssignMode::Greedy, &s.victim);
    EXPECT_EQ(rep.weight_recovery_rate, 1.0) << seed;
    pos += rep.position_recovery_rate;
  }
  EXPECT_GE(pos / 20, 0.95);
}

TEST(RecoverPositions, OrderInvariant) {
  const auto s = synthetic_layer(10, 144, 0.004, 0.01, 8);
  const ObfuscatedLayer o = obfuscate(s.victim, 8, {.mask_var = 0.5});
  auto cands = attack_unmask(o.filters, 0.01);
  const auto a = attack_recover_positions(cands, s.public_layer, AssignMode::Greedy, &s.victim);
  Rng rng(3);
  rng.shuffle(cands);
  const auto b = attack_recover_positions(cands, s.public_layer, AssignMode::Greedy, &s.victim);
  EXPECT_EQ(a.recovered, b.recovered);
  EXPECT_EQ(a.position_recovery_rate, b.position_recovery_rate);
}

TEST(RecoverPositions, HungarianModeAgreesOnEasyInstances) {
  const auto s = synthetic_layer(10, 144, 0.004, 0.01, 9);
  const ObfuscatedLayer o = obfuscate(s.victim, 9, {.mask_var = 0.5});
  const auto cands = attack_unmask(o.filters, 0.01);
  const auto h = attack_recover_positions(cands, s.public_layer, AssignMode::Hungarian, &s.victim);
  EXPECT_EQ(h.position_recovery_rate, 1.0);
}

TEST(RecoverPositions, RatesDegradeAsMaskVarianceShrinks) {
  // Averaged over seeds, recovery cannot improve as masks blend into weights.
  double prev_w = 1e9, prev_p = 1e9;
  for (double mask_var : {0.5, 0.05, 0.008, 0.004}) {
    double w = 0.0, p = 0.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto s = synthetic_layer(12, 144, 0.004, 0.01, seed);
      const ObfuscatedLayer o = obfuscate(s.victim, seed, {.mask_var = mask_var});
      const auto rep = attack_recover_positions(attack_unmask(o.filters, 0.01), s.public_layer,
                                                AssignMode::Greedy, &s.victim);
      w += rep.weight_recovery_rate;
      p += rep.position_recovery_rate;
    }
    EXPECT_LE(w, prev_w + 1e-9) << mask_var;
    EXPECT_LE(p, prev_p + 1e-9) << mask_var;
    prev_w = w;
    prev_p = p;
  }
}

TEST(Hungarian, SolvesSmallInstance) {
  // Optimal: row0->col1, row1->col0, row2->col2 (cost 1+2+2).
  const std::vector<double> cost{4, 1, 3, 2, 0, 5, 3, 2, 2};
  EXPECT_EQ(hungarian(cost, 3, 3), (std::vector<std::size_t>{1, 0, 2}));
}
