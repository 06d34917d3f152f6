#include <gtest/gtest.h>

#include <atomic>
#include <filesystem>

#include "tsdp/lab.hpp"
#include "tsdp/rng.hpp"
#include "tsdp/sweetspot.hpp"

using namespace tsdp;
using namespace tsdp::sweetspot;

namespace {

// Synthetic cell table: security falls and utility cost rises with config.
attacks::AttackReport fake(Scheme s, std::optional<double> config, std::uint64_t seed) {
  attacks::AttackReport r;
  r.scheme = std::string(to_string(s));
  r.config = config;
  r.seed = seed;
  const double jitter = 0.001 * static_cast<double>(seed % 3);
  if (s == Scheme::BlackBox) {
    r.ms_accuracy = 0.60 + jitter;
    r.utility.pct_flops_tee = 1.0;
  } else if (s == Scheme::NoShield) {
    r.ms_accuracy = 0.95 + jitter;
  } else {
    const double c = config.value_or(0.0);
    r.ms_accuracy = std::max(0.60, 0.95 - 0.1 * c) + jitter;
    r.utility.pct_flops_tee = std::min(1.0, 0.1 * c);
  }
  return r;
}

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("tsdp_sweep_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    std::filesystem::remove_all(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

SweepSpec deep_spec(double delta) {
  return {.scheme = Scheme::Deep, .grid = {0, 1, 2, 3, 4, 5, 6}, .delta = delta, .seeds = {1, 2, 3}};
}

}  // namespace

TEST(Sweep, VacuousDeltaPicksCheapestCell) {
  const SweepResult r = sweep(deep_spec(1.0), fake);
  ASSERT_TRUE(r.chosen);
  EXPECT_EQ(*r.chosen, 0.0);
  EXPECT_EQ(r.cells.size(), 7u);
  EXPECT_EQ(r.cells[0].per_seed.size(), 3u);
}

TEST(Sweep, TinyDeltaOnlyAdmitsBlackBoxLevel) {
  const SweepResult r = sweep(deep_spec(1e-9), fake);
  ASSERT_TRUE(r.chosen);
  // Configs >= 3.5 reach the black-box floor; 4 is the cheapest of them.
  EXPECT_EQ(*r.chosen, 4.0);
  EXPECT_NEAR(r.security_black, 0.601, 1e-12);
  EXPECT_NEAR(r.security_noshield, 0.951, 1e-12);

  SweepSpec none = deep_spec(1e-9);
  none.grid = {0, 1, 2};
  EXPECT_FALSE(sweep(none, fake).chosen);
}

TEST(Sweep, ChosenMatchesBruteForceArgmin) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Cell> cells(8);
    for (auto& c : cells) {
      c.mean.ms_accuracy = rng.uniform();
      // Coarse utilities so ties occur.
      c.mean.utility.pct_flops_tee = static_cast<double>(rng.below(4)) / 4.0;
    }
    const double black = rng.uniform(), delta = rng.uniform(0.01, 0.5);
    std::optional<std::size_t> brute;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (cells[i].mean.ms_accuracy - black >= delta) continue;
      bool best = true;
      for (std::size_t k = 0; k < cells.size(); ++k) {
        if (cells[k].mean.ms_accuracy - black >= delta) continue;
        const double uk = cells[k].mean.utility.pct_flops_tee, ui = cells[i].mean.utility.pct_flops_tee;
        if (uk < ui || (uk == ui && k < i)) best = false;
      }
      if (best) brute = i;
    }
    EXPECT_EQ(choose(cells, Metric::MsAccuracy, black, delta, false), brute);
  }
}

TEST(Sweep, AbsoluteModeIsTwoSided) {
  EXPECT_TRUE(satisfies(0.2, 0.6, 0.05, false));
  EXPECT_FALSE(satisfies(0.2, 0.6, 0.05, true));
  EXPECT_FALSE(satisfies(0.66, 0.6, 0.05, false));
}

TEST(Sweep, DeterministicAcrossWorkerCounts) {
  const auto a = result_to_json(sweep(deep_spec(0.1), fake, {.workers = 1}));
  const auto b = result_to_json(sweep(deep_spec(0.1), fake, {.workers = 4}));
  EXPECT_EQ(a, b);
}

TEST(Sweep, ParameterlessSchemeIsSinglePoint) {
  const SweepResult r = sweep({.scheme = Scheme::TeeSlice, .delta = 0.05, .seeds = {1}}, fake);
  ASSERT_EQ(r.cells.size(), 1u);
  EXPECT_FALSE(r.cells[0].config);
  EXPECT_EQ(frontier(r).size(), 1u);
}

TEST(Sweep, RerunIsAllCacheHits) {
  TempDir tmp;
  const CellCache cache(tmp.path);
  std::atomic<int> calls{0}, hits{0};
  const Evaluator counting = [&](Scheme s, std::optional<double> c, std::uint64_t seed) {
    ++calls;
    return fake(s, c, seed);
  };
  SweepOptions opt{.cache = &cache, .model_hash = 7, .dataset_hash = 9};
  opt.on_cell = [&](const std::string&, bool cached) { hits += cached; };
  const auto first = result_to_json(sweep(deep_spec(0.1), counting, opt));
  EXPECT_EQ(calls.load(), 7 * 3 + 2 * 3);
  EXPECT_EQ(hits.load(), 0);
  const auto second = result_to_json(sweep(deep_spec(0.1), counting, opt));
  EXPECT_EQ(calls.load(), 7 * 3 + 2 * 3);
  EXPECT_EQ(hits.load(), 7 * 3 + 2 * 3);
  EXPECT_EQ(first, second);

  // A different model hash is a different cell.
  opt.model_hash = 8;
  sweep(deep_spec(0.1), counting, opt);
  EXPECT_EQ(calls.load(), 2 * (7 * 3 + 2 * 3));
}

TEST(Sweep, FailingCellDoesNotStopOthers) {
  TempDir tmp;
  const CellCache cache(tmp.path);
  const Evaluator flaky = [](Scheme s, std::optional<double> c, std::uint64_t seed) {
    if (c && *c == 2.0 && seed == 2) throw std::runtime_error("boom");
    return fake(s, c, seed);
  };
  EXPECT_THROW(sweep(deep_spec(0.1), flaky, {.cache = &cache}), std::runtime_error);
  int cached = 0;
  for (const auto& e : std::filesystem::directory_iterator(tmp.path)) cached += e.path().extension() == ".json";
  EXPECT_EQ(cached, 7 * 3 + 2 * 3 - 1);
}

TEST(Sweep, CacheDirEnvOverride) {
  ::setenv("TSDP_CACHE_DIR", "/tmp/override_here", 1);
  EXPECT_EQ(CellCache::resolve_dir("fallback"), "/tmp/override_here");
  ::unsetenv("TSDP_CACHE_DIR");
  EXPECT_EQ(CellCache::resolve_dir("fallback"), "fallback");
}

TEST(Frontier, SortedAndMerged) {
  SweepResult r;
  for (double u : {0.5, 0.1, 0.5, 0.3}) {
    Cell c;
    c.config = u * 10;
    c.mean.utility.pct_flops_tee = u;
    c.mean.ms_accuracy = u;
    r.cells.push_back(c);
  }
  const auto pts = frontier(r);
  ASSERT_EQ(pts.size(), 3u);
  for (std::size_t i = 1; i < pts.size(); ++i) EXPECT_LT(pts[i - 1].pct_flops_tee, pts[i].pct_flops_tee);
  EXPECT_EQ(pts[2].configs.size(), 2u);
  const std::string csv = frontier_csv(r);
  EXPECT_NE(csv.find("pct_flops_tee,security,configs\n"), std::string::npos);
  EXPECT_NE(csv.find("noshield="), std::string::npos);
}

TEST(SweepIo, ResultAndSpecRoundTrip) {
  const SweepResult r = sweep(deep_spec(0.1), fake);
  const SweepResult back = result_from_json(result_to_json(r));
  EXPECT_EQ(result_to_json(back), result_to_json(r));
  const SweepSpec s = spec_from_json(spec_to_json(deep_spec(0.2)));
  EXPECT_EQ(spec_to_json(s), spec_to_json(deep_spec(0.2)));
  EXPECT_THROW(spec_from_json({{"scheme", "deep"}, {"grid", nlohmann::json::array()}}), std::invalid_argument);
  EXPECT_THROW(spec_from_json({{"scheme", "deep"}, {"grid", {1}}, {"delta", 0.0}}), std::invalid_argument);
}

TEST(LabConfig, JsonRoundTripAndValidation) {
  lab::LabConfig c;
  c.queries = 77;
  c.prune.rounds = 3;
  const auto j = lab::config_to_json(c);
  EXPECT_EQ(lab::config_to_json(lab::config_from_json(j)), j);
  EXPECT_THROW(lab::config_from_json({{"bogus", 1}}), std::invalid_argument);
  EXPECT_THROW(lab::config_from_json({{"queries", 100000}}), std::invalid_argument);
  EXPECT_THROW(lab::config_from_json({{"prune", {{"delta", 0.0}}}}), std::invalid_argument);

  lab::LabConfig d = c;
  d.private_noise = 0.9;
  EXPECT_NE(lab::recipe_dataset_hash(c), lab::recipe_dataset_hash(d));
  EXPECT_EQ(lab::recipe_model_hash(c), lab::recipe_model_hash(d));
  EXPECT_EQ(lab::cell_key(Scheme::Magnitude, 0.01, 3), "magnitude@0.01#3");
  EXPECT_EQ(lab::cell_key(Scheme::BlackBox, std::nullopt, 1), "blackbox#1");
}
