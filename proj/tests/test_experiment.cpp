#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "tsdp/experiment.hpp"
#include "tsdp/partition.hpp"
#include "tsdp/schema.hpp"

using namespace tsdp;
namespace fs = std::filesystem;

namespace {

const nlohmann::json kSchema = nlohmann::json::parse(R"({
  "type": "object", "additionalProperties": false, "required": ["a"],
  "properties": {
    "a": {"type": "integer", "minimum": 1, "maximum": 5},
    "b": {"type": ["string", "null"]},
    "c": {"type": "array", "minItems": 2, "uniqueItems": true, "items": {"enum": [1, 2, 3]}},
    "d": {"type": "number", "exclusiveMinimum": 0}
  }
})");

bool mentions(const std::vector<std::string>& errs, const std::string& needle) {
  for (const auto& e : errs)
    if (e.find(needle) != std::string::npos) return true;
  return false;
}

nlohmann::json minimal_config() {
  return {{"output_dir", "out"}, {"seeds", {1}}, {"schemes", nlohmann::json::array({{{"scheme", "deep"}}})}};
}

// Small enough that a whole run takes seconds.
lab::LabConfig tiny_lab() {
  lab::LabConfig c;
  c.side = 8;
  c.channels = 1;
  c.width = 4;
  c.public_classes = 4;
  c.public_per_class = 16;
  c.public_epochs = 2;
  c.private_classes = 2;
  c.private_per_class = 20;
  c.attacker_per_class = 10;
  c.victim_epochs = 2;
  c.queries = 8;
  c.steal_epochs = 2;
  c.pgd.steps = 2;
  c.prune.rounds = 1;
  return c;
}

std::vector<attacks::AttackReport> read_csv(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, attacks::report_csv_header());
  std::vector<attacks::AttackReport> out;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(attacks::report_from_csv_row(line));
  return out;
}

}  // namespace

TEST(Schema, AcceptsValidInstance) {
  EXPECT_TRUE(schema::validate(kSchema, {{"a", 3}, {"b", nullptr}, {"c", {1, 2}}, {"d", 0.5}}).empty());
  EXPECT_TRUE(schema::validate(kSchema, {{"a", 2.0}}).empty());
}

TEST(Schema, ReportsEachViolationWithPointer) {
  const auto errs = schema::validate(kSchema, {{"b", 4}, {"c", {1, 1, 7}}, {"d", 0}, {"e", true}});
  EXPECT_TRUE(mentions(errs, "/: missing required 'a'"));
  EXPECT_TRUE(mentions(errs, "/b: expected type"));
  EXPECT_TRUE(mentions(errs, "/c: duplicate item 1"));
  EXPECT_TRUE(mentions(errs, "/c/2: value 7 not in"));
  EXPECT_TRUE(mentions(errs, "/d: 0 must exceed 0"));
  EXPECT_TRUE(mentions(errs, "unexpected property 'e'"));
  EXPECT_TRUE(mentions(schema::validate(kSchema, {{"a", 9}}), "above maximum"));
  EXPECT_TRUE(mentions(schema::validate(kSchema, {{"a", 0}}), "below minimum"));
  EXPECT_TRUE(mentions(schema::validate(kSchema, {{"a", 1.5}}), "/a: expected type"));
  EXPECT_TRUE(mentions(schema::validate(kSchema, {{"a", 1}, {"c", {1}}}), "fewer than 2"));
}

TEST(Schema, UnsupportedKeywordThrows) {
  EXPECT_THROW(schema::validate(nlohmann::json{{"pattern", "x"}}, "x"), std::invalid_argument);
}

TEST(ExperimentConfig, MinimalConfigTakesDefaults) {
  const auto c = experiment::config_from_json(minimal_config());
  EXPECT_EQ(c.workers, 1u);
  EXPECT_EQ(c.metric, sweetspot::Metric::MsAccuracy);
  EXPECT_DOUBLE_EQ(c.delta, 0.05);
  EXPECT_EQ(c.assumption, attacks::Assumption::BackboneOnly);
  ASSERT_EQ(c.schemes.size(), 1u);
  EXPECT_TRUE(c.schemes[0].grid.empty());
  const auto back = experiment::config_from_json(experiment::config_to_json(c));
  EXPECT_EQ(experiment::config_to_json(back), experiment::config_to_json(c));
}

TEST(ExperimentConfig, SchemaErrorsAreCollected) {
  auto j = minimal_config();
  j["seeds"] = nlohmann::json::array();
  j["delta"] = -1;
  j["schemes"][0]["scheme"] = "nope";
  j["bogus"] = 1;
  try {
    experiment::config_from_json(j);
    FAIL() << "expected ConfigError";
  } catch (const experiment::ConfigError& e) {
    EXPECT_EQ(e.errors().size(), 4u);
    EXPECT_TRUE(mentions(e.errors(), "/seeds"));
    EXPECT_TRUE(mentions(e.errors(), "/delta"));
    EXPECT_TRUE(mentions(e.errors(), "/schemes/0/scheme"));
    EXPECT_TRUE(mentions(e.errors(), "bogus"));
  }
}

TEST(ExperimentConfig, SemanticErrors) {
  auto dup = minimal_config();
  dup["schemes"].push_back({{"scheme", "deep"}});
  EXPECT_THROW(experiment::config_from_json(dup), experiment::ConfigError);
  auto grid = minimal_config();
  grid["schemes"] = {{{"scheme", "blackbox"}, {"grid", {1}}}};
  EXPECT_THROW(experiment::config_from_json(grid), experiment::ConfigError);
  auto lab = minimal_config();
  lab["lab"] = {{"private_per_class", 3}, {"private_classes", 3}};
  EXPECT_THROW(experiment::config_from_json(lab), experiment::ConfigError);
}

TEST(ExperimentConfig, ResolveGrid) {
  const lab::LabConfig cfg;
  EXPECT_TRUE(experiment::resolve_grid({Scheme::BlackBox, {}}, cfg).empty());
  EXPECT_EQ(experiment::resolve_grid({Scheme::Deep, {2, 3}}, cfg), (std::vector<double>{2, 3}));
  const auto g = experiment::resolve_grid({Scheme::Magnitude, {}}, cfg);
  ASSERT_FALSE(g.empty());
  EXPECT_TRUE(std::is_sorted(g.begin(), g.end()));
}

TEST(RenderMatrix, MarksExtremesAndRelativeRows) {
  attacks::AttackReport a, b;
  a.scheme = "noshield";
  a.ms_accuracy = 0.9;
  b.scheme = "blackbox";
  b.ms_accuracy = 0.3;
  const std::string t = experiment::render_matrix({a, b});
  EXPECT_NE(t.find("0.900+"), std::string::npos);
  EXPECT_NE(t.find("0.300-"), std::string::npos);
  EXPECT_NE(t.find("rel_ms_accuracy"), std::string::npos);
  EXPECT_NE(t.find("3.000+"), std::string::npos);
}

TEST(RunExperiment, ArtifactTreeAndCacheReuse) {
  unsetenv("TSDP_CACHE_DIR");
  const fs::path root = fs::temp_directory_path() / "tsdp_run_experiment_test";
  fs::remove_all(root);
  experiment::ExperimentConfig cfg;
  cfg.output_dir = root;
  cfg.seeds = {1, 2};
  cfg.workers = 2;
  cfg.lab = tiny_lab();
  cfg.schemes = {{Scheme::Deep, {1, 2}}, {Scheme::NoShield, {}}};
  cfg.delta = 1.0;

  const auto first = experiment::run_experiment(cfg);
  EXPECT_EQ(first.exit_code(), 0);
  // Distinct cells per seed: deep@1, deep@2, noshield, blackbox.
  EXPECT_EQ(first.cells_computed, 2u * 4);

  for (const char* d : {"models", "datasets", "plans", "reports", "sweeps", "logs", "cache"})
    EXPECT_TRUE(fs::is_directory(root / d)) << d;
  EXPECT_TRUE(fs::exists(root / "experiment.json"));
  EXPECT_TRUE(fs::exists(root / "models" / "victim_s1.tsdp"));
  EXPECT_TRUE(fs::exists(root / "datasets" / "target_test_s2.tsds"));
  EXPECT_TRUE(fs::exists(root / "plans" / "deep@2#1.json"));
  EXPECT_TRUE(fs::exists(root / "sweeps" / "deep.json"));
  EXPECT_TRUE(fs::exists(root / "sweeps" / "deep_frontier.csv"));

  const auto cells = read_csv(root / "reports" / "cells.csv");
  EXPECT_EQ(cells.size(), 2u * 2 + 2 * 2);  // deep, noshield, blackbox per seed
  for (const auto& r : cells) {
    EXPECT_GE(r.ms_accuracy, 0.0);
    EXPECT_LE(r.ms_accuracy, 1.0);
  }
  const auto sum = read_csv(root / "reports" / "summary.csv");
  ASSERT_EQ(sum.size(), 4u);
  EXPECT_EQ(sum[0].scheme, "deep");
  ASSERT_TRUE(sum[0].config.has_value());
  EXPECT_DOUBLE_EQ(*sum[0].config, 1.0);  // vacuous delta: cheapest config

  const auto second = experiment::run_experiment(cfg);
  EXPECT_EQ(second.exit_code(), 0);
  EXPECT_EQ(second.cells_computed, 0u);
  std::stringstream log;
  log << std::ifstream(root / "logs" / "run.log").rdbuf();
  // All cells hit the cache, so no lab is rebuilt.
  std::size_t trained = 0;
  for (auto at = log.str().find("training public model"); at != std::string::npos;
       at = log.str().find("training public model", at + 1))
    ++trained;
  EXPECT_EQ(trained, 2u);
  fs::remove_all(root);
}

TEST(RunExperiment, EmptySchemesOnlyPreparesLabs) {
  unsetenv("TSDP_CACHE_DIR");
  const fs::path root = fs::temp_directory_path() / "tsdp_run_prepare_test";
  fs::remove_all(root);
  experiment::ExperimentConfig cfg;
  cfg.output_dir = root;
  cfg.seeds = {3};
  cfg.lab = tiny_lab();
  EXPECT_EQ(experiment::run_experiment(cfg).exit_code(), 0);
  EXPECT_TRUE(fs::exists(root / "models" / "lab_s3.json"));
  EXPECT_TRUE(fs::exists(root / "datasets" / "attacker_pool_s3.tsds"));
  EXPECT_FALSE(fs::exists(root / "reports" / "cells.csv"));
  fs::remove_all(root);
}
