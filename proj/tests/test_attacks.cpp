#include <gtest/gtest.h>

#include <cmath>

#include "tsdp/attacks.hpp"
#include "tsdp/datagen.hpp"
#include "tsdp/engine.hpp"
#include "tsdp/models.hpp"
#include "tsdp/partition.hpp"
#include "tsdp/teeslice.hpp"

using namespace tsdp;
using namespace tsdp::attacks;

namespace {

nn::TrainConfig quick(std::size_t epochs, double wd = 5e-4) {
  nn::TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 16;
  c.weight_decay = wd;
  c.seed = 3;
  return c;
}

const ModelGraph& public_model() {
  static const ModelGraph g = build_toy_cnn({}, 17);
  return g;
}

const Dataset& private_data() {
  static const Dataset d = data::gen_synthetic(4, 40, 12, 5, {.distribution = "private", .noise_sd = 0.4});
  return d;
}

// Public features with a fine-tuned head and backbone: differs from the
// public model in every layer.
const ModelGraph& victim() {
  static const ModelGraph v = nn::train_sgd(replace_head(public_model(), 4, 5), private_data(), quick(4));
  return v;
}

const Tensor& param(const ModelGraph& g, std::string_view node, const std::string& p) {
  return g.node(g.index_of(node)).layer.params.at(p);
}

double norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

TEST(LabelOracle, ReturnsVictimArgmaxAndCountsQueries) {
  const LabelOracle oracle(victim());
  const Tensor x = private_data().images.slice_rows(0, 10);
  EXPECT_EQ(oracle.query(x), nn::predict(victim(), x));
  oracle.query(x.slice_rows(0, 3));
  EXPECT_EQ(oracle.queries(), 13u);
  EXPECT_EQ(oracle.n_classes(), 4u);
}

TEST(SurrogateInit, NoShieldIsCompleteVictim) {
  const auto plan = partition::plan_noshield(victim());
  const SurrogateInit si = surrogate_init(plan, victim(), public_model());
  EXPECT_TRUE(si.complete);
  const LabelOracle oracle(victim());
  const auto q = data::make_attacker_queryset(private_data(), 20, 1);
  const ModelGraph s = model_steal(si, oracle, q, quick(3));
  EXPECT_EQ(oracle.queries(), 0u);
  const Tensor x = private_data().images;
  EXPECT_EQ(nn::logits(s, x), nn::logits(victim(), x));
}

TEST(SurrogateInit, BlackBoxKeepsPublicBackbone) {
  const auto plan = partition::plan_blackbox(victim());
  const SurrogateInit si = surrogate_init(plan, victim(), public_model(), {.seed = 4});
  EXPECT_FALSE(si.complete);
  EXPECT_TRUE(si.transplanted.empty());
  const ModelGraph ref = replace_head(public_model(), 4, derive_seed(4, "surrogate_head"));
  for (std::size_t i = 0; i < ref.size(); ++i) {
    EXPECT_EQ(si.base.node(i).layer.params, ref.node(i).layer.params) << i;
  }
}

TEST(SurrogateInit, DeepCopiesGpuLayersOnly) {
  const auto plan = partition::plan_deep(victim(), 1);
  const SurrogateInit si = surrogate_init(plan, victim(), public_model());
  for (std::size_t i = 0; i < victim().size(); ++i) {
    const auto& params = victim().node(i).layer.params;
    if (params.empty()) continue;
    if (plan.at(i) == Placement::GPU) {
      EXPECT_EQ(si.base.node(i).layer.params, params) << i;
    } else {
      EXPECT_NE(si.base.node(i).layer.params, params) << i;
    }
  }
  EXPECT_EQ(param(si.base, "conv1", "weight"), param(victim(), "conv1", "weight"));
}

TEST(SurrogateInit, MagnitudeCopiesUnmaskedEntries) {
  const auto plan = partition::plan_magnitude(victim(), 0.05);
  const SurrogateInit si = surrogate_init(plan, victim(), public_model());
  ASSERT_FALSE(plan.weight_masks.empty());
  // Shielded entries keep the attacker's own initialisation.
  const ModelGraph init = replace_head(public_model(), 4, derive_seed(0, "surrogate_head"));
  for (const auto& [node, mask] : plan.weight_masks) {
    const std::string p(mask_param(victim().node(node).layer.kind));
    const Tensor& got = si.base.node(node).layer.params.at(p);
    const Tensor& vic = victim().node(node).layer.params.at(p);
    const Tensor& pub = init.node(node).layer.params.at(p);
    for (std::size_t k = 0; k < mask.size(); ++k) {
      EXPECT_EQ(got[k], mask[k] ? pub[k] : vic[k]);
    }
  }
}

TEST(SurrogateInit, IntermediateSeesBlindedWeights) {
  const auto plan = partition::plan_intermediate(victim(), 0.2, 6);
  const SurrogateInit si = surrogate_init(plan, victim(), public_model());
  ASSERT_FALSE(plan.scalars.empty());
  for (const auto& [node, s] : plan.scalars) {
    const Tensor& got = si.base.node(node).layer.params.at("weight");
    const Tensor& vic = victim().node(node).layer.params.at("weight");
    for (std::size_t k = 0; k < got.size(); ++k) EXPECT_EQ(got[k], s * vic[k]);
  }
  EXPECT_FALSE(si.complete);
}

TEST(SurrogateInit, ObfuscatedLayersGoThroughRecovery) {
  const auto plan = partition::plan_nonlinear_obf(victim());
  const SurrogateInit si = surrogate_init(plan, victim(), public_model(), {.seed = 8});
  std::size_t obf = 0;
  for (std::size_t i = 0; i < plan.size(); ++i) obf += plan.at(i) == Placement::OBFUSCATED;
  EXPECT_EQ(si.recovery.size(), obf);
  for (const auto& [name, rep] : si.recovery) {
    EXPECT_EQ(rep.recovered.shape(), param(victim(), name, "weight").shape());
    EXPECT_EQ(param(si.base, name, "weight"), rep.recovered);
  }
}

TEST(SurrogateInit, HybridKnownOnlyForTeeSlice) {
  EXPECT_THROW(surrogate_init(partition::plan_blackbox(victim()), victim(), public_model(),
                              {.assumption = Assumption::HybridKnown}),
               std::invalid_argument);

  const auto hybrid = teeslice::build_dense(public_model(), 4, 2);
  const auto plan = teeslice::deploy_plan(hybrid);
  const SurrogateInit known =
      surrogate_init(plan, hybrid.graph, public_model(), {.assumption = Assumption::HybridKnown});
  EXPECT_EQ(known.base.size(), hybrid.graph.size());
  for (std::size_t i = 0; i < plan.size(); ++i) {
    if (plan.at(i) == Placement::GPU) {
      EXPECT_EQ(known.base.node(i).layer.params, hybrid.graph.node(i).layer.params);
    }
  }
  EXPECT_NE(param(known.base, "fc", "weight"), param(hybrid.graph, "fc", "weight"));

  const SurrogateInit bare = surrogate_init(plan, hybrid.graph, public_model());
  EXPECT_EQ(bare.base.size(), public_model().size());
  for (const auto& name : hybrid.backbone_nodes) {
    EXPECT_EQ(bare.base.node(bare.base.index_of(name)).layer.params,
              public_model().node(public_model().index_of(name)).layer.params);
  }
}

TEST(ModelSteal, ZeroBudgetReturnsInit) {
  const auto plan = partition::plan_blackbox(victim());
  const SurrogateInit si = surrogate_init(plan, victim(), public_model());
  const LabelOracle oracle(victim());
  const ModelGraph s = model_steal(si, oracle, {}, quick(3));
  for (std::size_t i = 0; i < s.size(); ++i) EXPECT_EQ(s.node(i).layer.params, si.base.node(i).layer.params);
}

TEST(ModelSteal, QueriesMoveSurrogateTowardsVictim) {
  const auto plan = partition::plan_blackbox(victim());
  const SurrogateInit si = surrogate_init(plan, victim(), public_model());
  const LabelOracle oracle(victim());
  const auto q = data::make_attacker_queryset(private_data(), 80, 2);
  const ModelGraph s = model_steal(si, oracle, q, quick(15));
  EXPECT_EQ(oracle.queries(), 80u);
  const auto vp = nn::predict(victim(), private_data().images);
  EXPECT_GT(nn::accuracy(nn::predict(s, private_data().images), vp),
            nn::accuracy(nn::predict(si.base, private_data().images), vp));
}

TEST(LogisticRegression, RecoversGeneratingModel) {
  Rng rng(11);
  std::vector<std::vector<double>> x;
  std::vector<int> y;
  for (int i = 0; i < 20000; ++i) {
    const double v = rng.normal(0.0, 1.0);
    x.push_back({v, 3.0});  // constant column must not break standardisation
    y.push_back(rng.uniform() < nn::sigmoid(2.0 * v - 1.0) ? 1 : 0);
  }
  LogisticRegression lr;
  lr.fit(x, y);
  EXPECT_NEAR(lr.predict_proba({0.0, 3.0}), nn::sigmoid(-1.0), 0.03);
  EXPECT_NEAR(lr.predict_proba({1.0, 3.0}), nn::sigmoid(1.0), 0.03);
  EXPECT_EQ(lr.predict({2.0, 3.0}), 1);
  EXPECT_EQ(lr.predict({-2.0, 3.0}), 0);
}

TEST(MiaFeatures, ConfidenceIsSortedTopThree) {
  const auto f = confidence_features(victim(), private_data().images.slice_rows(0, 6));
  ASSERT_EQ(f.size(), 6u);
  for (const auto& r : f) {
    ASSERT_EQ(r.size(), 3u);
    EXPECT_GE(r[0], r[1]);
    EXPECT_GE(r[1], r[2]);
    EXPECT_LE(r[0] + r[1] + r[2], 1.0 + 1e-12);
  }
  const auto two = confidence_features(replace_head(public_model(), 2, 1), private_data().images.slice_rows(0, 2));
  EXPECT_EQ(two[0][2], 0.0);
  EXPECT_NEAR(two[0][0] + two[0][1], 1.0, 1e-12);
}

TEST(MiaFeatures, GradientMatchesBackprop) {
  const Dataset one = private_data().subset(std::vector<std::size_t>{7});
  const auto f = gradient_features(victim(), one);
  ASSERT_EQ(f.size(), 1u);
  ASSERT_EQ(f[0].size(), 3u);

  nn::Trace tr;
  const Tensor out = nn::run(victim(), one.images, nn::Mode::Eval, &tr);
  Tensor g;
  const double loss = nn::softmax_cross_entropy(out, one.labels, &g);
  EXPECT_NEAR(f[0][0], loss, 1e-12);

  nn::ParamGrads grads(victim().size());
  const Tensor gx = nn::backward(victim(), tr, g, &grads, true);
  EXPECT_NEAR(f[0][1], norm(gx.vec()), 1e-9);
  const std::size_t fc = victim().index_of("fc");
  const double w = norm(grads[fc].at("weight").vec()), b = norm(grads[fc].at("bias").vec());
  EXPECT_NEAR(f[0][2], std::sqrt(w * w + b * b), 1e-9);
}

TEST(Mia, OverfitTargetIsDetectedUntrainedIsNot) {
  const Dataset pool = data::gen_synthetic(4, 60, 12, 21, {.distribution = "private", .noise_sd = 0.9});
  const auto split = data::make_mia_split(pool, 4);
  auto overfit = [&](const Dataset& d, std::uint64_t seed) {
    nn::TrainConfig c = quick(40, 0.0);
    c.seed = seed;
    c.lr_decay_every = 0;
    return nn::train_sgd(build_toy_cnn({}, seed), d, c);
  };
  const ModelGraph shadow = overfit(split.shadow_train, 31);
  const ModelGraph target = overfit(split.target_train, 32);
  const MiaAttack conf(shadow, split, MiaFeatures::Confidence);
  const MiaAttack grad(shadow, split, MiaFeatures::Gradient);
  EXPECT_GT(conf.evaluate(target, split).accuracy, 0.55);
  EXPECT_GT(grad.evaluate(target, split).accuracy, 0.55);
  EXPECT_NEAR(mia_confidence(build_toy_cnn({}, 99), shadow, split), 0.5, 0.1);
}

TEST(Mia, ConstantFeaturesAreDegenerate) {
  const auto split = data::make_mia_split(private_data(), 4);
  ModelGraph flat = build_toy_cnn({}, 1);
  for (auto& [name, t] : flat.node(flat.index_of("fc")).layer.params) t.fill(0.0);
  const MiaAttack a(flat, split, MiaFeatures::Confidence);
  EXPECT_TRUE(a.degenerate());
  const MiaResult r = a.evaluate(victim(), split);
  EXPECT_TRUE(r.degenerate);
  EXPECT_EQ(r.accuracy, 0.5);
}

TEST(Metrics, SelfSurrogateAndBounds) {
  const auto split = data::make_mia_split(private_data(), 4);
  const Dataset test = data::gen_synthetic(4, 20, 12, 77, {.distribution = "private", .noise_sd = 0.4});
  const MiaAttack conf(victim(), split, MiaFeatures::Confidence);
  const MiaAttack grad(victim(), split, MiaFeatures::Gradient);

  const AttackReport self = compute_metrics(victim(), victim(), test, split, conf, grad);
  EXPECT_DOUBLE_EQ(self.fidelity, 1.0);
  EXPECT_DOUBLE_EQ(self.ms_accuracy, nn::accuracy(victim(), test));

  const ModelGraph other = replace_head(public_model(), 4, 12);
  const AttackReport r = compute_metrics(other, victim(), test, split, conf, grad);
  const double acc_vic = nn::accuracy(victim(), test);
  EXPECT_GE(r.fidelity + 1e-12, r.ms_accuracy - (1.0 - acc_vic));
  for (double v : {r.ms_accuracy, r.fidelity, r.asr, r.conf_mia_acc, r.grad_mia_acc}) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_GE(self.asr, 0.0);
}

TEST(Metrics, UntrainedSurrogateHasNoGeneralizationGap) {
  // Train and test quarters are drawn from one distribution; a model that has
  // seen neither shows no systematic gap.
  const Dataset pool = data::gen_synthetic(4, 200, 12, 3, {.distribution = "private", .noise_sd = 0.4});
  const auto split = data::make_mia_split(pool, 9);
  const ModelGraph fresh = build_toy_cnn({}, 50);
  const MiaAttack conf(fresh, split, MiaFeatures::Confidence);
  const MiaAttack grad(fresh, split, MiaFeatures::Gradient);
  const AttackReport r = compute_metrics(fresh, victim(), split.target_test, split, conf, grad);
  EXPECT_NEAR(r.generalization_gap, 0.0, 0.1);
  EXPECT_NEAR(r.confidence_gap, 0.0, 0.05);
}

TEST(Report, CsvAndJsonRoundTrip) {
  AttackReport r;
  r.scheme = "magnitude";
  r.config = 0.01;
  r.seed = 42;
  r.ms_accuracy = 0.1 + 0.2;
  r.fidelity = 2.0 / 3.0;
  r.asr = 0.25;
  r.conf_mia_acc = 0.51;
  r.grad_mia_acc = 0.49;
  r.generalization_gap = -0.125;
  r.confidence_gap = 1e-17;
  r.queries = 100;
  r.utility = {.flops_tee = 10, .flops_gpu = 90, .flops_total = 100, .pct_flops_tee = 0.1, .sim_latency = 3.5};
  r.skipped = {"asr: none, really", "x"};

  const AttackReport c = report_from_csv_row(report_csv_row(r));
  EXPECT_EQ(c.scheme, r.scheme);
  EXPECT_EQ(c.config, r.config);
  EXPECT_EQ(c.seed, r.seed);
  EXPECT_EQ(c.ms_accuracy, r.ms_accuracy);
  EXPECT_EQ(c.fidelity, r.fidelity);
  EXPECT_EQ(c.confidence_gap, r.confidence_gap);
  EXPECT_EQ(c.utility.flops_tee, 10u);
  EXPECT_EQ(c.utility.pct_flops_tee, 0.1);
  EXPECT_EQ(c.skipped.size(), 2u);
  EXPECT_EQ(c.mia_classifier, "logreg-top3");

  AttackReport bare;
  bare.scheme = "blackbox";
  EXPECT_FALSE(report_from_csv_row(report_csv_row(bare)).config.has_value());
  EXPECT_THROW(report_from_csv_row("a,b"), std::invalid_argument);

  const AttackReport j = report_from_json(report_to_json(r));
  EXPECT_EQ(j.fidelity, r.fidelity);
  EXPECT_EQ(j.skipped, r.skipped);
  EXPECT_EQ(j.utility.sim_latency, 3.5);
  EXPECT_EQ(report_csv_header().find(','), 6u);
}
