#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <set>

#include "tsdp/datagen.hpp"
#include "tsdp/serialize.hpp"
#include "tsdp/train.hpp"

using namespace tsdp;
using namespace tsdp::data;

namespace {

std::vector<std::size_t> histogram(const Dataset& d) {
  std::vector<std::size_t> h(d.n_classes, 0);
  for (int y : d.labels) ++h[static_cast<std::size_t>(y)];
  return h;
}

// Oracle: assign each image to the closest class template in L2.
double nearest_template_accuracy(const Dataset& d, const GenOptions& opt, std::size_t side) {
  std::vector<Tensor> tmpl;
  for (std::size_t k = 0; k < d.n_classes; ++k) {
    tmpl.push_back(class_template(opt, d.n_classes, side, k));
  }
  const std::size_t rs = d.images.row_size();
  std::size_t hit = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t k = 0; k < tmpl.size(); ++k) {
      double s = 0.0;
      for (std::size_t j = 0; j < rs; ++j) {
        const double q = d.images[i * rs + j] - tmpl[k][j];
        s += q * q;
      }
      if (s < best_d) {
        best_d = s;
        best = k;
      }
    }
    hit += best == static_cast<std::size_t>(d.labels[i]);
  }
  return static_cast<double>(hit) / static_cast<double>(d.size());
}

}  // namespace

TEST(GenSynthetic, Deterministic) {
  const Dataset a = gen_synthetic(3, 10, 8, 42);
  const Dataset b = gen_synthetic(3, 10, 8, 42);
  EXPECT_EQ(a.images, b.images);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_NE(gen_synthetic(3, 10, 8, 43).images, a.images);
}

TEST(GenSynthetic, NoiselessSampleEqualsTemplate) {
  GenOptions opt;
  opt.noise_sd = 0.0;
  opt.jitter = 0;
  opt.contrast = 0.0;
  const Dataset d = gen_synthetic(4, 1, 6, 9, opt);
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_EQ(d.images.slice_rows(k, k + 1).reshaped({3, 6, 6}), class_template(opt, 4, 6, k));
  }
}

TEST(GenSynthetic, ValuesInUnitRange) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    GenOptions opt;
    opt.noise_sd = 2.0;
    const Dataset d = gen_synthetic(3, 20, 8, seed, opt);
    for (double v : d.images.vec()) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
    }
  }
}

TEST(GenSynthetic, DistributionsHaveDifferentTemplates) {
  GenOptions pub, priv;
  priv.distribution = "private";
  EXPECT_NE(class_template(pub, 4, 12, 0), class_template(priv, 4, 12, 0));
}

TEST(GenSynthetic, RejectsBadArguments) {
  EXPECT_THROW(gen_synthetic(1, 10, 8, 0), std::invalid_argument);
  EXPECT_THROW(gen_synthetic(2, 10, 3, 0), std::invalid_argument);
}

TEST(GenSynthetic, LearnableByTwoLayerCnn) {
  const GenOptions opt;
  const Dataset d = gen_synthetic(4, 500, 12, 1, opt);
  EXPECT_GE(nearest_template_accuracy(d, opt, 12), 0.9);
  auto [train, test] = stratified_split(d, 1000, 2);
  GraphBuilder b({3, 12, 12}, 3);
  int x = b.conv(GraphBuilder::kInput, "conv", 8, 3, 2, 1);
  x = b.relu(x, "relu");
  b.linear(x, "fc", 4);
  nn::TrainConfig cfg;
  cfg.epochs = 20;
  cfg.learning_rate = 0.02;
  const ModelGraph m = nn::train_sgd(std::move(b).build(), train, cfg);
  EXPECT_GE(nn::accuracy(m, test), 0.9);
}

TEST(MiaSplit, FourDisjointEqualStratifiedQuarters) {
  const Dataset d = gen_synthetic(4, 100, 6, 1);
  const MiaSplit s = make_mia_split(d, 7);
  std::set<std::size_t> all;
  for (const auto& idx : s.indices) {
    EXPECT_EQ(idx.size(), 100u);
    all.insert(idx.begin(), idx.end());
  }
  EXPECT_EQ(all.size(), 400u);
  for (const Dataset* part : {&s.target_train, &s.target_test, &s.shadow_train, &s.shadow_test}) {
    EXPECT_EQ(histogram(*part), (std::vector<std::size_t>{25, 25, 25, 25}));
  }
}

TEST(MiaSplit, PropertyOverManySeeds) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    // Uneven class counts exercise the leftover dealing.
    const Dataset d = gen_synthetic(3, 4 + seed % 5 * 4 + 4, 4, seed);
    if (d.size() % 4 != 0) continue;
    const MiaSplit s = make_mia_split(d, seed);
    std::vector<int> owner(d.size(), -1);
    for (int p = 0; p < 4; ++p) {
      ASSERT_EQ(s.indices[p].size(), d.size() / 4);
      for (std::size_t r : s.indices[p]) {
        ASSERT_EQ(owner[r], -1) << "row in two parts";
        owner[r] = p;
      }
    }
    ASSERT_TRUE(std::none_of(owner.begin(), owner.end(), [](int o) { return o < 0; }));
    ASSERT_EQ(s.target_train.size(), s.target_test.size());
  }
}

TEST(MiaSplit, RejectsIndivisibleSize) {
  EXPECT_THROW(make_mia_split(gen_synthetic(2, 3, 4, 0), 0), std::invalid_argument);
}

TEST(Queryset, BudgetBounds) {
  const Dataset d = gen_synthetic(2, 25, 4, 0);
  EXPECT_EQ(make_attacker_queryset(d, 0, 1).size(), 0u);
  const QuerySet all = make_attacker_queryset(d, d.size(), 1);
  std::vector<std::size_t> rows = all.source_rows;
  std::sort(rows.begin(), rows.end());
  for (std::size_t i = 0; i < rows.size(); ++i) EXPECT_EQ(rows[i], i);
  EXPECT_THROW(make_attacker_queryset(d, d.size() + 1, 1), std::invalid_argument);
}

TEST(Queryset, AcceptsSweepBudgets) {
  const Dataset d = gen_synthetic(4, 250, 4, 0);
  for (std::size_t budget : {50, 100, 300, 500, 1000}) {
    const QuerySet q = make_attacker_queryset(d, budget, 3);
    EXPECT_EQ(q.size(), budget);
    EXPECT_EQ(q.images.dim(0), budget);
    EXPECT_EQ(std::set<std::size_t>(q.source_rows.begin(), q.source_rows.end()).size(), budget);
  }
}

TEST(DatasetFile, RoundTrip) {
  const Dataset d = gen_synthetic(3, 5, 6, 11);
  const auto path = std::filesystem::temp_directory_path() / "tsdp_test_roundtrip.tsds";
  io::save_dataset(d, path);
  const Dataset e = io::load_dataset(path);
  EXPECT_EQ(e.images, d.images);
  EXPECT_EQ(e.labels, d.labels);
  EXPECT_EQ(e.n_classes, d.n_classes);
  EXPECT_EQ(e.distribution, d.distribution);
  EXPECT_EQ(dataset_hash(e), dataset_hash(d));
  std::filesystem::remove(path);
}
