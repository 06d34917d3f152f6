#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tsdp/adversarial.hpp"
#include "tsdp/datagen.hpp"
#include "tsdp/dataset.hpp"
#include "tsdp/flops.hpp"
#include "tsdp/graph.hpp"
#include "tsdp/plan.hpp"
#include "tsdp/shadownet.hpp"
#include "tsdp/train.hpp"

// Surrogate initialisation from offloaded weights, query-based model
// stealing, membership inference, and the per-cell security metrics.
namespace tsdp::attacks {

enum class Assumption { HybridKnown, BackboneOnly, VictimKnown };
std::string_view to_string(Assumption a);
Assumption assumption_from_string(std::string_view s);

// Query access to a deployed model that returns class ids only. The oracle
// owns a label-only copy of the model, so posteriors are unreachable.
class LabelOracle {
 public:
  explicit LabelOracle(ModelGraph deployed);
  std::vector<int> query(const Tensor& images) const;
  std::size_t queries() const { return queries_; }
  std::size_t n_classes() const { return n_classes_; }

 private:
  ModelGraph model_;
  std::size_t n_classes_;
  mutable std::size_t queries_ = 0;
};

struct SurrogateInit {
  ModelGraph base;
  // Node indices (in base) holding weights copied from the offloaded part.
  std::vector<std::size_t> transplanted;
  Assumption assumption = Assumption::BackboneOnly;
  // True when every parameter of the deployed model was visible, in which
  // case the offloaded model is used as the surrogate as is.
  bool complete = false;
  // Filled for obfuscated layers: layer name -> recovery statistics.
  std::vector<std::pair<std::string, shadownet::RecoveryReport>> recovery;
  std::vector<std::string> notes;
};

struct InitOptions {
  Assumption assumption = Assumption::BackboneOnly;
  // Seed of the deployment (ShadowNet obfuscation keys) and of fresh heads.
  std::uint64_t seed = 0;
  // Unmasking threshold = ratio * variance of the public layer's weights.
  double unmask_threshold_ratio = 10.0;
};

// Builds M_init from the public model and whatever the plan leaves visible
// on the GPU. `deployed` is the model the plan partitions (the victim, or the
// hybrid model for TeeSlice). Throws std::invalid_argument when the
// assumption does not fit the plan or the architectures are incompatible.
SurrogateInit surrogate_init(const PartitionPlan& plan, const ModelGraph& deployed,
                             const ModelGraph& public_model, const InitOptions& opt = {});

// Trains M_init on the queryset labelled by the oracle. An empty queryset
// returns M_init unchanged; so does a complete transplant.
ModelGraph model_steal(const SurrogateInit& si, const LabelOracle& oracle, const data::QuerySet& queries,
                       const nn::TrainConfig& cfg);

// Binary logistic regression on standardised features, fitted by Newton
// iterations with a small ridge term.
class LogisticRegression {
 public:
  void fit(const std::vector<std::vector<double>>& x, const std::vector<int>& y);
  double predict_proba(const std::vector<double>& x) const;
  int predict(const std::vector<double>& x) const { return predict_proba(x) >= 0.5 ? 1 : 0; }
  const std::vector<double>& weights() const { return w_; }

 private:
  std::vector<double> mean_, sd_, w_;  // w_.back() is the bias
};

// Sorted (descending) top-3 posteriors per sample, zero padded.
std::vector<std::vector<double>> confidence_features(const ModelGraph& m, const Tensor& images);
// (loss, input-gradient norm, last-layer parameter-gradient norm) per sample.
std::vector<std::vector<double>> gradient_features(const ModelGraph& m, const Dataset& d);

struct MiaResult {
  double accuracy = 0.5;
  bool degenerate = false;
};

// Membership attack: fit on the shadow model's features over shadow_train
// (members) and shadow_test (non-members), score the target model over
// target_train and target_test. Returns balanced accuracy.
enum class MiaFeatures { Confidence, Gradient };
class MiaAttack {
 public:
  MiaAttack(const ModelGraph& shadow, const data::MiaSplit& split, MiaFeatures kind);
  MiaResult evaluate(const ModelGraph& target, const data::MiaSplit& split) const;
  bool degenerate() const { return degenerate_; }

 private:
  std::vector<std::vector<double>> features(const ModelGraph& m, const Dataset& d) const;
  MiaFeatures kind_;
  LogisticRegression clf_;
  bool degenerate_ = false;
};

double mia_confidence(const ModelGraph& surrogate, const ModelGraph& shadow, const data::MiaSplit& split);
double mia_gradient(const ModelGraph& surrogate, const ModelGraph& shadow, const data::MiaSplit& split);

struct AttackReport {
  std::string scheme;
  std::optional<double> config;
  std::uint64_t seed = 0;
  double ms_accuracy = 0.0;
  double fidelity = 0.0;
  double asr = 0.0;
  double conf_mia_acc = 0.5;
  double grad_mia_acc = 0.5;
  double generalization_gap = 0.0;
  double confidence_gap = 0.0;
  flops::CostReport utility;
  std::size_t queries = 0;
  std::string mia_classifier = "logreg-top3";
  // Reasons for metrics that could not be measured.
  std::vector<std::string> skipped;
};

struct MetricOptions {
  nn::PgdConfig pgd;
};

// All seven metrics for one surrogate. The victim model is read by the
// evaluator only (fidelity and ASR), never by the attacker.
AttackReport compute_metrics(const ModelGraph& surrogate, const ModelGraph& victim, const Dataset& testset,
                             const data::MiaSplit& split, const MiaAttack& conf_mia, const MiaAttack& grad_mia,
                             const MetricOptions& opt = {});

std::string report_csv_header();
std::string report_csv_row(const AttackReport& r);
// Parses a row produced by report_csv_row (utility columns included).
AttackReport report_from_csv_row(const std::string& row);
nlohmann::json report_to_json(const AttackReport& r);
AttackReport report_from_json(const nlohmann::json& j);

}  // namespace tsdp::attacks
