#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

#include "json.hpp"
#include "tsdp/attacks.hpp"
#include "tsdp/datagen.hpp"
#include "tsdp/graph.hpp"
#include "tsdp/plan.hpp"
#include "tsdp/teeslice.hpp"

// One seeded experiment world: public backbone, private data, victim, shadow
// model and membership classifiers. Attack cells are evaluated against it.
namespace tsdp::lab {

struct LabConfig {
  std::size_t side = 12;
  std::size_t channels = 3;
  std::size_t width = 8;
  // Public pretraining: many classes so the backbone features transfer.
  std::size_t public_classes = 64;
  std::size_t public_per_class = 125;
  double public_noise = 0.5;
  std::size_t public_epochs = 30;
  // Private pool, split into four equal membership quarters.
  std::size_t private_classes = 4;
  std::size_t private_per_class = 500;
  double private_noise = 0.4;
  // Disjoint private samples the attacker draws queries from.
  std::size_t attacker_per_class = 250;
  std::size_t victim_epochs = 60;
  double victim_lr = 0.05;
  // Slices and head see few samples; stronger decay than the victim's.
  double slice_weight_decay = 2e-3;
  std::size_t queries = 100;
  std::size_t steal_epochs = 30;
  double steal_lr = 0.01;
  nn::PgdConfig pgd;
  teeslice::PruneConfig prune;

  void validate() const;
};

nlohmann::json config_to_json(const LabConfig& c);
// Missing keys keep their defaults; unknown keys throw.
LabConfig config_from_json(const nlohmann::json& j);

struct Deployment {
  ModelGraph model;
  PartitionPlan plan;
};

class Lab {
 public:
  // Trains the public model, victim and shadow model for this seed.
  Lab(const LabConfig& cfg, std::uint64_t seed);
  // Reuses an already trained public model (it must match cfg's geometry).
  Lab(const LabConfig& cfg, std::uint64_t seed, ModelGraph public_model);

  const LabConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }
  const ModelGraph& public_model() const { return public_; }
  const ModelGraph& victim() const { return victim_; }
  const ModelGraph& shadow() const { return shadow_; }
  const data::MiaSplit& split() const { return split_; }
  const Dataset& testset() const { return split_.target_test; }
  const Dataset& attacker_pool() const { return pool_; }
  double victim_accuracy() const { return acc_vic_; }
  const attacks::MiaAttack& conf_mia() const { return *conf_mia_; }
  const attacks::MiaAttack& grad_mia() const { return *grad_mia_; }

  // TEESlice pipeline on this lab's private data; computed once, thread safe.
  const teeslice::PipelineResult& teeslice() const;

  // Cache identities of the trained victim and the private data.
  std::uint64_t model_hash() const;
  std::uint64_t dataset_hash() const;

  // Deployed model and plan for a scheme (config ignored when parameterless).
  Deployment deploy(Scheme s, std::optional<double> config) const;

  attacks::AttackReport evaluate(Scheme s, std::optional<double> config,
                                 attacks::Assumption a = attacks::Assumption::BackboneOnly) const;

 private:
  void build();

  LabConfig cfg_;
  std::uint64_t seed_;
  ModelGraph public_;
  data::MiaSplit split_;
  Dataset pool_;
  ModelGraph victim_;
  ModelGraph shadow_;
  double acc_vic_ = 0.0;
  std::unique_ptr<attacks::MiaAttack> conf_mia_, grad_mia_;
  mutable std::once_flag teeslice_once_;
  mutable std::unique_ptr<teeslice::PipelineResult> teeslice_;
};

ModelGraph train_public_model(const LabConfig& cfg, std::uint64_t seed);

// Identities of what a lab would train and sample for a config. Labs are
// deterministic per (config, seed), so these stand in for hashes of the
// trained artifacts without building them.
std::uint64_t recipe_model_hash(const LabConfig& cfg);
std::uint64_t recipe_dataset_hash(const LabConfig& cfg);

// Builds each seed's lab once, on first use. Safe to share across threads.
class LabPool {
 public:
  // Supplies a trained public model per seed instead of training one.
  using PublicSource = std::function<ModelGraph(std::uint64_t seed)>;
  // Called once per newly built lab, from the building thread.
  using OnBuilt = std::function<void(const Lab&)>;

  explicit LabPool(LabConfig cfg, PublicSource source = {}, OnBuilt on_built = {})
      : cfg_(std::move(cfg)), source_(std::move(source)), on_built_(std::move(on_built)) {
    cfg_.validate();
  }
  const Lab& get(std::uint64_t seed);
  const LabConfig& config() const { return cfg_; }

 private:
  struct Slot {
    std::once_flag once;
    std::unique_ptr<Lab> lab;
  };
  LabConfig cfg_;
  PublicSource source_;
  OnBuilt on_built_;
  std::mutex mu_;
  std::map<std::uint64_t, std::unique_ptr<Slot>> slots_;
};

// Canonical text key of a cell, e.g. "magnitude@0.01#3".
std::string cell_key(Scheme s, std::optional<double> config, std::uint64_t seed);

}  // namespace tsdp::lab
