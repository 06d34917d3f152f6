#include "tsdp/lab.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "tsdp/flops.hpp"
#include "tsdp/models.hpp"
#include "tsdp/partition.hpp"
#include "tsdp/rng.hpp"

namespace tsdp::lab {

void LabConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw std::invalid_argument(std::string("lab config: ") + name + " must be positive");
  };
  positive(side, "side");
  positive(channels, "channels");
  positive(width, "width");
  positive(public_classes, "public_classes");
  positive(public_per_class, "public_per_class");
  positive(public_epochs, "public_epochs");
  positive(victim_epochs, "victim_epochs");
  positive(steal_epochs, "steal_epochs");
  if (private_classes < 2) throw std::invalid_argument("lab config: private_classes must be at least 2");
  // The membership split deals the pool into four equal quarters.
  if (private_per_class == 0 || (private_per_class * private_classes) % 4 != 0) {
    throw std::invalid_argument("lab config: private pool size must be a positive multiple of 4");
  }
  if (queries > attacker_per_class * private_classes) {
    throw std::invalid_argument("lab config: query budget exceeds the attacker pool");
  }
  if (!(public_noise >= 0.0) || !(private_noise >= 0.0)) {
    throw std::invalid_argument("lab config: noise must be non-negative");
  }
  if (!(victim_lr > 0.0) || !(steal_lr > 0.0)) throw std::invalid_argument("lab config: learning rates must be positive");
  if (!(slice_weight_decay >= 0.0)) throw std::invalid_argument("lab config: slice_weight_decay must be >= 0");
  if (!(pgd.eps >= 0.0) || pgd.steps == 0) throw std::invalid_argument("lab config: invalid pgd settings");
  prune.validate();
}

nlohmann::json config_to_json(const LabConfig& c) {
  return {{"side", c.side},
          {"channels", c.channels},
          {"width", c.width},
          {"public_classes", c.public_classes},
          {"public_per_class", c.public_per_class},
          {"public_noise", c.public_noise},
          {"public_epochs", c.public_epochs},
          {"private_classes", c.private_classes},
          {"private_per_class", c.private_per_class},
          {"private_noise", c.private_noise},
          {"attacker_per_class", c.attacker_per_class},
          {"victim_epochs", c.victim_epochs},
          {"victim_lr", c.victim_lr},
          {"slice_weight_decay", c.slice_weight_decay},
          {"queries", c.queries},
          {"steal_epochs", c.steal_epochs},
          {"steal_lr", c.steal_lr},
          {"pgd", {{"eps", c.pgd.eps}, {"steps", c.pgd.steps}, {"step_fraction", c.pgd.step_fraction}}},
          {"prune",
           {{"delta", c.prune.delta},
            {"alpha_setup", c.prune.alpha_setup},
            {"n", c.prune.n},
            {"rounds", c.prune.rounds},
            {"lambda", c.prune.lambda}}}};
}

namespace {

template <class T>
void take(const nlohmann::json& j, const char* key, T& out) {
  if (auto it = j.find(key); it != j.end()) out = it->get<T>();
}

void reject_unknown(const nlohmann::json& j, const nlohmann::json& known, const std::string& where) {
  for (const auto& [k, v] : j.items()) {
    if (!known.contains(k)) throw std::invalid_argument("unknown key '" + k + "' in " + where);
  }
}

}  // namespace

LabConfig config_from_json(const nlohmann::json& j) {
  LabConfig c;
  const nlohmann::json known = config_to_json(c);
  reject_unknown(j, known, "lab config");
  take(j, "side", c.side);
  take(j, "channels", c.channels);
  take(j, "width", c.width);
  take(j, "public_classes", c.public_classes);
  take(j, "public_per_class", c.public_per_class);
  take(j, "public_noise", c.public_noise);
  take(j, "public_epochs", c.public_epochs);
  take(j, "private_classes", c.private_classes);
  take(j, "private_per_class", c.private_per_class);
  take(j, "private_noise", c.private_noise);
  take(j, "attacker_per_class", c.attacker_per_class);
  take(j, "victim_epochs", c.victim_epochs);
  take(j, "victim_lr", c.victim_lr);
  take(j, "slice_weight_decay", c.slice_weight_decay);
  take(j, "queries", c.queries);
  take(j, "steal_epochs", c.steal_epochs);
  take(j, "steal_lr", c.steal_lr);
  if (auto it = j.find("pgd"); it != j.end()) {
    reject_unknown(*it, known["pgd"], "pgd");
    take(*it, "eps", c.pgd.eps);
    take(*it, "steps", c.pgd.steps);
    take(*it, "step_fraction", c.pgd.step_fraction);
  }
  if (auto it = j.find("prune"); it != j.end()) {
    reject_unknown(*it, known["prune"], "prune");
    take(*it, "delta", c.prune.delta);
    take(*it, "alpha_setup", c.prune.alpha_setup);
    take(*it, "n", c.prune.n);
    take(*it, "rounds", c.prune.rounds);
    take(*it, "lambda", c.prune.lambda);
  }
  c.validate();
  return c;
}

ModelGraph train_public_model(const LabConfig& cfg, std::uint64_t seed) {
  const Dataset pub = data::gen_synthetic(cfg.public_classes, cfg.public_per_class, cfg.side,
                                          derive_seed(seed, "public_data"),
                                          {.distribution = "public", .channels = cfg.channels, .noise_sd = cfg.public_noise});
  ModelGraph m = build_toy_cnn({.channels = cfg.channels, .side = cfg.side, .width = cfg.width,
                                .n_classes = cfg.public_classes},
                               derive_seed(seed, "public_init"));
  nn::TrainConfig tc;
  tc.epochs = cfg.public_epochs;
  tc.seed = derive_seed(seed, "public_train");
  return nn::train_sgd(std::move(m), pub, tc);
}

Lab::Lab(const LabConfig& cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed) {
  cfg_.validate();
  public_ = train_public_model(cfg_, seed_);
  build();
}

Lab::Lab(const LabConfig& cfg, std::uint64_t seed, ModelGraph public_model)
    : cfg_(cfg), seed_(seed), public_(std::move(public_model)) {
  cfg_.validate();
  const Shape want{cfg_.channels, cfg_.side, cfg_.side};
  if (public_.input_shape() != want) {
    throw std::invalid_argument("public model input " + shape_str(public_.input_shape()) + " does not match lab " +
                                shape_str(want));
  }
  build();
}

void Lab::build() {
  const data::GenOptions priv{.distribution = "private", .channels = cfg_.channels, .noise_sd = cfg_.private_noise};
  const Dataset pool = data::gen_synthetic(cfg_.private_classes, cfg_.private_per_class, cfg_.side,
                                           derive_seed(seed_, "private_data"), priv);
  split_ = data::make_mia_split(pool, derive_seed(seed_, "mia_split"));
  pool_ = data::gen_synthetic(cfg_.private_classes, cfg_.attacker_per_class, cfg_.side,
                              derive_seed(seed_, "attacker_pool"), priv);

  // Victim and shadow share a recipe: public backbone, fresh head, fine-tune.
  auto fine_tune = [&](const Dataset& d, std::string_view tag) {
    nn::TrainConfig tc;
    tc.epochs = cfg_.victim_epochs;
    tc.learning_rate = cfg_.victim_lr;
    tc.seed = derive_seed(seed_, std::string(tag) + "_train");
    return nn::train_sgd(replace_head(public_, cfg_.private_classes, derive_seed(seed_, std::string(tag) + "_head")),
                         d, tc);
  };
  victim_ = fine_tune(split_.target_train, "victim");
  shadow_ = fine_tune(split_.shadow_train, "shadow");
  acc_vic_ = nn::accuracy(victim_, split_.target_test);
  conf_mia_ = std::make_unique<attacks::MiaAttack>(shadow_, split_, attacks::MiaFeatures::Confidence);
  grad_mia_ = std::make_unique<attacks::MiaAttack>(shadow_, split_, attacks::MiaFeatures::Gradient);
}

const teeslice::PipelineResult& Lab::teeslice() const {
  std::call_once(teeslice_once_, [&] {
    teeslice::PipelineConfig pc;
    pc.victim_epochs = cfg_.victim_epochs;
    pc.train.learning_rate = cfg_.victim_lr;
    pc.train.weight_decay = cfg_.slice_weight_decay;
    pc.prune = cfg_.prune;
    pc.seed = derive_seed(seed_, "teeslice");
    teeslice_ = std::make_unique<teeslice::PipelineResult>(
        teeslice::run_pipeline(public_, split_.target_train, split_.target_test, acc_vic_, pc));
  });
  return *teeslice_;
}

std::uint64_t Lab::model_hash() const {
  std::uint64_t h = hash_bytes(config_to_json(cfg_).dump(), graph_hash(victim_));
  return hash_bytes(std::to_string(graph_hash(public_)), h);
}

std::uint64_t Lab::dataset_hash() const {
  std::uint64_t h = tsdp::dataset_hash(split_.target_train);
  h = hash_bytes(std::to_string(tsdp::dataset_hash(split_.target_test)), h);
  return hash_bytes(std::to_string(tsdp::dataset_hash(pool_)), h);
}

Deployment Lab::deploy(Scheme s, std::optional<double> config) const {
  switch (s) {
    case Scheme::TeeSlice: {
      const auto& hybrid = teeslice().pruned.model;
      return {hybrid.graph, teeslice::deploy_plan(hybrid)};
    }
    case Scheme::Ennclave: {
      auto r = partition::plan_ennclave(victim_, public_);
      return {std::move(r.model), std::move(r.plan)};
    }
    default: {
      const auto fallback = partition::default_config(s);
      const double c = config ? *config : fallback.value_or(0.0);
      return {victim_, partition::make_plan(s, victim_, c, seed_)};
    }
  }
}

attacks::AttackReport Lab::evaluate(Scheme s, std::optional<double> config, attacks::Assumption a) const {
  const Deployment dep = deploy(s, config);
  const attacks::SurrogateInit si = attacks::surrogate_init(dep.plan, dep.model, public_, {.assumption = a, .seed = seed_});
  const attacks::LabelOracle oracle(dep.model);
  const auto queries = data::make_attacker_queryset(pool_, cfg_.queries, derive_seed(seed_, "queries"));
  nn::TrainConfig tc;
  tc.epochs = cfg_.steal_epochs;
  tc.learning_rate = cfg_.steal_lr;
  tc.seed = derive_seed(seed_, "steal");
  const ModelGraph surrogate = attacks::model_steal(si, oracle, queries, tc);

  attacks::AttackReport r = attacks::compute_metrics(surrogate, dep.model, testset(), split_, *conf_mia_, *grad_mia_,
                                                     {.pgd = cfg_.pgd});
  r.scheme = std::string(to_string(s));
  r.config = dep.plan.config;
  r.seed = seed_;
  r.queries = oracle.queries();
  r.utility = flops::utility_of_plan(dep.model, dep.plan);
  return r;
}

namespace {

const char* const kDataKeys[] = {"side", "channels", "public_classes", "public_per_class", "public_noise",
                                 "private_classes", "private_per_class", "private_noise", "attacker_per_class"};

}  // namespace

std::uint64_t recipe_dataset_hash(const LabConfig& cfg) {
  const nlohmann::json all = config_to_json(cfg);
  nlohmann::json data;
  for (const char* k : kDataKeys) data[k] = all[k];
  return hash_bytes(data.dump(), 0x64617461ULL);
}

std::uint64_t recipe_model_hash(const LabConfig& cfg) {
  nlohmann::json rest = config_to_json(cfg);
  for (const char* k : kDataKeys) rest.erase(k);
  return hash_bytes(rest.dump(), 0x6d6f64656cULL);
}

const Lab& LabPool::get(std::uint64_t seed) {
  Slot* slot;
  {
    std::lock_guard lock(mu_);
    auto& p = slots_[seed];
    if (!p) p = std::make_unique<Slot>();
    slot = p.get();
  }
  std::call_once(slot->once, [&] {
    slot->lab = source_ ? std::make_unique<Lab>(cfg_, seed, source_(seed)) : std::make_unique<Lab>(cfg_, seed);
    if (on_built_) on_built_(*slot->lab);
  });
  return *slot->lab;
}

std::string cell_key(Scheme s, std::optional<double> config, std::uint64_t seed) {
  std::ostringstream os;
  os << to_string(s);
  if (config) os << '@' << *config;
  os << '#' << seed;
  return os.str();
}

}  // namespace tsdp::lab
