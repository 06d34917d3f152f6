#include "tsdp/experiment.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <set>
#include <sstream>

#include "tsdp/models.hpp"
#include "tsdp/partition.hpp"
#include "tsdp/rng.hpp"
#include "tsdp/schema.hpp"
#include "tsdp/serialize.hpp"
#include "tsdp/teeslice.hpp"

namespace tsdp::experiment {

namespace fs = std::filesystem;

const nlohmann::json& experiment_schema() {
  static const nlohmann::json schema = nlohmann::json::parse(
#include "tsdp/experiment_schema.inc"
  );
  return schema;
}

ExperimentConfig config_from_json(const nlohmann::json& j) {
  auto errors = schema::validate(experiment_schema(), j);
  if (!errors.empty()) throw ConfigError("experiment config does not match the schema", std::move(errors));
  ExperimentConfig c;
  c.output_dir = j.at("output_dir").get<std::string>();
  c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  c.workers = j.value("workers", std::size_t{1});
  for (const auto& e : j.at("schemes")) {
    SchemeEntry s;
    s.scheme = scheme_from_string(e.at("scheme").get<std::string>());
    if (e.contains("grid")) s.grid = e.at("grid").get<std::vector<double>>();
    c.schemes.push_back(std::move(s));
  }
  if (j.contains("metric")) c.metric = sweetspot::metric_from_string(j.at("metric").get<std::string>());
  c.delta = j.value("delta", c.delta);
  c.absolute = j.value("absolute", c.absolute);
  if (j.contains("assumption")) c.assumption = attacks::assumption_from_string(j.at("assumption").get<std::string>());
  try {
    c.lab = lab::config_from_json(j.value("lab", nlohmann::json::object()));
  } catch (const std::exception& e) {
    throw ConfigError("invalid lab settings", {std::string("/lab: ") + e.what()});
  }
  std::set<Scheme> seen;
  for (const auto& s : c.schemes) {
    if (!seen.insert(s.scheme).second) {
      errors.push_back("/schemes: " + std::string(to_string(s.scheme)) + " listed twice");
    }
    if (!s.grid.empty() && !partition::default_config(s.scheme)) {
      errors.push_back("/schemes: " + std::string(to_string(s.scheme)) + " takes no grid");
    }
  }
  if (!errors.empty()) throw ConfigError("invalid experiment config", std::move(errors));
  return c;
}

nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json schemes = nlohmann::json::array();
  for (const auto& s : c.schemes) {
    nlohmann::json e{{"scheme", to_string(s.scheme)}};
    if (!s.grid.empty()) e["grid"] = s.grid;
    schemes.push_back(e);
  }
  return {{"output_dir", c.output_dir.string()},
          {"seeds", c.seeds},
          {"workers", c.workers},
          {"schemes", schemes},
          {"metric", sweetspot::to_string(c.metric)},
          {"delta", c.delta},
          {"absolute", c.absolute},
          {"assumption", attacks::to_string(c.assumption)},
          {"lab", lab::config_to_json(c.lab)}};
}

std::vector<double> resolve_grid(const SchemeEntry& e, const lab::LabConfig& cfg) {
  if (!e.grid.empty() || !partition::default_config(e.scheme)) return e.grid;
  const ModelGraph arch = build_toy_cnn(
      {.channels = cfg.channels, .side = cfg.side, .width = cfg.width, .n_classes = cfg.private_classes}, 0);
  return partition::default_grid(e.scheme, arch);
}

namespace {

// Serialised log writer shared by worker threads.
class Log {
 public:
  Log(const fs::path& file, std::ostream* echo) : out_(file, std::ios::app), echo_(echo) {}
  void line(const std::string& tag, const std::string& msg) {
    std::lock_guard lock(mu_);
    out_ << '[' << tag << "] " << msg << '\n';
    out_.flush();
    if (echo_) *echo_ << '[' << tag << "] " << msg << '\n';
  }

 private:
  std::mutex mu_;
  std::ofstream out_;
  std::ostream* echo_;
};

std::string seed_tag(std::uint64_t seed) { return "s" + std::to_string(seed); }

void write_text(const fs::path& p, const std::string& text) {
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp);
    out << text;
    if (!out) throw std::runtime_error("cannot write " + p.string());
  }
  fs::rename(tmp, p);
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  return nlohmann::json::parse(in);
}

int scheme_rank(const std::string& name) {
  static const std::vector<std::string> order{"noshield", "deep",     "shallow",  "magnitude", "intermediate",
                                              "nonlinear_obf", "ennclave", "teeslice", "blackbox"};
  const auto it = std::find(order.begin(), order.end(), name);
  return static_cast<int>(it - order.begin());
}

}  // namespace

RunSummary run_experiment(const ExperimentConfig& cfg, std::ostream* progress) {
  const fs::path root = cfg.output_dir;
  for (const char* d : {"models", "datasets", "plans", "reports", "sweeps", "logs"}) fs::create_directories(root / d);
  write_text(root / "experiment.json", config_to_json(cfg).dump(2) + "\n");
  Log log(root / "logs" / "run.log", progress);

  const std::uint64_t recipe_model = lab::recipe_model_hash(cfg.lab);
  const std::uint64_t recipe_data = lab::recipe_dataset_hash(cfg.lab);
  // The attacker assumption changes every surrogate, so it is part of the
  // model identity of a cell.
  const std::uint64_t model_hash = hash_bytes(attacks::to_string(cfg.assumption), recipe_model);
  const sweetspot::CellCache cache(sweetspot::CellCache::resolve_dir(root / "cache"));

  auto lab_file = [&](std::uint64_t seed) { return root / "models" / ("lab_" + seed_tag(seed) + ".json"); };
  auto lab_current = [&](std::uint64_t seed) {
    if (!fs::exists(lab_file(seed))) return false;
    const auto j = read_json(lab_file(seed));
    return j.value("recipe_model_hash", std::uint64_t{0}) == recipe_model &&
           j.value("recipe_dataset_hash", std::uint64_t{0}) == recipe_data;
  };

  // A public model trained by an earlier run of the same recipe is reused.
  auto public_source = [&](std::uint64_t seed) {
    const fs::path p = root / "models" / ("public_" + seed_tag(seed) + ".tsdp");
    if (lab_current(seed) && fs::exists(p)) {
      log.line(seed_tag(seed), "reusing public model " + p.string());
      return io::load_model(p);
    }
    log.line(seed_tag(seed), "training public model");
    return lab::train_public_model(cfg.lab, seed);
  };
  auto on_built = [&](const lab::Lab& L) {
    const std::string t = seed_tag(L.seed());
    io::save_model(L.public_model(), root / "models" / ("public_" + t + ".tsdp"));
    io::save_model(L.victim(), root / "models" / ("victim_" + t + ".tsdp"));
    io::save_model(L.shadow(), root / "models" / ("shadow_" + t + ".tsdp"));
    io::save_dataset(L.split().target_train, root / "datasets" / ("target_train_" + t + ".tsds"));
    io::save_dataset(L.split().target_test, root / "datasets" / ("target_test_" + t + ".tsds"));
    io::save_dataset(L.split().shadow_train, root / "datasets" / ("shadow_train_" + t + ".tsds"));
    io::save_dataset(L.split().shadow_test, root / "datasets" / ("shadow_test_" + t + ".tsds"));
    io::save_dataset(L.attacker_pool(), root / "datasets" / ("attacker_pool_" + t + ".tsds"));
    write_text(lab_file(L.seed()), nlohmann::json{{"seed", L.seed()},
                                                  {"victim_accuracy", L.victim_accuracy()},
                                                  {"model_hash", L.model_hash()},
                                                  {"dataset_hash", L.dataset_hash()},
                                                  {"recipe_model_hash", recipe_model},
                                                  {"recipe_dataset_hash", recipe_data}}
                                           .dump(2) + "\n");
    log.line(t, "lab ready, victim accuracy " + std::to_string(L.victim_accuracy()));
  };
  lab::LabPool pool(cfg.lab, public_source, on_built);

  RunSummary summary;
  if (cfg.schemes.empty()) {
    for (auto seed : cfg.seeds) {
      if (lab_current(seed)) {
        log.line(seed_tag(seed), "lab artifacts up to date");
        continue;
      }
      try {
        pool.get(seed);
      } catch (const std::exception& e) {
        summary.failures.push_back(seed_tag(seed) + ": " + e.what());
        log.line(seed_tag(seed), std::string("error: ") + e.what());
      }
    }
    return summary;
  }

  std::mutex teeslice_mu;
  const sweetspot::Evaluator eval = [&](Scheme s, std::optional<double> config, std::uint64_t seed) {
    const lab::Lab& L = pool.get(seed);
    const std::string key = lab::cell_key(s, config, seed);
    const lab::Deployment dep = L.deploy(s, config);
    write_text(root / "plans" / (key + ".json"), plan_to_json(dep.plan, dep.model).dump(1) + "\n");
    if (s == Scheme::TeeSlice) {
      std::lock_guard lock(teeslice_mu);
      teeslice::save_hybrid(L.teeslice().pruned.model, root / "models" / ("teeslice_" + seed_tag(seed) + ".tsdp"));
      write_text(root / "reports" / ("prune_log_" + seed_tag(seed) + ".csv"),
                 teeslice::prune_log_csv(L.teeslice().pruned.log));
    }
    // Knowing the hybrid architecture only means something for TeeSlice.
    const auto a = (cfg.assumption == attacks::Assumption::HybridKnown && s != Scheme::TeeSlice)
                       ? attacks::Assumption::BackboneOnly
                       : cfg.assumption;
    return L.evaluate(s, config, a);
  };

  std::mutex count_mu;
  sweetspot::SweepOptions opt{.cache = &cache, .model_hash = model_hash, .dataset_hash = recipe_data,
                              .workers = cfg.workers, .on_cell = {}};
  opt.on_cell = [&](const std::string& key, bool cached) {
    {
      std::lock_guard lock(count_mu);
      ++(cached ? summary.cells_cached : summary.cells_computed);
    }
    log.line(key, cached ? "cached" : "computed");
  };

  std::map<std::string, attacks::AttackReport> rows;  // keyed for a stable order
  auto row_key = [](const attacks::AttackReport& r) {
    std::ostringstream os;
    os << static_cast<char>('a' + scheme_rank(r.scheme)) << '|' << r.scheme << '|';
    if (r.config) os << std::setw(24) << std::fixed << std::setprecision(9) << *r.config;
    os << '|' << std::setw(20) << r.seed;
    return os.str();
  };
  std::vector<attacks::AttackReport> summary_rows;

  for (const auto& entry : cfg.schemes) {
    const std::string name(to_string(entry.scheme));
    sweetspot::SweepSpec spec{.scheme = entry.scheme,
                              .grid = resolve_grid(entry, cfg.lab),
                              .metric = cfg.metric,
                              .delta = cfg.delta,
                              .seeds = cfg.seeds,
                              .absolute = cfg.absolute};
    try {
      const sweetspot::SweepResult r = sweetspot::sweep(spec, eval, opt);
      write_text(root / "sweeps" / (name + ".json"), sweetspot::result_to_json(r).dump(1) + "\n");
      write_text(root / "sweeps" / (name + "_frontier.csv"), sweetspot::frontier_csv(r));
      for (const auto& c : r.cells)
        for (const auto& p : c.per_seed) rows[row_key(p)] = p;
      const std::size_t pick = r.chosen_index.value_or(0);
      attacks::AttackReport m = r.cells[pick].mean;
      if (!r.chosen_index) m.skipped.push_back("sweet spot: no configuration meets delta");
      summary_rows.push_back(m);
      log.line(name, r.chosen_index ? "sweet spot found" : "no configuration meets delta");
    } catch (const std::exception& e) {
      summary.failures.push_back(name + ": " + e.what());
      log.line(name, std::string("error: ") + e.what());
    }
  }

  // Baselines come from the cache the sweeps just filled.
  for (Scheme b : {Scheme::BlackBox, Scheme::NoShield}) {
    std::vector<attacks::AttackReport> per;
    for (auto seed : cfg.seeds) {
      if (auto r = cache.get(sweetspot::cache_key(b, std::nullopt, model_hash, recipe_data, seed))) {
        rows[row_key(*r)] = *r;
        per.push_back(*r);
      }
    }
    if (per.size() == cfg.seeds.size()) summary_rows.push_back(sweetspot::average_reports(per));
  }

  std::string cells = attacks::report_csv_header() + "\n";
  for (const auto& [_, r] : rows) cells += attacks::report_csv_row(r) + "\n";
  write_text(root / "reports" / "cells.csv", cells);
  std::string sum = attacks::report_csv_header() + "\n";
  for (const auto& r : summary_rows) sum += attacks::report_csv_row(r) + "\n";
  write_text(root / "reports" / "summary.csv", sum);

  log.line("run", std::to_string(summary.cells_computed) + " computed, " + std::to_string(summary.cells_cached) +
                      " cached, " + std::to_string(summary.failures.size()) + " failed");
  return summary;
}

std::string render_matrix(const std::vector<attacks::AttackReport>& reports) {
  using Group = std::pair<int, std::pair<std::string, std::optional<double>>>;
  std::map<Group, std::vector<attacks::AttackReport>> groups;
  for (const auto& r : reports) groups[{scheme_rank(r.scheme), {r.scheme, r.config}}].push_back(r);
  std::vector<std::string> names;
  std::vector<attacks::AttackReport> means;
  std::optional<std::size_t> black;
  for (const auto& [g, v] : groups) {
    std::ostringstream name;
    name << g.second.first;
    if (g.second.second) name << '@' << *g.second.second;
    if (g.second.first == "blackbox") black = names.size();
    names.push_back(name.str());
    means.push_back(sweetspot::average_reports(v));
  }
  struct Row {
    std::string label;
    std::vector<double> values;
  };
  std::vector<Row> rows;
  const sweetspot::Metric metrics[] = {sweetspot::Metric::MsAccuracy, sweetspot::Metric::Fidelity,
                                       sweetspot::Metric::Asr,        sweetspot::Metric::ConfMia,
                                       sweetspot::Metric::GradMia,    sweetspot::Metric::GeneralizationGap,
                                       sweetspot::Metric::ConfidenceGap};
  for (auto m : metrics) {
    Row row{std::string(sweetspot::to_string(m)), {}};
    for (const auto& r : means) row.values.push_back(sweetspot::metric_value(r, m));
    rows.push_back(row);
  }
  Row util{"pct_flops_tee", {}};
  for (const auto& r : means) util.values.push_back(r.utility.pct_flops_tee);
  rows.push_back(util);
  if (black) {
    for (std::size_t k = 0; k < 4; ++k) {
      Row rel{"rel_" + rows[k].label, {}};
      const double b = rows[k].values[*black];
      for (double v : rows[k].values) rel.values.push_back(b != 0.0 ? v / b : 0.0);
      rows.push_back(rel);
    }
  }

  std::size_t label_w = 8, col_w = 10;
  for (const auto& r : rows) label_w = std::max(label_w, r.label.size());
  for (const auto& n : names) col_w = std::max(col_w, n.size() + 1);
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(label_w)) << "metric";
  for (const auto& n : names) os << ' ' << std::right << std::setw(static_cast<int>(col_w)) << n;
  os << '\n';
  for (const auto& r : rows) {
    const auto [lo, hi] = std::minmax_element(r.values.begin(), r.values.end());
    os << std::left << std::setw(static_cast<int>(label_w)) << r.label;
    for (std::size_t k = 0; k < r.values.size(); ++k) {
      std::ostringstream cell;
      cell << std::fixed << std::setprecision(3) << r.values[k];
      if (r.values.size() > 1 && *lo != *hi) {
        if (r.values[k] == *hi) cell << '+';
        else if (r.values[k] == *lo) cell << '-';
        else cell << ' ';
      } else {
        cell << ' ';
      }
      os << ' ' << std::right << std::setw(static_cast<int>(col_w)) << cell.str();
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace tsdp::experiment
