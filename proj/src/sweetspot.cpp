#include "tsdp/sweetspot.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "tsdp/partition.hpp"
#include "tsdp/rng.hpp"

namespace tsdp::sweetspot {

namespace {

constexpr std::pair<Metric, std::string_view> kMetricNames[] = {
    {Metric::MsAccuracy, "ms_accuracy"},
    {Metric::Fidelity, "fidelity"},
    {Metric::Asr, "asr"},
    {Metric::ConfMia, "conf_mia_acc"},
    {Metric::GradMia, "grad_mia_acc"},
    {Metric::GeneralizationGap, "generalization_gap"},
    {Metric::ConfidenceGap, "confidence_gap"},
};

bool configurable(Scheme s) { return partition::default_config(s).has_value(); }

}  // namespace

std::string_view to_string(Metric m) {
  for (const auto& [k, v] : kMetricNames) {
    if (k == m) return v;
  }
  return "?";
}

Metric metric_from_string(std::string_view s) {
  for (const auto& [k, v] : kMetricNames) {
    if (v == s) return k;
  }
  throw std::invalid_argument("unknown metric '" + std::string(s) + "'");
}

double metric_value(const attacks::AttackReport& r, Metric m) {
  switch (m) {
    case Metric::MsAccuracy:
      return r.ms_accuracy;
    case Metric::Fidelity:
      return r.fidelity;
    case Metric::Asr:
      return r.asr;
    case Metric::ConfMia:
      return r.conf_mia_acc;
    case Metric::GradMia:
      return r.grad_mia_acc;
    case Metric::GeneralizationGap:
      return r.generalization_gap;
    case Metric::ConfidenceGap:
      return r.confidence_gap;
  }
  return 0.0;
}

attacks::AttackReport average_reports(const std::vector<attacks::AttackReport>& reports) {
  if (reports.empty()) throw std::invalid_argument("no reports to average");
  attacks::AttackReport m = reports.front();
  const double n = static_cast<double>(reports.size());
  auto mean = [&](auto field) {
    double s = 0.0;
    for (const auto& r : reports) s += static_cast<double>(field(r));
    return s / n;
  };
  m.ms_accuracy = mean([](const auto& r) { return r.ms_accuracy; });
  m.fidelity = mean([](const auto& r) { return r.fidelity; });
  m.asr = mean([](const auto& r) { return r.asr; });
  m.conf_mia_acc = mean([](const auto& r) { return r.conf_mia_acc; });
  m.grad_mia_acc = mean([](const auto& r) { return r.grad_mia_acc; });
  m.generalization_gap = mean([](const auto& r) { return r.generalization_gap; });
  m.confidence_gap = mean([](const auto& r) { return r.confidence_gap; });
  m.utility.pct_flops_tee = mean([](const auto& r) { return r.utility.pct_flops_tee; });
  m.utility.sim_latency = mean([](const auto& r) { return r.utility.sim_latency; });
  auto mean_u = [&](auto field) { return static_cast<std::uint64_t>(std::llround(mean(field))); };
  m.utility.flops_tee = mean_u([](const auto& r) { return r.utility.flops_tee; });
  m.utility.flops_gpu = mean_u([](const auto& r) { return r.utility.flops_gpu; });
  m.utility.flops_total = mean_u([](const auto& r) { return r.utility.flops_total; });
  m.utility.elementwise_tee = mean_u([](const auto& r) { return r.utility.elementwise_tee; });
  m.utility.elementwise_gpu = mean_u([](const auto& r) { return r.utility.elementwise_gpu; });
  m.queries = static_cast<std::size_t>(std::llround(mean([](const auto& r) { return r.queries; })));
  m.skipped.clear();
  std::set<std::string> seen;
  for (const auto& r : reports) {
    for (const auto& s : r.skipped) {
      if (seen.insert(s).second) m.skipped.push_back(s);
    }
  }
  return m;
}

void SweepSpec::validate() const {
  if (configurable(scheme) && grid.empty()) throw std::invalid_argument("sweep grid must not be empty");
  if (!(delta > 0.0)) throw std::invalid_argument("sweep delta must be positive");
  if (seeds.empty()) throw std::invalid_argument("sweep needs at least one seed");
}

nlohmann::json spec_to_json(const SweepSpec& s) {
  return {{"scheme", to_string(s.scheme)}, {"grid", s.grid},       {"metric", to_string(s.metric)},
          {"delta", s.delta},              {"seeds", s.seeds},     {"absolute", s.absolute}};
}

SweepSpec spec_from_json(const nlohmann::json& j) {
  SweepSpec s;
  s.scheme = scheme_from_string(j.at("scheme").get<std::string>());
  if (j.contains("grid")) s.grid = j.at("grid").get<std::vector<double>>();
  if (j.contains("metric")) s.metric = metric_from_string(j.at("metric").get<std::string>());
  if (j.contains("delta")) s.delta = j.at("delta").get<double>();
  if (j.contains("seeds")) s.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  if (j.contains("absolute")) s.absolute = j.at("absolute").get<bool>();
  s.validate();
  return s;
}

bool satisfies(double security, double black, double delta, bool absolute) {
  const double d = security - black;
  return (absolute ? std::abs(d) : d) < delta;
}

std::optional<std::size_t> choose(const std::vector<Cell>& cells, Metric metric, double black, double delta,
                                  bool absolute) {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (!satisfies(metric_value(cells[i].mean, metric), black, delta, absolute)) continue;
    if (!best || cells[i].mean.utility.pct_flops_tee < cells[*best].mean.utility.pct_flops_tee) best = i;
  }
  return best;
}

// ---------------------------------------------------------------- cache

CellCache::CellCache(std::filesystem::path dir) : dir_(std::move(dir)) { std::filesystem::create_directories(dir_); }

std::filesystem::path CellCache::resolve_dir(const std::filesystem::path& fallback) {
  if (const char* env = std::getenv("TSDP_CACHE_DIR"); env && *env) return env;
  return fallback;
}

std::filesystem::path CellCache::file_for(const std::string& key) const {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << hash_bytes(key, 0x63616368ULL) << ".json";
  return dir_ / os.str();
}

std::optional<attacks::AttackReport> CellCache::get(const std::string& key) const {
  std::ifstream in(file_for(key));
  if (!in) return std::nullopt;
  try {
    const auto j = nlohmann::json::parse(in);
    // A hash collision or a foreign file is a miss, not a hit.
    if (j.at("key").get<std::string>() != key) return std::nullopt;
    return attacks::report_from_json(j.at("report"));
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

void CellCache::put(const std::string& key, const attacks::AttackReport& r) const {
  const auto path = file_for(key);
  auto tmp = path;
  tmp += ".tmp" + std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id()));
  {
    std::ofstream out(tmp);
    out << nlohmann::json{{"key", key}, {"report", attacks::report_to_json(r)}}.dump(1) << '\n';
    if (!out) throw std::runtime_error("cannot write cache file " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string cache_key(Scheme s, std::optional<double> config, std::uint64_t model_hash, std::uint64_t dataset_hash,
                      std::uint64_t seed) {
  std::ostringstream os;
  os << to_string(s) << '|';
  if (config) os << std::setprecision(17) << *config;
  os << '|' << std::hex << model_hash << '|' << dataset_hash << '|' << std::dec << seed;
  return os.str();
}

// ---------------------------------------------------------------- sweep

SweepResult sweep(const SweepSpec& spec, const Evaluator& eval, const SweepOptions& opt) {
  spec.validate();
  struct Task {
    Scheme scheme;
    std::optional<double> config;
    std::uint64_t seed;
  };
  std::vector<std::optional<double>> configs;
  if (configurable(spec.scheme)) {
    for (double c : spec.grid) configs.emplace_back(c);
  } else {
    configs.emplace_back(std::nullopt);
  }
  std::vector<Task> tasks;
  for (const auto& c : configs)
    for (auto seed : spec.seeds) tasks.push_back({spec.scheme, c, seed});
  const std::size_t n_grid = tasks.size();
  for (Scheme base : {Scheme::BlackBox, Scheme::NoShield})
    for (auto seed : spec.seeds) tasks.push_back({base, std::nullopt, seed});

  std::vector<std::optional<attacks::AttackReport>> out(tasks.size());
  std::vector<std::string> failures(tasks.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < tasks.size(); i = next++) {
      const Task& t = tasks[i];
      const std::string key = cache_key(t.scheme, t.config, opt.model_hash, opt.dataset_hash, t.seed);
      try {
        std::optional<attacks::AttackReport> r = opt.cache ? opt.cache->get(key) : std::nullopt;
        const bool cached = r.has_value();
        if (!r) {
          r = eval(t.scheme, t.config, t.seed);
          if (opt.cache) opt.cache->put(key, *r);
        }
        out[i] = std::move(r);
        if (opt.on_cell) opt.on_cell(key, cached);
      } catch (const std::exception& e) {
        failures[i] = key + ": " + e.what();
      }
    }
  };
  const std::size_t workers = std::clamp<std::size_t>(opt.workers, 1, tasks.size());
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();

  std::string failed;
  for (const auto& f : failures) {
    if (!f.empty()) failed += "\n  " + f;
  }
  if (!failed.empty()) throw std::runtime_error("sweep cells failed:" + failed);

  SweepResult r;
  r.scheme = spec.scheme;
  r.metric = spec.metric;
  r.delta = spec.delta;
  r.absolute = spec.absolute;
  const std::size_t ns = spec.seeds.size();
  for (std::size_t c = 0; c < configs.size(); ++c) {
    Cell cell;
    cell.config = configs[c];
    for (std::size_t k = 0; k < ns; ++k) cell.per_seed.push_back(*out[c * ns + k]);
    cell.mean = average_reports(cell.per_seed);
    r.cells.push_back(std::move(cell));
  }
  auto baseline = [&](std::size_t offset) {
    std::vector<attacks::AttackReport> v;
    for (std::size_t k = 0; k < ns; ++k) v.push_back(*out[n_grid + offset + k]);
    return metric_value(average_reports(v), spec.metric);
  };
  r.security_black = baseline(0);
  r.security_noshield = baseline(ns);
  r.chosen_index = choose(r.cells, r.metric, r.security_black, r.delta, r.absolute);
  if (r.chosen_index) r.chosen = r.cells[*r.chosen_index].config;
  return r;
}

std::vector<FrontierPoint> frontier(const SweepResult& r) {
  std::vector<std::size_t> order(r.cells.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return r.cells[a].mean.utility.pct_flops_tee < r.cells[b].mean.utility.pct_flops_tee;
  });
  std::vector<FrontierPoint> pts;
  std::vector<std::size_t> counts;
  for (std::size_t i : order) {
    const double u = r.cells[i].mean.utility.pct_flops_tee;
    const double s = metric_value(r.cells[i].mean, r.metric);
    if (!pts.empty() && pts.back().pct_flops_tee == u) {
      auto& p = pts.back();
      p.security = (p.security * static_cast<double>(counts.back()) + s) / static_cast<double>(counts.back() + 1);
      ++counts.back();
      p.configs.push_back(r.cells[i].config);
    } else {
      pts.push_back({u, s, {r.cells[i].config}});
      counts.push_back(1);
    }
  }
  return pts;
}

std::string frontier_csv(const SweepResult& r) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "# scheme=" << to_string(r.scheme) << " metric=" << to_string(r.metric) << " blackbox=" << r.security_black
     << " noshield=" << r.security_noshield << '\n';
  os << "pct_flops_tee,security,configs\n";
  for (const auto& p : frontier(r)) {
    os << p.pct_flops_tee << ',' << p.security << ',';
    for (std::size_t k = 0; k < p.configs.size(); ++k) {
      if (k) os << ';';
      if (p.configs[k]) os << *p.configs[k];
    }
    os << '\n';
  }
  return os.str();
}

nlohmann::json result_to_json(const SweepResult& r) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : r.cells) {
    nlohmann::json per = nlohmann::json::array();
    for (const auto& p : c.per_seed) per.push_back(attacks::report_to_json(p));
    cells.push_back({{"config", c.config ? nlohmann::json(*c.config) : nlohmann::json(nullptr)},
                     {"mean", attacks::report_to_json(c.mean)},
                     {"per_seed", per}});
  }
  nlohmann::json j{{"scheme", to_string(r.scheme)},
                   {"metric", to_string(r.metric)},
                   {"delta", r.delta},
                   {"absolute", r.absolute},
                   {"security_black", r.security_black},
                   {"security_noshield", r.security_noshield},
                   {"cells", cells}};
  j["chosen_index"] = r.chosen_index ? nlohmann::json(*r.chosen_index) : nlohmann::json(nullptr);
  j["chosen"] = r.chosen ? nlohmann::json(*r.chosen) : nlohmann::json(nullptr);
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : frontier(r)) pts.push_back({{"pct_flops_tee", p.pct_flops_tee}, {"security", p.security}});
  j["frontier"] = pts;
  return j;
}

SweepResult result_from_json(const nlohmann::json& j) {
  SweepResult r;
  r.scheme = scheme_from_string(j.at("scheme").get<std::string>());
  r.metric = metric_from_string(j.at("metric").get<std::string>());
  r.delta = j.at("delta").get<double>();
  r.absolute = j.at("absolute").get<bool>();
  r.security_black = j.at("security_black").get<double>();
  r.security_noshield = j.at("security_noshield").get<double>();
  for (const auto& c : j.at("cells")) {
    Cell cell;
    if (!c.at("config").is_null()) cell.config = c.at("config").get<double>();
    cell.mean = attacks::report_from_json(c.at("mean"));
    for (const auto& p : c.at("per_seed")) cell.per_seed.push_back(attacks::report_from_json(p));
    r.cells.push_back(std::move(cell));
  }
  if (!j.at("chosen_index").is_null()) r.chosen_index = j.at("chosen_index").get<std::size_t>();
  if (!j.at("chosen").is_null()) r.chosen = j.at("chosen").get<double>();
  return r;
}

}  // namespace tsdp::sweetspot
