#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "tsdp/attacks.hpp"
#include "tsdp/datagen.hpp"
#include "tsdp/engine.hpp"
#include "tsdp/experiment.hpp"
#include "tsdp/flops.hpp"
#include "tsdp/lab.hpp"
#include "tsdp/models.hpp"
#include "tsdp/offload.hpp"
#include "tsdp/partition.hpp"
#include "tsdp/rng.hpp"
#include "tsdp/serialize.hpp"
#include "tsdp/shadownet.hpp"
#include "tsdp/sweetspot.hpp"
#include "tsdp/teeslice.hpp"
#include "tsdp/train.hpp"

using namespace tsdp;
namespace fs = std::filesystem;

namespace {

// Exit codes: 0 success, 1 failed cells, 2 bad input, 3 integrity failure.
constexpr int kBadInput = 2;
constexpr int kIntegrity = 3;

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::invalid_argument("cannot open " + p.string());
  return nlohmann::json::parse(in);
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + p.string());
}

lab::LabConfig load_lab(const std::string& path) {
  return path.empty() ? lab::LabConfig{} : lab::config_from_json(read_json(path));
}

std::optional<double> optional_config(const CLI::App& sub, double v) {
  return sub.count("--config") ? std::optional<double>(v) : std::nullopt;
}

std::string cost_csv(const PartitionPlan& plan, const flops::CostReport& c) {
  std::ostringstream cfg;
  if (plan.config) cfg << *plan.config;
  return flops::csv_header() + "\n" + flops::csv_row(to_string(plan.scheme), cfg.str(), c) + "\n";
}

// Roff page assembled from the same help strings --help prints.
std::string manpage(const CLI::App& app) {
  std::ostringstream os;
  os << ".TH TSDP 1\n.SH NAME\ntsdp \\- " << app.get_description() << "\n.SH SYNOPSIS\n.B tsdp\n"
     << "\\fIcommand\\fR [\\fIoptions\\fR]\n.SH COMMANDS\n";
  for (const CLI::App* sub : app.get_subcommands({})) {
    os << ".SS " << sub->get_name() << "\n" << sub->get_description() << "\n";
    for (const CLI::Option* opt : sub->get_options()) {
      if (opt->get_name() == "--help") continue;
      os << ".TP\n.B " << opt->get_name() << "\n" << opt->get_description();
      if (!opt->get_default_str().empty()) os << " (default " << opt->get_default_str() << ")";
      os << "\n";
    }
  }
  os << ".SH ENVIRONMENT\n.TP\n.B TSDP_CACHE_DIR\nOverrides the cell cache directory.\n"
     << ".SH EXIT STATUS\n0 on success, 1 when a cell failed, 2 on invalid input, 3 when a Freivalds check "
        "rejects a GPU result.\n";
  return os.str();
}

const std::vector<std::string> kSchemes{"noshield",      "blackbox",      "deep",     "shallow", "magnitude",
                                        "intermediate", "nonlinear_obf", "ennclave", "teeslice"};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"TEE-shielded DNN partition experiments"};
  app.require_subcommand(1);
  int code = 0;

  // datagen
  auto* datagen = app.add_subcommand("datagen", "Generate a synthetic labelled image set (.tsds)");
  std::size_t dg_classes = 0, dg_per_class = 0, dg_side = 12, dg_channels = 3;
  double dg_noise = 0.5;
  std::string dg_dist = "public", dg_out;
  std::uint64_t dg_seed = 0;
  datagen->add_option("--classes", dg_classes, "Number of classes")->required()->check(CLI::Range(2, 100000));
  datagen->add_option("--per-class", dg_per_class, "Samples per class")->required()->check(CLI::PositiveNumber);
  datagen->add_option("--side", dg_side, "Image side length")->capture_default_str();
  datagen->add_option("--channels", dg_channels, "Image channels")->capture_default_str();
  datagen->add_option("--noise", dg_noise, "Per-pixel noise standard deviation")->capture_default_str();
  datagen->add_option("--distribution", dg_dist, "Template family")->capture_default_str();
  datagen->add_option("--seed", dg_seed, "Random seed")->capture_default_str();
  datagen->add_option("--out", dg_out, "Output .tsds path")->required();
  datagen->callback([&] {
    const Dataset d = data::gen_synthetic(dg_classes, dg_per_class, dg_side, dg_seed,
                                          {.distribution = dg_dist, .channels = dg_channels, .noise_sd = dg_noise});
    io::save_dataset(d, dg_out);
    std::cout << "wrote " << d.size() << " samples to " << dg_out << " (hash " << std::hex << dataset_hash(d)
              << std::dec << ")\n";
  });

  // train
  auto* train = app.add_subcommand("train", "Train a model on a dataset (fresh toy CNN or new head on a backbone)");
  std::string tr_data, tr_out, tr_init, tr_eval;
  std::size_t tr_width = 8;
  nn::TrainConfig tr_cfg;
  train->add_option("--data", tr_data, "Training set (.tsds)")->required()->check(CLI::ExistingFile);
  train->add_option("--out", tr_out, "Output model (.tsdp)")->required();
  train->add_option("--init", tr_init, "Backbone model; its head is replaced")->check(CLI::ExistingFile);
  train->add_option("--eval", tr_eval, "Held-out set to report accuracy on")->check(CLI::ExistingFile);
  train->add_option("--width", tr_width, "First conv width of a fresh toy CNN")->capture_default_str();
  train->add_option("--epochs", tr_cfg.epochs, "Epochs")->capture_default_str();
  train->add_option("--lr", tr_cfg.learning_rate, "Learning rate")->capture_default_str();
  train->add_option("--batch", tr_cfg.batch_size, "Batch size")->capture_default_str();
  train->add_option("--seed", tr_cfg.seed, "Random seed")->capture_default_str();
  train->callback([&] {
    const Dataset d = io::load_dataset(tr_data);
    const Shape s = d.sample_shape();
    ModelGraph init = tr_init.empty()
                          ? build_toy_cnn({.channels = s[0], .side = s[1], .width = tr_width, .n_classes = d.n_classes},
                                          derive_seed(tr_cfg.seed, "init"))
                          : replace_head(io::load_model(tr_init), d.n_classes, derive_seed(tr_cfg.seed, "head"));
    const ModelGraph m = nn::train_sgd(std::move(init), d, tr_cfg);
    io::save_model(m, tr_out);
    std::cout << "train_accuracy " << nn::accuracy(m, d) << "\n";
    if (!tr_eval.empty()) std::cout << "eval_accuracy " << nn::accuracy(m, io::load_dataset(tr_eval)) << "\n";
  });

  // partition
  auto* part = app.add_subcommand("partition", "Partition a model under a scheme and report its cost");
  std::string pa_model, pa_backbone, pa_scheme, pa_out;
  double pa_config = 0.0;
  std::uint64_t pa_seed = 0;
  part->add_option("--model", pa_model, "Model (.tsdp); a hybrid model file for teeslice")
      ->required()
      ->check(CLI::ExistingFile);
  part->add_option("--scheme", pa_scheme, "Scheme name")->required()->check(CLI::IsMember(kSchemes));
  part->add_option("--config", pa_config, "Scheme parameter; the scheme default when omitted");
  part->add_option("--backbone", pa_backbone, "Public backbone (ennclave only)")->check(CLI::ExistingFile);
  part->add_option("--seed", pa_seed, "Random seed")->capture_default_str();
  part->add_option("--out", pa_out, "Write the plan as JSON");
  part->callback([&] {
    const Scheme s = scheme_from_string(pa_scheme);
    ModelGraph g;
    PartitionPlan plan;
    if (s == Scheme::TeeSlice) {
      const auto h = teeslice::load_hybrid(pa_model);
      g = h.graph;
      plan = teeslice::deploy_plan(h);
    } else if (s == Scheme::Ennclave) {
      if (pa_backbone.empty()) throw std::invalid_argument("ennclave needs --backbone");
      auto r = partition::plan_ennclave(io::load_model(pa_model), io::load_model(pa_backbone));
      g = std::move(r.model);
      plan = std::move(r.plan);
    } else {
      g = io::load_model(pa_model);
      const auto cfg = optional_config(*part, pa_config);
      plan = partition::make_plan(s, g, cfg.value_or(partition::default_config(s).value_or(0.0)), pa_seed);
    }
    std::cout << cost_csv(plan, flops::utility_of_plan(g, plan));
    if (!pa_out.empty()) write_text(pa_out, plan_to_json(plan, g).dump(1) + "\n");
  });

  // attack
  auto* attack = app.add_subcommand("attack", "Run model stealing and membership inference against one cell");
  std::string at_lab, at_scheme, at_assumption = "backbone_only", at_json;
  double at_config = 0.0;
  std::uint64_t at_seed = 1;
  std::size_t at_budget = 0;
  attack->add_option("--lab", at_lab, "Lab settings JSON (defaults when omitted)")->check(CLI::ExistingFile);
  attack->add_option("--scheme", at_scheme, "Scheme name")->required()->check(CLI::IsMember(kSchemes));
  attack->add_option("--config", at_config, "Scheme parameter; the scheme default when omitted");
  attack->add_option("--assumption", at_assumption, "backbone_only, victim_known or hybrid_known")
      ->capture_default_str()
      ->check(CLI::IsMember({"backbone_only", "victim_known", "hybrid_known"}));
  attack->add_option("--budget", at_budget, "Query budget (overrides the lab setting)");
  attack->add_option("--seed", at_seed, "Lab seed")->capture_default_str();
  attack->add_option("--json", at_json, "Also write the report as JSON");
  attack->callback([&] {
    lab::LabConfig cfg = load_lab(at_lab);
    if (attack->count("--budget")) cfg.queries = at_budget;
    cfg.validate();
    const lab::Lab L(cfg, at_seed);
    const auto r = L.evaluate(scheme_from_string(at_scheme), optional_config(*attack, at_config),
                              attacks::assumption_from_string(at_assumption));
    std::cout << attacks::report_csv_header() << "\n" << attacks::report_csv_row(r) << "\n";
    if (!at_json.empty()) write_text(at_json, attacks::report_to_json(r).dump(1) + "\n");
  });

  // teeslice
  auto* tslice = app.add_subcommand("teeslice", "Train, prune and deploy a TEESlice hybrid model");
  std::string ts_lab, ts_out;
  std::uint64_t ts_seed = 1;
  tslice->add_option("--lab", ts_lab, "Lab settings JSON (defaults when omitted)")->check(CLI::ExistingFile);
  tslice->add_option("--seed", ts_seed, "Lab seed")->capture_default_str();
  tslice->add_option("--out-dir", ts_out, "Directory for the hybrid model, prune log and plan")->required();
  tslice->callback([&] {
    const lab::Lab L(load_lab(ts_lab), ts_seed);
    const auto& r = L.teeslice();
    const auto plan = teeslice::deploy_plan(r.pruned.model);
    const std::string tag = "s" + std::to_string(ts_seed);
    fs::create_directories(ts_out);
    teeslice::save_hybrid(r.pruned.model, fs::path(ts_out) / ("teeslice_" + tag + ".tsdp"));
    write_text(fs::path(ts_out) / ("prune_log_" + tag + ".csv"), teeslice::prune_log_csv(r.pruned.log));
    write_text(fs::path(ts_out) / ("plan_" + tag + ".json"), plan_to_json(plan, r.pruned.model.graph).dump(1) + "\n");
    std::cout << "victim_accuracy " << L.victim_accuracy() << "\nacc_tol " << r.pruned.acc_tol
              << "\nhybrid_accuracy " << r.accuracy << "\nslices " << r.pruned.model.slices.size() << "\n"
              << cost_csv(plan, flops::utility_of_plan(r.pruned.model.graph, plan));
  });

  // sweep
  auto* sweep = app.add_subcommand("sweep", "Sweep one scheme's grid and pick its sweet spot");
  std::string sw_spec, sw_lab, sw_out, sw_metric;
  double sw_delta = 0.0;
  std::size_t sw_workers = 1, sw_budget = 0;
  sweep->add_option("--spec", sw_spec, "Sweep spec JSON {scheme, grid, metric, delta, seeds, absolute}")
      ->required()
      ->check(CLI::ExistingFile);
  sweep->add_option("--lab", sw_lab, "Lab settings JSON (defaults when omitted)")->check(CLI::ExistingFile);
  sweep->add_option("--out-dir", sw_out, "Artifact tree root")->required();
  sweep->add_option("--metric", sw_metric, "Security metric (overrides the spec)");
  sweep->add_option("--delta", sw_delta, "Tolerance (overrides the spec)")->check(CLI::PositiveNumber);
  sweep->add_option("--budget", sw_budget, "Query budget (overrides the lab setting)");
  sweep->add_option("--workers", sw_workers, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
  sweep->callback([&] {
    sweetspot::SweepSpec spec = sweetspot::spec_from_json(read_json(sw_spec));
    if (!sw_metric.empty()) spec.metric = sweetspot::metric_from_string(sw_metric);
    if (sweep->count("--delta")) spec.delta = sw_delta;
    experiment::ExperimentConfig cfg;
    cfg.output_dir = sw_out;
    cfg.seeds = spec.seeds;
    cfg.workers = sw_workers;
    cfg.lab = load_lab(sw_lab);
    if (sweep->count("--budget")) cfg.lab.queries = sw_budget;
    cfg.lab.validate();
    cfg.schemes = {{spec.scheme, spec.grid}};
    cfg.metric = spec.metric;
    cfg.delta = spec.delta;
    cfg.absolute = spec.absolute;
    const auto summary = experiment::run_experiment(cfg);
    const fs::path frontier = fs::path(sw_out) / "sweeps" / (std::string(to_string(spec.scheme)) + "_frontier.csv");
    if (fs::exists(frontier)) std::cout << std::ifstream(frontier).rdbuf();
    const fs::path result = fs::path(sw_out) / "sweeps" / (std::string(to_string(spec.scheme)) + ".json");
    if (fs::exists(result)) {
      const auto r = sweetspot::result_from_json(read_json(result));
      if (r.chosen_index && r.cells[*r.chosen_index].config)
        std::cout << "sweet_spot " << *r.cells[*r.chosen_index].config << "\n";
      else if (r.chosen_index)
        std::cout << "sweet_spot (parameterless)\n";
      else
        std::cout << "sweet_spot none\n";
    }
    for (const auto& f : summary.failures) std::cerr << "failed: " << f << "\n";
    code = summary.exit_code();
  });

  // report
  auto* report = app.add_subcommand("report", "Render the schemes x metrics matrix from a cells CSV");
  std::string rp_in, rp_out;
  report->add_option("--in", rp_in, "cells.csv from a run or sweep")->required()->check(CLI::ExistingFile);
  report->add_option("--out", rp_out, "Also write the table to this file");
  report->callback([&] {
    std::ifstream in(rp_in);
    std::string line;
    std::getline(in, line);
    if (line != attacks::report_csv_header()) throw std::invalid_argument(rp_in + ": unexpected CSV header");
    std::vector<attacks::AttackReport> rows;
    while (std::getline(in, line))
      if (!line.empty()) rows.push_back(attacks::report_from_csv_row(line));
    const std::string table = experiment::render_matrix(rows);
    std::cout << table;
    if (!rp_out.empty()) write_text(rp_out, table);
  });

  // shadownet-attack
  auto* sn = app.add_subcommand("shadownet-attack", "Unmask and reposition obfuscated synthetic layers");
  std::size_t sn_layers = 1, sn_n = 16, sn_d = 144;
  double sn_wvar = 0.004, sn_noise = 0.01, sn_mask = 0.5, sn_r = 1.2, sn_thresh = 0.01;
  std::string sn_assign = "greedy", sn_json;
  std::uint64_t sn_seed = 0;
  sn->add_option("--layers", sn_layers, "Independent layers to attack")->capture_default_str();
  sn->add_option("--filters", sn_n, "Filters per layer")->capture_default_str();
  sn->add_option("--fan-in", sn_d, "Weights per filter")->capture_default_str();
  sn->add_option("--weight-var", sn_wvar, "Victim weight variance")->capture_default_str();
  sn->add_option("--noise", sn_noise, "Fine-tuning noise sd between public and victim")->capture_default_str();
  sn->add_option("--mask-var", sn_mask, "Mask variance")->capture_default_str();
  sn->add_option("--ratio", sn_r, "Obfuscation expansion ratio r")->capture_default_str();
  sn->add_option("--threshold", sn_thresh, "Unmasking variance threshold")->capture_default_str();
  sn->add_option("--assign", sn_assign, "greedy or hungarian")
      ->capture_default_str()
      ->check(CLI::IsMember({"greedy", "hungarian"}));
  sn->add_option("--seed", sn_seed, "Random seed")->capture_default_str();
  sn->add_option("--json", sn_json, "Write per-layer reports as JSON");
  sn->callback([&] {
    const auto mode = sn_assign == "greedy" ? shadownet::AssignMode::Greedy : shadownet::AssignMode::Hungarian;
    nlohmann::json layers = nlohmann::json::array();
    double weight = 0.0, position = 0.0;
    for (std::size_t k = 0; k < sn_layers; ++k) {
      const auto s = shadownet::synthetic_layer(sn_n, sn_d, sn_wvar, sn_noise, derive_seed(sn_seed, "layer" + std::to_string(k)));
      const auto o = shadownet::obfuscate(s.victim, derive_seed(sn_seed, "obf" + std::to_string(k)),
                                          {.r = sn_r, .mask_var = sn_mask});
      const auto cands = shadownet::attack_unmask(o.filters, sn_thresh);
      const auto r = shadownet::attack_recover_positions(cands, s.public_layer, mode, &s.victim);
      weight += r.weight_recovery_rate;
      position += r.position_recovery_rate;
      layers.push_back(shadownet::report_to_json(r));
    }
    std::cout << std::setprecision(6) << "layers " << sn_layers << "\nmean_weight_recovery "
              << weight / static_cast<double>(sn_layers) << "\nmean_position_recovery "
              << position / static_cast<double>(sn_layers) << "\n";
    if (!sn_json.empty()) write_text(sn_json, layers.dump(1) + "\n");
  });

  // offload-demo
  auto* od = app.add_subcommand("offload-demo", "Run a partitioned forward pass with verified GPU offload");
  std::string od_model, od_scheme = "magnitude", od_protocol = "masked", od_log;
  double od_config = 0.0;
  std::size_t od_batch = 4, od_rounds = 1;
  bool od_corrupt = false;
  std::uint64_t od_seed = 0;
  od->add_option("--model", od_model, "Model (.tsdp); a random toy CNN when omitted")->check(CLI::ExistingFile);
  od->add_option("--scheme", od_scheme, "Scheme name")->capture_default_str()->check(CLI::IsMember(kSchemes));
  od->add_option("--config", od_config, "Scheme parameter; the scheme default when omitted");
  od->add_option("--protocol", od_protocol, "plain, quantized_plain or masked")
      ->capture_default_str()
      ->check(CLI::IsMember({"plain", "quantized_plain", "masked"}));
  od->add_option("--batch", od_batch, "Batch size")->capture_default_str()->check(CLI::PositiveNumber);
  od->add_option("--rounds", od_rounds, "Freivalds rounds per layer")->capture_default_str()->check(CLI::PositiveNumber);
  od->add_flag("--corrupt", od_corrupt, "Use a GPU that tampers with every result");
  od->add_option("--seed", od_seed, "Random seed")->capture_default_str();
  od->add_option("--verify-log", od_log, "Write the verification log as JSON lines");
  od->callback([&] {
    const ModelGraph g = od_model.empty() ? build_toy_cnn({}, derive_seed(od_seed, "model")) : io::load_model(od_model);
    const Scheme s = scheme_from_string(od_scheme);
    if (s == Scheme::TeeSlice || s == Scheme::Ennclave)
      throw std::invalid_argument("offload-demo partitions a single model; use a per-model scheme");
    const auto cfg = optional_config(*od, od_config);
    const PartitionPlan plan =
        partition::make_plan(s, g, cfg.value_or(partition::default_config(s).value_or(0.0)), od_seed);
    Shape in_shape = g.input_shape();
    in_shape.insert(in_shape.begin(), od_batch);
    Tensor x(in_shape);
    Rng rng(derive_seed(od_seed, "input"));
    for (auto& v : x.vec()) v = rng.uniform(0.0, 1.0);

    offload::ExecOptions opt{.protocol = offload::protocol_from_string(od_protocol), .seed = od_seed};
    offload::PadPool pads(derive_seed(od_seed, "pads"), {}, od_rounds);
    if (opt.protocol == offload::Protocol::Masked) {
      offload::prepare_pads(pads, g, plan, od_batch, 1);
      opt.pads = &pads;
    }
    offload::CorruptingGpu bad(derive_seed(od_seed, "corrupt"));
    if (od_corrupt) opt.gpu = &bad;
    std::vector<offload::VerifyRecord> log;
    try {
      const auto r = offload::execute_plan(g, plan, x, opt);
      log = r.verify_log;
      double diff = 0.0;
      const Tensor want = nn::forward(g, x);
      for (std::size_t i = 0; i < want.size(); ++i) diff = std::max(diff, std::abs(want[i] - r.output[i]));
      std::cout << "max_abs_diff_vs_plain " << diff << "\n" << cost_csv(plan, r.cost);
    } catch (const offload::IntegrityError& e) {
      log = e.log();
      std::cerr << "integrity: " << e.what() << "\n";
      code = kIntegrity;
    }
    const std::string jsonl = offload::verify_log_jsonl(log);
    std::cout << jsonl;
    if (!od_log.empty()) write_text(od_log, jsonl);
  });

  // run
  auto* run = app.add_subcommand("run", "Run a full experiment config and write the artifact tree");
  std::string rn_config, rn_metric;
  double rn_delta = 0.0;
  std::size_t rn_workers = 0, rn_budget = 0;
  bool rn_quiet = false;
  run->add_option("--config", rn_config, "Experiment config JSON")->required()->check(CLI::ExistingFile);
  run->add_option("--workers", rn_workers, "Worker threads (overrides the config)")->check(CLI::PositiveNumber);
  run->add_option("--metric", rn_metric, "Security metric (overrides the config)");
  run->add_option("--delta", rn_delta, "Tolerance (overrides the config)")->check(CLI::PositiveNumber);
  run->add_option("--budget", rn_budget, "Query budget (overrides the lab setting)");
  run->add_flag("--quiet", rn_quiet, "Only write the log file");
  run->callback([&] {
    auto j = read_json(rn_config);
    if (run->count("--workers")) j["workers"] = rn_workers;
    if (!rn_metric.empty()) j["metric"] = rn_metric;
    if (run->count("--delta")) j["delta"] = rn_delta;
    if (run->count("--budget")) j["lab"]["queries"] = rn_budget;
    const auto cfg = experiment::config_from_json(j);
    const auto s = experiment::run_experiment(cfg, rn_quiet ? nullptr : &std::cerr);
    std::cout << "cells_computed " << s.cells_computed << "\ncells_cached " << s.cells_cached << "\nfailures "
              << s.failures.size() << "\n";
    for (const auto& f : s.failures) std::cout << "failed: " << f << "\n";
    code = s.exit_code();
  });

  // manpage
  auto* man = app.add_subcommand("manpage", "Print a roff manual page for all subcommands");
  man->callback([&] { std::cout << manpage(app); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kBadInput;
  } catch (const experiment::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    for (const auto& m : e.errors()) std::cerr << "  " << m << "\n";
    return kBadInput;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kBadInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return code;
}
