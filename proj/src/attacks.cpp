#include "tsdp/attacks.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "tsdp/engine.hpp"
#include "tsdp/models.hpp"

namespace tsdp::attacks {

std::string_view to_string(Assumption a) {
  switch (a) {
    case Assumption::HybridKnown:
      return "hybrid_known";
    case Assumption::BackboneOnly:
      return "backbone_only";
    case Assumption::VictimKnown:
      return "victim_known";
  }
  return "?";
}

Assumption assumption_from_string(std::string_view s) {
  if (s == "hybrid_known") return Assumption::HybridKnown;
  if (s == "backbone_only") return Assumption::BackboneOnly;
  if (s == "victim_known") return Assumption::VictimKnown;
  throw std::invalid_argument("unknown assumption '" + std::string(s) + "'");
}

// ---------------------------------------------------------------- oracle

LabelOracle::LabelOracle(ModelGraph deployed) : model_(std::move(deployed)) {
  model_.set_output_mode(OutputMode::LabelOnly);
  n_classes_ = shape_numel(model_.output_shape());
}

std::vector<int> LabelOracle::query(const Tensor& images) const {
  queries_ += images.dim(0);
  const Tensor ids = nn::forward(model_, images);
  std::vector<int> out(ids.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<int>(ids[i]);
  return out;
}

// ------------------------------------------------------------ surrogate

namespace {

// Fresh parameters for a node whose weights the attacker cannot see.
void reinit_node(Node& n, Rng& rng) {
  for (auto& [name, t] : n.layer.params) {
    if (name == "weight") {
      const double fan_in = static_cast<double>(t.size() / t.dim(0));
      const double sd = std::sqrt((n.layer.kind == LayerKind::Linear ? 1.0 : 2.0) / fan_in);
      for (auto& v : t.vec()) v = rng.normal(0.0, sd);
    } else if (name == "gamma" || name == "running_var") {
      t.fill(1.0);
    } else {
      t.fill(0.0);
    }
  }
}

bool same_param_shapes(const Node& a, const Node& b) {
  if (a.layer.kind != b.layer.kind || a.layer.params.size() != b.layer.params.size()) return false;
  for (const auto& [name, t] : a.layer.params) {
    auto it = b.layer.params.find(name);
    if (it == b.layer.params.end() || it->second.shape() != t.shape()) return false;
  }
  return true;
}

}  // namespace

SurrogateInit surrogate_init(const PartitionPlan& plan, const ModelGraph& deployed, const ModelGraph& public_model,
                             const InitOptions& opt) {
  plan.check_against(deployed);
  SurrogateInit si;
  si.assumption = opt.assumption;
  const std::size_t n_classes = shape_numel(deployed.output_shape());
  Rng rng(derive_seed(opt.seed, "surrogate_init"));

  if (opt.assumption == Assumption::HybridKnown) {
    if (plan.scheme != Scheme::TeeSlice) {
      throw std::invalid_argument("hybrid_known applies to teeslice deployments only");
    }
    // Known architecture; only the GPU-resident weights are real.
    si.base = deployed;
    si.base.set_output_mode(OutputMode::Logits);
    for (std::size_t i = 0; i < si.base.size(); ++i) {
      Node& n = si.base.node(i);
      n.frozen = false;
      if (n.layer.params.empty()) continue;
      if (plan.at(i) == Placement::GPU) {
        si.transplanted.push_back(i);
      } else {
        reinit_node(n, rng);
      }
    }
    return si;
  }

  si.base = replace_head(public_model, n_classes, derive_seed(opt.seed, "surrogate_head"));
  si.base.set_output_mode(OutputMode::Logits);
  for (std::size_t i = 0; i < si.base.size(); ++i) si.base.node(i).frozen = false;

  bool complete = true;
  for (std::size_t j = 0; j < deployed.size(); ++j) {
    const Node& src = deployed.node(j);
    if (src.layer.params.empty()) continue;
    const Placement where = plan.at(j);
    const bool masked = plan.weight_masks.count(j) > 0;
    const bool scaled = plan.scalars.count(j) > 0;
    if (where != Placement::GPU || scaled) complete = false;
    if (where == Placement::TEE && !masked) continue;

    const auto bi = si.base.find(src.layer.name);
    if (!bi || !same_param_shapes(si.base.node(*bi), src)) {
      if (plan.scheme == Scheme::TeeSlice) continue;  // private slices and head
      throw std::invalid_argument("surrogate base has no layer matching offloaded " + src.layer.name);
    }
    Node& dst = si.base.node(*bi);
    if (where == Placement::GPU) {
      dst.layer.params = src.layer.params;
      if (scaled) {
        // The GPU holds scalar * W; the scalar itself stays in the TEE.
        const double s = plan.scalars.at(j);
        for (auto& v : dst.layer.params.at("weight").vec()) v *= s;
        if (auto b = dst.layer.params.find("bias"); b != dst.layer.params.end()) {
          for (auto& v : b->second.vec()) v *= s;
        }
      }
    } else if (where == Placement::OBFUSCATED) {
      const Tensor& w = src.layer.params.at("weight");
      const auto obf = shadownet::obfuscate(w, derive_seed(opt.seed, "obfuscate:" + src.layer.name));
      const Tensor& ref = dst.layer.params.at("weight");
      const double thr = opt.unmask_threshold_ratio * shadownet::sample_variance(ref.vec());
      const auto cands = shadownet::attack_unmask(obf.filters, thr);
      auto rep = shadownet::attack_recover_positions(cands, ref, shadownet::AssignMode::Greedy, &w);
      dst.layer.params.at("weight") = rep.recovered;
      si.recovery.emplace_back(src.layer.name, std::move(rep));
    } else {
      // Magnitude: only unmasked entries of the covered tensor are offloaded.
      const std::string pname(mask_param(src.layer.kind));
      const auto& mask = plan.weight_masks.at(j);
      const Tensor& from = src.layer.params.at(pname);
      Tensor& to = dst.layer.params.at(pname);
      for (std::size_t k = 0; k < mask.size(); ++k) {
        if (!mask[k]) to[k] = from[k];
      }
    }
    si.transplanted.push_back(*bi);
  }
  if (complete && plan.scheme != Scheme::TeeSlice) {
    si.complete = true;
    si.base = deployed;
    si.base.set_output_mode(OutputMode::Logits);
    for (std::size_t i = 0; i < si.base.size(); ++i) si.base.node(i).frozen = false;
    si.notes.push_back("every parameter is offloaded; the surrogate is the victim");
  }
  return si;
}

ModelGraph model_steal(const SurrogateInit& si, const LabelOracle& oracle, const data::QuerySet& queries,
                       const nn::TrainConfig& cfg) {
  if (queries.size() == 0 || si.complete) return si.base;
  Dataset d;
  d.images = queries.images;
  d.labels = oracle.query(queries.images);
  d.n_classes = oracle.n_classes();
  d.distribution = "queries";
  return nn::train_sgd(si.base, d, cfg);
}

// --------------------------------------------------------- membership

void LogisticRegression::fit(const std::vector<std::vector<double>>& x, const std::vector<int>& y) {
  if (x.empty() || x.size() != y.size()) throw std::invalid_argument("logistic regression needs matching rows");
  const std::size_t n = x.size(), d = x[0].size();
  mean_.assign(d, 0.0);
  sd_.assign(d, 0.0);
  for (const auto& r : x)
    for (std::size_t k = 0; k < d; ++k) mean_[k] += r[k] / static_cast<double>(n);
  for (const auto& r : x)
    for (std::size_t k = 0; k < d; ++k) sd_[k] += (r[k] - mean_[k]) * (r[k] - mean_[k]) / static_cast<double>(n);
  for (auto& s : sd_) s = s > 1e-24 ? std::sqrt(s) : 1.0;

  Eigen::MatrixXd X(n, d + 1);
  Eigen::VectorXd Y(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d; ++k) X(i, k) = (x[i][k] - mean_[k]) / sd_[k];
    X(i, d) = 1.0;
    Y(i) = y[i];
  }
  const double ridge = 1e-3 * static_cast<double>(n);
  Eigen::VectorXd w = Eigen::VectorXd::Zero(d + 1);
  for (int it = 0; it < 100; ++it) {
    const Eigen::VectorXd p = (-(X * w)).array().exp().unaryExpr([](double e) { return 1.0 / (1.0 + e); });
    Eigen::VectorXd g = X.transpose() * (p - Y) + ridge * w;
    const Eigen::VectorXd s = (p.array() * (1.0 - p.array())).matrix();
    Eigen::MatrixXd H = X.transpose() * s.asDiagonal() * X;
    H.diagonal().array() += ridge;
    const Eigen::VectorXd step = H.ldlt().solve(g);
    w -= step;
    if (step.norm() < 1e-10) break;
  }
  w_.assign(w.data(), w.data() + w.size());
}

double LogisticRegression::predict_proba(const std::vector<double>& x) const {
  if (w_.empty()) throw std::logic_error("logistic regression used before fit");
  double z = w_.back();
  for (std::size_t k = 0; k < x.size(); ++k) z += w_[k] * (x[k] - mean_[k]) / sd_[k];
  return nn::sigmoid(z);
}

std::vector<std::vector<double>> confidence_features(const ModelGraph& m, const Tensor& images) {
  const std::size_t n = images.dim(0);
  std::vector<std::vector<double>> out(n);
  if (n == 0) return out;
  const Tensor p = nn::softmax(nn::logits(m, images));
  const std::size_t c = p.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> row(p.vec().begin() + static_cast<std::ptrdiff_t>(i * c),
                            p.vec().begin() + static_cast<std::ptrdiff_t>((i + 1) * c));
    std::sort(row.begin(), row.end(), std::greater<>());
    row.resize(3, 0.0);
    out[i] = std::move(row);
  }
  return out;
}

std::vector<std::vector<double>> gradient_features(const ModelGraph& m, const Dataset& d) {
  const std::size_t last = m.size() - 1;
  const Node& head = m.node(last);
  if (head.layer.kind != LayerKind::Linear) {
    throw std::invalid_argument("gradient features need a model ending in a linear layer");
  }
  const std::size_t n = d.size(), c = head.layer.c_out;
  std::vector<std::vector<double>> out(n, std::vector<double>(3, 0.0));
  constexpr std::size_t kChunk = 128;
  for (std::size_t s = 0; s < n; s += kChunk) {
    const std::size_t e = std::min(n, s + kChunk);
    const Tensor x = d.images.slice_rows(s, e);
    const std::span<const int> y(d.labels.data() + s, e - s);
    nn::Trace tr;
    const Tensor logits = nn::run(m, x, nn::Mode::Eval, &tr);
    const Tensor p = nn::softmax(logits.reshaped({e - s, c}));
    const int src = head.inputs[0];
    const Tensor& h = src < 0 ? tr.input : tr.outputs[static_cast<std::size_t>(src)];
    const std::size_t hd = h.size() / (e - s);
    const Tensor gx = nn::grad_wrt_input(m, x, y);
    const std::size_t xd = gx.size() / (e - s);
    for (std::size_t i = 0; i < e - s; ++i) {
      auto& f = out[s + i];
      const double py = std::max(p[i * c + static_cast<std::size_t>(y[i])], 1e-300);
      f[0] = -std::log(py);
      double gx2 = 0.0;
      for (std::size_t k = 0; k < xd; ++k) gx2 += gx[i * xd + k] * gx[i * xd + k];
      f[1] = std::sqrt(gx2);
      // dL/dW = (p - e_y) h^T and dL/db = p - e_y.
      double r2 = 0.0, h2 = head.layer.has_bias ? 1.0 : 0.0;
      for (std::size_t k = 0; k < c; ++k) {
        const double r = p[i * c + k] - (static_cast<int>(k) == y[i] ? 1.0 : 0.0);
        r2 += r * r;
      }
      for (std::size_t k = 0; k < hd; ++k) h2 += h[i * hd + k] * h[i * hd + k];
      f[2] = std::sqrt(r2 * h2);
    }
  }
  return out;
}

MiaAttack::MiaAttack(const ModelGraph& shadow, const data::MiaSplit& split, MiaFeatures kind) : kind_(kind) {
  auto x = features(shadow, split.shadow_train);
  auto out = features(shadow, split.shadow_test);
  std::vector<int> y(x.size(), 1);
  y.resize(x.size() + out.size(), 0);
  x.insert(x.end(), out.begin(), out.end());
  degenerate_ = std::all_of(x.begin(), x.end(), [&](const auto& r) { return r == x.front(); });
  if (!degenerate_) clf_.fit(x, y);
}

std::vector<std::vector<double>> MiaAttack::features(const ModelGraph& m, const Dataset& d) const {
  return kind_ == MiaFeatures::Confidence ? confidence_features(m, d.images) : gradient_features(m, d);
}

MiaResult MiaAttack::evaluate(const ModelGraph& target, const data::MiaSplit& split) const {
  MiaResult r;
  if (degenerate_) {
    r.degenerate = true;
    return r;
  }
  auto rate = [&](const Dataset& d, int label) {
    const auto f = features(target, d);
    std::size_t hit = 0;
    for (const auto& row : f) hit += clf_.predict(row) == label;
    return f.empty() ? 0.5 : static_cast<double>(hit) / static_cast<double>(f.size());
  };
  r.accuracy = 0.5 * (rate(split.target_train, 1) + rate(split.target_test, 0));
  return r;
}

double mia_confidence(const ModelGraph& surrogate, const ModelGraph& shadow, const data::MiaSplit& split) {
  return MiaAttack(shadow, split, MiaFeatures::Confidence).evaluate(surrogate, split).accuracy;
}

double mia_gradient(const ModelGraph& surrogate, const ModelGraph& shadow, const data::MiaSplit& split) {
  return MiaAttack(shadow, split, MiaFeatures::Gradient).evaluate(surrogate, split).accuracy;
}

// -------------------------------------------------------------- metrics

namespace {

double mean_max_confidence(const ModelGraph& m, const Dataset& d) {
  if (d.size() == 0) return 0.0;
  double s = 0.0;
  for (const auto& f : confidence_features(m, d.images)) s += f[0];
  return s / static_cast<double>(d.size());
}

}  // namespace

AttackReport compute_metrics(const ModelGraph& surrogate, const ModelGraph& victim, const Dataset& testset,
                             const data::MiaSplit& split, const MiaAttack& conf_mia, const MiaAttack& grad_mia,
                             const MetricOptions& opt) {
  AttackReport r;
  const auto spred = nn::predict(surrogate, testset.images);
  const auto vpred = nn::predict(victim, testset.images);
  r.ms_accuracy = nn::accuracy(spred, testset.labels);
  std::size_t agree = 0;
  for (std::size_t i = 0; i < spred.size(); ++i) agree += spred[i] == vpred[i];
  r.fidelity = spred.empty() ? 0.0 : static_cast<double>(agree) / static_cast<double>(spred.size());

  std::vector<std::size_t> base;
  for (std::size_t i = 0; i < vpred.size(); ++i) {
    if (vpred[i] == testset.labels[i]) base.push_back(i);
  }
  if (base.empty()) {
    r.skipped.push_back("asr: victim misclassifies every test sample");
  } else {
    const Tensor x = testset.images.gather_rows(base);
    std::vector<int> y;
    for (std::size_t i : base) y.push_back(testset.labels[i]);
    const Tensor adv = nn::pgd_attack(surrogate, x, y, opt.pgd);
    const auto vadv = nn::predict(victim, adv);
    std::size_t fooled = 0;
    for (std::size_t i = 0; i < y.size(); ++i) fooled += vadv[i] != y[i];
    r.asr = static_cast<double>(fooled) / static_cast<double>(y.size());
  }

  r.generalization_gap = nn::accuracy(surrogate, split.target_train) - nn::accuracy(surrogate, split.target_test);
  r.confidence_gap = mean_max_confidence(surrogate, split.target_train) - mean_max_confidence(surrogate, split.target_test);

  const MiaResult cm = conf_mia.evaluate(surrogate, split);
  r.conf_mia_acc = cm.accuracy;
  if (cm.degenerate) r.skipped.push_back("conf_mia: degenerate shadow features");
  const MiaResult gm = grad_mia.evaluate(surrogate, split);
  r.grad_mia_acc = gm.accuracy;
  if (gm.degenerate) r.skipped.push_back("grad_mia: degenerate shadow features");
  return r;
}

// ------------------------------------------------------------------ CSV

std::string report_csv_header() {
  return "scheme,config,seed,ms_accuracy,fidelity,asr,conf_mia_acc,grad_mia_acc,generalization_gap,"
         "confidence_gap,queries,flops_tee,flops_gpu,flops_total,pct_flops_tee,sim_latency,mia_classifier,skipped";
}

std::string report_csv_row(const AttackReport& r) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << r.scheme << ',';
  if (r.config) os << *r.config;
  os << ',' << r.seed << ',' << r.ms_accuracy << ',' << r.fidelity << ',' << r.asr << ',' << r.conf_mia_acc << ','
     << r.grad_mia_acc << ',' << r.generalization_gap << ',' << r.confidence_gap << ',' << r.queries << ','
     << r.utility.flops_tee << ',' << r.utility.flops_gpu << ',' << r.utility.flops_total << ','
     << r.utility.pct_flops_tee << ',' << r.utility.sim_latency << ',' << r.mia_classifier << ',';
  for (std::size_t i = 0; i < r.skipped.size(); ++i) {
    std::string s = r.skipped[i];
    std::replace(s.begin(), s.end(), ',', ' ');
    std::replace(s.begin(), s.end(), ';', ' ');
    os << (i ? ";" : "") << s;
  }
  return os.str();
}

AttackReport report_from_csv_row(const std::string& row) {
  std::vector<std::string> f;
  std::string cell;
  std::istringstream is(row);
  while (std::getline(is, cell, ',')) f.push_back(cell);
  if (!row.empty() && row.back() == ',') f.emplace_back();
  if (f.size() != 18) {
    throw std::invalid_argument("report row has " + std::to_string(f.size()) + " fields, expected 18");
  }
  AttackReport r;
  r.scheme = f[0];
  if (!f[1].empty()) r.config = std::stod(f[1]);
  r.seed = std::stoull(f[2]);
  r.ms_accuracy = std::stod(f[3]);
  r.fidelity = std::stod(f[4]);
  r.asr = std::stod(f[5]);
  r.conf_mia_acc = std::stod(f[6]);
  r.grad_mia_acc = std::stod(f[7]);
  r.generalization_gap = std::stod(f[8]);
  r.confidence_gap = std::stod(f[9]);
  r.queries = std::stoull(f[10]);
  r.utility.flops_tee = std::stoull(f[11]);
  r.utility.flops_gpu = std::stoull(f[12]);
  r.utility.flops_total = std::stoull(f[13]);
  r.utility.pct_flops_tee = std::stod(f[14]);
  r.utility.sim_latency = std::stod(f[15]);
  r.mia_classifier = f[16];
  std::istringstream sk(f[17]);
  while (std::getline(sk, cell, ';')) {
    if (!cell.empty()) r.skipped.push_back(cell);
  }
  return r;
}

nlohmann::json report_to_json(const AttackReport& r) {
  nlohmann::json j{{"scheme", r.scheme},
                   {"config", r.config ? nlohmann::json(*r.config) : nlohmann::json(nullptr)},
                   {"seed", r.seed},
                   {"ms_accuracy", r.ms_accuracy},
                   {"fidelity", r.fidelity},
                   {"asr", r.asr},
                   {"conf_mia_acc", r.conf_mia_acc},
                   {"grad_mia_acc", r.grad_mia_acc},
                   {"generalization_gap", r.generalization_gap},
                   {"confidence_gap", r.confidence_gap},
                   {"queries", r.queries},
                   {"mia_classifier", r.mia_classifier},
                   {"skipped", r.skipped}};
  j["utility"] = {{"flops_tee", r.utility.flops_tee},
                  {"flops_gpu", r.utility.flops_gpu},
                  {"flops_total", r.utility.flops_total},
                  {"pct_flops_tee", r.utility.pct_flops_tee},
                  {"sim_latency", r.utility.sim_latency},
                  {"elementwise_tee", r.utility.elementwise_tee},
                  {"elementwise_gpu", r.utility.elementwise_gpu}};
  return j;
}

AttackReport report_from_json(const nlohmann::json& j) {
  AttackReport r;
  r.scheme = j.at("scheme").get<std::string>();
  if (!j.at("config").is_null()) r.config = j.at("config").get<double>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.ms_accuracy = j.at("ms_accuracy").get<double>();
  r.fidelity = j.at("fidelity").get<double>();
  r.asr = j.at("asr").get<double>();
  r.conf_mia_acc = j.at("conf_mia_acc").get<double>();
  r.grad_mia_acc = j.at("grad_mia_acc").get<double>();
  r.generalization_gap = j.at("generalization_gap").get<double>();
  r.confidence_gap = j.at("confidence_gap").get<double>();
  r.queries = j.at("queries").get<std::size_t>();
  r.mia_classifier = j.at("mia_classifier").get<std::string>();
  r.skipped = j.at("skipped").get<std::vector<std::string>>();
  const auto& u = j.at("utility");
  r.utility.flops_tee = u.at("flops_tee").get<std::uint64_t>();
  r.utility.flops_gpu = u.at("flops_gpu").get<std::uint64_t>();
  r.utility.flops_total = u.at("flops_total").get<std::uint64_t>();
  r.utility.pct_flops_tee = u.at("pct_flops_tee").get<double>();
  r.utility.sim_latency = u.at("sim_latency").get<double>();
  r.utility.elementwise_tee = u.at("elementwise_tee").get<std::uint64_t>();
  r.utility.elementwise_gpu = u.at("elementwise_gpu").get<std::uint64_t>();
  return r;
}

}  // namespace tsdp::attacks
