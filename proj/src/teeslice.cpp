#include "tsdp/teeslice.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <tuple>

#include "tsdp/engine.hpp"
#include "tsdp/flops.hpp"
#include "tsdp/models.hpp"
#include "tsdp/serialize.hpp"

namespace tsdp::teeslice {

std::vector<std::string> Slice::node_names() const {
  return {prefix + "/down", prefix + "/up", prefix + "/bn", gate_name()};
}

double HybridModel::alpha(const Slice& s) const {
  const auto& l = graph.node(graph.index_of(s.gate_name())).layer;
  return nn::sigmoid(l.params.at("logit")[0]);
}

std::vector<double> HybridModel::alphas() const {
  std::vector<double> a;
  for (const auto& s : slices) a.push_back(alpha(s));
  return a;
}

std::uint64_t HybridModel::slice_flops(const Slice& s) const {
  std::uint64_t f = 0;
  for (const auto& name : s.node_names()) f += flops::flops_of_layer(graph.node(graph.index_of(name)).layer);
  return f;
}

std::vector<std::size_t> HybridModel::backbone_indices() const {
  std::vector<std::size_t> idx;
  for (const auto& name : backbone_nodes) idx.push_back(graph.index_of(name));
  return idx;
}

std::uint64_t HybridModel::backbone_flops() const {
  std::uint64_t f = 0;
  for (std::size_t i : backbone_indices()) f += flops::flops_of_layer(graph.node(i).layer);
  return f;
}

std::uint64_t HybridModel::current_backbone_checksum() const {
  return params_checksum(graph, backbone_indices());
}

namespace {

std::uint64_t adapter_flops(std::size_t c_from, std::size_t c_to, std::size_t r, std::size_t spatial) {
  return 2ULL * spatial * (c_from * r + r * c_to + c_to);
}

}  // namespace

HybridModel build_dense(const ModelGraph& backbone, std::size_t n_classes, std::uint64_t seed,
                        const BuildOptions& opt) {
  if (opt.flops_divisor == 0 || opt.max_distance == 0) {
    throw std::invalid_argument("flops_divisor and max_distance must be positive");
  }
  const auto& src = backbone.nodes();
  std::size_t head = src.size();
  for (std::size_t i = src.size(); i-- > 0;) {
    if (src[i].layer.kind == LayerKind::Linear) {
      head = i;
      break;
    }
  }
  // Conv blocks: the conv and the first ReLU after it, before the next conv.
  struct Block {
    std::size_t conv, relu;
  };
  std::vector<Block> blocks;
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].layer.kind != LayerKind::Conv2d) continue;
    for (std::size_t j = i + 1; j < src.size() && src[j].layer.kind != LayerKind::Conv2d; ++j) {
      if (src[j].layer.kind == LayerKind::ReLU) {
        blocks.push_back({i, j});
        break;
      }
    }
  }
  if (blocks.size() < 2) {
    throw GraphError("backbone has " + std::to_string(blocks.size()) +
                     " conv blocks; slicing needs at least two");
  }

  HybridModel m;
  std::map<std::size_t, std::vector<Slice>> into;  // relu node -> slices
  for (std::size_t i = 1; i < blocks.size(); ++i) {
    const std::size_t lo = i > opt.max_distance ? i - opt.max_distance : 0;
    for (std::size_t p = lo; p < i; ++p) {
      const Shape& in = src[blocks[p].relu].layer.out_shape;
      const Shape& out = src[blocks[i].relu].layer.in_shape;
      if (in[1] % out[1] != 0 || in[2] % out[2] != 0) continue;
      const std::size_t stride = in[1] / out[1];
      if (in[2] / out[2] != stride) continue;
      const std::uint64_t budget = flops::flops_of_layer(src[blocks[i].conv].layer) / opt.flops_divisor;
      const std::size_t spatial = out[1] * out[2];
      std::size_t rank = 0;
      for (std::size_t r = 1; r <= out[0]; ++r) {
        if (adapter_flops(in[0], out[0], r, spatial) <= budget) rank = r;
      }
      if (rank == 0) continue;
      Slice s;
      s.from = p + 1;
      s.to = i + 1;
      s.rank = rank;
      s.prefix = "slice" + std::to_string(s.from) + "_" + std::to_string(s.to);
      into[blocks[i].relu].push_back(s);
    }
  }

  std::vector<Node> nodes;
  std::vector<int> remap(src.size(), -1);
  auto mapped = [&](int s) { return s < 0 ? s : remap[static_cast<std::size_t>(s)]; };
  for (std::size_t j = 0; j < src.size(); ++j) {
    Node n = src[j];
    for (int& s : n.inputs) s = mapped(s);
    if (auto it = into.find(j); it != into.end()) {
      std::vector<int> merge_in{n.inputs[0]};
      for (const Slice& s : it->second) {
        const std::size_t from_relu = blocks[s.from - 1].relu;
        GraphBuilder b(src[from_relu].layer.out_shape, derive_seed(seed, s.prefix));
        const Shape& target = src[j].layer.in_shape;
        const std::size_t stride = src[from_relu].layer.out_shape[1] / target[1];
        int x = b.conv(GraphBuilder::kInput, s.prefix + "/down", s.rank, 1, stride);
        x = b.conv(x, s.prefix + "/up", target[0], 1);
        x = b.batchnorm(x, s.prefix + "/bn");
        b.gate(x, s.prefix + "/gate", opt.init_logit);
        const ModelGraph chain = std::move(b).build();
        const int base = static_cast<int>(nodes.size());
        for (Node c : chain.nodes()) {
          for (int& in : c.inputs) in = in < 0 ? remap[from_relu] : base + in;
          c.role = "slice";
          c.frozen = false;
          nodes.push_back(std::move(c));
        }
        merge_in.push_back(static_cast<int>(nodes.size()) - 1);
        m.slices.push_back(s);
      }
      Node merge;
      merge.layer.kind = LayerKind::ResidualAdd;
      merge.layer.name = "merge" + std::to_string(it->second.front().to);
      merge.inputs = std::move(merge_in);
      merge.role = "merge";
      nodes.push_back(std::move(merge));
      n.inputs = {static_cast<int>(nodes.size()) - 1};
    }
    if (j != head) {
      n.role = "backbone";
      n.frozen = true;
      m.backbone_nodes.push_back(n.layer.name);
    } else {
      n.role = "head";
      n.frozen = false;
    }
    remap[j] = static_cast<int>(nodes.size());
    nodes.push_back(std::move(n));
  }
  std::sort(m.slices.begin(), m.slices.end(),
            [](const Slice& a, const Slice& b) { return std::tie(a.from, a.to) < std::tie(b.from, b.to); });
  ModelGraph g(backbone.input_shape(), std::move(nodes), OutputMode::Logits);
  m.graph = head < src.size() ? replace_head(g, n_classes, seed) : std::move(g);
  m.backbone_checksum = m.current_backbone_checksum();
  return m;
}

nn::Regularizer complexity_penalty(const HybridModel& m, double lambda) {
  const double total = static_cast<double>(m.backbone_flops());
  std::vector<std::pair<std::size_t, double>> gates;
  for (const auto& s : m.slices) {
    gates.emplace_back(m.graph.index_of(s.gate_name()), static_cast<double>(m.slice_flops(s)) / total);
  }
  return [gates, lambda](const ModelGraph& g, nn::ParamGrads& grads) {
    double loss = 0.0;
    for (const auto& [idx, ratio] : gates) {
      const double a = nn::sigmoid(g.node(idx).layer.params.at("logit")[0]);
      loss += lambda * a * ratio;
      Tensor& gl = grads.at(idx)["logit"];
      if (gl.empty()) gl = Tensor({1});
      gl[0] += lambda * ratio * a * (1.0 - a);
    }
    return loss;
  };
}

HybridModel train_dense(HybridModel m, const Dataset& d, const nn::TrainConfig& cfg, double lambda) {
  if (lambda < 0.0) throw std::invalid_argument("lambda must be >= 0");
  nn::Regularizer reg = lambda > 0.0 && !m.slices.empty() ? complexity_penalty(m, lambda) : nn::Regularizer{};
  m.graph = nn::train_sgd(std::move(m.graph), d, cfg, reg);
  return m;
}

HybridModel remove_slices(const HybridModel& m, const std::vector<std::size_t>& slice_ids) {
  std::vector<bool> removed(m.graph.size(), false);
  std::vector<bool> drop(m.slices.size(), false);
  for (std::size_t id : slice_ids) {
    drop.at(id) = true;
    for (const auto& name : m.slices[id].node_names()) removed[m.graph.index_of(name)] = true;
  }
  HybridModel out;
  out.graph = m.graph.without(removed);
  out.backbone_nodes = m.backbone_nodes;
  out.backbone_checksum = m.backbone_checksum;
  out.pruning_failed = m.pruning_failed;
  for (std::size_t i = 0; i < m.slices.size(); ++i) {
    if (!drop[i]) out.slices.push_back(m.slices[i]);
  }
  return out;
}

void PruneConfig::validate() const {
  if (!(delta > 0.0 && delta < 1.0)) throw std::invalid_argument("delta must lie in (0, 1)");
  if (!(alpha_setup > 0.0 && alpha_setup < 1.0)) throw std::invalid_argument("alpha_setup must lie in (0, 1)");
  if (lambda < 0.0) throw std::invalid_argument("lambda must be >= 0");
}

PartitionPlan deploy_plan(const HybridModel& m) {
  PartitionPlan p;
  p.scheme = Scheme::TeeSlice;
  p.placements.resize(m.graph.size(), Placement::TEE);
  for (std::size_t i : m.backbone_indices()) {
    const LayerKind k = m.graph.node(i).layer.kind;
    if (is_linear_kind(k) || k == LayerKind::BatchNorm) p.placements[i] = Placement::GPU;
  }
  p.notes.push_back(std::to_string(m.slices.size()) + " slices");
  return p;
}

PruneResult iterative_prune(HybridModel m, const Dataset& train, const Dataset& eval, const PruneConfig& pc,
                            double acc_vic, const nn::TrainConfig& retrain) {
  pc.validate();
  if (!(acc_vic > 0.0 && acc_vic <= 1.0)) throw std::invalid_argument("acc_vic must lie in (0, 1]");
  PruneResult res;
  res.acc_tol = (1.0 - pc.delta) * acc_vic;
  const HybridModel dense = m;

  std::vector<std::size_t> setup;
  for (std::size_t i = 0; i < m.slices.size(); ++i) {
    if (m.alpha(m.slices[i]) < pc.alpha_setup) setup.push_back(i);
  }
  res.setup_pruned = setup.size();
  m = remove_slices(m, setup);
  if (pc.rounds == 0) {
    res.model = std::move(m);
    return res;
  }

  std::optional<HybridModel> stored;
  for (std::size_t r = 1; r <= pc.rounds; ++r) {
    PruneRound rec;
    rec.round = r;
    rec.accuracy = nn::accuracy(m.graph, eval);
    rec.slices_before = m.slices.size();
    if (rec.accuracy > res.acc_tol) {
      stored = m;
      rec.stored = true;
      std::vector<std::size_t> order(m.slices.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      const auto a = m.alphas();
      // Slices are kept in (from, to) order, so a stable sort breaks ties
      // toward the lower pair.
      std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return a[x] < a[y]; });
      order.resize(std::min(pc.n, order.size()));
      for (std::size_t id : order) rec.pruned.emplace_back(m.slices[id].prefix, a[id]);
      m = remove_slices(m, order);
    }
    rec.slices_remaining = m.slices.size();
    rec.pct_flops_tee = flops::utility_of_plan(m.graph, deploy_plan(m)).pct_flops_tee;
    res.log.push_back(std::move(rec));
    nn::TrainConfig cfg = retrain;
    cfg.seed = derive_seed(retrain.seed, "prune_round:" + std::to_string(r));
    m = train_dense(std::move(m), train, cfg, pc.lambda);
  }
  if (stored) {
    res.model = std::move(*stored);
  } else {
    res.model = dense;
    res.model.pruning_failed = true;
  }
  return res;
}

std::string prune_log_csv(const std::vector<PruneRound>& log) {
  std::ostringstream os;
  os << "round,acc_r,slices_remaining,pct_flops_tee\n" << std::setprecision(10);
  for (const auto& r : log) {
    os << r.round << ',' << r.accuracy << ',' << r.slices_remaining << ',' << r.pct_flops_tee << '\n';
  }
  return os.str();
}

nlohmann::json slice_table(const HybridModel& m) {
  nlohmann::json j;
  j["slices"] = nlohmann::json::array();
  for (const auto& s : m.slices) {
    j["slices"].push_back({{"from", s.from}, {"to", s.to}, {"rank", s.rank}, {"prefix", s.prefix}});
  }
  j["backbone_nodes"] = m.backbone_nodes;
  j["backbone_checksum"] = m.backbone_checksum;
  j["pruning_failed"] = m.pruning_failed;
  return j;
}

void save_hybrid(const HybridModel& m, const std::filesystem::path& path) {
  io::save_model(m.graph, path, slice_table(m));
}

HybridModel load_hybrid(const std::filesystem::path& path) {
  nlohmann::json ext;
  HybridModel m;
  m.graph = io::load_model(path, &ext);
  if (ext.is_null() || !ext.contains("slices")) {
    throw io::FormatError(path.string() + " carries no slice table");
  }
  try {
    for (const auto& s : ext.at("slices")) {
      m.slices.push_back({s.at("from").get<std::size_t>(), s.at("to").get<std::size_t>(),
                          s.at("rank").get<std::size_t>(), s.at("prefix").get<std::string>()});
    }
    m.backbone_nodes = ext.at("backbone_nodes").get<std::vector<std::string>>();
    m.backbone_checksum = ext.at("backbone_checksum").get<std::uint64_t>();
    m.pruning_failed = ext.at("pruning_failed").get<bool>();
    if (m.current_backbone_checksum() != m.backbone_checksum) {
      throw io::FormatError(path.string() + ": backbone checksum mismatch");
    }
    for (const auto& s : m.slices) {
      for (const auto& name : s.node_names()) m.graph.index_of(name);
    }
  } catch (const nlohmann::json::exception& e) {
    throw io::FormatError(path.string() + ": malformed slice table: " + e.what());
  } catch (const GraphError& e) {
    throw io::FormatError(path.string() + ": slice table does not match the graph: " + e.what());
  }
  return m;
}

PipelineResult run_pipeline(const ModelGraph& public_model, const Dataset& train, const Dataset& eval,
                            double acc_vic, const PipelineConfig& cfg) {
  PipelineResult out;
  const std::size_t half = std::max<std::size_t>(1, cfg.victim_epochs / 2);
  HybridModel dense = build_dense(public_model, train.n_classes, derive_seed(cfg.seed, "build_dense"), cfg.build);
  nn::TrainConfig dense_cfg = cfg.train;
  dense_cfg.epochs = half;
  dense_cfg.seed = derive_seed(cfg.seed, "train_dense");
  out.dense = train_dense(std::move(dense), train, dense_cfg, cfg.prune.lambda);
  nn::TrainConfig retrain = cfg.train;
  retrain.epochs = std::max<std::size_t>(1, half / std::max<std::size_t>(1, cfg.prune.rounds));
  retrain.seed = derive_seed(cfg.seed, "retrain");
  out.pruned = iterative_prune(out.dense, train, eval, cfg.prune, acc_vic, retrain);
  out.accuracy = nn::accuracy(out.pruned.model.graph, eval);
  return out;
}

}  // namespace tsdp::teeslice
