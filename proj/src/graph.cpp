#include "tsdp/graph.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace tsdp {

namespace {

struct KindName {
  LayerKind kind;
  std::string_view name;
};

constexpr KindName kKindNames[] = {
    {LayerKind::Conv2d, "conv2d"},       {LayerKind::Linear, "linear"},
    {LayerKind::BatchNorm, "batchnorm"}, {LayerKind::ReLU, "relu"},
    {LayerKind::AvgPool, "avgpool"},     {LayerKind::ResidualAdd, "add"},
    {LayerKind::Softmax, "softmax"},     {LayerKind::Gate, "gate"},
};

std::string edge_name(const std::vector<Node>& nodes, int src, std::size_t dst) {
  const std::string from = src < 0 ? std::string("input")
                                   : nodes[static_cast<std::size_t>(src)].layer.name;
  return from + " -> " + nodes[dst].layer.name;
}

void expect_param(const LayerSpec& l, const std::string& name,
                  const Shape& shape) {
  auto it = l.params.find(name);
  if (it == l.params.end()) {
    throw GraphError("layer " + l.name + " is missing parameter '" + name + "'");
  }
  if (it->second.shape() != shape) {
    throw GraphError("layer " + l.name + " parameter '" + name + "' has shape " +
                     shape_str(it->second.shape()) + ", expected " +
                     shape_str(shape));
  }
}

// Resolves out_shape of node `i` from its producers and checks parameters.
void infer_node(std::vector<Node>& nodes, const Shape& input_shape,
                std::size_t i) {
  Node& n = nodes[i];
  LayerSpec& l = n.layer;
  if (n.inputs.empty()) throw GraphError("layer " + l.name + " has no inputs");
  for (int src : n.inputs) {
    if (src >= static_cast<int>(i) || src < -1) {
      throw GraphError("layer " + l.name +
                       " consumes a later or invalid node (graph must be a DAG "
                       "in topological order)");
    }
  }
  auto shape_of = [&](int src) -> const Shape& {
    return src < 0 ? input_shape : nodes[static_cast<std::size_t>(src)].layer.out_shape;
  };
  const Shape& in = shape_of(n.inputs[0]);
  l.in_shape = in;
  if (l.kind != LayerKind::ResidualAdd && n.inputs.size() != 1) {
    throw GraphError("layer " + l.name + " takes exactly one input");
  }
  switch (l.kind) {
    case LayerKind::Conv2d: {
      if (in.size() != 3 || in[0] != l.c_in) {
        throw GraphError("shape mismatch on edge " + edge_name(nodes, n.inputs[0], i) +
                         ": source output " + shape_str(in) + ", conv expects [" +
                         std::to_string(l.c_in) + ", h, w]");
      }
      if (l.kernel == 0 || l.stride == 0) throw GraphError("layer " + l.name + ": zero kernel/stride");
      const std::size_t hp = in[1] + 2 * l.padding;
      const std::size_t wp = in[2] + 2 * l.padding;
      if (hp < l.kernel || wp < l.kernel) {
        throw GraphError("layer " + l.name + ": kernel larger than padded input");
      }
      l.out_shape = {l.c_out, (hp - l.kernel) / l.stride + 1,
                     (wp - l.kernel) / l.stride + 1};
      expect_param(l, "weight", {l.c_out, l.c_in, l.kernel, l.kernel});
      if (l.has_bias) expect_param(l, "bias", {l.c_out});
      break;
    }
    case LayerKind::Linear: {
      if (shape_numel(in) != l.c_in) {
        throw GraphError("shape mismatch on edge " + edge_name(nodes, n.inputs[0], i) +
                         ": source output " + shape_str(in) + " has " +
                         std::to_string(shape_numel(in)) + " features, linear expects " +
                         std::to_string(l.c_in));
      }
      l.out_shape = {l.c_out};
      expect_param(l, "weight", {l.c_out, l.c_in});
      if (l.has_bias) expect_param(l, "bias", {l.c_out});
      break;
    }
    case LayerKind::BatchNorm: {
      if (in.empty() || in[0] != l.c_in) {
        throw GraphError("shape mismatch on edge " + edge_name(nodes, n.inputs[0], i) +
                         ": source output " + shape_str(in) + ", batchnorm expects " +
                         std::to_string(l.c_in) + " channels");
      }
      l.c_out = l.c_in;
      l.out_shape = in;
      for (const char* p : {"gamma", "beta", "running_mean", "running_var"}) {
        expect_param(l, p, {l.c_in});
      }
      break;
    }
    case LayerKind::AvgPool: {
      if (in.size() != 3 || l.kernel == 0 || in[1] % l.kernel || in[2] % l.kernel) {
        throw GraphError("shape mismatch on edge " + edge_name(nodes, n.inputs[0], i) +
                         ": avgpool kernel " + std::to_string(l.kernel) +
                         " does not tile " + shape_str(in));
      }
      l.c_in = l.c_out = in[0];
      l.out_shape = {in[0], in[1] / l.kernel, in[2] / l.kernel};
      break;
    }
    case LayerKind::ResidualAdd: {
      for (std::size_t k = 1; k < n.inputs.size(); ++k) {
        if (shape_of(n.inputs[k]) != in) {
          throw GraphError("shape mismatch on edge " + edge_name(nodes, n.inputs[k], i) +
                           ": source output " + shape_str(shape_of(n.inputs[k])) +
                           ", add expects " + shape_str(in));
        }
      }
      l.out_shape = in;
      break;
    }
    case LayerKind::Gate:
      expect_param(l, "logit", {1});
      l.out_shape = in;
      break;
    case LayerKind::ReLU:
    case LayerKind::Softmax:
      l.out_shape = in;
      break;
  }
  if (l.kind != LayerKind::Conv2d && l.kind != LayerKind::Linear &&
      l.kind != LayerKind::BatchNorm && l.kind != LayerKind::Gate && !l.params.empty()) {
    throw GraphError("layer " + l.name + " of kind " + std::string(to_string(l.kind)) +
                     " must not carry parameters");
  }
}

}  // namespace

std::string_view to_string(LayerKind k) {
  for (const auto& kn : kKindNames) {
    if (kn.kind == k) return kn.name;
  }
  return "?";
}

LayerKind layer_kind_from_string(std::string_view s) {
  for (const auto& kn : kKindNames) {
    if (kn.name == s) return kn.kind;
  }
  throw std::invalid_argument("unknown layer kind: " + std::string(s));
}

std::string_view to_string(OutputMode m) {
  switch (m) {
    case OutputMode::Logits: return "logits";
    case OutputMode::Probabilities: return "probabilities";
    case OutputMode::LabelOnly: return "label_only";
  }
  return "?";
}

OutputMode output_mode_from_string(std::string_view s) {
  if (s == "logits") return OutputMode::Logits;
  if (s == "probabilities") return OutputMode::Probabilities;
  if (s == "label_only") return OutputMode::LabelOnly;
  throw std::invalid_argument("unknown output mode: " + std::string(s));
}

bool is_linear_kind(LayerKind k) {
  return k == LayerKind::Conv2d || k == LayerKind::Linear;
}

bool has_params(LayerKind k) {
  return k == LayerKind::Conv2d || k == LayerKind::Linear ||
         k == LayerKind::BatchNorm || k == LayerKind::Gate;
}

bool is_nonlinear_kind(LayerKind k) {
  return k == LayerKind::ReLU || k == LayerKind::AvgPool ||
         k == LayerKind::ResidualAdd || k == LayerKind::Softmax;
}

bool is_trainable_param(std::string_view name) {
  return name != "running_mean" && name != "running_var";
}

ModelGraph::ModelGraph(Shape input_shape, std::vector<Node> nodes,
                       OutputMode mode)
    : input_shape_(std::move(input_shape)), nodes_(std::move(nodes)), mode_(mode) {
  validate();
}

void ModelGraph::validate() {
  if (nodes_.empty()) throw GraphError("graph has no layers");
  if (input_shape_.empty() || shape_numel(input_shape_) == 0) {
    throw GraphError("graph input shape must be non-empty");
  }
  for (std::size_t i = 0; i < nodes_.size(); ++i) infer_node(nodes_, input_shape_, i);
  // Single output: every node but the last must feed something.
  std::vector<bool> used(nodes_.size(), false);
  for (const auto& n : nodes_) {
    for (int s : n.inputs) {
      if (s >= 0) used[static_cast<std::size_t>(s)] = true;
    }
  }
  for (std::size_t i = 0; i + 1 < nodes_.size(); ++i) {
    if (!used[i]) {
      throw GraphError("layer " + nodes_[i].layer.name +
                       " is a dangling output; graph must have a single output");
    }
  }
}

const Shape& ModelGraph::output_shape() const { return nodes_.back().layer.out_shape; }

std::optional<std::size_t> ModelGraph::find(std::string_view name) const {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].layer.name == name) return i;
  }
  return std::nullopt;
}

std::size_t ModelGraph::index_of(std::string_view name) const {
  auto i = find(name);
  if (!i) throw GraphError("no layer named " + std::string(name));
  return *i;
}

std::vector<std::size_t> ModelGraph::consumers(std::size_t i) const {
  std::vector<std::size_t> out;
  for (std::size_t j = i + 1; j < nodes_.size(); ++j) {
    for (int s : nodes_[j].inputs) {
      if (s == static_cast<int>(i)) {
        out.push_back(j);
        break;
      }
    }
  }
  return out;
}

std::vector<std::size_t> ModelGraph::weighted_nodes() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const auto k = nodes_[i].layer.kind;
    if (is_linear_kind(k) || k == LayerKind::BatchNorm) out.push_back(i);
  }
  return out;
}

std::size_t ModelGraph::num_params() const {
  std::size_t n = 0;
  for (const auto& node : nodes_) {
    for (const auto& [name, t] : node.layer.params) {
      if (is_trainable_param(name)) n += t.size();
    }
  }
  return n;
}

ModelGraph ModelGraph::without(const std::vector<bool>& removed) const {
  if (removed.size() != nodes_.size()) {
    throw std::invalid_argument("without: mask size mismatch");
  }
  std::vector<int> remap(nodes_.size(), -2);
  std::vector<Node> kept;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (removed[i]) continue;
    Node n = nodes_[i];
    std::vector<int> ins;
    for (int s : n.inputs) {
      if (s < 0) {
        ins.push_back(s);
      } else if (remap[static_cast<std::size_t>(s)] >= 0) {
        ins.push_back(remap[static_cast<std::size_t>(s)]);
      } else if (n.layer.kind != LayerKind::ResidualAdd) {
        throw GraphError("cannot remove " + nodes_[static_cast<std::size_t>(s)].layer.name +
                         ": consumed by " + n.layer.name);
      }
    }
    if (ins.empty()) {
      throw GraphError("removal leaves " + n.layer.name + " without inputs");
    }
    n.inputs = std::move(ins);
    remap[i] = static_cast<int>(kept.size());
    kept.push_back(std::move(n));
  }
  return ModelGraph(input_shape_, std::move(kept), mode_);
}

GraphBuilder::GraphBuilder(Shape input_shape, std::uint64_t init_seed)
    : input_shape_(std::move(input_shape)), rng_(init_seed) {}

const Shape& GraphBuilder::shape_of(int node) const {
  return node < 0 ? input_shape_ : nodes_.at(static_cast<std::size_t>(node)).layer.out_shape;
}

int GraphBuilder::push(LayerSpec spec, std::vector<int> inputs) {
  Node n;
  n.layer = std::move(spec);
  n.inputs = std::move(inputs);
  n.role = role_;
  n.frozen = frozen_;
  nodes_.push_back(std::move(n));
  infer_node(nodes_, input_shape_, nodes_.size() - 1);
  return static_cast<int>(nodes_.size() - 1);
}

int GraphBuilder::conv(int in, std::string name, std::size_t c_out,
                       std::size_t kernel, std::size_t stride,
                       std::size_t padding, bool bias) {
  const Shape& s = shape_of(in);
  if (s.size() != 3) throw GraphError("conv " + name + " needs a [c, h, w] input");
  LayerSpec l;
  l.kind = LayerKind::Conv2d;
  l.name = std::move(name);
  l.c_in = s[0];
  l.c_out = c_out;
  l.kernel = kernel;
  l.stride = stride;
  l.padding = padding;
  l.has_bias = bias;
  const double fan_in = static_cast<double>(l.c_in * kernel * kernel);
  Tensor w({c_out, l.c_in, kernel, kernel});
  const double sd = std::sqrt(2.0 / fan_in);
  for (auto& v : w.vec()) v = rng_.normal(0.0, sd);
  l.params["weight"] = std::move(w);
  if (bias) l.params["bias"] = Tensor({c_out});
  return push(std::move(l), {in});
}

int GraphBuilder::linear(int in, std::string name, std::size_t c_out, bool bias) {
  LayerSpec l;
  l.kind = LayerKind::Linear;
  l.name = std::move(name);
  l.c_in = shape_numel(shape_of(in));
  l.c_out = c_out;
  l.has_bias = bias;
  Tensor w({c_out, l.c_in});
  const double sd = std::sqrt(1.0 / static_cast<double>(l.c_in));
  for (auto& v : w.vec()) v = rng_.normal(0.0, sd);
  l.params["weight"] = std::move(w);
  if (bias) l.params["bias"] = Tensor({c_out});
  return push(std::move(l), {in});
}

int GraphBuilder::batchnorm(int in, std::string name) {
  LayerSpec l;
  l.kind = LayerKind::BatchNorm;
  l.name = std::move(name);
  l.c_in = shape_of(in).at(0);
  l.params["gamma"] = Tensor({l.c_in}, 1.0);
  l.params["beta"] = Tensor({l.c_in});
  l.params["running_mean"] = Tensor({l.c_in});
  l.params["running_var"] = Tensor({l.c_in}, 1.0);
  return push(std::move(l), {in});
}

int GraphBuilder::relu(int in, std::string name) {
  LayerSpec l;
  l.kind = LayerKind::ReLU;
  l.name = std::move(name);
  return push(std::move(l), {in});
}

int GraphBuilder::avgpool(int in, std::string name, std::size_t kernel) {
  LayerSpec l;
  l.kind = LayerKind::AvgPool;
  l.name = std::move(name);
  l.kernel = kernel;
  l.stride = kernel;
  return push(std::move(l), {in});
}

int GraphBuilder::add(std::vector<int> ins, std::string name) {
  LayerSpec l;
  l.kind = LayerKind::ResidualAdd;
  l.name = std::move(name);
  return push(std::move(l), std::move(ins));
}

int GraphBuilder::softmax(int in, std::string name) {
  LayerSpec l;
  l.kind = LayerKind::Softmax;
  l.name = std::move(name);
  return push(std::move(l), {in});
}

int GraphBuilder::gate(int in, std::string name, double init_logit) {
  LayerSpec l;
  l.kind = LayerKind::Gate;
  l.name = std::move(name);
  l.params["logit"] = Tensor({1}, init_logit);
  return push(std::move(l), {in});
}

ModelGraph GraphBuilder::build(OutputMode mode) && {
  return ModelGraph(input_shape_, std::move(nodes_), mode);
}

namespace {

void hash_mix(std::uint64_t& h, std::string_view bytes) { h = hash_bytes(bytes, h); }

void hash_tensor(std::uint64_t& h, const Tensor& t) {
  hash_mix(h, shape_str(t.shape()));
  hash_mix(h, std::string_view(reinterpret_cast<const char*>(t.vec().data()),
                               t.size() * sizeof(double)));
}

}  // namespace

std::uint64_t graph_hash(const ModelGraph& g) {
  std::uint64_t h = 0x7473647067726170ULL;
  hash_mix(h, shape_str(g.input_shape()));
  for (const auto& n : g.nodes()) {
    hash_mix(h, n.layer.name);
    hash_mix(h, to_string(n.layer.kind));
    for (int s : n.inputs) hash_mix(h, std::to_string(s));
    for (const auto& [name, t] : n.layer.params) {
      hash_mix(h, name);
      hash_tensor(h, t);
    }
  }
  return h;
}

std::uint64_t params_checksum(const ModelGraph& g,
                              const std::vector<std::size_t>& nodes) {
  std::uint64_t h = 0x636865636b73756dULL;
  for (std::size_t i : nodes) {
    const auto& n = g.node(i);
    hash_mix(h, n.layer.name);
    for (const auto& [name, t] : n.layer.params) {
      hash_mix(h, name);
      hash_tensor(h, t);
    }
  }
  return h;
}

}  // namespace tsdp
