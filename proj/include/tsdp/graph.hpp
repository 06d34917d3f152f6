#pragma once

#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "tsdp/rng.hpp"
#include "tsdp/tensor.hpp"

namespace tsdp {

enum class LayerKind {
  Conv2d,
  Linear,
  BatchNorm,
  ReLU,
  AvgPool,
  ResidualAdd,
  Softmax,
  Gate,  // y = sigmoid(logit) * x; scales a slice's contribution
};

enum class OutputMode { Logits, Probabilities, LabelOnly };

std::string_view to_string(LayerKind k);
LayerKind layer_kind_from_string(std::string_view s);
std::string_view to_string(OutputMode m);
OutputMode output_mode_from_string(std::string_view s);

// Conv2d and Linear: the layers that carry a weight matrix and do the bulk of
// the multiply-adds.
bool is_linear_kind(LayerKind k);
// Any layer holding trainable parameters.
bool has_params(LayerKind k);
// Parameter-free layers: ReLU, pooling, residual add, softmax.
bool is_nonlinear_kind(LayerKind k);

struct LayerSpec {
  LayerKind kind = LayerKind::ReLU;
  std::string name;
  // Channel / feature counts. Linear uses c_in as the flattened input size.
  std::size_t c_in = 0;
  std::size_t c_out = 0;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  bool has_bias = true;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;
  // Per-sample shapes, resolved by ModelGraph.
  Shape in_shape;
  Shape out_shape;
  // weight, bias, gamma, beta, running_mean, running_var, logit.
  std::map<std::string, Tensor> params;
};

// Parameter tensors that the optimizer updates (running BN statistics are
// buffers and excluded).
bool is_trainable_param(std::string_view name);

struct Node {
  LayerSpec layer;
  // Producer node indices; -1 denotes the graph input.
  std::vector<int> inputs;
  // Free-form tag: "backbone", "slice", "head", ... used by partitioners.
  std::string role;
  bool frozen = false;
};

class GraphError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Layer DAG with a single input and a single output (the last node). Nodes
// may only consume earlier nodes, so the stored order is topological.
class ModelGraph {
 public:
  ModelGraph() = default;
  ModelGraph(Shape input_shape, std::vector<Node> nodes,
             OutputMode mode = OutputMode::Logits);

  const Shape& input_shape() const { return input_shape_; }
  const Shape& output_shape() const;
  OutputMode output_mode() const { return mode_; }
  void set_output_mode(OutputMode m) { mode_ = m; }

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t i) const { return nodes_.at(i); }
  // Mutable access for parameter updates; topology edits must go through
  // the constructor so shapes are re-validated.
  Node& node(std::size_t i) { return nodes_.at(i); }
  const std::vector<Node>& nodes() const { return nodes_; }

  std::optional<std::size_t> find(std::string_view name) const;
  std::size_t index_of(std::string_view name) const;

  std::vector<std::size_t> consumers(std::size_t i) const;
  // Indices of Conv2d / Linear / BatchNorm nodes.
  std::vector<std::size_t> weighted_nodes() const;
  std::size_t num_params() const;

  // Copy with the flagged nodes removed. ResidualAdd nodes drop removed
  // inputs; removing a node that other survivors consume is an error.
  ModelGraph without(const std::vector<bool>& removed) const;

  // Re-runs shape inference and parameter shape checks.
  void validate();

 private:
  Shape input_shape_;
  std::vector<Node> nodes_;
  OutputMode mode_ = OutputMode::Logits;
};

// Incremental graph construction with shape inference and seeded He
// initialisation.
class GraphBuilder {
 public:
  static constexpr int kInput = -1;

  explicit GraphBuilder(Shape input_shape, std::uint64_t init_seed = 0);

  int conv(int in, std::string name, std::size_t c_out, std::size_t kernel,
           std::size_t stride = 1, std::size_t padding = 0, bool bias = false);
  int linear(int in, std::string name, std::size_t c_out, bool bias = true);
  int batchnorm(int in, std::string name);
  int relu(int in, std::string name);
  int avgpool(int in, std::string name, std::size_t kernel);
  int add(std::vector<int> ins, std::string name);
  int softmax(int in, std::string name);
  int gate(int in, std::string name, double init_logit = 0.0);

  // Applies to nodes added afterwards.
  void set_role(std::string role) { role_ = std::move(role); }
  void set_frozen(bool frozen) { frozen_ = frozen; }

  const Shape& shape_of(int node) const;
  ModelGraph build(OutputMode mode = OutputMode::Logits) &&;

 private:
  int push(LayerSpec spec, std::vector<int> inputs);

  Shape input_shape_;
  std::vector<Node> nodes_;
  Rng rng_;
  std::string role_;
  bool frozen_ = false;
};

// Deterministic FNV hash over topology and parameter bytes.
std::uint64_t graph_hash(const ModelGraph& g);
// Hash over the parameters of the listed nodes only.
std::uint64_t params_checksum(const ModelGraph& g,
                              const std::vector<std::size_t>& nodes);

}  // namespace tsdp
