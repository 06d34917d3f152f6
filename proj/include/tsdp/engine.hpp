#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "tsdp/graph.hpp"
#include "tsdp/tensor.hpp"

// Forward and backward passes over a ModelGraph. Each layer kind has a
// hand-written backward rule; there is no general autodiff tape.
namespace tsdp::nn {

enum class Mode { Eval, Train };

// Activations retained by a forward pass for the matching backward pass.
struct Trace {
  Mode mode = Mode::Eval;
  Tensor input;
  std::vector<Tensor> outputs;
  // BatchNorm: normalised activations and per-channel 1/std.
  std::vector<Tensor> bn_xhat;
  std::vector<Tensor> bn_inv_std;
  // BatchNorm in train mode: batch mean / biased variance per channel.
  std::vector<Tensor> bn_mean;
  std::vector<Tensor> bn_var;
};

using ParamGrads = std::vector<std::map<std::string, Tensor>>;

// Output of the last node, before the graph's output mode is applied.
// In Train mode, non-frozen BatchNorm layers use batch statistics.
Tensor run(const ModelGraph& g, const Tensor& x, Mode mode = Mode::Eval,
           Trace* trace = nullptr);

// Inference honouring output_mode: logits, probabilities, or a [n] tensor of
// class ids.
Tensor forward(const ModelGraph& g, const Tensor& x);

// Back-propagates grad_out (gradient w.r.t. the last node's output).
// Parameter gradients are filled for non-frozen nodes when `grads` is set.
// Returns the gradient w.r.t. the graph input when `want_input_grad`.
Tensor backward(const ModelGraph& g, const Trace& trace, const Tensor& grad_out,
                ParamGrads* grads, bool want_input_grad = true);

// Applies one node to explicit inputs in eval mode. Used by the split
// executor to run individual layers in either world.
Tensor apply_layer(const Node& node, std::span<const Tensor* const> inputs);

Tensor softmax(const Tensor& logits);
std::vector<int> argmax_rows(const Tensor& t);

// Mean cross-entropy of softmax(logits) against labels; fills the gradient
// w.r.t. logits when `grad` is non-null.
double softmax_cross_entropy(const Tensor& logits, std::span<const int> labels,
                             Tensor* grad = nullptr);

// Folds batch-norm running statistics into per-channel scale and shift so
// that eval-mode BN(x) = scale * x + shift.
void batchnorm_affine(const LayerSpec& bn, std::vector<double>& scale,
                      std::vector<double>& shift);

double sigmoid(double x);

}  // namespace tsdp::nn
