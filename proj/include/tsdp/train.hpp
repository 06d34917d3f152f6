#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "tsdp/dataset.hpp"
#include "tsdp/engine.hpp"
#include "tsdp/graph.hpp"

namespace tsdp::nn {

struct TrainConfig {
  std::size_t batch_size = 32;
  std::size_t epochs = 60;
  double learning_rate = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  // Learning rate is multiplied by lr_decay_factor every lr_decay_every
  // epochs; 0 disables the schedule.
  double lr_decay_factor = 0.5;
  std::size_t lr_decay_every = 20;
  std::uint64_t seed = 0;

  void validate() const;
};

class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, std::size_t epoch, std::size_t batch)
      : std::runtime_error(what), epoch_(epoch), batch_(batch) {}
  std::size_t epoch() const { return epoch_; }
  std::size_t batch() const { return batch_; }

 private:
  std::size_t epoch_;
  std::size_t batch_;
};

// Extra loss term. Adds its gradient into `grads` (indexed like the graph)
// and returns its value.
using Regularizer = std::function<double(const ModelGraph&, ParamGrads&)>;

struct EpochStats {
  double mean_loss = 0.0;
  double train_accuracy = 0.0;
};

// Mini-batch SGD with momentum and L2 weight decay on conv/linear weights.
// Frozen nodes are neither updated nor switched to batch statistics.
// Batches of a single sample are dropped (batch statistics are undefined).
ModelGraph train_sgd(ModelGraph model, const Dataset& data, const TrainConfig& cfg,
                     const Regularizer& reg = {},
                     std::vector<EpochStats>* history = nullptr);

// Eval-mode logits, computed in chunks to bound memory.
Tensor logits(const ModelGraph& model, const Tensor& images,
              std::size_t chunk = 256);
std::vector<int> predict(const ModelGraph& model, const Tensor& images);
double accuracy(const ModelGraph& model, const Dataset& data);
double accuracy(std::span<const int> predicted, std::span<const int> labels);

}  // namespace tsdp::nn
