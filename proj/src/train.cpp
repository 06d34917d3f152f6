#include "tsdp/train.hpp"

#include <cmath>
#include <string>

#include "tsdp/rng.hpp"

namespace tsdp::nn {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) {
    throw std::invalid_argument("momentum must lie in [0, 1)");
  }
  if (batch_size == 0) throw std::invalid_argument("batch_size must be > 0");
  if (weight_decay < 0.0) throw std::invalid_argument("weight_decay must be >= 0");
}

namespace {

void update_running_stats(ModelGraph& g, const Trace& tr, std::size_t batch) {
  for (std::size_t i = 0; i < g.size(); ++i) {
    Node& n = g.node(i);
    if (n.layer.kind != LayerKind::BatchNorm || n.frozen) continue;
    const double m = n.layer.bn_momentum;
    const std::size_t count = batch * shape_numel(n.layer.in_shape) / n.layer.c_in;
    const double unbias = count > 1 ? static_cast<double>(count) / (count - 1) : 1.0;
    auto& rm = n.layer.params.at("running_mean").vec();
    auto& rv = n.layer.params.at("running_var").vec();
    for (std::size_t c = 0; c < n.layer.c_in; ++c) {
      rm[c] = (1.0 - m) * rm[c] + m * tr.bn_mean[i][c];
      rv[c] = (1.0 - m) * rv[c] + m * tr.bn_var[i][c] * unbias;
    }
  }
}

}  // namespace

ModelGraph train_sgd(ModelGraph model, const Dataset& data, const TrainConfig& cfg,
                     const Regularizer& reg, std::vector<EpochStats>* history) {
  cfg.validate();
  data.validate();
  if (data.n_classes > shape_numel(model.output_shape())) {
    throw std::invalid_argument("dataset has " + std::to_string(data.n_classes) +
                                " classes but the model outputs " +
                                shape_str(model.output_shape()));
  }
  if (cfg.epochs == 0 || data.size() == 0) return model;

  // Momentum buffers, one per trainable parameter tensor.
  std::vector<std::map<std::string, Tensor>> velocity(model.size());
  Rng rng(derive_seed(cfg.seed, "train_sgd"));
  double lr = cfg.learning_rate;
  const std::size_t n = data.size();
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.lr_decay_every > 0 && epoch > 0 && epoch % cfg.lr_decay_every == 0) {
      lr *= cfg.lr_decay_factor;
    }
    std::vector<std::size_t> order = rng.permutation(n);
    double loss_sum = 0.0;
    std::size_t correct = 0, seen = 0;
    std::size_t batch_idx = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size, ++batch_idx) {
      const std::size_t end = std::min(n, start + cfg.batch_size);
      if (end - start < 2) continue;
      std::span<const std::size_t> rows(order.data() + start, end - start);
      const Tensor x = data.images.gather_rows(rows);
      std::vector<int> y;
      y.reserve(rows.size());
      for (std::size_t r : rows) y.push_back(data.labels[r]);

      Trace tr;
      const Tensor out = run(model, x, Mode::Train, &tr);
      Tensor dlogits;
      double loss = softmax_cross_entropy(out.reshaped({x.dim(0), out.row_size()}), y,
                                          &dlogits);
      ParamGrads grads;
      backward(model, tr, dlogits.reshaped(out.shape()), &grads, false);
      if (reg) loss += reg(model, grads);
      if (!std::isfinite(loss)) {
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) +
                                ", batch " + std::to_string(batch_idx),
                            epoch, batch_idx);
      }
      update_running_stats(model, tr, rows.size());
      for (std::size_t i = 0; i < model.size(); ++i) {
        Node& node = model.node(i);
        if (node.frozen) continue;
        for (auto& [name, g] : grads[i]) {
          if (!is_trainable_param(name)) continue;
          Tensor& p = node.layer.params.at(name);
          Tensor& v = velocity[i][name];
          if (v.empty()) v = Tensor(p.shape());
          const bool decay = name == "weight";
          for (std::size_t k = 0; k < p.size(); ++k) {
            const double gk = g[k] + (decay ? cfg.weight_decay * p[k] : 0.0);
            v[k] = cfg.momentum * v[k] + gk;
            p[k] -= lr * v[k];
          }
        }
      }
      loss_sum += loss * static_cast<double>(rows.size());
      const auto pred = argmax_rows(out.reshaped({x.dim(0), out.row_size()}));
      for (std::size_t k = 0; k < y.size(); ++k) correct += pred[k] == y[k];
      seen += rows.size();
    }
    if (history && seen > 0) {
      history->push_back({loss_sum / static_cast<double>(seen),
                          static_cast<double>(correct) / static_cast<double>(seen)});
    }
  }
  return model;
}

Tensor logits(const ModelGraph& model, const Tensor& images, std::size_t chunk) {
  const std::size_t n = images.dim(0);
  if (n <= chunk) return run(model, images, Mode::Eval);
  std::vector<Tensor> parts;
  for (std::size_t s = 0; s < n; s += chunk) {
    parts.push_back(run(model, images.slice_rows(s, std::min(n, s + chunk)), Mode::Eval));
  }
  return concat_rows(parts);
}

std::vector<int> predict(const ModelGraph& model, const Tensor& images) {
  if (images.rank() == 0 || images.dim(0) == 0) return {};
  const Tensor out = logits(model, images);
  return argmax_rows(out.reshaped({images.dim(0), out.row_size()}));
}

double accuracy(std::span<const int> predicted, std::span<const int> labels) {
  if (labels.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += predicted[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

double accuracy(const ModelGraph& model, const Dataset& data) {
  return accuracy(predict(model, data.images), data.labels);
}

}  // namespace tsdp::nn
