#include "tsdp/models.hpp"

#include <cmath>

#include "tsdp/rng.hpp"

namespace tsdp {

ModelGraph build_toy_cnn(const ToyCnnSpec& spec, std::uint64_t seed) {
  const std::size_t w = spec.width;
  GraphBuilder b({spec.channels, spec.side, spec.side}, seed);
  b.set_role("backbone");
  int x = b.conv(GraphBuilder::kInput, "conv1", w, 3, 1, 1);
  x = b.batchnorm(x, "bn1");
  x = b.relu(x, "relu1");
  x = b.conv(x, "conv2", 2 * w, 3, 2, 1);
  x = b.batchnorm(x, "bn2");
  const int skip = b.relu(x, "relu2");
  x = b.conv(skip, "conv3", 2 * w, 3, 1, 1);
  x = b.batchnorm(x, "bn3");
  x = b.add({x, skip}, "add3");
  x = b.relu(x, "relu3");
  x = b.conv(x, "conv4", 4 * w, 3, 2, 1);
  x = b.batchnorm(x, "bn4");
  x = b.relu(x, "relu4");
  x = b.avgpool(x, "pool", b.shape_of(x)[1]);
  b.set_role("head");
  b.linear(x, "fc", spec.n_classes);
  return std::move(b).build();
}

ModelGraph replace_head(const ModelGraph& g, std::size_t n_classes, std::uint64_t seed) {
  std::vector<Node> nodes = g.nodes();
  std::size_t head = nodes.size();
  for (std::size_t i = nodes.size(); i-- > 0;) {
    if (nodes[i].layer.kind == LayerKind::Linear) {
      head = i;
      break;
    }
  }
  if (head == nodes.size()) throw GraphError("model has no linear head to replace");
  LayerSpec& l = nodes[head].layer;
  l.c_out = n_classes;
  Rng rng(derive_seed(seed, "head:" + l.name));
  Tensor w({n_classes, l.c_in});
  const double sd = std::sqrt(1.0 / static_cast<double>(l.c_in));
  for (auto& v : w.vec()) v = rng.normal(0.0, sd);
  l.params["weight"] = std::move(w);
  if (l.has_bias) l.params["bias"] = Tensor({n_classes});
  return ModelGraph(g.input_shape(), std::move(nodes), g.output_mode());
}

}  // namespace tsdp
