#pragma once

#include <cstdint>

#include "tsdp/graph.hpp"

namespace tsdp {

// Residual toy CNN used throughout the lab, for [channels, side, side] inputs:
//   conv1 3x3 -> bn1 -> relu1
//   conv2 3x3/2 -> bn2 -> relu2
//   conv3 3x3 -> bn3 -> add3(+relu2) -> relu3
//   conv4 3x3/2 -> bn4 -> relu4 -> global avgpool -> fc
// Backbone nodes carry role "backbone"; fc carries role "head".
struct ToyCnnSpec {
  std::size_t channels = 3;
  std::size_t side = 12;
  std::size_t width = 8;  // conv1 width; later stages use 2x and 4x
  std::size_t n_classes = 4;
};

ModelGraph build_toy_cnn(const ToyCnnSpec& spec, std::uint64_t seed);

// Replaces the classifier head (last Linear node) with a freshly
// initialised one of `n_classes` outputs.
ModelGraph replace_head(const ModelGraph& g, std::size_t n_classes, std::uint64_t seed);

}  // namespace tsdp
