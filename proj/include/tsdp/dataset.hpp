#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tsdp/tensor.hpp"

namespace tsdp {

// Labelled image set. images is [n, c, h, w] with values in [0, 1].
struct Dataset {
  Tensor images;
  std::vector<int> labels;
  std::size_t n_classes = 0;
  std::uint64_t seed = 0;
  std::string distribution;

  std::size_t size() const { return labels.size(); }
  Shape sample_shape() const;
  Dataset subset(std::span<const std::size_t> rows) const;
  // Throws std::invalid_argument if labels are out of range or the image
  // count disagrees with the label count.
  void validate() const;
};

std::uint64_t dataset_hash(const Dataset& d);

}  // namespace tsdp
