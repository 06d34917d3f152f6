#include "tsdp/dataset.hpp"

#include <stdexcept>

#include "tsdp/rng.hpp"

namespace tsdp {

Shape Dataset::sample_shape() const {
  return Shape(images.shape().begin() + 1, images.shape().end());
}

Dataset Dataset::subset(std::span<const std::size_t> rows) const {
  Dataset out;
  out.images = images.gather_rows(rows);
  out.labels.reserve(rows.size());
  for (std::size_t r : rows) out.labels.push_back(labels.at(r));
  out.n_classes = n_classes;
  out.seed = seed;
  out.distribution = distribution;
  return out;
}

void Dataset::validate() const {
  if (labels.empty() && images.empty()) return;
  if (images.rank() == 0 || images.dim(0) != labels.size()) {
    throw std::invalid_argument("dataset has " + std::to_string(labels.size()) +
                                " labels for image tensor " + shape_str(images.shape()));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= n_classes) {
      throw std::invalid_argument("label " + std::to_string(y) + " outside [0, " +
                                  std::to_string(n_classes) + ")");
    }
  }
}

std::uint64_t dataset_hash(const Dataset& d) {
  std::uint64_t h = hash_bytes(shape_str(d.images.shape()), d.n_classes);
  h = hash_bytes(std::string_view(reinterpret_cast<const char*>(d.images.vec().data()),
                                  d.images.size() * sizeof(double)),
                 h);
  h = hash_bytes(std::string_view(reinterpret_cast<const char*>(d.labels.data()),
                                  d.labels.size() * sizeof(int)),
                 h);
  return hash_bytes(d.distribution, h);
}

}  // namespace tsdp
