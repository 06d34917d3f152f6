#pragma once

#include <cstdint>
#include <string>

#include "tsdp/dataset.hpp"

namespace tsdp::data {

struct GenOptions {
  // Template family. Different ids give unrelated class templates.
  std::string distribution = "public";
  std::size_t channels = 3;
  double noise_sd = 0.5;
  // Maximum integer pixel shift applied per sample along each axis.
  std::size_t jitter = 1;
  // Per-sample brightness scale drawn from [1 - contrast, 1 + contrast].
  double contrast = 0.15;
};

// Class template for (distribution, n_classes, side, channels); independent
// of the sampling seed. Values lie in [0, 1].
Tensor class_template(const GenOptions& opt, std::size_t n_classes, std::size_t side,
                      std::size_t cls);

// n_classes * n_per_class images ordered class-major, values in [0, 1].
Dataset gen_synthetic(std::size_t n_classes, std::size_t n_per_class, std::size_t side,
                      std::uint64_t seed, const GenOptions& opt = {});

struct MiaSplit {
  Dataset target_train;
  Dataset target_test;
  Dataset shadow_train;
  Dataset shadow_test;
  // Source row indices per part, in the order above.
  std::vector<std::size_t> indices[4];
};

// Four equal, disjoint, class-stratified quarters of d.
MiaSplit make_mia_split(const Dataset& d, std::uint64_t seed);

// Unlabelled query images; labels come from the victim oracle.
struct QuerySet {
  Tensor images;
  std::vector<std::size_t> source_rows;
  std::size_t size() const { return source_rows.size(); }
};

// Uniform sample of `budget` rows without replacement.
QuerySet make_attacker_queryset(const Dataset& pool, std::size_t budget, std::uint64_t seed);

// Splits d into two disjoint class-stratified parts with `first` rows in the
// first part.
std::pair<Dataset, Dataset> stratified_split(const Dataset& d, std::size_t first,
                                             std::uint64_t seed);

}  // namespace tsdp::data
