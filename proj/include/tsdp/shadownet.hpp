#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "json.hpp"
#include "tsdp/tensor.hpp"

// Weight obfuscation by additive masks plus a filter permutation, and the
// attack that undoes it using a public reference layer.
namespace tsdp::shadownet {

struct ObfuscateOptions {
  double r = 1.2;
  // Mask variance; when unset, mask_var_ratio times the weight variance.
  std::optional<double> mask_var;
  double mask_var_ratio = 100.0;
  // Degenerate test modes.
  bool identity_permutation = false;
  bool zero_masks = false;
};

// Defender-only bookkeeping. Before permutation the filter list is
// [w_0 + f_{mask_of[0]}, ..., w_{n-1} + f_{mask_of[n-1]}, f_0, ..., f_{m-n-1}];
// published[j] = unpermuted[perm[j]].
struct Secret {
  std::vector<std::size_t> mask_of;
  std::vector<std::size_t> perm;
  // Inverse of perm: unpermuted index -> published position.
  std::vector<std::size_t> position_of;
};

struct ObfuscatedLayer {
  // [m, filter dims...]; row j is published filter j.
  Tensor filters;
  std::size_t n = 0;
  Secret secret;

  std::size_t m() const { return filters.dim(0); }
  // Published positions (filter, mask) that recover original filter i.
  std::pair<std::size_t, std::size_t> recovery_pair(std::size_t i) const;
};

// `weights` is [n, filter dims...]. Throws std::invalid_argument for r <= 1
// or n == 0.
ObfuscatedLayer obfuscate(const Tensor& weights, std::uint64_t seed,
                          const ObfuscateOptions& opt = {});

// Defender-side inverse: w_i = published[filter] - published[mask].
Tensor deobfuscate(const ObfuscatedLayer& obf);

// Maps outputs of the obfuscated linear op (channel j = published filter j)
// back to the n original channels. `y` is [batch, m, spatial...].
Tensor deobfuscate_outputs(const ObfuscatedLayer& obf, const Tensor& y);

struct Candidate {
  Tensor filter;
  // filter = published[a] - published[b].
  std::size_t a = 0;
  std::size_t b = 0;
  double variance = 0.0;
};

double sample_variance(std::span<const double> v);

// Every ordered pair (a, b), a != b, whose difference has population
// variance below var_threshold. Ordered by (a, b).
std::vector<Candidate> attack_unmask(const Tensor& published, double var_threshold);

enum class AssignMode { Greedy, Hungarian };

struct RecoveryReport {
  // [n, filter dims...]; positions never assigned keep the public filter.
  Tensor recovered;
  std::vector<bool> assigned;
  double weight_recovery_rate = 0.0;
  double position_recovery_rate = 0.0;
};

// Groups candidates into connected components over published indices. For
// each component, every member is tried as the raw mask; the hypothesis whose
// differences lie closest (summed L2) to public filters wins. Differences are
// then placed at their nearest public position. Rates are scored against the
// true filters when `truth` is given.
RecoveryReport attack_recover_positions(const std::vector<Candidate>& candidates,
                                        const Tensor& public_layer,
                                        AssignMode mode = AssignMode::Greedy,
                                        const Tensor* truth = nullptr);

// Minimum-cost assignment of rows to columns for a rows <= cols cost
// matrix (row-major). Returns the column of each row.
std::vector<std::size_t> hungarian(const std::vector<double>& cost, std::size_t rows,
                                   std::size_t cols);

nlohmann::json report_to_json(const RecoveryReport& r);

// A public layer [n, d] with entries ~ N(0, weight_var) and a victim layer
// that adds N(0, noise_sd^2) fine-tuning noise to every entry.
struct SyntheticLayer {
  Tensor public_layer;
  Tensor victim;
};
SyntheticLayer synthetic_layer(std::size_t n, std::size_t d, double weight_var, double noise_sd,
                               std::uint64_t seed);

}  // namespace tsdp::shadownet
