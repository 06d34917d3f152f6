#include "tsdp/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "tsdp/rng.hpp"

namespace tsdp::data {

Tensor class_template(const GenOptions& opt, std::size_t n_classes, std::size_t side,
                      std::size_t cls) {
  Rng rng(derive_seed(hash_bytes(opt.distribution, n_classes * 1000003ULL + side),
                      "template:" + std::to_string(cls)));
  const std::size_t c = opt.channels;
  Tensor t({c, side, side});
  const double s = static_cast<double>(side);
  // Each channel is a sum of two oriented gratings and one Gaussian blob.
  for (std::size_t ch = 0; ch < c; ++ch) {
    struct Grating {
      double fx, fy, phase, amp;
    } gr[2];
    for (auto& g : gr) {
      const double theta = rng.uniform(0.0, std::numbers::pi);
      const double freq = rng.uniform(0.5, 2.0) * 2.0 * std::numbers::pi / s;
      g = {freq * std::cos(theta), freq * std::sin(theta),
           rng.uniform(0.0, 2.0 * std::numbers::pi), rng.uniform(0.5, 1.0)};
    }
    const double bx = rng.uniform(0.2, 0.8) * s, by = rng.uniform(0.2, 0.8) * s;
    const double bw = rng.uniform(0.12, 0.3) * s, ba = rng.uniform(-1.0, 1.0);
    for (std::size_t i = 0; i < side; ++i) {
      for (std::size_t j = 0; j < side; ++j) {
        const double y = static_cast<double>(i), x = static_cast<double>(j);
        double v = 0.0;
        for (const auto& g : gr) v += g.amp * std::sin(g.fx * x + g.fy * y + g.phase);
        const double d2 = (x - bx) * (x - bx) + (y - by) * (y - by);
        v += ba * std::exp(-d2 / (2.0 * bw * bw));
        t[(ch * side + i) * side + j] = v;
      }
    }
  }
  // Affine rescale into [0.1, 0.9].
  const auto [lo, hi] = std::minmax_element(t.vec().begin(), t.vec().end());
  const double a = *lo, span = *hi - *lo > 0 ? *hi - *lo : 1.0;
  for (auto& v : t.vec()) v = 0.1 + 0.8 * (v - a) / span;
  return t;
}

Dataset gen_synthetic(std::size_t n_classes, std::size_t n_per_class, std::size_t side,
                      std::uint64_t seed, const GenOptions& opt) {
  if (side < 4) throw std::invalid_argument("side must be >= 4");
  if (n_classes < 2) throw std::invalid_argument("n_classes must be >= 2");
  const std::size_t c = opt.channels;
  const std::size_t n = n_classes * n_per_class;
  Dataset d;
  d.n_classes = n_classes;
  d.seed = seed;
  d.distribution = opt.distribution;
  d.images = Tensor({n, c, side, side});
  d.labels.resize(n);
  Rng rng(derive_seed(seed, "gen_synthetic:" + opt.distribution));
  const auto iside = static_cast<std::ptrdiff_t>(side);
  for (std::size_t k = 0; k < n_classes; ++k) {
    const Tensor tmpl = class_template(opt, n_classes, side, k);
    for (std::size_t s = 0; s < n_per_class; ++s) {
      const std::size_t row = k * n_per_class + s;
      d.labels[row] = static_cast<int>(k);
      const auto span = static_cast<std::uint64_t>(2 * opt.jitter + 1);
      const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(rng.below(span)) -
                                static_cast<std::ptrdiff_t>(opt.jitter);
      const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(rng.below(span)) -
                                static_cast<std::ptrdiff_t>(opt.jitter);
      const double gain = 1.0 + opt.contrast * rng.uniform(-1.0, 1.0);
      double* dst = &d.images.vec()[row * c * side * side];
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::ptrdiff_t i = 0; i < iside; ++i) {
          for (std::ptrdiff_t j = 0; j < iside; ++j) {
            // Shift with edge replication.
            const auto si = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(i - dy, 0, iside - 1));
            const auto sj = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(j - dx, 0, iside - 1));
            const double base = tmpl[(ch * side + si) * side + sj];
            const double noise = opt.noise_sd > 0 ? rng.normal(0.0, opt.noise_sd) : 0.0;
            const double v = base + (gain - 1.0) * (base - 0.5) + noise;
            dst[(ch * side + static_cast<std::size_t>(i)) * side + static_cast<std::size_t>(j)] =
                std::clamp(v, 0.0, 1.0);
          }
        }
      }
    }
  }
  return d;
}

namespace {

std::vector<std::vector<std::size_t>> rows_by_class(const Dataset& d, Rng& rng) {
  std::vector<std::vector<std::size_t>> by(d.n_classes);
  for (std::size_t i = 0; i < d.size(); ++i) {
    by[static_cast<std::size_t>(d.labels[i])].push_back(i);
  }
  for (auto& v : by) rng.shuffle(v);
  return by;
}

}  // namespace

MiaSplit make_mia_split(const Dataset& d, std::uint64_t seed) {
  if (d.size() < 4 || d.size() % 4 != 0) {
    throw std::invalid_argument("MIA split needs a dataset size divisible by 4, got " +
                                std::to_string(d.size()));
  }
  Rng rng(derive_seed(seed, "mia_split"));
  const auto by = rows_by_class(d, rng);
  MiaSplit out;
  // Whole quarters per class first; leftovers dealt round-robin so the
  // parts stay equal in size.
  std::size_t deal = 0;
  std::vector<std::size_t> leftovers;
  for (const auto& rows : by) {
    const std::size_t q = rows.size() / 4;
    for (std::size_t part = 0; part < 4; ++part) {
      out.indices[part].insert(out.indices[part].end(), rows.begin() + part * q,
                               rows.begin() + (part + 1) * q);
    }
    leftovers.insert(leftovers.end(), rows.begin() + 4 * q, rows.end());
  }
  for (std::size_t r : leftovers) out.indices[deal++ % 4].push_back(r);
  for (auto& idx : out.indices) std::sort(idx.begin(), idx.end());
  out.target_train = d.subset(out.indices[0]);
  out.target_test = d.subset(out.indices[1]);
  out.shadow_train = d.subset(out.indices[2]);
  out.shadow_test = d.subset(out.indices[3]);
  return out;
}

QuerySet make_attacker_queryset(const Dataset& pool, std::size_t budget, std::uint64_t seed) {
  if (budget > pool.size()) {
    throw std::invalid_argument("query budget " + std::to_string(budget) +
                                " exceeds pool size " + std::to_string(pool.size()));
  }
  Rng rng(derive_seed(seed, "queryset"));
  auto perm = rng.permutation(pool.size());
  perm.resize(budget);
  QuerySet q;
  q.source_rows = std::move(perm);
  Shape s = pool.images.shape();
  s[0] = 0;
  q.images = budget == 0 ? Tensor(s) : pool.images.gather_rows(q.source_rows);
  return q;
}

std::pair<Dataset, Dataset> stratified_split(const Dataset& d, std::size_t first,
                                             std::uint64_t seed) {
  if (first > d.size()) throw std::invalid_argument("split larger than dataset");
  Rng rng(derive_seed(seed, "stratified_split"));
  const auto by = rows_by_class(d, rng);
  // Interleave classes so any prefix is near-stratified.
  std::vector<std::size_t> order;
  for (std::size_t k = 0; order.size() < d.size(); ++k) {
    for (const auto& rows : by) {
      if (k < rows.size()) order.push_back(rows[k]);
    }
  }
  std::vector<std::size_t> a(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(first));
  std::vector<std::size_t> b(order.begin() + static_cast<std::ptrdiff_t>(first), order.end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  return {d.subset(a), d.subset(b)};
}

}  // namespace tsdp::data
