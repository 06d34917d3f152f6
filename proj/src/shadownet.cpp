#include "tsdp/shadownet.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <stdexcept>

#include "tsdp/rng.hpp"

namespace tsdp::shadownet {

namespace {

double l2(const double* a, const double* b, std::size_t d) {
  double s = 0.0;
  for (std::size_t k = 0; k < d; ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
  return std::sqrt(s);
}

}  // namespace

double sample_variance(std::span<const double> v) {
  if (v.empty()) return 0.0;
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - mean) * (x - mean);
  return s / static_cast<double>(v.size());
}

std::pair<std::size_t, std::size_t> ObfuscatedLayer::recovery_pair(std::size_t i) const {
  return {secret.position_of.at(i), secret.position_of.at(n + secret.mask_of.at(i))};
}

ObfuscatedLayer obfuscate(const Tensor& weights, std::uint64_t seed, const ObfuscateOptions& opt) {
  if (!(opt.r > 1.0)) throw std::invalid_argument("obfuscation ratio r must be > 1");
  const std::size_t n = weights.rank() ? weights.dim(0) : 0;
  if (n == 0) throw std::invalid_argument("cannot obfuscate an empty layer");
  const auto m = static_cast<std::size_t>(std::ceil(opt.r * static_cast<double>(n) - 1e-9));
  const std::size_t n_masks = std::max<std::size_t>(1, m - n);
  const std::size_t total = n + n_masks;
  const std::size_t d = weights.row_size();
  Rng rng(derive_seed(seed, "shadownet"));
  const double mask_sd =
      std::sqrt(opt.mask_var.value_or(opt.mask_var_ratio * sample_variance(weights.vec())));

  std::vector<Tensor> masks;
  for (std::size_t j = 0; j < n_masks; ++j) {
    Tensor f({d});
    if (!opt.zero_masks) {
      for (auto& v : f.vec()) v = rng.normal(0.0, mask_sd);
    }
    masks.push_back(std::move(f));
  }
  ObfuscatedLayer out;
  out.n = n;
  out.secret.mask_of.resize(n);
  for (auto& a : out.secret.mask_of) a = rng.below(n_masks);
  out.secret.perm.resize(total);
  std::iota(out.secret.perm.begin(), out.secret.perm.end(), std::size_t{0});
  if (!opt.identity_permutation) rng.shuffle(out.secret.perm);
  out.secret.position_of.resize(total);
  for (std::size_t j = 0; j < total; ++j) out.secret.position_of[out.secret.perm[j]] = j;

  Shape shape = weights.shape();
  shape[0] = total;
  out.filters = Tensor(shape);
  for (std::size_t j = 0; j < total; ++j) {
    const std::size_t src = out.secret.perm[j];
    double* dst = &out.filters.vec()[j * d];
    if (src < n) {
      const Tensor& f = masks[out.secret.mask_of[src]];
      for (std::size_t k = 0; k < d; ++k) dst[k] = weights[src * d + k] + f[k];
    } else {
      std::copy(masks[src - n].vec().begin(), masks[src - n].vec().end(), dst);
    }
  }
  return out;
}

Tensor deobfuscate(const ObfuscatedLayer& obf) {
  const std::size_t d = obf.filters.row_size();
  Shape shape = obf.filters.shape();
  shape[0] = obf.n;
  Tensor w(shape);
  for (std::size_t i = 0; i < obf.n; ++i) {
    const auto [a, b] = obf.recovery_pair(i);
    for (std::size_t k = 0; k < d; ++k) w[i * d + k] = obf.filters[a * d + k] - obf.filters[b * d + k];
  }
  return w;
}

Tensor deobfuscate_outputs(const ObfuscatedLayer& obf, const Tensor& y) {
  const std::size_t batch = y.dim(0), m = y.dim(1);
  const std::size_t sp = y.size() / (batch * m);
  Shape shape = y.shape();
  shape[1] = obf.n;
  Tensor out(shape);
  for (std::size_t s = 0; s < batch; ++s) {
    for (std::size_t i = 0; i < obf.n; ++i) {
      const auto [a, b] = obf.recovery_pair(i);
      for (std::size_t k = 0; k < sp; ++k) {
        out[(s * obf.n + i) * sp + k] = y[(s * m + a) * sp + k] - y[(s * m + b) * sp + k];
      }
    }
  }
  return out;
}

std::vector<Candidate> attack_unmask(const Tensor& published, double var_threshold) {
  if (!(var_threshold > 0.0)) throw std::invalid_argument("variance threshold must be > 0");
  std::vector<Candidate> out;
  if (published.rank() == 0 || published.dim(0) < 2) return out;
  const std::size_t m = published.dim(0), d = published.row_size();
  Shape fshape(published.shape().begin() + 1, published.shape().end());
  std::vector<double> diff(d);
  for (std::size_t a = 0; a < m; ++a) {
    for (std::size_t b = 0; b < m; ++b) {
      if (a == b) continue;
      for (std::size_t k = 0; k < d; ++k) diff[k] = published[a * d + k] - published[b * d + k];
      const double v = sample_variance(diff);
      if (v < var_threshold) out.push_back({Tensor(fshape, diff), a, b, v});
    }
  }
  return out;
}

std::vector<std::size_t> hungarian(const std::vector<double>& cost, std::size_t rows,
                                   std::size_t cols) {
  if (rows > cols) throw std::invalid_argument("hungarian needs rows <= cols");
  // Potentials formulation, 1-based internally.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(rows + 1, 0.0), v(cols + 1, 0.0);
  std::vector<std::size_t> p(cols + 1, 0), way(cols + 1, 0);
  for (std::size_t i = 1; i <= rows; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(cols + 1, inf);
    std::vector<bool> used(cols + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= cols; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= cols; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> col_of(rows);
  for (std::size_t j = 1; j <= cols; ++j) {
    if (p[j] != 0) col_of[p[j] - 1] = j - 1;
  }
  return col_of;
}

RecoveryReport attack_recover_positions(const std::vector<Candidate>& candidates,
                                        const Tensor& public_layer, AssignMode mode,
                                        const Tensor* truth) {
  const std::size_t n = public_layer.dim(0), d = public_layer.row_size();
  RecoveryReport rep;
  rep.recovered = public_layer;
  rep.assigned.assign(n, false);

  // Edges keyed by ordered pair; components by union-find over indices.
  std::map<std::pair<std::size_t, std::size_t>, const Candidate*> edge;
  std::map<std::size_t, std::size_t> parent;
  std::function<std::size_t(std::size_t)> find = [&](std::size_t x) {
    auto it = parent.find(x);
    if (it == parent.end()) return parent[x] = x;
    return it->second == x ? x : it->second = find(it->second);
  };
  for (const auto& c : candidates) {
    if (c.filter.size() != d) throw std::invalid_argument("candidate size differs from public filters");
    edge[{c.a, c.b}] = &c;
    const std::size_t ra = find(c.a), rb = find(c.b);
    if (ra != rb) parent[std::max(ra, rb)] = std::min(ra, rb);
  }
  std::map<std::size_t, std::vector<std::size_t>> comps;
  for (const auto& [x, _] : parent) comps[find(x)].push_back(x);

  auto nearest = [&](const double* f) {
    std::size_t best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (std::size_t p = 0; p < n; ++p) {
      const double dist = l2(f, &public_layer.vec()[p * d], d);
      if (dist < bd) {
        bd = dist;
        best = p;
      }
    }
    return std::pair{best, bd};
  };

  std::vector<const Candidate*> chosen;
  for (const auto& [root, members] : comps) {
    double best_score = std::numeric_limits<double>::infinity();
    std::vector<const Candidate*> best;
    for (std::size_t h : members) {
      std::vector<const Candidate*> set;
      double score = 0.0;
      for (std::size_t a : members) {
        if (a == h) continue;
        auto it = edge.find({a, h});
        if (it == edge.end()) continue;
        set.push_back(it->second);
        score += nearest(it->second->filter.vec().data()).second;
      }
      if (set.empty()) continue;
      // Normalise so hypotheses yielding different counts compare fairly.
      score /= static_cast<double>(set.size());
      if (score < best_score) {
        best_score = score;
        best = std::move(set);
      }
    }
    chosen.insert(chosen.end(), best.begin(), best.end());
  }

  std::vector<double> best_dist(n, std::numeric_limits<double>::infinity());
  if (mode == AssignMode::Greedy || chosen.empty()) {
    for (const Candidate* c : chosen) {
      const auto [p, dist] = nearest(c->filter.vec().data());
      if (dist < best_dist[p]) {
        best_dist[p] = dist;
        std::copy(c->filter.vec().begin(), c->filter.vec().end(), &rep.recovered.vec()[p * d]);
        rep.assigned[p] = true;
      }
    }
  } else {
    const std::size_t rows = std::min(chosen.size(), n);
    // With more candidates than positions, keep those closest to any public filter.
    std::vector<const Candidate*> use = chosen;
    std::stable_sort(use.begin(), use.end(), [&](const Candidate* x, const Candidate* y) {
      return nearest(x->filter.vec().data()).second < nearest(y->filter.vec().data()).second;
    });
    use.resize(rows);
    std::vector<double> cost(rows * n);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t p = 0; p < n; ++p) {
        cost[r * n + p] = l2(use[r]->filter.vec().data(), &public_layer.vec()[p * d], d);
      }
    }
    const auto col = hungarian(cost, rows, n);
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy(use[r]->filter.vec().begin(), use[r]->filter.vec().end(),
                &rep.recovered.vec()[col[r] * d]);
      rep.assigned[col[r]] = true;
    }
  }

  if (truth) {
    const double tol = 1e-9;
    std::size_t found = 0, placed = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double* w = &truth->vec()[i * d];
      const bool any = std::any_of(chosen.begin(), chosen.end(), [&](const Candidate* c) {
        return l2(c->filter.vec().data(), w, d) <= tol;
      });
      found += any;
      placed += rep.assigned[i] && l2(&rep.recovered.vec()[i * d], w, d) <= tol;
    }
    rep.weight_recovery_rate = static_cast<double>(found) / static_cast<double>(n);
    rep.position_recovery_rate = static_cast<double>(placed) / static_cast<double>(n);
  }
  return rep;
}

nlohmann::json report_to_json(const RecoveryReport& r) {
  return {{"weight_recovery_rate", r.weight_recovery_rate},
          {"position_recovery_rate", r.position_recovery_rate},
          {"assigned", std::count(r.assigned.begin(), r.assigned.end(), true)},
          {"positions", r.assigned.size()}};
}

SyntheticLayer synthetic_layer(std::size_t n, std::size_t d, double weight_var, double noise_sd,
                               std::uint64_t seed) {
  Rng rng(seed);
  SyntheticLayer s{Tensor({n, d}), Tensor({n, d})};
  for (std::size_t i = 0; i < n * d; ++i) {
    s.public_layer[i] = rng.normal(0.0, std::sqrt(weight_var));
    s.victim[i] = s.public_layer[i] + rng.normal(0.0, noise_sd);
  }
  return s;
}

}  // namespace tsdp::shadownet
