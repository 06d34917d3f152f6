#include "tsdp/offload.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "tsdp/engine.hpp"
#include "tsdp/shadownet.hpp"

namespace tsdp::offload {

using u128 = unsigned __int128;

bool is_prime(std::uint64_t n) {
  if (n < 2) return false;
  for (std::uint64_t d = 2; d * d <= n; ++d) {
    if (n % d == 0) return false;
  }
  return true;
}

void FieldParams::validate() const {
  if (p <= 256) throw std::invalid_argument("field modulus must exceed 2^8");
  if (p >= (1ULL << 62)) throw std::invalid_argument("field modulus too large for 64-bit products");
  if (!is_prime(p)) throw std::invalid_argument("field modulus " + std::to_string(p) + " is not prime");
}

std::uint64_t to_field(std::int64_t v, const FieldParams& fp) {
  const auto p = static_cast<std::int64_t>(fp.p);
  const std::int64_t r = v % p;
  return static_cast<std::uint64_t>(r < 0 ? r + p : r);
}

std::int64_t from_field(std::uint64_t v, const FieldParams& fp) {
  return v > fp.p / 2 ? static_cast<std::int64_t>(v) - static_cast<std::int64_t>(fp.p)
                      : static_cast<std::int64_t>(v);
}

double round_half_even(double v) { return std::nearbyint(v); }

QuantTensor quantize(const Tensor& x) {
  QuantTensor q;
  q.shape = x.shape();
  q.values.resize(x.size());
  double lo = 0.0, hi = 0.0;
  for (double v : x.vec()) {
    if (!std::isfinite(v)) throw std::invalid_argument("cannot quantize a non-finite value");
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (hi == lo) {
    q.scale = 1.0;
    q.zero_point = 0;
    std::fill(q.values.begin(), q.values.end(), 0);
    return q;
  }
  q.scale = (hi - lo) / 255.0;
  q.zero_point = static_cast<std::int64_t>(std::clamp(round_half_even(-lo / q.scale), 0.0, 255.0));
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double level = round_half_even(x[i] / q.scale) + static_cast<double>(q.zero_point);
    q.values[i] = static_cast<std::uint64_t>(std::clamp(level, 0.0, 255.0));
  }
  return q;
}

Tensor dequantize(const QuantTensor& q) {
  Tensor t(q.shape);
  for (std::size_t i = 0; i < t.size(); ++i) {
    t[i] = static_cast<double>(static_cast<std::int64_t>(q.values[i]) - q.zero_point) * q.scale;
  }
  return t;
}

QuantWeights quantize_weights(std::span<const double> w) {
  QuantWeights out;
  double m = 0.0;
  for (double v : w) m = std::max(m, std::abs(v));
  out.scale = m > 0.0 ? m / 127.0 : 1.0;
  out.q.reserve(w.size());
  for (double v : w) {
    out.q.push_back(static_cast<std::int64_t>(std::clamp(round_half_even(v / out.scale), -127.0, 127.0)));
  }
  return out;
}

// ---------------------------------------------------------------- FieldLinear

FieldLinear FieldLinear::conv(const LayerSpec& l, std::vector<std::int64_t> wq) {
  if (l.kind != LayerKind::Conv2d || l.out_shape.size() != 3) {
    throw std::invalid_argument("field conv needs a resolved conv layer");
  }
  FieldLinear f;
  f.kind_ = Kind::Conv;
  f.geom_ = l;
  f.geom_.params.clear();
  f.wq_ = std::move(wq);
  f.in_size_ = shape_numel(l.in_shape);
  f.out_size_ = shape_numel(l.out_shape);
  f.rows_per_sample_ = l.out_shape[1] * l.out_shape[2];
  f.row_in_ = l.c_in * l.kernel * l.kernel;
  f.row_out_ = l.c_out;
  if (f.wq_.size() != f.row_in_ * f.row_out_) throw std::invalid_argument("conv weight size mismatch");
  return f;
}

FieldLinear FieldLinear::dense(std::size_t in, std::size_t out, std::vector<std::int64_t> wq) {
  FieldLinear f;
  f.kind_ = Kind::Dense;
  f.wq_ = std::move(wq);
  f.in_size_ = f.row_in_ = in;
  f.out_size_ = f.row_out_ = out;
  if (f.wq_.size() != in * out) throw std::invalid_argument("dense weight size mismatch");
  return f;
}

FieldLinear FieldLinear::diag(std::size_t channels, std::size_t spatial, std::vector<std::int64_t> wq) {
  FieldLinear f;
  f.kind_ = Kind::Diag;
  f.wq_ = std::move(wq);
  f.in_size_ = f.out_size_ = f.row_in_ = f.row_out_ = channels * spatial;
  f.geom_.c_in = channels;
  if (f.wq_.size() != channels) throw std::invalid_argument("diag weight size mismatch");
  return f;
}

void FieldLinear::check_range(const FieldParams& fp) const {
  const std::size_t fan_in = kind_ == Kind::Diag ? 1 : row_in_;
  const u128 worst = static_cast<u128>(127) * 255 * fan_in;
  if (worst * 2 >= fp.p) {
    throw std::invalid_argument("field modulus too small for accumulations of length " +
                                std::to_string(fan_in));
  }
}

Field FieldLinear::input_rows(std::span<const std::uint64_t> h, std::size_t batch) const {
  if (h.size() != batch * in_size_) throw std::invalid_argument("field input size mismatch");
  if (kind_ != Kind::Conv) return Field(h.begin(), h.end());
  const auto& l = geom_;
  const std::size_t c = l.c_in, hh = l.in_shape[1], ww = l.in_shape[2], k = l.kernel;
  const std::size_t ho = l.out_shape[1], wo = l.out_shape[2];
  Field rows(batch * rows_per_sample_ * row_in_, 0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t oh = 0; oh < ho; ++oh) {
      for (std::size_t ow = 0; ow < wo; ++ow) {
        std::uint64_t* row = &rows[((b * ho + oh) * wo + ow) * row_in_];
        for (std::size_t ci = 0; ci < c; ++ci) {
          for (std::size_t a = 0; a < k; ++a) {
            const long ih = static_cast<long>(oh * l.stride + a) - static_cast<long>(l.padding);
            if (ih < 0 || ih >= static_cast<long>(hh)) continue;
            for (std::size_t e = 0; e < k; ++e) {
              const long iw = static_cast<long>(ow * l.stride + e) - static_cast<long>(l.padding);
              if (iw < 0 || iw >= static_cast<long>(ww)) continue;
              row[(ci * k + a) * k + e] =
                  h[((b * c + ci) * hh + static_cast<std::size_t>(ih)) * ww + static_cast<std::size_t>(iw)];
            }
          }
        }
      }
    }
  }
  return rows;
}

Field FieldLinear::output_rows(std::span<const std::uint64_t> z, std::size_t batch) const {
  if (z.size() != batch * out_size_) throw std::invalid_argument("field output size mismatch");
  if (kind_ != Kind::Conv) return Field(z.begin(), z.end());
  const std::size_t P = rows_per_sample_, co = row_out_;
  Field rows(z.size());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t pos = 0; pos < P; ++pos) rows[(b * P + pos) * co + o] = z[(b * co + o) * P + pos];
  return rows;
}

Field FieldLinear::apply(std::span<const std::uint64_t> h, std::size_t batch, const FieldParams& fp) const {
  if (h.size() != batch * in_size_) throw std::invalid_argument("field input size mismatch");
  Field w(wq_.size());
  for (std::size_t i = 0; i < wq_.size(); ++i) w[i] = to_field(wq_[i], fp);
  Field out(batch * out_size_);
  if (kind_ == Kind::Diag) {
    const std::size_t spatial = in_size_ / geom_.c_in;
    for (std::size_t i = 0; i < out.size(); ++i) {
      const std::size_t ch = (i % in_size_) / spatial;
      out[i] = static_cast<std::uint64_t>(static_cast<u128>(h[i]) * w[ch] % fp.p);
    }
    return out;
  }
  const Field rows = input_rows(h, batch);
  const std::size_t n_rows = batch * rows_per_sample_;
  Field zr(n_rows * row_out_);
  for (std::size_t r = 0; r < n_rows; ++r) {
    const std::uint64_t* x = &rows[r * row_in_];
    for (std::size_t o = 0; o < row_out_; ++o) {
      const std::uint64_t* wr = &w[o * row_in_];
      u128 acc = 0;
      for (std::size_t k = 0; k < row_in_; ++k) acc += static_cast<u128>(x[k]) * wr[k];
      zr[r * row_out_ + o] = static_cast<std::uint64_t>(acc % fp.p);
    }
  }
  if (kind_ == Kind::Dense) return zr;
  const std::size_t P = rows_per_sample_;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t pos = 0; pos < P; ++pos)
      for (std::size_t o = 0; o < row_out_; ++o) out[(b * row_out_ + o) * P + pos] = zr[(b * P + pos) * row_out_ + o];
  return out;
}

std::vector<std::int64_t> FieldLinear::ones_response() const {
  std::vector<std::int64_t> out(out_size_, 0);
  if (kind_ == Kind::Diag) {
    const std::size_t spatial = in_size_ / geom_.c_in;
    for (std::size_t i = 0; i < out_size_; ++i) out[i] = wq_[i / spatial];
    return out;
  }
  // Integer evaluation on ones; the row form marks padded taps with 0.
  const Field ones(in_size_, 1);
  const Field rows = input_rows(ones, 1);
  const std::size_t P = rows_per_sample_;
  for (std::size_t pos = 0; pos < P; ++pos) {
    for (std::size_t o = 0; o < row_out_; ++o) {
      std::int64_t acc = 0;
      for (std::size_t k = 0; k < row_in_; ++k) {
        acc += static_cast<std::int64_t>(rows[pos * row_in_ + k]) * wq_[o * row_in_ + k];
      }
      out[kind_ == Kind::Conv ? o * P + pos : o] = acc;
    }
  }
  return out;
}

FreivaldsKey FieldLinear::make_key(Rng& rng, const FieldParams& fp) const {
  FreivaldsKey key;
  key.s.resize(row_out_);
  for (auto& v : key.s) v = rng.below(fp.p);
  key.s_tilde.assign(row_in_, 0);
  if (kind_ == Kind::Diag) {
    const std::size_t spatial = in_size_ / geom_.c_in;
    for (std::size_t i = 0; i < row_in_; ++i) {
      key.s_tilde[i] = static_cast<std::uint64_t>(static_cast<u128>(key.s[i]) * to_field(wq_[i / spatial], fp) % fp.p);
    }
    return key;
  }
  for (std::size_t k = 0; k < row_in_; ++k) {
    u128 acc = 0;
    for (std::size_t o = 0; o < row_out_; ++o) acc += static_cast<u128>(key.s[o]) * to_field(wq_[o * row_in_ + k], fp);
    key.s_tilde[k] = static_cast<std::uint64_t>(acc % fp.p);
  }
  return key;
}

bool freivalds_verify(std::span<const std::uint64_t> h_rows, std::span<const std::uint64_t> claimed_rows,
                      std::size_t rows, std::span<const FreivaldsKey> keys, const FieldParams& fp) {
  if (keys.empty()) throw std::invalid_argument("Freivalds needs at least one round");
  const std::size_t row_out = keys[0].s.size(), row_in = keys[0].s_tilde.size();
  if (h_rows.size() != rows * row_in || claimed_rows.size() != rows * row_out) {
    throw std::invalid_argument("Freivalds dimension mismatch");
  }
  for (const auto& key : keys) {
    if (key.s.size() != row_out || key.s_tilde.size() != row_in) {
      throw std::invalid_argument("Freivalds key dimension mismatch");
    }
    for (std::size_t r = 0; r < rows; ++r) {
      u128 lhs = 0, rhs = 0;
      for (std::size_t o = 0; o < row_out; ++o) lhs += static_cast<u128>(claimed_rows[r * row_out + o]) * key.s[o];
      for (std::size_t k = 0; k < row_in; ++k) rhs += static_cast<u128>(h_rows[r * row_in + k]) * key.s_tilde[k];
      if (lhs % fp.p != rhs % fp.p) return false;
    }
  }
  return true;
}

// ------------------------------------------------------------------- OTP

QuantTensor otp_encrypt(const QuantTensor& q, OtpPad& pad, const FieldParams& fp) {
  if (pad.consumed) throw PadReuseError("one-time pad " + std::to_string(pad.id) + " reused");
  if (pad.r.size() != q.values.size()) throw std::invalid_argument("pad size does not match tensor");
  pad.consumed = true;
  QuantTensor e = q;
  for (std::size_t i = 0; i < e.values.size(); ++i) e.values[i] = (q.values[i] + pad.r[i]) % fp.p;
  return e;
}

Field otp_decrypt_linear(std::span<const std::uint64_t> g_he, std::span<const std::uint64_t> g_r,
                         const FieldParams& fp) {
  if (g_he.size() != g_r.size()) throw std::invalid_argument("decrypt size mismatch");
  Field out(g_he.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (g_he[i] + fp.p - g_r[i] % fp.p) % fp.p;
  return out;
}

PadPool::PadPool(std::uint64_t seed, FieldParams fp, std::size_t rounds)
    : fp_(fp), rounds_(rounds), rng_(derive_seed(seed, "pad_pool")) {
  fp_.validate();
  if (rounds_ == 0) throw std::invalid_argument("Freivalds rounds must be >= 1");
}

void PadPool::refill(const std::string& layer, const FieldLinear& op, std::size_t batch, std::size_t count) {
  op.check_range(fp_);
  std::lock_guard lock(mu_);
  auto& q = pads_[{layer, batch}];
  for (std::size_t c = 0; c < count; ++c) {
    OtpPad pad;
    pad.id = next_id_++;
    pad.layer = layer;
    pad.r.resize(batch * op.in_size());
    for (auto& v : pad.r) v = rng_.below(fp_.p);
    pad.g_r = op.apply(pad.r, batch, fp_);
    for (std::size_t k = 0; k < rounds_; ++k) pad.keys.push_back(op.make_key(rng_, fp_));
    q.push_back(std::move(pad));
  }
}

OtpPad PadPool::acquire(const std::string& layer, std::size_t batch) {
  std::lock_guard lock(mu_);
  auto it = pads_.find({layer, batch});
  if (it == pads_.end() || it->second.empty()) {
    throw PadExhaustedError("no pads left for layer " + layer + " at batch " + std::to_string(batch) +
                            "; refill the pool");
  }
  OtpPad pad = std::move(it->second.front());
  it->second.pop_front();
  ++issued_;
  return pad;
}

std::size_t PadPool::available(const std::string& layer, std::size_t batch) const {
  std::lock_guard lock(mu_);
  auto it = pads_.find({layer, batch});
  return it == pads_.end() ? 0 : it->second.size();
}

std::size_t PadPool::issued() const {
  std::lock_guard lock(mu_);
  return issued_;
}

Field GpuDevice::linear(const FieldLinear& op, std::span<const std::uint64_t> h, std::size_t batch,
                        const FieldParams& fp) {
  return op.apply(h, batch, fp);
}

Field CorruptingGpu::linear(const FieldLinear& op, std::span<const std::uint64_t> h, std::size_t batch,
                            const FieldParams& fp) {
  Field out = op.apply(h, batch, fp);
  if (!out.empty() && rng_.uniform() < prob_) {
    const std::size_t i = rng_.below(out.size());
    out[i] = (out[i] + 1 + rng_.below(fp.p - 1)) % fp.p;
    ++corruptions_;
  }
  return out;
}

std::string_view to_string(Protocol p) {
  switch (p) {
    case Protocol::Plain:
      return "plain";
    case Protocol::QuantizedPlain:
      return "quantized";
    case Protocol::Masked:
      return "masked";
  }
  return "?";
}

Protocol protocol_from_string(std::string_view s) {
  if (s == "plain") return Protocol::Plain;
  if (s == "quantized") return Protocol::QuantizedPlain;
  if (s == "masked") return Protocol::Masked;
  throw std::invalid_argument("unknown protocol '" + std::string(s) + "'");
}

std::string verify_log_jsonl(const std::vector<VerifyRecord>& log) {
  std::ostringstream os;
  for (const auto& r : log) {
    os << nlohmann::json{{"layer", r.layer}, {"rounds", r.rounds}, {"pass", r.pass}}.dump() << '\n';
  }
  return os.str();
}

// -------------------------------------------------------------- executor

namespace {

// Per-channel eval-mode BN scale, optionally restricted by a gamma mask.
std::vector<double> bn_scale(const LayerSpec& l, const std::vector<bool>* mask, bool shielded) {
  std::vector<double> scale, shift;
  nn::batchnorm_affine(l, scale, shift);
  if (mask) {
    for (std::size_t c = 0; c < scale.size(); ++c) {
      if ((*mask)[c] != shielded) scale[c] = 0.0;
    }
  }
  return scale;
}

std::vector<double> bn_shift(const LayerSpec& l) {
  std::vector<double> scale, shift;
  nn::batchnorm_affine(l, scale, shift);
  return shift;
}

Tensor masked_weight(const Tensor& w, const std::vector<bool>& mask, bool shielded) {
  Tensor out = w;
  for (std::size_t k = 0; k < w.size(); ++k) {
    if (mask[k] != shielded) out[k] = 0.0;
  }
  return out;
}

// Float evaluation of a conv/linear with the given weights and no bias.
Tensor float_linear(const LayerSpec& l, const Tensor& weight, const Tensor& x) {
  Node tmp;
  tmp.layer = l;
  tmp.layer.params = {{"weight", weight}};
  tmp.layer.has_bias = false;
  const Tensor* in[] = {&x};
  return nn::apply_layer(tmp, in);
}

Tensor diag_apply(const std::vector<double>& scale, const Tensor& x) {
  Tensor y = x;
  const std::size_t c = scale.size(), sp = x.size() / (x.dim(0) * c);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= scale[(i / sp) % c];
  return y;
}

void add_bias(const LayerSpec& l, Tensor& y) {
  if (l.kind == LayerKind::BatchNorm) {
    const auto shift = bn_shift(l);
    const std::size_t c = shift.size(), sp = y.size() / (y.dim(0) * c);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += shift[(i / sp) % c];
    return;
  }
  if (!l.has_bias) return;
  const auto& b = l.params.at("bias").vec();
  const std::size_t c = l.c_out, sp = y.size() / (y.dim(0) * c);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b[(i / sp) % c];
}

Shape batched(std::size_t n, const Shape& s) {
  Shape out{n};
  out.insert(out.end(), s.begin(), s.end());
  return out;
}

}  // namespace

std::vector<OffloadOp> offload_ops(const ModelGraph& g, const PartitionPlan& plan) {
  plan.check_against(g);
  std::vector<OffloadOp> ops;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const LayerSpec& l = g.node(i).layer;
    if (!is_linear_kind(l.kind) && l.kind != LayerKind::BatchNorm) continue;
    const auto mit = plan.weight_masks.find(i);
    const std::vector<bool>* mask = mit == plan.weight_masks.end() ? nullptr : &mit->second;
    if (plan.at(i) == Placement::OBFUSCATED) continue;
    if (plan.at(i) == Placement::TEE && !mask) continue;
    OffloadOp op;
    op.node = i;
    if (l.kind == LayerKind::BatchNorm) {
      const auto scale = bn_scale(l, mask, false);
      op.gpu_weight = Tensor({scale.size()}, scale);
    } else {
      op.gpu_weight = mask ? masked_weight(l.params.at("weight"), *mask, false) : l.params.at("weight");
      if (auto s = plan.scalars.find(i); s != plan.scalars.end()) {
        for (auto& v : op.gpu_weight.vec()) v *= s->second;
        op.post_scale = 1.0 / s->second;
      }
    }
    op.quant = quantize_weights(op.gpu_weight.vec());
    switch (l.kind) {
      case LayerKind::Conv2d:
        op.field = FieldLinear::conv(l, op.quant.q);
        break;
      case LayerKind::Linear:
        op.field = FieldLinear::dense(l.c_in, l.c_out, op.quant.q);
        break;
      default:
        op.field = FieldLinear::diag(l.c_in, shape_numel(l.in_shape) / l.c_in, op.quant.q);
    }
    ops.push_back(std::move(op));
  }
  return ops;
}

void prepare_pads(PadPool& pool, const ModelGraph& g, const PartitionPlan& plan, std::size_t batch,
                  std::size_t count) {
  for (const auto& op : offload_ops(g, plan)) {
    pool.refill(g.node(op.node).layer.name, op.field, batch, count);
  }
}

ExecResult execute_plan(const ModelGraph& g, const PartitionPlan& plan, const Tensor& x,
                        const ExecOptions& opt) {
  plan.check_against(g);
  if (opt.protocol == Protocol::Masked && !opt.pads) {
    throw std::invalid_argument("masked protocol needs a pad pool");
  }
  ExecResult res;
  res.cost = flops::utility_of_plan(g, plan);
  GpuDevice honest;
  GpuDevice& gpu = opt.gpu ? *opt.gpu : honest;
  std::map<std::size_t, OffloadOp> ops;
  for (auto& op : offload_ops(g, plan)) ops.emplace(op.node, std::move(op));
  const std::size_t n = x.dim(0);

  // GPU share of a linear op, evaluated per protocol.
  auto run_gpu = [&](const OffloadOp& op, const LayerSpec& l, const Tensor& in) -> Tensor {
    const Shape out_shape = batched(n, l.out_shape);
    if (opt.protocol == Protocol::Plain) {
      if (l.kind == LayerKind::BatchNorm) {
        return diag_apply(op.gpu_weight.vec(), in);
      }
      return float_linear(l, op.gpu_weight, in).reshaped(out_shape);
    }
    const QuantTensor q = quantize(in);
    Field z;
    if (opt.protocol == Protocol::QuantizedPlain) {
      z = op.field.apply(q.values, n, opt.pads ? opt.pads->field() : FieldParams{});
    } else {
      const FieldParams& fp = opt.pads->field();
      OtpPad pad = opt.pads->acquire(l.name, n);
      const QuantTensor he = otp_encrypt(q, pad, fp);
      const Field claimed = gpu.linear(op.field, he.values, n, fp);
      const bool ok = freivalds_verify(op.field.input_rows(he.values, n), op.field.output_rows(claimed, n),
                                       n * op.field.rows_per_sample(), pad.keys, fp);
      res.verify_log.push_back({l.name, pad.keys.size(), ok});
      if (!ok) {
        throw IntegrityError("Freivalds check failed on layer " + l.name, res.verify_log);
      }
      z = otp_decrypt_linear(claimed, pad.g_r, fp);
    }
    const FieldParams fp = opt.pads ? opt.pads->field() : FieldParams{};
    const auto ones = op.field.ones_response();
    const std::size_t per = op.field.out_size();
    Tensor y(out_shape);
    const double s = q.scale * op.quant.scale;
    for (std::size_t i = 0; i < y.size(); ++i) {
      const std::int64_t v = from_field(z[i], fp) - q.zero_point * ones[i % per];
      y[i] = s * static_cast<double>(v);
    }
    return y;
  };

  std::vector<Tensor> outs(g.size());
  std::vector<const Tensor*> ins;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const Node& node = g.node(i);
    const LayerSpec& l = node.layer;
    ins.clear();
    for (int s : node.inputs) ins.push_back(s < 0 ? &x : &outs[static_cast<std::size_t>(s)]);
    const Placement where = plan.at(i);
    auto op_it = ops.find(i);

    if (where == Placement::OBFUSCATED && is_linear_kind(l.kind)) {
      const Tensor& w = l.params.at("weight");
      const auto obf = shadownet::obfuscate(w, derive_seed(opt.seed, "obfuscate:" + l.name));
      LayerSpec wide = l;
      wide.c_out = obf.m();
      wide.out_shape[0] = obf.m();
      Tensor y = shadownet::deobfuscate_outputs(obf, float_linear(wide, obf.filters, *ins[0]));
      add_bias(l, y);
      outs[i] = std::move(y);
      continue;
    }
    const bool plain_whole = op_it != ops.end() && opt.protocol == Protocol::Plain &&
                             where == Placement::GPU && !plan.scalars.count(i);
    if (op_it == ops.end() || plain_whole) {
      outs[i] = nn::apply_layer(node, ins);
      continue;
    }
    const OffloadOp& op = op_it->second;
    const Tensor& in = *ins[0];
    Tensor y = run_gpu(op, l, in);
    if (op.post_scale != 1.0) {
      for (auto& v : y.vec()) v *= op.post_scale;
    }
    if (where == Placement::TEE) {
      // Shielded share of a magnitude-masked layer.
      const auto& mask = plan.weight_masks.at(i);
      const Tensor tee = l.kind == LayerKind::BatchNorm
                             ? diag_apply(bn_scale(l, &mask, true), in)
                             : float_linear(l, masked_weight(l.params.at("weight"), mask, true), in)
                                   .reshaped(y.shape());
      for (std::size_t k = 0; k < y.size(); ++k) y[k] += tee[k];
    }
    add_bias(l, y);
    outs[i] = std::move(y);
  }

  Tensor out = std::move(outs.back());
  switch (g.output_mode()) {
    case OutputMode::Logits:
      res.output = std::move(out);
      break;
    case OutputMode::Probabilities:
      res.output = nn::softmax(out);
      break;
    case OutputMode::LabelOnly: {
      const auto labels = nn::argmax_rows(out.reshaped({n, out.size() / n}));
      res.output = Tensor({n});
      for (std::size_t k = 0; k < n; ++k) res.output[k] = labels[k];
      break;
    }
  }
  return res;
}

}  // namespace tsdp::offload
