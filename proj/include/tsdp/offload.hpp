#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "tsdp/flops.hpp"
#include "tsdp/graph.hpp"
#include "tsdp/plan.hpp"
#include "tsdp/rng.hpp"
#include "tsdp/tensor.hpp"

// Simulated TEE/GPU execution. GPU-resident linear ops can run on 8-bit
// quantized activations masked with one-time pads over Z_p, with the GPU's
// result checked by Freivalds' test before the TEE unmasks it.
namespace tsdp::offload {

using Field = std::vector<std::uint64_t>;

struct FieldParams {
  std::uint64_t p = 2147483647ULL;  // 2^31 - 1
  // Throws unless p is prime and exceeds 2^8.
  void validate() const;
};

bool is_prime(std::uint64_t n);
std::uint64_t to_field(std::int64_t v, const FieldParams& fp);
// Inverse of to_field for values known to lie in (-p/2, p/2).
std::int64_t from_field(std::uint64_t v, const FieldParams& fp);

double round_half_even(double v);

// Affine 8-bit code: real = (value - zero_point) * scale, value in [0, 255].
struct QuantTensor {
  Shape shape;
  Field values;
  double scale = 1.0;
  std::int64_t zero_point = 0;
};

// Range is widened to include 0 so that zero is exactly representable.
// A constant-zero input yields scale 1 and zero point 0.
QuantTensor quantize(const Tensor& x);
Tensor dequantize(const QuantTensor& q);

// Symmetric per-tensor weight code in [-127, 127]; real = q * scale.
struct QuantWeights {
  std::vector<std::int64_t> q;
  double scale = 1.0;
};
QuantWeights quantize_weights(std::span<const double> w);

// One Freivalds round: random s over output rows, s_tilde = W^T s.
struct FreivaldsKey {
  Field s;
  Field s_tilde;
};

// Linear map over Z_p with integer weights. Every op also has a row form
// H (rows x row_in) -> Z (rows x row_out) with Z = H W^T used by Freivalds.
class FieldLinear {
 public:
  enum class Kind { Conv, Dense, Diag };

  // Conv geometry is taken from a resolved conv LayerSpec.
  static FieldLinear conv(const LayerSpec& geometry, std::vector<std::int64_t> wq);
  static FieldLinear dense(std::size_t in, std::size_t out, std::vector<std::int64_t> wq);
  // Per-channel scale over [channels, spatial] samples.
  static FieldLinear diag(std::size_t channels, std::size_t spatial, std::vector<std::int64_t> wq);

  Kind kind() const { return kind_; }
  std::size_t in_size() const { return in_size_; }
  std::size_t out_size() const { return out_size_; }
  std::size_t rows_per_sample() const { return rows_per_sample_; }
  std::size_t row_in() const { return row_in_; }
  std::size_t row_out() const { return row_out_; }
  const std::vector<std::int64_t>& weights() const { return wq_; }

  // h holds batch * in_size field elements; returns batch * out_size.
  Field apply(std::span<const std::uint64_t> h, std::size_t batch, const FieldParams& fp) const;
  // Row forms of an input / output batch (im2col rows for conv).
  Field input_rows(std::span<const std::uint64_t> h, std::size_t batch) const;
  Field output_rows(std::span<const std::uint64_t> z, std::size_t batch) const;
  // Signed integer response to an all-ones input (zero padding), per sample.
  std::vector<std::int64_t> ones_response() const;
  FreivaldsKey make_key(Rng& rng, const FieldParams& fp) const;
  // Throws if 8-bit x 8-bit accumulations could wrap past p/2.
  void check_range(const FieldParams& fp) const;

 private:
  Kind kind_ = Kind::Dense;
  LayerSpec geom_;
  std::vector<std::int64_t> wq_;
  std::size_t in_size_ = 0, out_size_ = 0;
  std::size_t rows_per_sample_ = 1, row_in_ = 0, row_out_ = 0;
};

// True iff claimed_rows * s == h_rows * s_tilde (mod p) for every row and
// every key. Dimension mismatches throw std::invalid_argument.
bool freivalds_verify(std::span<const std::uint64_t> h_rows,
                      std::span<const std::uint64_t> claimed_rows, std::size_t rows,
                      std::span<const FreivaldsKey> keys, const FieldParams& fp);

class PadReuseError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class PadExhaustedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct OtpPad {
  std::uint64_t id = 0;
  std::string layer;
  Field r;
  // Precomputed offline: g(r) and the Freivalds keys for this use.
  Field g_r;
  std::vector<FreivaldsKey> keys;
  bool consumed = false;
};

// h_e = (q + r) mod p. Marks the pad consumed; a consumed pad throws.
QuantTensor otp_encrypt(const QuantTensor& q, OtpPad& pad, const FieldParams& fp);
// (g_he - g_r) mod p elementwise.
Field otp_decrypt_linear(std::span<const std::uint64_t> g_he, std::span<const std::uint64_t> g_r,
                         const FieldParams& fp);

// Seeded pad store keyed by (layer, batch size). Handout is serialized.
class PadPool {
 public:
  explicit PadPool(std::uint64_t seed, FieldParams fp = {}, std::size_t rounds = 1);

  void refill(const std::string& layer, const FieldLinear& op, std::size_t batch,
              std::size_t count);
  OtpPad acquire(const std::string& layer, std::size_t batch);
  std::size_t available(const std::string& layer, std::size_t batch) const;
  std::size_t issued() const;
  const FieldParams& field() const { return fp_; }
  std::size_t rounds() const { return rounds_; }

 private:
  mutable std::mutex mu_;
  FieldParams fp_;
  std::size_t rounds_;
  Rng rng_;
  std::uint64_t next_id_ = 0;
  std::uint64_t issued_ = 0;
  std::map<std::pair<std::string, std::size_t>, std::deque<OtpPad>> pads_;
};

// Untrusted accelerator. Implementations may misbehave.
class GpuDevice {
 public:
  virtual ~GpuDevice() = default;
  virtual Field linear(const FieldLinear& op, std::span<const std::uint64_t> h, std::size_t batch,
                       const FieldParams& fp);
};

// Adds a random non-zero offset to one output entry with the given
// probability per call.
class CorruptingGpu : public GpuDevice {
 public:
  CorruptingGpu(std::uint64_t seed, double probability = 1.0) : rng_(seed), prob_(probability) {}
  Field linear(const FieldLinear& op, std::span<const std::uint64_t> h, std::size_t batch,
               const FieldParams& fp) override;
  std::size_t corruptions() const { return corruptions_; }

 private:
  Rng rng_;
  double prob_;
  std::size_t corruptions_ = 0;
};

enum class Protocol { Plain, QuantizedPlain, Masked };
std::string_view to_string(Protocol p);
Protocol protocol_from_string(std::string_view s);

struct VerifyRecord {
  std::string layer;
  std::size_t rounds = 0;
  bool pass = true;
};
std::string verify_log_jsonl(const std::vector<VerifyRecord>& log);

class IntegrityError : public std::runtime_error {
 public:
  IntegrityError(const std::string& what, std::vector<VerifyRecord> log)
      : std::runtime_error(what), log_(std::move(log)) {}
  const std::vector<VerifyRecord>& log() const { return log_; }

 private:
  std::vector<VerifyRecord> log_;
};

// GPU share of one node's linear work under a plan.
struct OffloadOp {
  std::size_t node = 0;
  // Real weights the GPU holds (masked or blinded as the plan dictates).
  Tensor gpu_weight;
  // Multiplier the TEE applies to the GPU result (1/scalar for blinded layers).
  double post_scale = 1.0;
  QuantWeights quant;
  FieldLinear field;
};

// GPU-side linear work of every node: GPU conv/linear/batchnorm layers and
// the unshielded share of magnitude-masked layers.
std::vector<OffloadOp> offload_ops(const ModelGraph& g, const PartitionPlan& plan);

// Fills `pool` with `count` pads per offloaded op for batches of `batch`.
void prepare_pads(PadPool& pool, const ModelGraph& g, const PartitionPlan& plan,
                  std::size_t batch, std::size_t count);

struct ExecOptions {
  Protocol protocol = Protocol::Plain;
  PadPool* pads = nullptr;  // required for Masked
  GpuDevice* gpu = nullptr;  // defaults to an honest device
  // Seeds the obfuscation of OBFUSCATED layers.
  std::uint64_t seed = 0;
};

struct ExecResult {
  Tensor output;
  flops::CostReport cost;
  std::vector<VerifyRecord> verify_log;
};

// Runs x through g, routing each node to its world. The output honours the
// graph's output mode. Throws IntegrityError when a Freivalds check fails.
ExecResult execute_plan(const ModelGraph& g, const PartitionPlan& plan, const Tensor& x,
                        const ExecOptions& opt = {});

}  // namespace tsdp::offload
