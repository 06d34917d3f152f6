#include <gtest/gtest.h>

#include <cmath>

#include "tsdp/engine.hpp"
#include "tsdp/models.hpp"
#include "tsdp/offload.hpp"
#include "tsdp/partition.hpp"

using namespace tsdp;
using namespace tsdp::offload;

namespace {

Tensor random_input(const Shape& per_sample, std::size_t n, std::uint64_t seed) {
  Shape s{n};
  s.insert(s.end(), per_sample.begin(), per_sample.end());
  Tensor x(s);
  Rng rng(seed);
  for (auto& v : x.vec()) v = rng.uniform();
  return x;
}

// Direct convolution over Z_p from the definition, no im2col.
Field oracle_conv(const LayerSpec& l, const std::vector<std::int64_t>& wq, const Field& h,
                  std::size_t batch, const FieldParams& fp) {
  const std::size_t c = l.c_in, hh = l.in_shape[1], ww = l.in_shape[2], k = l.kernel;
  const std::size_t co = l.c_out, ho = l.out_shape[1], wo = l.out_shape[2];
  Field out(batch * co * ho * wo, 0);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t y = 0; y < ho; ++y)
        for (std::size_t x = 0; x < wo; ++x) {
          std::uint64_t acc = 0;
          for (std::size_t ci = 0; ci < c; ++ci)
            for (std::size_t a = 0; a < k; ++a)
              for (std::size_t e = 0; e < k; ++e) {
                const long iy = static_cast<long>(y * l.stride + a) - static_cast<long>(l.padding);
                const long ix = static_cast<long>(x * l.stride + e) - static_cast<long>(l.padding);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(hh) || ix >= static_cast<long>(ww)) continue;
                const std::uint64_t hv = h[((b * c + ci) * hh + iy) * ww + ix];
                const std::uint64_t wv = to_field(wq[((o * c + ci) * k + a) * k + e], fp);
                acc = (acc + hv * wv % fp.p) % fp.p;
              }
          out[((b * co + o) * ho + y) * wo + x] = acc;
        }
  return out;
}

}  // namespace

TEST(Field, SignedRoundTrip) {
  const FieldParams fp{257};
  for (std::int64_t v = -128; v <= 128; ++v) EXPECT_EQ(from_field(to_field(v, fp), fp), v);
  EXPECT_THROW(FieldParams{256}.validate(), std::invalid_argument);
  EXPECT_NO_THROW(FieldParams{}.validate());
}

TEST(Quantize, UnitRangeUsesFullScale) {
  const QuantTensor q = quantize(Tensor({2}, {0.0, 1.0}));
  EXPECT_EQ(q.values[0], 0u);
  EXPECT_EQ(q.values[1], 255u);
  EXPECT_DOUBLE_EQ(q.scale, 1.0 / 255.0);
  EXPECT_EQ(q.zero_point, 0);
}

TEST(Quantize, RangeIncludesZero) {
  const QuantTensor q = quantize(Tensor({3}, {-1.0, 0.0, 3.0}));
  EXPECT_EQ(q.values[0], 0u);
  EXPECT_EQ(static_cast<std::int64_t>(q.values[1]), q.zero_point);
  EXPECT_EQ(q.values[2], 255u);
  const Tensor back = dequantize(q);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_LE(std::abs(back[i] - Tensor({3}, {-1.0, 0.0, 3.0})[i]), q.scale);
}

TEST(Quantize, ConstantTensorIsZero) {
  const QuantTensor q = quantize(Tensor({2}, {0.0, 0.0}));
  EXPECT_EQ(q.values[0], 0u);
  EXPECT_EQ(q.zero_point, 0);
}

TEST(Quantize, WeightsSymmetric) {
  const std::vector<double> w{-2.0, 1.0, 0.0, 2.0};
  const QuantWeights q = quantize_weights(w);
  EXPECT_EQ(q.q, (std::vector<std::int64_t>{-127, 64, 0, 127}));
}

TEST(Otp, EncryptExamples) {
  const FieldParams fp{257};
  QuantTensor q;
  q.shape = {2};
  q.values = {5, 10};
  OtpPad pad;
  pad.r = {250, 251};
  const QuantTensor e = otp_encrypt(q, pad, fp);
  EXPECT_EQ(e.values, (Field{255, 4}));
  EXPECT_TRUE(pad.consumed);
  EXPECT_THROW(otp_encrypt(q, pad, fp), PadReuseError);

  OtpPad zero;
  zero.r = {0, 0};
  EXPECT_EQ(otp_encrypt(q, zero, fp).values, q.values);
}

TEST(Otp, DecryptRecoversLinearResult) {
  const FieldParams fp{};
  Rng rng(4);
  std::vector<std::int64_t> wq(16);
  for (auto& v : wq) v = static_cast<std::int64_t>(rng.below(255)) - 127;
  const FieldLinear op = FieldLinear::dense(4, 4, wq);
  for (int trial = 0; trial < 50; ++trial) {
    Field h(4), r(4), he(4);
    for (std::size_t i = 0; i < 4; ++i) {
      h[i] = rng.below(256);
      r[i] = rng.below(fp.p);
      he[i] = (h[i] + r[i]) % fp.p;
    }
    // Oracle: W h computed with signed integers.
    Field expect(4);
    for (std::size_t o = 0; o < 4; ++o) {
      std::int64_t acc = 0;
      for (std::size_t k = 0; k < 4; ++k) acc += wq[o * 4 + k] * static_cast<std::int64_t>(h[k]);
      expect[o] = to_field(acc, fp);
    }
    EXPECT_EQ(otp_decrypt_linear(op.apply(he, 1, fp), op.apply(r, 1, fp), fp), expect);
  }
}

TEST(FieldLinear, ConvMatchesDirectOracle) {
  const FieldParams fp{};
  Rng rng(9);
  for (std::size_t stride : {1u, 2u}) {
    for (std::size_t pad : {0u, 1u}) {
      GraphBuilder b({2, 5, 5}, 3);
      b.conv(GraphBuilder::kInput, "c", 3, 3, stride, pad);
      const ModelGraph g = std::move(b).build();
      const LayerSpec& l = g.node(0).layer;
      std::vector<std::int64_t> wq(3 * 2 * 9);
      for (auto& v : wq) v = static_cast<std::int64_t>(rng.below(255)) - 127;
      const FieldLinear op = FieldLinear::conv(l, wq);
      Field h(2 * op.in_size());
      for (auto& v : h) v = rng.below(fp.p);
      EXPECT_EQ(op.apply(h, 2, fp), oracle_conv(l, wq, h, 2, fp)) << "stride " << stride << " pad " << pad;
    }
  }
}

TEST(Freivalds, ExhaustiveSmallFieldAcceptsOneFifth) {
  // 1x1 dense op over Z_5: a wrong claim passes for exactly one s in five.
  const FieldParams fp{5};
  const FieldLinear op = FieldLinear::dense(1, 1, {3});
  const Field h{2};
  const Field honest = op.apply(h, 1, fp);
  for (std::uint64_t wrong = 0; wrong < 5; ++wrong) {
    if (wrong == honest[0]) continue;
    int accepted = 0;
    for (std::uint64_t s = 0; s < 5; ++s) {
      const FreivaldsKey key{{s}, {(s * 3) % 5}};
      accepted += freivalds_verify(h, Field{wrong}, 1, std::span(&key, 1), fp) ? 1 : 0;
    }
    EXPECT_EQ(accepted, 1);
  }
}

TEST(Freivalds, HonestAlwaysPassesCorruptedCaught) {
  const FieldParams fp{};
  Rng rng(12);
  std::vector<std::int64_t> wq(6 * 5);
  for (auto& v : wq) v = static_cast<std::int64_t>(rng.below(255)) - 127;
  const FieldLinear op = FieldLinear::dense(5, 6, wq);
  for (int trial = 0; trial < 500; ++trial) {
    Field h(3 * 5);
    for (auto& v : h) v = rng.below(fp.p);
    Field z = op.apply(h, 3, fp);
    const FreivaldsKey key = op.make_key(rng, fp);
    EXPECT_TRUE(freivalds_verify(h, z, 3, std::span(&key, 1), fp));
    z[rng.below(z.size())] ^= 1;
    EXPECT_FALSE(freivalds_verify(h, z, 3, std::span(&key, 1), fp));
  }
}

TEST(PadPool, ExhaustionAndAccounting) {
  PadPool pool(1);
  const FieldLinear op = FieldLinear::dense(2, 2, {1, 0, 0, 1});
  pool.refill("fc", op, 4, 2);
  EXPECT_EQ(pool.available("fc", 4), 2u);
  EXPECT_EQ(pool.available("fc", 1), 0u);
  const OtpPad a = pool.acquire("fc", 4);
  const OtpPad b = pool.acquire("fc", 4);
  EXPECT_NE(a.id, b.id);
  EXPECT_NE(a.r, b.r);
  EXPECT_EQ(pool.issued(), 2u);
  EXPECT_THROW(pool.acquire("fc", 4), PadExhaustedError);
}

TEST(PadPool, RejectsFieldTooSmallForFanIn) {
  PadPool pool(1, FieldParams{257});
  const FieldLinear op = FieldLinear::dense(2, 1, {1, 1});
  EXPECT_THROW(pool.refill("fc", op, 1, 1), std::invalid_argument);
}

class ExecutePlan : public ::testing::Test {
 protected:
  ModelGraph g = build_toy_cnn({}, 21);
  Tensor x = random_input(g.input_shape(), 6, 5);
};

TEST_F(ExecutePlan, PlainMatchesForwardForWholePlacements) {
  const Tensor ref = nn::forward(g, x);
  EXPECT_EQ(execute_plan(g, partition::plan_blackbox(g), x).output, ref);
  EXPECT_EQ(execute_plan(g, partition::plan_noshield(g), x).output, ref);
  EXPECT_EQ(execute_plan(g, partition::plan_deep(g, 4), x).output, ref);
}

TEST_F(ExecutePlan, PlainSplitPlansStayClose) {
  const Tensor ref = nn::forward(g, x);
  for (const auto& plan : {partition::plan_magnitude(g, 0.3), partition::plan_intermediate(g, 0.2, 3),
                           partition::plan_nonlinear_obf(g)}) {
    EXPECT_LT(max_abs_diff(execute_plan(g, plan, x, {.seed = 8}).output, ref), 1e-9) << to_string(plan.scheme);
  }
}

TEST_F(ExecutePlan, MaskedBitIdenticalToQuantized) {
  for (const auto& plan : {partition::plan_noshield(g), partition::plan_magnitude(g, 0.1)}) {
    PadPool pool(3, {}, 2);
    prepare_pads(pool, g, plan, x.dim(0), 1);
    const auto quant = execute_plan(g, plan, x, {.protocol = Protocol::QuantizedPlain});
    const auto masked = execute_plan(g, plan, x, {.protocol = Protocol::Masked, .pads = &pool});
    EXPECT_EQ(masked.output, quant.output);
    EXPECT_FALSE(masked.verify_log.empty());
    for (const auto& r : masked.verify_log) {
      EXPECT_TRUE(r.pass);
      EXPECT_EQ(r.rounds, 2u);
    }
    // Quantization error stays small relative to the logits.
    EXPECT_LT(max_abs_diff(quant.output, nn::forward(g, x)), 0.25);
  }
}

TEST_F(ExecutePlan, MaskedNeedsFreshPads) {
  const auto plan = partition::plan_noshield(g);
  PadPool pool(3);
  prepare_pads(pool, g, plan, x.dim(0), 1);
  execute_plan(g, plan, x, {.protocol = Protocol::Masked, .pads = &pool});
  EXPECT_THROW(execute_plan(g, plan, x, {.protocol = Protocol::Masked, .pads = &pool}), PadExhaustedError);
  EXPECT_THROW(execute_plan(g, plan, x, {.protocol = Protocol::Masked}), std::invalid_argument);
}

TEST_F(ExecutePlan, CorruptingGpuIsDetected) {
  const auto plan = partition::plan_noshield(g);
  PadPool pool(3);
  prepare_pads(pool, g, plan, x.dim(0), 1);
  CorruptingGpu gpu(7, 1.0);
  try {
    execute_plan(g, plan, x, {.protocol = Protocol::Masked, .pads = &pool, .gpu = &gpu});
    FAIL() << "corruption went unnoticed";
  } catch (const IntegrityError& e) {
    ASSERT_EQ(e.log().size(), 1u);
    EXPECT_FALSE(e.log()[0].pass);
    EXPECT_NE(verify_log_jsonl(e.log()).find("\"pass\":false"), std::string::npos);
  }
}

TEST_F(ExecutePlan, OutputModeHonoured) {
  ModelGraph labels = g;
  labels.set_output_mode(OutputMode::LabelOnly);
  const auto out = execute_plan(labels, partition::plan_noshield(labels), x);
  EXPECT_EQ(out.output, nn::forward(labels, x));
}
