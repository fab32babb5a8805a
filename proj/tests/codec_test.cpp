#include "ewirp/codec.hpp"

#include <gtest/gtest.h>

#include "ewirp/gradcheck.hpp"

using namespace ewirp;

namespace {

CodecConfig cc(int ch, int hw, int b) {
  CodecConfig c;
  c.split_channels = ch;
  c.split_h = c.split_w = hw;
  c.bandwidth = b;
  return c;
}

template <class S>
i64 trainable_count(const ParamStore<S>& ps) {
  i64 n = 0;
  for (const auto& [name, p] : ps.params)
    if (p.trainable) n += p.value.numel();
  return n;
}

}  // namespace

TEST(CodecConfig, EncChannelExamples) {
  EXPECT_EQ(cc(460, 8, 128).enc_channels(), 64);
  EXPECT_EQ(cc(460, 8, 64).enc_channels(), 32);
  EXPECT_EQ(cc(460, 8, 128).mid_channels(), 256);
}

TEST(CodecConfig, EncoderEmitsExactlyTwoBReals) {
  for (int ch : {12, 460})
    for (int hw : {8, 16})
      for (int mult : {1, 2, 4}) {
        const int step = hw * hw / std::gcd(32, hw * hw);
        const int min_b = (hw * hw + 31) / 32;
        const int b = std::max(step * mult, min_b * mult);
        const CodecConfig c = cc(ch, hw, b);
        c.validate();
        ParamStore<float> ps;
        const auto out = graph_init(build_encoder(c), ps, {1, ch, hw, hw});
        ASSERT_EQ(out.size(), 4u);
        EXPECT_EQ(out[1], c.enc_channels());
        EXPECT_EQ(out[2], hw / 4);
        i64 numel = 1;
        for (int d : out) numel *= d;
        EXPECT_EQ(numel, 2 * b) << "hw " << hw << " b " << b;
      }
}

TEST(CodecConfig, InadmissibleBandwidthRejectedWithGuidance) {
  try {
    cc(460, 8, 1).validate();
    FAIL() << "expected rejection";
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("admissible"), std::string::npos);
    EXPECT_NE(msg.find("multiples of 2"), std::string::npos);
  }
  EXPECT_THROW(cc(460, 8, 3).validate(), std::invalid_argument);
  EXPECT_NO_THROW(cc(460, 8, 2).validate());
  EXPECT_THROW(cc(460, 6, 2).validate(), std::invalid_argument);
}

TEST(CodecConfig, DecoderRestoresSplitShapeForAnyBandwidth)
{
  for (int b : {2, 32, 64, 128, 256}) {
    const CodecConfig c = cc(460, 8, b);
    ParamStore<float> ps;
    const auto mid = graph_init(build_encoder(c), ps, {1, 460, 8, 8});
    const auto out = graph_init(build_decoder(c), ps, mid);
    EXPECT_EQ(out, (std::vector<int>{1, 460, 8, 8})) << "b " << b;
  }
}

TEST(CodecConfig, EncoderSmallerThanDecoder) {
  for (int b : {2, 8, 64, 128}) {
    const CodecConfig c = cc(460, 8, b);
    ParamStore<float> enc_ps, dec_ps;
    graph_init(build_encoder(c), enc_ps, {1, 460, 8, 8});
    graph_init(build_decoder(c), dec_ps, {1, c.enc_channels(), 2, 2});
    EXPECT_LT(trainable_count(enc_ps), trainable_count(dec_ps)) << "b " << b;
  }
}

namespace {

template <class S>
Tensor<S> gdn_apply(const char* kind, S x, S beta_raw, S gamma_raw) {
  ParamStore<S> ps;
  const bool ig = std::string(kind) == "igdn";
  LayerSpec spec = ig ? LayerSpec{IgdnSpec{1}} : LayerSpec{GdnSpec{1}};
  ps.ensure("g.beta_raw", {1}, InitKind::zeros).value.v[0] = beta_raw;
  ps.ensure("g.gamma_raw", {1, 1}, InitKind::zeros).value.v[0] = gamma_raw;
  Tensor<S> in({1, 1, 1, 1}, x);
  return forward(spec, "g", ps, in);
}

}  // namespace

TEST(Gdn, ReferenceValueAtUnitParameters) {
  const auto y = gdn_apply<double>("gdn", 3.0, 1.0, 1.0);
  EXPECT_NEAR(y.v[0], 3.0 / std::sqrt(10.0), 1e-5);
  EXPECT_NEAR(gdn_apply<double>("igdn", y.v[0], 1.0, 1.0).v[0], 1.307, 1e-3);
}

TEST(Gdn, ZeroMapsToZero) {
  EXPECT_EQ(gdn_apply<double>("gdn", 0.0, 1.0, 1.0).v[0], 0.0);
  EXPECT_EQ(gdn_apply<double>("igdn", 0.0, 1.0, 1.0).v[0], 0.0);
}

TEST(Gdn, RoundtripExactOnlyWithoutCoupling) {
  for (double x : {-2.0, 0.5, 3.0}) {
    const double y = gdn_apply<double>("gdn", x, 1.0, 0.0).v[0];
    EXPECT_NEAR(gdn_apply<double>("igdn", y, 1.0, 0.0).v[0], x, 1e-6);
  }
  const double y = gdn_apply<double>("gdn", 3.0, 1.0, 1.0).v[0];
  EXPECT_GT(std::abs(gdn_apply<double>("igdn", y, 1.0, 1.0).v[0] - 3.0), 1.0);
}

TEST(Gdn, DefaultInitialization) {
  ParamStore<double> ps;
  Tensor<double> x({1, 2, 1, 1}, 1.0);
  forward(LayerSpec{GdnSpec{2}}, "g", ps, x);
  EXPECT_DOUBLE_EQ(ps.get("g.beta_raw").value.v[0], 1.0);
  const auto& graw = ps.get("g.gamma_raw").value;
  EXPECT_NEAR(graw.at(0, 0), std::sqrt(0.1), 1e-12);
  EXPECT_DOUBLE_EQ(graw.at(0, 1), 0.0);
}

TEST(PowerNormalize, ReferenceBlock) {
  const double v[4] = {1.0, 0.0, 0.0, 0.0};
  const ComplexSymbolBlock blk = reals_to_complex_normalized(v, 4, 1.0);
  ASSERT_EQ(blk.symbols.size(), 2u);
  EXPECT_NEAR(blk.symbols[0].real(), std::sqrt(2.0), 1e-12);
  EXPECT_DOUBLE_EQ(blk.symbols[0].imag(), 0.0);
  EXPECT_DOUBLE_EQ(std::abs(blk.symbols[1]), 0.0);
}

TEST(PowerNormalize, MeanPowerEqualsBudget) {
  RngStream rng(23, 0);
  for (int trial = 0; trial < 50; ++trial) {
    const i64 two_b = 2 * (1 + static_cast<i64>(rng.uniform(0.0, 200.0)));
    const double P = rng.uniform(0.1, 4.0);
    std::vector<double> v(two_b);
    for (auto& x : v) x = rng.uniform(-3.0, 3.0);
    const ComplexSymbolBlock blk = reals_to_complex_normalized(v.data(), two_b, P);
    EXPECT_NEAR(blk.mean_power(), P, 1e-6 * P);
  }
}

TEST(PowerNormalize, NormalizationIsAFixpoint) {
  RngStream rng(24, 0);
  std::vector<double> v(64), once(64), twice(64);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  power_normalize(v.data(), 64, 2.0, once.data());
  power_normalize(once.data(), 64, 2.0, twice.data());
  for (int i = 0; i < 64; ++i) EXPECT_NEAR(twice[i], once[i], 1e-12);
}

TEST(PowerNormalize, ZeroVectorRejected) {
  const double v[4] = {0.0, 0.0, 0.0, 0.0};
  double out[4];
  EXPECT_THROW(power_normalize(v, 4, 1.0, out), std::invalid_argument);
  EXPECT_THROW(power_normalize(v, 3, 1.0, out), std::invalid_argument);
  const double w[2] = {1.0, 0.0};
  EXPECT_THROW(power_normalize(w, 2, 0.0, out), std::invalid_argument);
}

TEST(PowerNormalize, BackwardMatchesFiniteDifference) {
  RngStream rng(25, 0);
  const i64 n = 16;
  std::vector<double> v(n), wts(n), analytic(n);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  for (auto& x : wts) x = rng.uniform(-1.0, 1.0);
  NormCache cache;
  std::vector<double> out(n);
  power_normalize(v.data(), n, 1.5, out.data(), &cache);
  power_normalize_backward(v.data(), wts.data(), n, cache, analytic.data());
  auto loss = [&] {
    std::vector<double> o(n);
    power_normalize(v.data(), n, 1.5, o.data());
    double acc = 0.0;
    for (i64 i = 0; i < n; ++i) acc += wts[i] * o[i];
    return acc;
  };
  const GradDiff gd = fd_check(v.data(), n, analytic.data(), loss);
  EXPECT_LT(gd.max_rel, 1e-5) << "worst index " << gd.worst_index;
}

TEST(Packing, RoundtripIsBitwise) {
  RngStream rng(26, 0);
  std::vector<double> v(256);
  for (auto& x : v) x = rng.uniform(-5.0, 5.0);
  ComplexSymbolBlock blk;
  blk.symbols = pack_complex(v.data(), 256);
  EXPECT_EQ(complex_to_reals(blk), v);
}

TEST(Packing, LayoutIsRealsThenImags) {
  ComplexSymbolBlock blk;
  blk.symbols = {{1.0, 2.0}};
  EXPECT_EQ(complex_to_reals(blk), (std::vector<double>{1.0, 2.0}));
  const double v[4] = {1.0, 2.0, 3.0, 4.0};
  const auto z = pack_complex(v, 4);
  EXPECT_EQ(z[0], (std::complex<double>{1.0, 3.0}));
  EXPECT_EQ(z[1], (std::complex<double>{2.0, 4.0}));
  EXPECT_THROW(pack_complex(v, 3), std::invalid_argument);
}

TEST(CodecGraphs, GradientsAreCorrect) {
  const CodecConfig c = cc(8, 8, 4);
  c.validate();
  {
    ParamStore<double> ps;
    ps.init_seed = 7;
    Tensor<double> x({1, 8, 8, 8});
    RngStream rng(27, 0);
    for (auto& v : x.v) v = rng.uniform(-1.0, 1.0);
    const GradCheckReport rep = gradient_check(build_encoder(c), ps, x, 1e-4);
    EXPECT_TRUE(rep.pass) << rep.worst << " rel " << rep.max_rel;
  }
  {
    ParamStore<double> ps;
    ps.init_seed = 8;
    ps.mode = Mode::train;
    Tensor<double> x({2, c.enc_channels(), 2, 2});
    RngStream rng(28, 0);
    for (auto& v : x.v) v = rng.uniform(-1.0, 1.0);
    const GradCheckReport rep = gradient_check(build_decoder(c), ps, x, 1e-4);
    EXPECT_TRUE(rep.pass) << rep.worst << " rel " << rep.max_rel;
  }
}
