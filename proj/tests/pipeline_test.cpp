#include "ewirp/pipeline.hpp"

#include <gtest/gtest.h>

using namespace ewirp;

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  Tensor<float> logits({3, 5});
  RngStream rng(51, 0);
  for (auto& v : logits.v) v = static_cast<float>(rng.uniform(-4.0, 4.0));
  const Tensor<float> p = softmax(logits);
  for (int i = 0; i < 3; ++i) {
    double row = 0.0;
    for (int j = 0; j < 5; ++j) {
      EXPECT_GT(p.at(i, j), 0.0f);
      row += p.at(i, j);
    }
    EXPECT_NEAR(row, 1.0, 1e-6);
  }
  Tensor<float> shifted = logits;
  for (auto& v : shifted.v) v += 100.0f;
  const Tensor<float> q = softmax(shifted);
  for (i64 i = 0; i < p.numel(); ++i) EXPECT_NEAR(q.v[i], p.v[i], 1e-6);
  EXPECT_THROW(softmax(Tensor<float>({2, 2, 2, 2}, 0.0f)), std::invalid_argument);
}

namespace {

struct Rig {
  PyramidConfig pcfg;
  CodecConfig ccfg;
  ModelGraph full, enc, dec;
  SplitResult split;
  ChannelConfig chan;
  SplitPipeline pl;

  explicit Rig(ChannelKind kind, double snr = 15.0) {
    pcfg.R = 3;
    pcfg.omega = 9.0;
    pcfg.num_classes = 4;
    full = build_model(pcfg);
    split = split_model(pcfg, full, 2);
    ccfg.split_channels = split.plan.split_channels;
    ccfg.split_h = ccfg.split_w = split.plan.split_spatial;
    ccfg.bandwidth = 16;
    enc = build_encoder(ccfg);
    dec = build_decoder(ccfg);
    chan.kind = kind;
    chan.snr_db = snr;
    chan.seed = 21;
    pl = SplitPipeline{&split.front, &split.rest, &enc, &dec, chan, ccfg.bandwidth};
  }

  ParamStore<float> store(u64 seed) const {
    ParamStore<float> ps;
    ps.init_seed = seed;
    ps.mode = Mode::eval;
    graph_init(full, ps, {1, 3, 32, 32});
    graph_init(enc, ps, {1, ccfg.split_channels, ccfg.split_h, ccfg.split_w});
    graph_init(dec, ps, {1, ccfg.enc_channels(), ccfg.split_h / 4, ccfg.split_w / 4});
    return ps;
  }
};

Tensor<float> images(int n, u64 tag) {
  Tensor<float> x({n, 3, 32, 32});
  RngStream rng(52, tag);
  for (auto& v : x.v) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  return x;
}

std::vector<u64> streams(int n, u64 base) {
  std::vector<u64> s(n);
  for (int i = 0; i < n; ++i) s[i] = mix_streams(base, static_cast<u64>(i));
  return s;
}

}  // namespace

TEST(Pipeline, ForwardShapesAndDeterminism) {
  const Rig rig(ChannelKind::rayleigh);
  ParamStore<float> ps = rig.store(31);
  const Tensor<float> x = images(3, 1);
  const Tensor<float> a = pipeline_forward(rig.pl, ps, x, streams(3, 9), nullptr);
  EXPECT_EQ(a.shape, (std::vector<int>{3, 4}));
  const Tensor<float> b = pipeline_forward(rig.pl, ps, x, streams(3, 9), nullptr);
  EXPECT_EQ(a.v, b.v);
  const Tensor<float> c = pipeline_forward(rig.pl, ps, x, streams(3, 10), nullptr);
  EXPECT_NE(a.v, c.v);
}

TEST(Pipeline, BatchingDoesNotChangePerSampleResults) {
  const Rig rig(ChannelKind::rayleigh);
  ParamStore<float> ps = rig.store(32);
  const Tensor<float> x = images(4, 2);
  const auto st = streams(4, 12);
  const Tensor<float> whole = pipeline_forward(rig.pl, ps, x, st, nullptr);
  for (int i = 0; i < 4; ++i) {
    Tensor<float> one({1, 3, 32, 32});
    std::copy(x.data() + i * 3072, x.data() + (i + 1) * 3072, one.data());
    const Tensor<float> y = pipeline_forward(rig.pl, ps, one, {st[i]}, nullptr);
    for (int j = 0; j < 4; ++j)
      EXPECT_NEAR(y.at(0, j), whole.at(i, j), 2e-4) << "sample " << i;
  }
}

TEST(Pipeline, TransmittedBlocksMeetThePowerBudget) {
  Rig rig(ChannelKind::rayleigh);
  rig.pl.channel.P = 2.5;
  ParamStore<float> ps = rig.store(33);
  const Tensor<float> x = images(2, 3);
  PipelineTrace tr;
  pipeline_forward(rig.pl, ps, x, streams(2, 14), &tr);
  ASSERT_EQ(tr.links.size(), 2u);
  for (const auto& link : tr.links) {
    ASSERT_EQ(link.v.size(), 32u);
    std::vector<double> scaled(32);
    power_normalize(link.v.data(), 32, 2.5, scaled.data());
    ComplexSymbolBlock blk;
    blk.symbols = pack_complex(scaled.data(), 32);
    EXPECT_NEAR(blk.mean_power(), 2.5, 1e-9);
    EXPECT_NEAR(link.ncache.s, std::sqrt(16 * 2.5), 1e-12);
  }
}

TEST(Pipeline, BandwidthMismatchRejected) {
  const Rig rig(ChannelKind::awgn);
  ParamStore<float> ps = rig.store(34);
  SplitPipeline wrong = rig.pl;
  wrong.bandwidth = 8;
  const Tensor<float> x = images(1, 4);
  EXPECT_THROW(pipeline_forward(wrong, ps, x, streams(1, 15), nullptr), std::invalid_argument);
}

TEST(Pipeline, BackwardReachesEncoderAndOptionallyFront) {
  const Rig rig(ChannelKind::rayleigh);
  ParamStore<float> ps = rig.store(35);
  const Tensor<float> x = images(2, 5);
  auto grad_norm = [&](const char* name) {
    double acc = 0.0;
    for (float g : ps.get(name).grad.v) acc += static_cast<double>(g) * g;
    return acc;
  };

  PipelineTrace tr;
  const Tensor<float> logits = pipeline_forward(rig.pl, ps, x, streams(2, 16), &tr);
  Tensor<float> dlogits;
  cross_entropy(logits, {0, 1}, &dlogits);
  pipeline_backward(rig.pl, ps, tr, dlogits, true);
  EXPECT_GT(grad_norm("enc.conv.weight"), 0.0);
  EXPECT_GT(grad_norm("dec.conv.weight"), 0.0);
  EXPECT_GT(grad_norm("stem.conv.weight"), 0.0);
  EXPECT_GT(grad_norm("head.dense.weight"), 0.0);

  ps.zero_grads();
  PipelineTrace tr2;
  const Tensor<float> logits2 = pipeline_forward(rig.pl, ps, x, streams(2, 16), &tr2);
  Tensor<float> dlogits2;
  cross_entropy(logits2, {0, 1}, &dlogits2);
  pipeline_backward(rig.pl, ps, tr2, dlogits2, false);
  EXPECT_GT(grad_norm("enc.conv.weight"), 0.0);
  EXPECT_EQ(grad_norm("stem.conv.weight"), 0.0);
}

TEST(Pipeline, NoiselessAwgnMatchesCodecOnlyPath) {
  Rig rig(ChannelKind::awgn, 300.0);
  ParamStore<float> ps = rig.store(36);
  const Tensor<float> x = images(2, 6);
  const Tensor<float> through = pipeline_forward(rig.pl, ps, x, streams(2, 17), nullptr);

  Tensor<float> mid = graph_forward(rig.split.front, ps, x, static_cast<Tape<float>*>(nullptr));
  Tensor<float> enc_out = graph_forward(rig.enc, ps, mid, static_cast<Tape<float>*>(nullptr));
  Tensor<float> dec_in(enc_out.shape);
  for (int i = 0; i < 2; ++i) {
    std::vector<double> v(32), scaled(32);
    for (int j = 0; j < 32; ++j) v[j] = enc_out.data()[i * 32 + j];
    power_normalize(v.data(), 32, rig.pl.channel.P, scaled.data());
    for (int j = 0; j < 32; ++j) dec_in.data()[i * 32 + j] = static_cast<float>(scaled[j]);
  }
  Tensor<float> feat = graph_forward(rig.dec, ps, dec_in, static_cast<Tape<float>*>(nullptr));
  const Tensor<float> direct = graph_forward(rig.split.rest, ps, feat, static_cast<Tape<float>*>(nullptr));
  for (i64 i = 0; i < through.numel(); ++i) EXPECT_NEAR(through.v[i], direct.v[i], 1e-4);
}
