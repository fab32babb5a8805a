#include "ewirp/macs.hpp"

#include <gtest/gtest.h>

#include "ewirp/codec.hpp"
#include "ewirp/pyramid.hpp"

using namespace ewirp;

TEST(CountLayer, ConvReference) {
  const auto [m, p] = count_layer(Conv2dSpec{3, 16, 3, 1, 1, false}, {1, 16, 32, 32});
  EXPECT_EQ(m, 442368);
  EXPECT_EQ(p, 432);
  const auto [mb, pb] = count_layer(Conv2dSpec{3, 16, 3, 1, 1, true}, {1, 16, 32, 32});
  EXPECT_EQ(mb, 442368 + 16 * 32 * 32);
  EXPECT_EQ(pb, 448);
}

TEST(CountLayer, DenseReference) {
  const auto [m, p] = count_layer(DenseSpec{460, 100, false}, {1, 100});
  EXPECT_EQ(m, 46000);
  EXPECT_EQ(p, 46000);
  const auto [mb, pb] = count_layer(DenseSpec{460, 100, true}, {1, 100});
  EXPECT_EQ(mb, 46100);
  EXPECT_EQ(pb, 46100);
}

TEST(CountLayer, PointwiseOps) {
  EXPECT_EQ(count_layer(ReluSpec{}, {1, 16, 32, 32}).first, 16384);
  EXPECT_EQ(count_layer(ReluSpec{}, {1, 16, 32, 32}).second, 0);
  EXPECT_EQ(count_layer(BatchNormSpec{16}, {1, 16, 32, 32}).first, 32768);
  EXPECT_EQ(count_layer(BatchNormSpec{16}, {1, 16, 32, 32}).second, 32);
  EXPECT_EQ(count_layer(SigmoidSpec{}, {1, 8}).first, 8);
  EXPECT_EQ(count_layer(AvgPoolSpec{2, 2}, {1, 4, 8, 8}).first, 256);
  EXPECT_EQ(count_layer(UpsampleNearestSpec{2}, {1, 4, 8, 8}).first, 256);
}

TEST(CountLayer, GdnQuadraticCoupling) {
  const auto [m, p] = count_layer(GdnSpec{4}, {1, 4, 2, 2});
  EXPECT_EQ(m, 16 * 4 + 2 * 4 * 4);
  EXPECT_EQ(p, 4 + 16);
  EXPECT_EQ(count_layer(IgdnSpec{4}, {1, 4, 2, 2}), (std::pair<i64, i64>{96, 20}));
}

TEST(Report, AppendIsAdditive) {
  MacReport a, b;
  a.add("x", {1, 2}, 10, 3);
  b.add("y", {1, 4}, 7, 2);
  b.add("z", {1, 4}, 5, 1);
  a.append(b);
  EXPECT_EQ(a.total_macs, 22);
  EXPECT_EQ(a.total_params, 6);
  ASSERT_EQ(a.rows.size(), 3u);
  EXPECT_EQ(a.rows[2].name, "z");
}

TEST(Report, CsvFormat) {
  MacReport r;
  r.add("stem.conv", {1, 16, 32, 32}, 442368, 432);
  const std::string csv = r.to_csv();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "layer,out_shape,macs,params");
  EXPECT_NE(csv.find("stem.conv,1x16x32x32,442368,432\n"), std::string::npos);
  EXPECT_NE(csv.find("total,,442368,432\n"), std::string::npos);
}

namespace {

PyramidConfig small_cfg() {
  PyramidConfig c;
  c.R = 9;
  c.omega = 24.0;
  c.num_classes = 10;
  return c;
}

i64 trainable_total(const ParamStore<float>& ps) {
  i64 n = 0;
  for (const auto& [name, p] : ps.params)
    if (p.trainable) n += p.value.numel();
  return n;
}

}  // namespace

TEST(CountGraph, ParamsAgreeWithMaterializedStore) {
  const auto cfg = small_cfg();
  const ModelGraph g = build_model(cfg);
  const MacReport rep = count_graph(g, {1, 3, 32, 32});
  ParamStore<float> ps;
  graph_init(g, ps, {1, 3, 32, 32});
  EXPECT_EQ(rep.total_params, trainable_total(ps));

  CodecConfig cc;
  cc.split_channels = 84;
  cc.split_h = cc.split_w = 16;
  cc.bandwidth = 64;
  ParamStore<float> cps;
  const auto mid = graph_init(build_encoder(cc), cps, {1, 84, 16, 16});
  graph_init(build_decoder(cc), cps, mid);
  const MacReport enc = count_graph(build_encoder(cc), {1, 84, 16, 16});
  MacReport both = enc;
  both.append(count_graph(build_decoder(cc), mid));
  EXPECT_EQ(both.total_params, trainable_total(cps));
}

TEST(CountGraph, SeOverheadIsSmall) {
  PyramidConfig c;
  const MacReport rep = count_graph(build_model(c), {1, 3, 32, 32});
  i64 se_macs = 0;
  for (const auto& r : rep.rows)
    if (r.name.find(".se") != std::string::npos) se_macs += r.macs;
  EXPECT_GT(se_macs, 0);
  EXPECT_LT(se_macs, 50000000);
}

TEST(CountGraph, TotalsMatchRowsAndCoverShortcuts) {
  const auto cfg = small_cfg();
  const MacReport rep = count_graph(build_model(cfg), {1, 3, 32, 32});
  i64 macs = 0, params = 0;
  int shortcuts = 0, gates = 0;
  for (const auto& r : rep.rows) {
    macs += r.macs;
    params += r.params;
    if (r.name.find("shortcut_pool") != std::string::npos) ++shortcuts;
    if (r.name.find("se_scale") != std::string::npos) ++gates;
  }
  EXPECT_EQ(macs, rep.total_macs);
  EXPECT_EQ(params, rep.total_params);
  EXPECT_EQ(shortcuts, 2);
  EXPECT_EQ(gates, 9);
}

TEST(OnDevice, ReferenceDeployment) {
  PyramidConfig c;
  const ModelGraph g = build_model(c);
  const SplitResult sr = split_model(c, g, 45);
  CodecConfig cc;
  cc.split_channels = sr.plan.split_channels;
  cc.split_h = cc.split_w = sr.plan.split_spatial;
  cc.bandwidth = 128;
  const MacReport rep = count_ondevice(sr.front, build_encoder(cc), {1, 3, 32, 32});
  EXPECT_EQ(rep.total_macs, 1074557324);
  EXPECT_EQ(rep.total_params, 4642798);
}
