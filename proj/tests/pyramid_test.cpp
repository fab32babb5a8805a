#include "ewirp/pyramid.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace ewirp;

TEST(Fmd, ReferenceWidths) {
  EXPECT_EQ(fmd(1, 54, 120.0), 18);
  EXPECT_EQ(fmd(2, 54, 120.0), 20);
  EXPECT_EQ(fmd(45, 54, 120.0), 115);
  EXPECT_EQ(fmd(54, 54, 120.0), 135);
}

TEST(Fmd, FirstUnitAlwaysBase) {
  RngStream rng(17, 0);
  for (int i = 0; i < 100; ++i) {
    const int r = 3 * (1 + static_cast<int>(rng.uniform(0.0, 40.0)));
    EXPECT_EQ(fmd(1, r, rng.uniform(0.1, 400.0)), 18);
  }
}

TEST(Fmd, NondecreasingInUnitIndex) {
  RngStream rng(18, 0);
  for (int i = 0; i < 100; ++i) {
    const int r = 3 * (1 + static_cast<int>(rng.uniform(0.0, 40.0)));
    const double omega = rng.uniform(0.1, 400.0);
    for (int k = 2; k <= r; ++k) EXPECT_GE(fmd(k, r, omega), fmd(k - 1, r, omega));
  }
}

TEST(Fmd, SmallLadder) {
  EXPECT_EQ(fmd(1, 3, 9.0), 18);
  EXPECT_EQ(fmd(2, 3, 9.0), 21);
  EXPECT_EQ(fmd(3, 3, 9.0), 24);
}

TEST(Fmd, RejectsOutOfRangeIndex) {
  EXPECT_THROW(fmd(0, 54, 120.0), std::invalid_argument);
  EXPECT_THROW(fmd(55, 54, 120.0), std::invalid_argument);
}

TEST(SeWidth, QuarterWithFloorOfOne) {
  EXPECT_EQ(se_width(115), 28);
  EXPECT_EQ(se_width(18), 4);
  EXPECT_EQ(se_width(3), 1);
  EXPECT_THROW(se_width(0), std::invalid_argument);
}

TEST(PyramidConfig, ValidationRejectsBadShapes) {
  PyramidConfig c;
  c.R = 52;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c.R = 54;
  c.omega = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c.omega = 120.0;
  c.num_classes = 1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c.num_classes = 100;
  c.input_hw = 30;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

namespace {

PyramidConfig small_cfg() {
  PyramidConfig c;
  c.R = 9;
  c.omega = 24.0;
  c.num_classes = 10;
  return c;
}

}  // namespace

TEST(Model, StridesAtThirdBoundaries) {
  const ModelGraph g = build_model(small_cfg());
  std::vector<int> strided;
  int k = 0;
  for (const auto& seg : g.segments)
    if (const auto* u = std::get_if<ResidualUnit>(&seg)) {
      ++k;
      if (u->strided) strided.push_back(k);
      EXPECT_EQ(u->out_ch, 4 * fmd(k, 9, 24.0));
      EXPECT_FALSE(u->se.empty());
    }
  EXPECT_EQ(k, 9);
  EXPECT_EQ(strided, (std::vector<int>{4, 7}));
}

TEST(Model, HeadDenseInputIsFourTimesLastWidth) {
  PyramidConfig c;
  const ModelGraph g = build_model(c);
  const auto& node = std::get<GraphNode>(g.segments.back());
  const auto& dense = std::get<DenseSpec>(node.spec);
  EXPECT_EQ(dense.in, 540);
  EXPECT_EQ(dense.out, 100);
}

TEST(Model, OutputShapeIsLogits) {
  ParamStore<float> ps;
  const auto cfg = small_cfg();
  const auto out = graph_init(build_model(cfg), ps, {4, 3, 32, 32});
  EXPECT_EQ(out, (std::vector<int>{4, 10}));
}

TEST(Split, PlanAtReferencePoint) {
  PyramidConfig c;
  const SplitResult sr = split_model(c, build_model(c), 45);
  EXPECT_EQ(sr.plan.split_channels, 460);
  EXPECT_EQ(sr.plan.split_spatial, 8);
  EXPECT_EQ(sr.front.role, "front");
  EXPECT_EQ(sr.rest.role, "rest");
}

TEST(Split, SpatialFollowsStrideBoundaries) {
  PyramidConfig c;
  EXPECT_EQ(split_spatial(c, 1), 32);
  EXPECT_EQ(split_spatial(c, 18), 32);
  EXPECT_EQ(split_spatial(c, 19), 16);
  EXPECT_EQ(split_spatial(c, 36), 16);
  EXPECT_EQ(split_spatial(c, 37), 8);
  EXPECT_EQ(split_spatial(c, 54), 8);
}

TEST(Split, AtLastUnitRestIsHeadOnly) {
  const auto cfg = small_cfg();
  const SplitResult sr = split_model(cfg, build_model(cfg), 9);
  ASSERT_EQ(sr.rest.segments.size(), 4u);
  for (const auto& seg : sr.rest.segments) {
    const auto& node = std::get<GraphNode>(seg);
    EXPECT_EQ(node.id.rfind("head.", 0), 0u) << node.id;
  }
}

TEST(Split, RejectsBadIndexAndRole) {
  const auto cfg = small_cfg();
  const ModelGraph g = build_model(cfg);
  EXPECT_THROW(split_model(cfg, g, 0), std::invalid_argument);
  EXPECT_THROW(split_model(cfg, g, 10), std::invalid_argument);
  const SplitResult sr = split_model(cfg, g, 3);
  EXPECT_THROW(split_model(cfg, sr.front, 2), std::invalid_argument);
}

TEST(Split, HalvesPartitionTheParameterSet) {
  const auto cfg = small_cfg();
  const ModelGraph g = build_model(cfg);
  ParamStore<float> full_ps;
  full_ps.init_seed = 3;
  graph_init(g, full_ps, {1, 3, 32, 32});
  for (int s : {1, 3, 6, 9}) {
    const SplitResult sr = split_model(cfg, g, s);
    ParamStore<float> half_ps;
    half_ps.init_seed = 3;
    const auto mid = graph_init(sr.front, half_ps, {1, 3, 32, 32});
    EXPECT_EQ(mid, (std::vector<int>{1, 4 * fmd(s, 9, 24.0), split_spatial(cfg, s),
                                     split_spatial(cfg, s)}));
    graph_init(sr.rest, half_ps, mid);
    std::set<std::string> full_names, half_names;
    for (const auto& [n, p] : full_ps.params) full_names.insert(n);
    for (const auto& [n, p] : half_ps.params) half_names.insert(n);
    EXPECT_EQ(full_names, half_names) << "split " << s;
  }
}

TEST(Split, CompositionIsBitwiseExact) {
  const auto cfg = small_cfg();
  const ModelGraph g = build_model(cfg);
  ParamStore<float> ps;
  ps.init_seed = 11;
  ps.mode = Mode::eval;
  graph_init(g, ps, {2, 3, 32, 32});
  Tensor<float> x({2, 3, 32, 32});
  RngStream rng(41, 0);
  for (auto& v : x.v) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  const Tensor<float> ref = graph_forward(g, ps, x, static_cast<Tape<float>*>(nullptr));
  for (int s : {1, 3, 6, 9}) {
    const SplitResult sr = split_model(cfg, g, s);
    const Tensor<float> mid = graph_forward(sr.front, ps, x, static_cast<Tape<float>*>(nullptr));
    const Tensor<float> out = graph_forward(sr.rest, ps, mid, static_cast<Tape<float>*>(nullptr));
    EXPECT_EQ(out.v, ref.v) << "split " << s;
  }
}

TEST(Manifest, StableAndDescriptive) {
  const auto cfg = small_cfg();
  const ModelGraph g = build_model(cfg);
  const std::string m1 = graph_manifest(g, {1, 3, 32, 32});
  const std::string m2 = graph_manifest(g, {1, 3, 32, 32});
  EXPECT_EQ(m1, m2);
  EXPECT_NE(m1.find("role full input (1,3,32,32)"), std::string::npos);
  EXPECT_NE(m1.find("stem.conv Conv2d (1,3,32,32) -> (1,16,32,32)"), std::string::npos);
  EXPECT_NE(m1.find("unit4 residual in_ch"), std::string::npos);
  EXPECT_NE(m1.find("head.dense Dense"), std::string::npos);
}
