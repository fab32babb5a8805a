#pragma once

#include <cmath>

#include "ewirp/graph.hpp"

namespace ewirp {

struct PyramidConfig {
  int R = 54;
  double omega = 120.0;
  int num_classes = 100;
  int input_hw = 32;
  static constexpr int initial_channels = 16;
  static constexpr int base_width = 18;

  void validate() const {
    require(R > 0 && R % 3 == 0, "R must be a positive multiple of 3, got ", R);
    require(omega > 0, "omega must be positive, got ", omega);
    require(num_classes >= 2, "num_classes must be at least 2, got ", num_classes);
    require(input_hw >= 8 && input_hw % 4 == 0, "input size must be a multiple of 4, got ",
            input_hw);
  }
};

// Feature-map-depth law: D_k = floor(18 + omega*(k-1)/R).
inline int fmd(int k, int R, double omega) {
  require(k >= 1 && k <= R, "unit index ", k, " outside [1, ", R, "]");
  return static_cast<int>(std::floor(PyramidConfig::base_width + omega * (k - 1) / R));
}

inline int se_width(int dk) {
  require(dk >= 1, "feature depth must be positive, got ", dk);
  return std::max(1, dk / 4);
}

struct SplitPlan {
  int split_index = 0;
  int split_channels = 0;
  int split_spatial = 0;  // square feature maps
};

namespace detail {

inline ResidualUnit make_unit(const PyramidConfig& cfg, int k, int in_ch) {
  const int dk = fmd(k, cfg.R, cfg.omega);
  const int out_ch = 4 * dk;
  const int sw = se_width(dk);
  const bool strided = k == cfg.R / 3 + 1 || k == 2 * cfg.R / 3 + 1;
  const std::string p = "unit" + std::to_string(k) + ".";
  ResidualUnit u;
  u.id = "unit" + std::to_string(k);
  u.in_ch = in_ch;
  u.out_ch = out_ch;
  u.strided = strided;
  u.main = {
      {p + "bn0", BatchNormSpec{in_ch}},
      {p + "conv1", Conv2dSpec{in_ch, dk, 1, 1, 0, false}},
      {p + "bn1", BatchNormSpec{dk}},
      {p + "relu1", ReluSpec{}},
      {p + "conv2", Conv2dSpec{dk, dk, 3, strided ? 2 : 1, 1, false}},
      {p + "bn2", BatchNormSpec{dk}},
      {p + "relu2", ReluSpec{}},
      {p + "conv3", Conv2dSpec{dk, out_ch, 1, 1, 0, false}},
      {p + "bn3", BatchNormSpec{out_ch}},
  };
  u.se = {
      {p + "se_gap", GlobalAvgPoolSpec{}},
      {p + "se_fc1", DenseSpec{out_ch, sw, true}},
      {p + "se_relu", ReluSpec{}},
      {p + "se_fc2", DenseSpec{sw, out_ch, true}},
      {p + "se_sig", SigmoidSpec{}},
  };
  return u;
}

}  // namespace detail

inline ModelGraph build_model(const PyramidConfig& cfg) {
  cfg.validate();
  ModelGraph g;
  g.role = "full";
  g.push(GraphNode{"stem.conv", Conv2dSpec{3, cfg.initial_channels, 3, 1, 1, false}});
  g.push(GraphNode{"stem.bn", BatchNormSpec{cfg.initial_channels}});
  int in_ch = cfg.initial_channels;
  for (int k = 1; k <= cfg.R; ++k) {
    ResidualUnit u = detail::make_unit(cfg, k, in_ch);
    in_ch = u.out_ch;
    g.push(std::move(u));
  }
  const int head_in = 4 * fmd(cfg.R, cfg.R, cfg.omega);
  g.push(GraphNode{"head.bn", BatchNormSpec{head_in}});
  g.push(GraphNode{"head.relu", ReluSpec{}});
  g.push(GraphNode{"head.gap", GlobalAvgPoolSpec{}});
  g.push(GraphNode{"head.dense", DenseSpec{head_in, cfg.num_classes, true}});
  return g;
}

// Spatial size of the split-point feature map (square).
inline int split_spatial(const PyramidConfig& cfg, int s) {
  int hw = cfg.input_hw;
  if (s > cfg.R / 3) hw /= 2;
  if (s > 2 * cfg.R / 3) hw /= 2;
  return hw;
}

struct SplitResult {
  ModelGraph front, rest;
  SplitPlan plan;
};

// Front = stem + units 1..s; rest = units s+1..R + head. Both halves reference
// the same parameter names, so rest∘front reproduces the unsplit model exactly.
inline SplitResult split_model(const PyramidConfig& cfg, const ModelGraph& graph, int s) {
  require(graph.role == "full", "split_model expects a full graph, got role '", graph.role, "'");
  require(s >= 1 && s <= cfg.R, "split index ", s, " outside [1, ", cfg.R, "]");
  const size_t cut = 2 + static_cast<size_t>(s);  // stem.conv, stem.bn, then s units
  require(graph.segments.size() == static_cast<size_t>(cfg.R) + 6,
          "graph does not match config (", graph.segments.size(), " segments)");
  SplitResult r;
  r.front.role = "front";
  r.rest.role = "rest";
  for (size_t i = 0; i < graph.segments.size(); ++i)
    (i < cut ? r.front : r.rest).segments.push_back(graph.segments[i]);
  r.plan.split_index = s;
  r.plan.split_channels = 4 * fmd(s, cfg.R, cfg.omega);
  r.plan.split_spatial = split_spatial(cfg, s);
  return r;
}

}  // namespace ewirp
