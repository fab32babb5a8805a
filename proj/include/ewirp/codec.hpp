#pragma once

#include <complex>
#include <numeric>

#include "ewirp/graph.hpp"

namespace ewirp {

struct CodecConfig {
  int split_channels = 0;
  int split_h = 0, split_w = 0;
  int bandwidth = 0;  // B, complex symbols per feature map

  int enc_channels() const { return 32 * bandwidth / (split_h * split_w); }
  int mid_channels() const { return 4 * enc_channels(); }

  void validate() const {
    require(split_channels >= 1 && split_h >= 1 && split_w >= 1, "invalid split shape ",
            split_channels, "x", split_h, "x", split_w);
    require(split_h % 4 == 0 && split_w % 4 == 0,
            "split spatial dims must be divisible by 4, got ", split_h, "x", split_w);
    require(bandwidth >= 1, "bandwidth must be positive, got ", bandwidth);
    const int hw = split_h * split_w;
    const int step = hw / std::gcd(32, hw);
    require(32 * bandwidth % hw == 0 && enc_channels() >= 1, "bandwidth ", bandwidth,
            " not admissible for ", split_h, "x", split_w,
            " feature maps; admissible values are the positive multiples of ", step,
            " that are at least ", (hw + 31) / 32);
  }
};

// Conv2x2/2 -> AvgPool2x2/2 -> Gdn. Output is C_enc x H/4 x W/4 = 2B reals.
inline ModelGraph build_encoder(const CodecConfig& cfg) {
  cfg.validate();
  ModelGraph g;
  g.role = "encoder";
  g.push(GraphNode{"enc.conv", Conv2dSpec{cfg.split_channels, cfg.enc_channels(), 2, 2, 0, true}});
  g.push(GraphNode{"enc.pool", AvgPoolSpec{2, 2}});
  g.push(GraphNode{"enc.gdn", GdnSpec{cfg.enc_channels()}});
  return g;
}

// TransConv2x2/2 -> Igdn -> UpsampleNearest x2 -> Conv3x3 -> BatchNorm -> PReLU.
inline ModelGraph build_decoder(const CodecConfig& cfg) {
  cfg.validate();
  ModelGraph g;
  g.role = "decoder";
  g.push(GraphNode{"dec.tconv", TransConv2dSpec{cfg.enc_channels(), cfg.mid_channels(), 2, 2, true}});
  g.push(GraphNode{"dec.igdn", IgdnSpec{cfg.mid_channels()}});
  g.push(GraphNode{"dec.up", UpsampleNearestSpec{2}});
  g.push(GraphNode{"dec.conv", Conv2dSpec{cfg.mid_channels(), cfg.split_channels, 3, 1, 1, false}});
  g.push(GraphNode{"dec.bn", BatchNormSpec{cfg.split_channels}});
  g.push(GraphNode{"dec.prelu", PreluSpec{cfg.split_channels}});
  return g;
}

struct ComplexSymbolBlock {
  std::vector<std::complex<double>> symbols;
  double power_budget = 1.0;

  double mean_power() const {
    double acc = 0.0;
    for (const auto& z : symbols) acc += std::norm(z);
    return symbols.empty() ? 0.0 : acc / symbols.size();
  }
};

// Packing only: first half real parts, second half imaginary parts.
inline std::vector<std::complex<double>> pack_complex(const double* v, i64 two_b) {
  require(two_b > 0 && two_b % 2 == 0, "packing needs an even positive length, got ", two_b);
  const i64 b = two_b / 2;
  std::vector<std::complex<double>> z(b);
  for (i64 i = 0; i < b; ++i) z[i] = {v[i], v[b + i]};
  return z;
}

inline std::vector<double> complex_to_reals(const ComplexSymbolBlock& blk) {
  const i64 b = static_cast<i64>(blk.symbols.size());
  std::vector<double> v(2 * b);
  for (i64 i = 0; i < b; ++i) {
    v[i] = blk.symbols[i].real();
    v[b + i] = blk.symbols[i].imag();
  }
  return v;
}

struct NormCache {
  double r = 0.0;  // ||v||_2
  double s = 0.0;  // sqrt(B*P)
};

// y = sqrt(B*P) * v / ||v||, so mean symbol power is exactly P.
inline void power_normalize(const double* v, i64 two_b, double P, double* out,
                            NormCache* cache = nullptr) {
  require(two_b > 0 && two_b % 2 == 0, "normalize needs an even positive length, got ", two_b);
  require(P > 0, "power budget must be positive, got ", P);
  double ss = 0.0;
  for (i64 i = 0; i < two_b; ++i) ss += v[i] * v[i];
  const double r = std::sqrt(ss);
  require(r > 0, "cannot normalize the zero vector (undefined direction)");
  const double s = std::sqrt(static_cast<double>(two_b / 2) * P);
  for (i64 i = 0; i < two_b; ++i) out[i] = s * v[i] / r;
  if (cache) *cache = {r, s};
}

// grad_v = (s/r) * (g - v (v.g) / r^2)
inline void power_normalize_backward(const double* v, const double* g_out, i64 two_b,
                                     const NormCache& c, double* g_v) {
  double vg = 0.0;
  for (i64 i = 0; i < two_b; ++i) vg += v[i] * g_out[i];
  const double k = c.s / c.r, q = vg / (c.r * c.r);
  for (i64 i = 0; i < two_b; ++i) g_v[i] = k * (g_out[i] - v[i] * q);
}

inline ComplexSymbolBlock reals_to_complex_normalized(const double* v, i64 two_b, double P,
                                                      NormCache* cache = nullptr) {
  std::vector<double> scaled(two_b);
  power_normalize(v, two_b, P, scaled.data(), cache);
  ComplexSymbolBlock blk;
  blk.symbols = pack_complex(scaled.data(), two_b);
  blk.power_budget = P;
  return blk;
}

}  // namespace ewirp
