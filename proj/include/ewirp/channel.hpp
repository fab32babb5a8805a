#pragma once

#include <complex>
#include <stdexcept>

#include "ewirp/codec.hpp"
#include "ewirp/rng.hpp"

namespace ewirp {

enum class ChannelKind { awgn, rayleigh };

inline ChannelKind channel_kind_from(const std::string& s) {
  if (s == "awgn") return ChannelKind::awgn;
  if (s == "rayleigh") return ChannelKind::rayleigh;
  throw std::invalid_argument(cat("unknown channel kind '", s, "'"));
}

inline const char* to_string(ChannelKind k) {
  return k == ChannelKind::awgn ? "awgn" : "rayleigh";
}

struct ChannelConfig {
  ChannelKind kind = ChannelKind::rayleigh;
  double snr_db = 15.0;
  double P = 1.0;
  double sigma_h2 = 1.0;
  u64 seed = 0;

  void validate() const {
    require(P > 0, "transmit power must be positive, got ", P);
    require(sigma_h2 > 0, "channel gain variance must be positive, got ", sigma_h2);
  }
};

inline double noise_variance_from_snr(double snr_db, double P, double sigma_h2) {
  require(P > 0 && sigma_h2 > 0, "P and channel variance must be positive");
  return P * sigma_h2 * std::pow(10.0, -snr_db / 10.0);
}

struct ChannelRealization {
  std::complex<double> h{1.0, 0.0};
  double sigma_n2 = 0.0;
  std::vector<std::complex<double>> noise;
};

// Thrown when |h| is numerically zero and the block must be dropped.
struct SingularChannel : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// One fading coefficient shared by all B symbols of the block; h is drawn
// before the noise so the two are individually reproducible.
inline ChannelRealization sample_realization(const ChannelConfig& cfg, i64 b, u64 stream_index) {
  cfg.validate();
  require(b > 0, "block length must be positive, got ", b);
  RngStream rng(cfg.seed, stream_index);
  ChannelRealization r;
  r.sigma_n2 = noise_variance_from_snr(cfg.snr_db, cfg.P, cfg.sigma_h2);
  r.h = cfg.kind == ChannelKind::rayleigh ? rng.complex_normal(cfg.sigma_h2)
                                          : std::complex<double>{1.0, 0.0};
  r.noise.resize(b);
  for (auto& n : r.noise) n = rng.complex_normal(r.sigma_n2);
  return r;
}

inline std::vector<std::complex<double>> apply_channel(
    const std::vector<std::complex<double>>& z, const ChannelRealization& real) {
  require(z.size() == real.noise.size(), "block length ", z.size(),
          " does not match noise length ", real.noise.size());
  std::vector<std::complex<double>> out(z.size());
  for (size_t i = 0; i < z.size(); ++i) out[i] = real.h * z[i] + real.noise[i];
  return out;
}

constexpr double kSingularH = 1e-12;

inline std::vector<std::complex<double>> equalize(const std::vector<std::complex<double>>& zhat,
                                                  std::complex<double> h) {
  if (std::abs(h) < kSingularH)
    throw SingularChannel(cat("channel coefficient |h|=", std::abs(h), " below ", kSingularH));
  const std::complex<double> q = std::conj(h) / std::norm(h);
  std::vector<std::complex<double>> out(zhat.size());
  for (size_t i = 0; i < zhat.size(); ++i) out[i] = q * zhat[i];
  return out;
}

// Gradient of equalize(apply_channel(.)) w.r.t. z: both maps are complex
// scalings, so the adjoint multiplies by the conjugates in reverse order.
inline std::vector<std::complex<double>> channel_backward(
    const std::vector<std::complex<double>>& g_equalized, std::complex<double> h) {
  const std::complex<double> q = std::conj(h) / std::norm(h);
  const std::complex<double> a = std::conj(q) * std::conj(h);
  std::vector<std::complex<double>> g(g_equalized.size());
  for (size_t i = 0; i < g.size(); ++i) g[i] = a * g_equalized[i];
  return g;
}

}  // namespace ewirp
