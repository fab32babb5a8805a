#pragma once

#include <algorithm>

#include "ewirp/channel.hpp"
#include "ewirp/codec.hpp"
#include "ewirp/pyramid.hpp"

namespace ewirp {

// ---------------------------------------------------------------------------
// Classification math
// ---------------------------------------------------------------------------

// Row-wise softmax with the max-subtraction trick.
inline Tensor<float> softmax(const Tensor<float>& logits) {
  require(logits.rank() == 2, "softmax expects (N, C) logits, got ", shape_str(logits.shape));
  const int n = logits.dim(0), c = logits.dim(1);
  Tensor<float> p(logits.shape);
  for (int i = 0; i < n; ++i) {
    double mx = logits.at(i, 0);
    for (int j = 1; j < c; ++j) mx = std::max(mx, static_cast<double>(logits.at(i, j)));
    double z = 0.0;
    for (int j = 0; j < c; ++j) z += std::exp(static_cast<double>(logits.at(i, j)) - mx);
    for (int j = 0; j < c; ++j)
      p.at(i, j) = static_cast<float>(std::exp(static_cast<double>(logits.at(i, j)) - mx) / z);
  }
  return p;
}

constexpr double kLogClamp = 1e-12;

// Mean cross-entropy over the batch and its gradient w.r.t. the logits.
inline double cross_entropy(const Tensor<float>& logits, const std::vector<u16>& labels,
                            Tensor<float>* dlogits = nullptr) {
  const int n = logits.dim(0), c = logits.dim(1);
  require(static_cast<int>(labels.size()) == n, "label count ", labels.size(),
          " does not match batch ", n);
  const Tensor<float> p = softmax(logits);
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    require(labels[i] < c, "label ", labels[i], " out of range [0, ", c, ")");
    loss -= std::log(std::max(static_cast<double>(p.at(i, labels[i])), kLogClamp));
  }
  loss /= n;
  if (dlogits) {
    *dlogits = Tensor<float>(logits.shape);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < c; ++j)
        dlogits->at(i, j) = (p.at(i, j) - (j == labels[i] ? 1.0f : 0.0f)) / n;
  }
  return loss;
}

// True when the sample's label is among the k largest logits; ties broken by
// lower class index for determinism.
inline bool in_topk(const float* logits, int c, int label, int k) {
  const float lv = logits[label];
  int better = 0;
  for (int j = 0; j < c; ++j)
    if (logits[j] > lv || (logits[j] == lv && j < label)) ++better;
  return better < k;
}

inline std::vector<int> topk_indices(const float* logits, int c, int k) {
  std::vector<int> idx(c);
  for (int j = 0; j < c; ++j) idx[j] = j;
  std::stable_sort(idx.begin(), idx.end(),
                   [&](int a, int b) { return logits[a] > logits[b]; });
  idx.resize(std::min(k, c));
  return idx;
}

// ---------------------------------------------------------------------------
// Split pipeline: front -> encoder -> normalize -> channel -> equalize ->
// decoder -> rest
// ---------------------------------------------------------------------------

struct SplitPipeline {
  const ModelGraph* front = nullptr;
  const ModelGraph* rest = nullptr;
  const ModelGraph* encoder = nullptr;
  const ModelGraph* decoder = nullptr;
  ChannelConfig channel;
  i64 bandwidth = 0;
};

template <class S>
struct SampleLink {
  std::vector<double> v;  // raw encoder output, 2B reals
  NormCache ncache;
  std::complex<double> h{1.0, 0.0};
};

struct PipelineTrace {
  Tape<float> front, enc, dec, rest;
  std::vector<SampleLink<float>> links;
  std::vector<int> enc_out_shape;
};

// Per-sample stream indices drive the channel draws, so a batch is bitwise
// reproducible from (seed, stream) regardless of batching.
inline Tensor<float> pipeline_forward(const SplitPipeline& pl, ParamStore<float>& ps,
                                      const Tensor<float>& x,
                                      const std::vector<u64>& sample_streams, PipelineTrace* tr) {
  const int n = x.dim(0);
  require(static_cast<int>(sample_streams.size()) == n, "need one stream index per sample");
  Tensor<float> mid = graph_forward(*pl.front, ps, x, tr ? &tr->front : nullptr);
  Tensor<float> enc_out = graph_forward(*pl.encoder, ps, mid, tr ? &tr->enc : nullptr);
  const i64 two_b = enc_out.numel() / n;
  require(two_b == 2 * pl.bandwidth, "encoder emitted ", two_b, " reals per sample, expected ",
          2 * pl.bandwidth);
  Tensor<float> dec_in(enc_out.shape);
  if (tr) {
    tr->links.assign(n, {});
    tr->enc_out_shape = enc_out.shape;
  }
  std::vector<double> v(two_b), scaled(two_b);
  for (int i = 0; i < n; ++i) {
    const float* src = enc_out.data() + static_cast<i64>(i) * two_b;
    for (i64 j = 0; j < two_b; ++j) v[j] = src[j];
    NormCache nc;
    power_normalize(v.data(), two_b, pl.channel.P, scaled.data(), &nc);
    auto z = pack_complex(scaled.data(), two_b);
    const ChannelRealization real = sample_realization(pl.channel, pl.bandwidth, sample_streams[i]);
    const auto zhat = apply_channel(z, real);
    const auto ztilde = equalize(zhat, real.h);
    ComplexSymbolBlock blk;
    blk.symbols = ztilde;
    const auto reals = complex_to_reals(blk);
    float* dst = dec_in.data() + static_cast<i64>(i) * two_b;
    for (i64 j = 0; j < two_b; ++j) dst[j] = static_cast<float>(reals[j]);
    if (tr) {
      tr->links[i].v = v;
      tr->links[i].ncache = nc;
      tr->links[i].h = real.h;
    }
  }
  Tensor<float> feat = graph_forward(*pl.decoder, ps, dec_in, tr ? &tr->dec : nullptr);
  return graph_forward(*pl.rest, ps, feat, tr ? &tr->rest : nullptr);
}

// `through_front` controls whether the device half of the backbone is walked;
// stage-codec training skips it since everything upstream is frozen.
inline Tensor<float> pipeline_backward(const SplitPipeline& pl, ParamStore<float>& ps,
                                       const PipelineTrace& tr, const Tensor<float>& dlogits,
                                       bool through_front) {
  Tensor<float> d_feat = graph_backward(*pl.rest, ps, tr.rest, dlogits);
  Tensor<float> d_dec_in = graph_backward(*pl.decoder, ps, tr.dec, d_feat);
  const int n = d_dec_in.dim(0);
  const i64 two_b = d_dec_in.numel() / n;
  Tensor<float> d_enc_out(tr.enc_out_shape);
  std::vector<double> g(two_b), gv(two_b);
  for (int i = 0; i < n; ++i) {
    const float* src = d_dec_in.data() + static_cast<i64>(i) * two_b;
    for (i64 j = 0; j < two_b; ++j) g[j] = src[j];
    const auto g_sym = pack_complex(g.data(), two_b);
    const auto g_z = channel_backward(g_sym, tr.links[i].h);
    ComplexSymbolBlock blk;
    blk.symbols = g_z;
    const auto g_scaled = complex_to_reals(blk);
    power_normalize_backward(tr.links[i].v.data(), g_scaled.data(), two_b, tr.links[i].ncache,
                             gv.data());
    float* dst = d_enc_out.data() + static_cast<i64>(i) * two_b;
    for (i64 j = 0; j < two_b; ++j) dst[j] = static_cast<float>(gv[j]);
  }
  Tensor<float> d_mid = graph_backward(*pl.encoder, ps, tr.enc, d_enc_out);
  if (!through_front) return d_mid;
  return graph_backward(*pl.front, ps, tr.front, d_mid);
}

}  // namespace ewirp
