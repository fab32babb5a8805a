#pragma once

#include <Eigen/Core>

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "ewirp/rng.hpp"
#include "ewirp/tensor.hpp"

namespace ewirp {

// ---------------------------------------------------------------------------
// Layer specifications
// ---------------------------------------------------------------------------

struct Conv2dSpec {
  int in_ch, out_ch, kernel;
  int stride = 1, padding = 0;
  bool bias = false;
};
struct TransConv2dSpec {
  int in_ch, out_ch, kernel, stride;
  bool bias = true;
};
struct BatchNormSpec {
  int ch;
};
struct ReluSpec {};
struct PreluSpec {
  int ch;
};
struct SigmoidSpec {};
struct GlobalAvgPoolSpec {};
struct AvgPoolSpec {
  int kernel, stride;
};
struct UpsampleNearestSpec {
  int factor;
};
struct DenseSpec {
  int in, out;
  bool bias = true;
};
struct GdnSpec {
  int ch;
};
struct IgdnSpec {
  int ch;
};

using LayerSpec = std::variant<Conv2dSpec, TransConv2dSpec, BatchNormSpec, ReluSpec, PreluSpec,
                               SigmoidSpec, GlobalAvgPoolSpec, AvgPoolSpec, UpsampleNearestSpec,
                               DenseSpec, GdnSpec, IgdnSpec>;

inline const char* layer_kind(const LayerSpec& s) {
  struct V {
    const char* operator()(const Conv2dSpec&) { return "Conv2d"; }
    const char* operator()(const TransConv2dSpec&) { return "TransConv2d"; }
    const char* operator()(const BatchNormSpec&) { return "BatchNorm"; }
    const char* operator()(const ReluSpec&) { return "ReLU"; }
    const char* operator()(const PreluSpec&) { return "PReLU"; }
    const char* operator()(const SigmoidSpec&) { return "Sigmoid"; }
    const char* operator()(const GlobalAvgPoolSpec&) { return "GlobalAvgPool"; }
    const char* operator()(const AvgPoolSpec&) { return "AvgPool"; }
    const char* operator()(const UpsampleNearestSpec&) { return "UpsampleNearest"; }
    const char* operator()(const DenseSpec&) { return "Dense"; }
    const char* operator()(const GdnSpec&) { return "Gdn"; }
    const char* operator()(const IgdnSpec&) { return "Igdn"; }
  };
  return std::visit(V{}, s);
}

// Output shape under standard convolution/pooling arithmetic. Throws on
// incompatible input.
inline std::vector<int> infer_shape(const LayerSpec& spec, const std::vector<int>& in) {
  auto need_rank = [&](int r) {
    require(static_cast<int>(in.size()) == r, layer_kind(spec), " expects rank-", r, " input, got ",
            shape_str(in));
  };
  struct V {
    const std::vector<int>& in;
    const LayerSpec& spec;
    std::function<void(int)> need_rank;

    std::vector<int> operator()(const Conv2dSpec& c) {
      need_rank(4);
      require(in[1] == c.in_ch, "Conv2d expects ", c.in_ch, " channels, got ", shape_str(in));
      require(c.kernel <= in[2] + 2 * c.padding && c.kernel <= in[3] + 2 * c.padding,
              "Conv2d kernel ", c.kernel, " exceeds padded input ", shape_str(in));
      const int ho = (in[2] + 2 * c.padding - c.kernel) / c.stride + 1;
      const int wo = (in[3] + 2 * c.padding - c.kernel) / c.stride + 1;
      return {in[0], c.out_ch, ho, wo};
    }
    std::vector<int> operator()(const TransConv2dSpec& t) {
      need_rank(4);
      require(in[1] == t.in_ch, "TransConv2d expects ", t.in_ch, " channels, got ", shape_str(in));
      return {in[0], t.out_ch, (in[2] - 1) * t.stride + t.kernel, (in[3] - 1) * t.stride + t.kernel};
    }
    std::vector<int> operator()(const BatchNormSpec& b) {
      need_rank(4);
      require(in[1] == b.ch, "BatchNorm expects ", b.ch, " channels, got ", shape_str(in));
      return in;
    }
    std::vector<int> operator()(const ReluSpec&) { return in; }
    std::vector<int> operator()(const PreluSpec& p) {
      need_rank(4);
      require(in[1] == p.ch, "PReLU expects ", p.ch, " channels, got ", shape_str(in));
      return in;
    }
    std::vector<int> operator()(const SigmoidSpec&) { return in; }
    std::vector<int> operator()(const GlobalAvgPoolSpec&) {
      need_rank(4);
      return {in[0], in[1]};
    }
    std::vector<int> operator()(const AvgPoolSpec& a) {
      need_rank(4);
      require(a.kernel <= in[2] && a.kernel <= in[3], "AvgPool kernel ", a.kernel,
              " exceeds input ", shape_str(in));
      return {in[0], in[1], (in[2] - a.kernel) / a.stride + 1, (in[3] - a.kernel) / a.stride + 1};
    }
    std::vector<int> operator()(const UpsampleNearestSpec& u) {
      need_rank(4);
      return {in[0], in[1], in[2] * u.factor, in[3] * u.factor};
    }
    std::vector<int> operator()(const DenseSpec& d) {
      need_rank(2);
      require(in[1] == d.in, "Dense expects ", d.in, " features, got ", shape_str(in));
      return {in[0], d.out};
    }
    std::vector<int> operator()(const GdnSpec& g) {
      need_rank(4);
      require(in[1] == g.ch, "Gdn expects ", g.ch, " channels, got ", shape_str(in));
      return in;
    }
    std::vector<int> operator()(const IgdnSpec& g) {
      need_rank(4);
      require(in[1] == g.ch, "Igdn expects ", g.ch, " channels, got ", shape_str(in));
      return in;
    }
  };
  return std::visit(V{in, spec, need_rank}, spec);
}

// ---------------------------------------------------------------------------
// Parameter storage
// ---------------------------------------------------------------------------

enum class Mode { train, eval };

enum class InitKind { he_uniform, zeros, ones, prelu_slope, gdn_beta, gdn_gamma };

constexpr double kGdnBetaMin = 1e-6;
constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.1;

template <class S>
struct Param {
  Tensor<S> value;
  Tensor<S> grad;
  Tensor<S> velocity;  // allocated on first momentum step
  bool trainable = true;
};

// Named parameter and buffer store shared by every graph evaluated against it.
// Parameter names are "<layer id>.<slot>"; freezing is by id prefix.
template <class S>
class ParamStore {
 public:
  std::map<std::string, Param<S>> params;
  Mode mode = Mode::eval;
  u64 init_seed = 0;
  std::vector<std::string> frozen_prefixes;

  bool is_frozen(const std::string& id) const {
    for (const auto& p : frozen_prefixes)
      if (id.rfind(p, 0) == 0) return true;
    return false;
  }

  bool has(const std::string& name) const { return params.count(name) != 0; }

  Param<S>& ensure(const std::string& name, std::vector<int> shape, InitKind kind,
                   int fan_in = 0, bool trainable = true) {
    auto it = params.find(name);
    if (it != params.end()) {
      require(it->second.value.shape == shape, "parameter ", name, " has shape ",
              shape_str(it->second.value.shape), " but layer expects ", shape_str(shape));
      return it->second;
    }
    Param<S> p;
    p.value = Tensor<S>(shape);
    p.grad = Tensor<S>(shape, S(0));
    p.trainable = trainable;
    init_values(p.value, name, kind, fan_in);
    return params.emplace(name, std::move(p)).first->second;
  }

  Param<S>& get(const std::string& name) {
    auto it = params.find(name);
    require(it != params.end(), "unknown parameter ", name);
    return it->second;
  }
  const Param<S>& get(const std::string& name) const {
    auto it = params.find(name);
    require(it != params.end(), "unknown parameter ", name);
    return it->second;
  }

  void zero_grads() {
    for (auto& [k, p] : params) p.grad.fill(S(0));
  }

  i64 trainable_count() const {
    i64 n = 0;
    for (const auto& [k, p] : params)
      if (p.trainable) n += p.value.numel();
    return n;
  }

 private:
  void init_values(Tensor<S>& t, const std::string& name, InitKind kind, int fan_in) {
    // Stream keyed by name so initialization is independent of creation order.
    RngStream rng(init_seed, stream_tag(name.c_str()));
    switch (kind) {
      case InitKind::he_uniform: {
        require(fan_in > 0, "he_uniform needs fan_in for ", name);
        const double bound = std::sqrt(6.0 / fan_in);
        for (auto& x : t.v) x = static_cast<S>(rng.uniform(-bound, bound));
        break;
      }
      case InitKind::zeros:
        t.fill(S(0));
        break;
      case InitKind::ones:
        t.fill(S(1));
        break;
      case InitKind::prelu_slope:
        t.fill(S(0.25));
        break;
      case InitKind::gdn_beta:
        t.fill(S(1));  // beta = raw^2 + beta_min ~ 1
        break;
      case InitKind::gdn_gamma: {
        // Identity coupling scaled to 0.1 under the squared reparameterization.
        t.fill(S(0));
        const int c = t.dim(0);
        for (int i = 0; i < c; ++i) t.v[static_cast<i64>(i) * c + i] = static_cast<S>(std::sqrt(0.1));
        break;
      }
    }
  }
};

// p <- p - lr * (g + wd * p + momentum * v); v <- momentum * v + (g + wd * p).
// Gradients are cleared afterwards.
template <class S>
void sgd_step(ParamStore<S>& ps, double lr, double weight_decay, double momentum) {
  require(lr > 0, "sgd_step requires lr > 0, got ", lr);
  for (auto& [name, p] : ps.params) {
    if (p.trainable && !ps.is_frozen(name)) {
      if (momentum != 0.0 && p.velocity.numel() == 0) p.velocity = Tensor<S>(p.value.shape, S(0));
      for (i64 i = 0; i < p.value.numel(); ++i) {
        double g = static_cast<double>(p.grad.v[i]) + weight_decay * static_cast<double>(p.value.v[i]);
        if (momentum != 0.0) {
          g += momentum * static_cast<double>(p.velocity.v[i]);
          p.velocity.v[i] = static_cast<S>(g);
        }
        p.value.v[i] = static_cast<S>(static_cast<double>(p.value.v[i]) - lr * g);
      }
    }
    p.grad.fill(S(0));
  }
}

// ---------------------------------------------------------------------------
// Forward / backward kernels
// ---------------------------------------------------------------------------

template <class S>
using MatMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <class S>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// Per-layer state captured in forward and consumed by backward.
template <class S>
struct LayerCache {
  Tensor<S> in;
  Tensor<S> aux;   // BatchNorm: (2,C) mean/invstd; Sigmoid: output; Gdn: rsqrt denom; Igdn: sqrt denom
  bool bn_train = false;
};

namespace detail {

template <class S>
void im2col(const S* x, int C, int H, int W, int k, int stride, int pad, S* col, int ho, int wo) {
  // col is (C*k*k) x (ho*wo), row-major.
  for (int c = 0; c < C; ++c) {
    for (int kh = 0; kh < k; ++kh) {
      for (int kw = 0; kw < k; ++kw) {
        S* row = col + (static_cast<i64>(c) * k * k + kh * k + kw) * (static_cast<i64>(ho) * wo);
        for (int oh = 0; oh < ho; ++oh) {
          const int ih = oh * stride + kh - pad;
          if (ih < 0 || ih >= H) {
            for (int ow = 0; ow < wo; ++ow) row[static_cast<i64>(oh) * wo + ow] = S(0);
            continue;
          }
          const S* src = x + (static_cast<i64>(c) * H + ih) * W;
          for (int ow = 0; ow < wo; ++ow) {
            const int iw = ow * stride + kw - pad;
            row[static_cast<i64>(oh) * wo + ow] = (iw < 0 || iw >= W) ? S(0) : src[iw];
          }
        }
      }
    }
  }
}

template <class S>
void col2im_add(const S* col, int C, int H, int W, int k, int stride, int pad, S* x, int ho,
                int wo) {
  for (int c = 0; c < C; ++c) {
    for (int kh = 0; kh < k; ++kh) {
      for (int kw = 0; kw < k; ++kw) {
        const S* row = col + (static_cast<i64>(c) * k * k + kh * k + kw) * (static_cast<i64>(ho) * wo);
        for (int oh = 0; oh < ho; ++oh) {
          const int ih = oh * stride + kh - pad;
          if (ih < 0 || ih >= H) continue;
          S* dst = x + (static_cast<i64>(c) * H + ih) * W;
          for (int ow = 0; ow < wo; ++ow) {
            const int iw = ow * stride + kw - pad;
            if (iw >= 0 && iw < W) dst[iw] += row[static_cast<i64>(oh) * wo + ow];
          }
        }
      }
    }
  }
}

}  // namespace detail

template <class S>
struct LayerIo {
  const LayerSpec& spec;
  const std::string& id;
  ParamStore<S>& ps;
};

// Forward pass of one primitive layer. `cache` may be null for inference.
// `effective_mode` overrides the store mode (frozen scopes run in eval).
template <class S>
Tensor<S> layer_forward(const LayerSpec& spec, const std::string& id, ParamStore<S>& ps,
                        const Tensor<S>& x, LayerCache<S>* cache, Mode effective_mode,
                        bool check_input = false) {
  if (check_input)
    require(x.all_finite(), layer_kind(spec), " '", id, "' received non-finite input");
  const std::vector<int> out_shape = infer_shape(spec, x.shape);
  const bool training = effective_mode == Mode::train;
  if (cache) cache->in = x;

  if (const auto* c = std::get_if<Conv2dSpec>(&spec)) {
    const int N = x.dim(0), H = x.dim(2), W = x.dim(3);
    const int ho = out_shape[2], wo = out_shape[3];
    const int kk = c->kernel * c->kernel, rows = c->in_ch * kk;
    auto& w = ps.ensure(id + ".weight", {c->out_ch, c->in_ch, c->kernel, c->kernel},
                        InitKind::he_uniform, c->in_ch * kk);
    Param<S>* b = c->bias ? &ps.ensure(id + ".bias", {c->out_ch}, InitKind::zeros) : nullptr;
    Tensor<S> y(out_shape);
    ConstMatMap<S> Wm(w.value.data(), c->out_ch, rows);
    const bool unit = c->kernel == 1 && c->stride == 1 && c->padding == 0;
    AVec<S> col(unit ? 0 : static_cast<size_t>(rows) * ho * wo);
    for (int n = 0; n < N; ++n) {
      const S* xin = x.data() + static_cast<i64>(n) * c->in_ch * H * W;
      if (!unit) detail::im2col(xin, c->in_ch, H, W, c->kernel, c->stride, c->padding, col.data(), ho, wo);
      ConstMatMap<S> Cm(unit ? xin : col.data(), rows, static_cast<i64>(ho) * wo);
      MatMap<S> Y(y.data() + static_cast<i64>(n) * c->out_ch * ho * wo, c->out_ch,
                  static_cast<i64>(ho) * wo);
      Y.noalias() = Wm * Cm;
      if (b)
        for (int oc = 0; oc < c->out_ch; ++oc) Y.row(oc).array() += b->value.v[oc];
    }
    return y;
  }

  if (const auto* t = std::get_if<TransConv2dSpec>(&spec)) {
    const int N = x.dim(0), H = x.dim(2), W = x.dim(3);
    const int ho = out_shape[2], wo = out_shape[3];
    const int kk = t->kernel * t->kernel;
    auto& w = ps.ensure(id + ".weight", {t->in_ch, t->out_ch, t->kernel, t->kernel},
                        InitKind::he_uniform, t->in_ch * kk);
    Param<S>* b = t->bias ? &ps.ensure(id + ".bias", {t->out_ch}, InitKind::zeros) : nullptr;
    // Rearranged weight: (out_ch*k*k) x in_ch.
    AVec<S> wr(static_cast<size_t>(t->out_ch) * kk * t->in_ch);
    for (int ci = 0; ci < t->in_ch; ++ci)
      for (int co = 0; co < t->out_ch; ++co)
        for (int q = 0; q < kk; ++q)
          wr[(static_cast<i64>(co) * kk + q) * t->in_ch + ci] =
              w.value.v[(static_cast<i64>(ci) * t->out_ch + co) * kk + q];
    ConstMatMap<S> Wr(wr.data(), t->out_ch * kk, t->in_ch);
    Tensor<S> y(out_shape, S(0));
    AVec<S> colg(static_cast<size_t>(t->out_ch) * kk * H * W);
    for (int n = 0; n < N; ++n) {
      ConstMatMap<S> X(x.data() + static_cast<i64>(n) * t->in_ch * H * W, t->in_ch,
                       static_cast<i64>(H) * W);
      MatMap<S> G(colg.data(), t->out_ch * kk, static_cast<i64>(H) * W);
      G.noalias() = Wr * X;
      S* yn = y.data() + static_cast<i64>(n) * t->out_ch * ho * wo;
      for (int co = 0; co < t->out_ch; ++co)
        for (int kh = 0; kh < t->kernel; ++kh)
          for (int kw = 0; kw < t->kernel; ++kw) {
            const S* row = colg.data() +
                           (static_cast<i64>(co) * kk + kh * t->kernel + kw) * (static_cast<i64>(H) * W);
            for (int h = 0; h < H; ++h) {
              S* dst = yn + (static_cast<i64>(co) * ho + h * t->stride + kh) * wo + kw;
              const S* src = row + static_cast<i64>(h) * W;
              for (int wI = 0; wI < W; ++wI) dst[static_cast<i64>(wI) * t->stride] += src[wI];
            }
          }
      if (b)
        for (int co = 0; co < t->out_ch; ++co) {
          S* dst = yn + static_cast<i64>(co) * ho * wo;
          for (i64 i = 0; i < static_cast<i64>(ho) * wo; ++i) dst[i] += b->value.v[co];
        }
    }
    return y;
  }

  if (const auto* bn = std::get_if<BatchNormSpec>(&spec)) {
    const int N = x.dim(0), C = bn->ch, H = x.dim(2), W = x.dim(3);
    auto& gamma = ps.ensure(id + ".weight", {C}, InitKind::ones);
    auto& beta = ps.ensure(id + ".bias", {C}, InitKind::zeros);
    auto& rm = ps.ensure(id + ".running_mean", {C}, InitKind::zeros, 0, false);
    auto& rv = ps.ensure(id + ".running_var", {C}, InitKind::ones, 0, false);
    Tensor<S> y(out_shape);
    const i64 hw = static_cast<i64>(H) * W;
    const i64 cnt = static_cast<i64>(N) * hw;
    Tensor<S> stats({2, C});
    if (training) require(cnt >= 2, "BatchNorm in train mode needs at least 2 samples per channel");
    for (int c = 0; c < C; ++c) {
      double mean, invstd;
      if (training) {
        double s1 = 0.0, s2 = 0.0;
        for (int n = 0; n < N; ++n) {
          const S* p = x.data() + (static_cast<i64>(n) * C + c) * hw;
          for (i64 i = 0; i < hw; ++i) {
            const double v = p[i];
            s1 += v;
            s2 += v * v;
          }
        }
        mean = s1 / cnt;
        double var = s2 / cnt - mean * mean;
        if (var < 0) var = 0;
        invstd = 1.0 / std::sqrt(var + kBnEps);
        // Running statistics use the unbiased variance.
        rm.value.v[c] = static_cast<S>((1.0 - kBnMomentum) * rm.value.v[c] + kBnMomentum * mean);
        rv.value.v[c] = static_cast<S>((1.0 - kBnMomentum) * rv.value.v[c] +
                                       kBnMomentum * var * cnt / (cnt - 1));
      } else {
        mean = rm.value.v[c];
        invstd = 1.0 / std::sqrt(static_cast<double>(rv.value.v[c]) + kBnEps);
      }
      stats.v[c] = static_cast<S>(mean);
      stats.v[C + c] = static_cast<S>(invstd);
      const double g = gamma.value.v[c], bv = beta.value.v[c];
      for (int n = 0; n < N; ++n) {
        const S* p = x.data() + (static_cast<i64>(n) * C + c) * hw;
        S* q = y.data() + (static_cast<i64>(n) * C + c) * hw;
        for (i64 i = 0; i < hw; ++i) q[i] = static_cast<S>((p[i] - mean) * invstd * g + bv);
      }
    }
    if (cache) {
      cache->aux = std::move(stats);
      cache->bn_train = training;
    }
    return y;
  }

  if (std::get_if<ReluSpec>(&spec)) {
    Tensor<S> y(out_shape);
    for (i64 i = 0; i < x.numel(); ++i) y.v[i] = x.v[i] > S(0) ? x.v[i] : S(0);
    return y;
  }

  if (const auto* p = std::get_if<PreluSpec>(&spec)) {
    auto& a = ps.ensure(id + ".weight", {p->ch}, InitKind::prelu_slope);
    const int N = x.dim(0), C = p->ch;
    const i64 hw = static_cast<i64>(x.dim(2)) * x.dim(3);
    Tensor<S> y(out_shape);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const S slope = a.value.v[c];
        const S* src = x.data() + (static_cast<i64>(n) * C + c) * hw;
        S* dst = y.data() + (static_cast<i64>(n) * C + c) * hw;
        for (i64 i = 0; i < hw; ++i) dst[i] = src[i] > S(0) ? src[i] : slope * src[i];
      }
    return y;
  }

  if (std::get_if<SigmoidSpec>(&spec)) {
    Tensor<S> y(out_shape);
    for (i64 i = 0; i < x.numel(); ++i)
      y.v[i] = static_cast<S>(1.0 / (1.0 + std::exp(-static_cast<double>(x.v[i]))));
    if (cache) cache->aux = y;
    return y;
  }

  if (std::get_if<GlobalAvgPoolSpec>(&spec)) {
    const int N = x.dim(0), C = x.dim(1);
    const i64 hw = static_cast<i64>(x.dim(2)) * x.dim(3);
    Tensor<S> y(out_shape);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        double acc = 0.0;
        const S* p = x.data() + (static_cast<i64>(n) * C + c) * hw;
        for (i64 i = 0; i < hw; ++i) acc += p[i];
        y.at(n, c) = static_cast<S>(acc / hw);
      }
    return y;
  }

  if (const auto* a = std::get_if<AvgPoolSpec>(&spec)) {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int ho = out_shape[2], wo = out_shape[3];
    const double inv = 1.0 / (a->kernel * a->kernel);
    Tensor<S> y(out_shape);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (int oh = 0; oh < ho; ++oh)
          for (int ow = 0; ow < wo; ++ow) {
            double acc = 0.0;
            for (int kh = 0; kh < a->kernel; ++kh)
              for (int kw = 0; kw < a->kernel; ++kw)
                acc += x.at(n, c, oh * a->stride + kh, ow * a->stride + kw);
            y.at(n, c, oh, ow) = static_cast<S>(acc * inv);
          }
    return y;
  }

  if (const auto* u = std::get_if<UpsampleNearestSpec>(&spec)) {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor<S> y(out_shape);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (int h = 0; h < H * u->factor; ++h)
          for (int w = 0; w < W * u->factor; ++w)
            y.at(n, c, h, w) = x.at(n, c, h / u->factor, w / u->factor);
    return y;
  }

  if (const auto* d = std::get_if<DenseSpec>(&spec)) {
    auto& w = ps.ensure(id + ".weight", {d->out, d->in}, InitKind::he_uniform, d->in);
    Param<S>* b = d->bias ? &ps.ensure(id + ".bias", {d->out}, InitKind::zeros) : nullptr;
    const int N = x.dim(0);
    Tensor<S> y(out_shape);
    ConstMatMap<S> X(x.data(), N, d->in), W(w.value.data(), d->out, d->in);
    MatMap<S> Y(y.data(), N, d->out);
    Y.noalias() = X * W.transpose();
    if (b)
      for (int n = 0; n < N; ++n)
        for (int f = 0; f < d->out; ++f) y.at(n, f) += b->value.v[f];
    return y;
  }

  if (const auto* g = std::get_if<GdnSpec>(&spec)) {
    const int N = x.dim(0), C = g->ch;
    const i64 hw = static_cast<i64>(x.dim(2)) * x.dim(3);
    auto& braw = ps.ensure(id + ".beta_raw", {C}, InitKind::gdn_beta);
    auto& graw = ps.ensure(id + ".gamma_raw", {C, C}, InitKind::gdn_gamma);
    Tensor<S> gamma({C, C});
    for (i64 i = 0; i < gamma.numel(); ++i) gamma.v[i] = graw.value.v[i] * graw.value.v[i];
    Tensor<S> y(out_shape), r(out_shape);
    AVec<S> x2(static_cast<size_t>(C) * hw), den(static_cast<size_t>(C) * hw);
    ConstMatMap<S> G(gamma.data(), C, C);
    for (int n = 0; n < N; ++n) {
      const S* xn = x.data() + static_cast<i64>(n) * C * hw;
      for (i64 i = 0; i < static_cast<i64>(C) * hw; ++i) x2[i] = xn[i] * xn[i];
      ConstMatMap<S> X2(x2.data(), C, hw);
      MatMap<S> Dm(den.data(), C, hw);
      Dm.noalias() = G * X2;
      S* rn = r.data() + static_cast<i64>(n) * C * hw;
      S* yn = y.data() + static_cast<i64>(n) * C * hw;
      for (int c = 0; c < C; ++c) {
        const double beta = static_cast<double>(braw.value.v[c]) * braw.value.v[c] + kGdnBetaMin;
        for (i64 i = 0; i < hw; ++i) {
          const double dv = beta + den[static_cast<i64>(c) * hw + i];
          const double rs = 1.0 / std::sqrt(dv);
          rn[static_cast<i64>(c) * hw + i] = static_cast<S>(rs);
          yn[static_cast<i64>(c) * hw + i] = static_cast<S>(xn[static_cast<i64>(c) * hw + i] * rs);
        }
      }
    }
    if (cache) cache->aux = std::move(r);
    return y;
  }

  if (const auto* g = std::get_if<IgdnSpec>(&spec)) {
    const int N = x.dim(0), C = g->ch;
    const i64 hw = static_cast<i64>(x.dim(2)) * x.dim(3);
    auto& braw = ps.ensure(id + ".beta_raw", {C}, InitKind::gdn_beta);
    auto& graw = ps.ensure(id + ".gamma_raw", {C, C}, InitKind::gdn_gamma);
    Tensor<S> gamma({C, C});
    for (i64 i = 0; i < gamma.numel(); ++i) gamma.v[i] = graw.value.v[i] * graw.value.v[i];
    Tensor<S> y(out_shape), r(out_shape);
    AVec<S> x2(static_cast<size_t>(C) * hw), den(static_cast<size_t>(C) * hw);
    ConstMatMap<S> G(gamma.data(), C, C);
    for (int n = 0; n < N; ++n) {
      const S* xn = x.data() + static_cast<i64>(n) * C * hw;
      for (i64 i = 0; i < static_cast<i64>(C) * hw; ++i) x2[i] = xn[i] * xn[i];
      ConstMatMap<S> X2(x2.data(), C, hw);
      MatMap<S> Dm(den.data(), C, hw);
      Dm.noalias() = G * X2;
      S* rn = r.data() + static_cast<i64>(n) * C * hw;
      S* yn = y.data() + static_cast<i64>(n) * C * hw;
      for (int c = 0; c < C; ++c) {
        const double beta = static_cast<double>(braw.value.v[c]) * braw.value.v[c] + kGdnBetaMin;
        for (i64 i = 0; i < hw; ++i) {
          const double sq = std::sqrt(beta + den[static_cast<i64>(c) * hw + i]);
          rn[static_cast<i64>(c) * hw + i] = static_cast<S>(sq);
          yn[static_cast<i64>(c) * hw + i] = static_cast<S>(xn[static_cast<i64>(c) * hw + i] * sq);
        }
      }
    }
    if (cache) cache->aux = std::move(r);
    return y;
  }

  throw std::logic_error("unhandled layer variant");
}

// Backward pass; returns gradient w.r.t. the layer input and, when
// `param_grads` is set, accumulates parameter gradients into the store.
template <class S>
Tensor<S> layer_backward(const LayerSpec& spec, const std::string& id, ParamStore<S>& ps,
                         const LayerCache<S>& cache, const Tensor<S>& dy, bool param_grads) {
  const Tensor<S>& x = cache.in;
  require(x.numel() > 0, "layer_backward requires a cache from a prior forward for ", id);

  if (const auto* c = std::get_if<Conv2dSpec>(&spec)) {
    const int N = x.dim(0), H = x.dim(2), W = x.dim(3);
    const int ho = dy.dim(2), wo = dy.dim(3);
    const int kk = c->kernel * c->kernel, rows = c->in_ch * kk;
    auto& w = ps.get(id + ".weight");
    ConstMatMap<S> Wm(w.value.data(), c->out_ch, rows);
    Tensor<S> dx(x.shape, S(0));
    const bool unit = c->kernel == 1 && c->stride == 1 && c->padding == 0;
    AVec<S> col(unit ? 0 : static_cast<size_t>(rows) * ho * wo);
    AVec<S> dcol(unit ? 0 : static_cast<size_t>(rows) * ho * wo);
    MatMap<S> dW(ps.get(id + ".weight").grad.data(), c->out_ch, rows);
    for (int n = 0; n < N; ++n) {
      const S* xin = x.data() + static_cast<i64>(n) * c->in_ch * H * W;
      ConstMatMap<S> dY(dy.data() + static_cast<i64>(n) * c->out_ch * ho * wo, c->out_ch,
                        static_cast<i64>(ho) * wo);
      if (unit) {
        MatMap<S> dX(dx.data() + static_cast<i64>(n) * c->in_ch * H * W, rows,
                     static_cast<i64>(ho) * wo);
        dX.noalias() = Wm.transpose() * dY;
        if (param_grads) {
          ConstMatMap<S> Cm(xin, rows, static_cast<i64>(ho) * wo);
          dW.noalias() += dY * Cm.transpose();
        }
      } else {
        MatMap<S> dC(dcol.data(), rows, static_cast<i64>(ho) * wo);
        dC.noalias() = Wm.transpose() * dY;
        detail::col2im_add(dcol.data(), c->in_ch, H, W, c->kernel, c->stride, c->padding,
                           dx.data() + static_cast<i64>(n) * c->in_ch * H * W, ho, wo);
        if (param_grads) {
          detail::im2col(xin, c->in_ch, H, W, c->kernel, c->stride, c->padding, col.data(), ho, wo);
          ConstMatMap<S> Cm(col.data(), rows, static_cast<i64>(ho) * wo);
          dW.noalias() += dY * Cm.transpose();
        }
      }
      if (param_grads && c->bias) {
        auto& db = ps.get(id + ".bias").grad;
        for (int oc = 0; oc < c->out_ch; ++oc) db.v[oc] += dY.row(oc).sum();
      }
    }
    return dx;
  }

  if (const auto* t = std::get_if<TransConv2dSpec>(&spec)) {
    const int N = x.dim(0), H = x.dim(2), W = x.dim(3);
    const int ho = dy.dim(2), wo = dy.dim(3);
    const int kk = t->kernel * t->kernel;
    auto& w = ps.get(id + ".weight");
    AVec<S> wr(static_cast<size_t>(t->out_ch) * kk * t->in_ch);
    for (int ci = 0; ci < t->in_ch; ++ci)
      for (int co = 0; co < t->out_ch; ++co)
        for (int q = 0; q < kk; ++q)
          wr[(static_cast<i64>(co) * kk + q) * t->in_ch + ci] =
              w.value.v[(static_cast<i64>(ci) * t->out_ch + co) * kk + q];
    ConstMatMap<S> Wr(wr.data(), t->out_ch * kk, t->in_ch);
    Tensor<S> dx(x.shape);
    AVec<S> coldy(static_cast<size_t>(t->out_ch) * kk * H * W);
    AVec<S> dwr(param_grads ? static_cast<size_t>(t->out_ch) * kk * t->in_ch : 0, S(0));
    for (int n = 0; n < N; ++n) {
      const S* dyn = dy.data() + static_cast<i64>(n) * t->out_ch * ho * wo;
      for (int co = 0; co < t->out_ch; ++co)
        for (int kh = 0; kh < t->kernel; ++kh)
          for (int kw = 0; kw < t->kernel; ++kw) {
            S* row = coldy.data() +
                     (static_cast<i64>(co) * kk + kh * t->kernel + kw) * (static_cast<i64>(H) * W);
            for (int h = 0; h < H; ++h) {
              const S* src = dyn + (static_cast<i64>(co) * ho + h * t->stride + kh) * wo + kw;
              for (int wi = 0; wi < W; ++wi) row[static_cast<i64>(h) * W + wi] = src[static_cast<i64>(wi) * t->stride];
            }
          }
      ConstMatMap<S> Cdy(coldy.data(), t->out_ch * kk, static_cast<i64>(H) * W);
      MatMap<S> dX(dx.data() + static_cast<i64>(n) * t->in_ch * H * W, t->in_ch,
                   static_cast<i64>(H) * W);
      dX.noalias() = Wr.transpose() * Cdy;
      if (param_grads) {
        ConstMatMap<S> X(x.data() + static_cast<i64>(n) * t->in_ch * H * W, t->in_ch,
                         static_cast<i64>(H) * W);
        MatMap<S> dWr(dwr.data(), t->out_ch * kk, t->in_ch);
        dWr.noalias() += Cdy * X.transpose();
        if (t->bias) {
          auto& db = ps.get(id + ".bias").grad;
          for (int co = 0; co < t->out_ch; ++co) {
            double acc = 0.0;
            const S* p = dyn + static_cast<i64>(co) * ho * wo;
            for (i64 i = 0; i < static_cast<i64>(ho) * wo; ++i) acc += p[i];
            db.v[co] += static_cast<S>(acc);
          }
        }
      }
    }
    if (param_grads) {
      auto& dw = ps.get(id + ".weight").grad;
      for (int ci = 0; ci < t->in_ch; ++ci)
        for (int co = 0; co < t->out_ch; ++co)
          for (int q = 0; q < kk; ++q)
            dw.v[(static_cast<i64>(ci) * t->out_ch + co) * kk + q] +=
                dwr[(static_cast<i64>(co) * kk + q) * t->in_ch + ci];
    }
    return dx;
  }

  if (const auto* bn = std::get_if<BatchNormSpec>(&spec)) {
    const int N = x.dim(0), C = bn->ch;
    const i64 hw = static_cast<i64>(x.dim(2)) * x.dim(3);
    const i64 cnt = static_cast<i64>(N) * hw;
    auto& gamma = ps.get(id + ".weight");
    Tensor<S> dx(x.shape);
    for (int c = 0; c < C; ++c) {
      const double mean = cache.aux.v[c], invstd = cache.aux.v[C + c];
      const double g = gamma.value.v[c];
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (int n = 0; n < N; ++n) {
        const S* px = x.data() + (static_cast<i64>(n) * C + c) * hw;
        const S* pd = dy.data() + (static_cast<i64>(n) * C + c) * hw;
        for (i64 i = 0; i < hw; ++i) {
          const double xh = (px[i] - mean) * invstd;
          sum_dy += pd[i];
          sum_dy_xhat += pd[i] * xh;
        }
      }
      if (param_grads) {
        ps.get(id + ".weight").grad.v[c] += static_cast<S>(sum_dy_xhat);
        ps.get(id + ".bias").grad.v[c] += static_cast<S>(sum_dy);
      }
      const double m_dy = sum_dy / cnt, m_dy_xhat = sum_dy_xhat / cnt;
      for (int n = 0; n < N; ++n) {
        const S* px = x.data() + (static_cast<i64>(n) * C + c) * hw;
        const S* pd = dy.data() + (static_cast<i64>(n) * C + c) * hw;
        S* pq = dx.data() + (static_cast<i64>(n) * C + c) * hw;
        for (i64 i = 0; i < hw; ++i) {
          const double xh = (px[i] - mean) * invstd;
          // Eval mode is a fixed affine map, so the batch-statistic terms vanish.
          const double term = cache.bn_train ? (pd[i] - m_dy - xh * m_dy_xhat) : pd[i];
          pq[i] = static_cast<S>(g * invstd * term);
        }
      }
    }
    return dx;
  }

  if (std::get_if<ReluSpec>(&spec)) {
    Tensor<S> dx(x.shape);
    for (i64 i = 0; i < x.numel(); ++i) dx.v[i] = x.v[i] > S(0) ? dy.v[i] : S(0);
    return dx;
  }

  if (const auto* p = std::get_if<PreluSpec>(&spec)) {
    auto& a = ps.get(id + ".weight");
    const int N = x.dim(0), C = p->ch;
    const i64 hw = static_cast<i64>(x.dim(2)) * x.dim(3);
    Tensor<S> dx(x.shape);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const S slope = a.value.v[c];
        double da = 0.0;
        const S* px = x.data() + (static_cast<i64>(n) * C + c) * hw;
        const S* pd = dy.data() + (static_cast<i64>(n) * C + c) * hw;
        S* pq = dx.data() + (static_cast<i64>(n) * C + c) * hw;
        for (i64 i = 0; i < hw; ++i) {
          if (px[i] > S(0)) {
            pq[i] = pd[i];
          } else {
            pq[i] = slope * pd[i];
            da += static_cast<double>(pd[i]) * px[i];
          }
        }
        if (param_grads) a.grad.v[c] += static_cast<S>(da);
      }
    return dx;
  }

  if (std::get_if<SigmoidSpec>(&spec)) {
    Tensor<S> dx(x.shape);
    for (i64 i = 0; i < x.numel(); ++i) {
      const double y = cache.aux.v[i];
      dx.v[i] = static_cast<S>(dy.v[i] * y * (1.0 - y));
    }
    return dx;
  }

  if (std::get_if<GlobalAvgPoolSpec>(&spec)) {
    const int N = x.dim(0), C = x.dim(1);
    const i64 hw = static_cast<i64>(x.dim(2)) * x.dim(3);
    Tensor<S> dx(x.shape);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const S g = static_cast<S>(dy.at(n, c) / hw);
        S* pq = dx.data() + (static_cast<i64>(n) * C + c) * hw;
        for (i64 i = 0; i < hw; ++i) pq[i] = g;
      }
    return dx;
  }

  if (const auto* a = std::get_if<AvgPoolSpec>(&spec)) {
    const int N = x.dim(0), C = x.dim(1);
    const int ho = dy.dim(2), wo = dy.dim(3);
    const double inv = 1.0 / (a->kernel * a->kernel);
    Tensor<S> dx(x.shape, S(0));
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (int oh = 0; oh < ho; ++oh)
          for (int ow = 0; ow < wo; ++ow) {
            const S g = static_cast<S>(dy.at(n, c, oh, ow) * inv);
            for (int kh = 0; kh < a->kernel; ++kh)
              for (int kw = 0; kw < a->kernel; ++kw)
                dx.at(n, c, oh * a->stride + kh, ow * a->stride + kw) += g;
          }
    return dx;
  }

  if (const auto* u = std::get_if<UpsampleNearestSpec>(&spec)) {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor<S> dx(x.shape, S(0));
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (int h = 0; h < H * u->factor; ++h)
          for (int w = 0; w < W * u->factor; ++w)
            dx.at(n, c, h / u->factor, w / u->factor) += dy.at(n, c, h, w);
    return dx;
  }

  if (const auto* d = std::get_if<DenseSpec>(&spec)) {
    auto& w = ps.get(id + ".weight");
    const int N = x.dim(0);
    Tensor<S> dx(x.shape);
    ConstMatMap<S> X(x.data(), N, d->in), W(w.value.data(), d->out, d->in), dY(dy.data(), N, d->out);
    MatMap<S> dX(dx.data(), N, d->in);
    dX.noalias() = dY * W;
    if (param_grads) {
      MatMap<S> dW(w.grad.data(), d->out, d->in);
      dW.noalias() += dY.transpose() * X;
      if (d->bias) {
        auto& db = ps.get(id + ".bias").grad;
        for (int f = 0; f < d->out; ++f) {
          double acc = 0.0;
          for (int n = 0; n < N; ++n) acc += dy.at(n, f);
          db.v[f] += static_cast<S>(acc);
        }
      }
    }
    return dx;
  }

  const bool is_gdn = std::holds_alternative<GdnSpec>(spec);
  if (is_gdn || std::holds_alternative<IgdnSpec>(spec)) {
    const int C = is_gdn ? std::get<GdnSpec>(spec).ch : std::get<IgdnSpec>(spec).ch;
    const int N = x.dim(0);
    const i64 hw = static_cast<i64>(x.dim(2)) * x.dim(3);
    auto& braw = ps.get(id + ".beta_raw");
    auto& graw = ps.get(id + ".gamma_raw");
    Tensor<S> gamma({C, C});
    for (i64 i = 0; i < gamma.numel(); ++i) gamma.v[i] = graw.value.v[i] * graw.value.v[i];
    ConstMatMap<S> G(gamma.data(), C, C);
    Tensor<S> dx(x.shape);
    Tensor<S> dbeta({C}, S(0)), dgamma({C, C}, S(0));
    AVec<S> tbuf(static_cast<size_t>(C) * hw), x2(static_cast<size_t>(C) * hw),
        gback(static_cast<size_t>(C) * hw);
    const double sign = is_gdn ? -0.5 : 0.5;
    for (int n = 0; n < N; ++n) {
      const S* xn = x.data() + static_cast<i64>(n) * C * hw;
      const S* rn = cache.aux.data() + static_cast<i64>(n) * C * hw;  // gdn: d^-1/2, igdn: d^1/2
      const S* gn = dy.data() + static_cast<i64>(n) * C * hw;
      S* dxn = dx.data() + static_cast<i64>(n) * C * hw;
      for (i64 i = 0; i < static_cast<i64>(C) * hw; ++i) {
        const double r = rn[i];
        // gdn: t = g*x*d^-3/2;  igdn: t = g*x*d^-1/2.
        const double f = is_gdn ? r * r * r : 1.0 / r;
        tbuf[i] = static_cast<S>(static_cast<double>(gn[i]) * xn[i] * f);
        x2[i] = xn[i] * xn[i];
      }
      ConstMatMap<S> T(tbuf.data(), C, hw), X2(x2.data(), C, hw);
      MatMap<S> GB(gback.data(), C, hw);
      GB.noalias() = G.transpose() * T;
      for (i64 i = 0; i < static_cast<i64>(C) * hw; ++i)
        dxn[i] = static_cast<S>(gn[i] * static_cast<double>(rn[i]) +
                                2.0 * sign * static_cast<double>(xn[i]) * gback[i]);
      if (param_grads) {
        for (int c = 0; c < C; ++c) {
          double acc = 0.0;
          for (i64 i = 0; i < hw; ++i) acc += tbuf[static_cast<i64>(c) * hw + i];
          dbeta.v[c] += static_cast<S>(sign * acc);
        }
        MatMap<S> dG(dgamma.data(), C, C);
        dG.noalias() += static_cast<S>(sign) * (T * X2.transpose());
      }
    }
    if (param_grads) {
      for (int c = 0; c < C; ++c)
        braw.grad.v[c] += static_cast<S>(2.0 * braw.value.v[c] * dbeta.v[c]);
      for (i64 i = 0; i < gamma.numel(); ++i)
        graw.grad.v[i] += static_cast<S>(2.0 * graw.value.v[i] * dgamma.v[i]);
    }
    return dx;
  }

  throw std::logic_error("unhandled layer variant in backward");
}

// Single-layer forward with full input validation; the graph executor calls
// the granular overload and validates at coarser boundaries instead.
template <class S>
Tensor<S> forward(const LayerSpec& spec, const std::string& id, ParamStore<S>& ps,
                  const Tensor<S>& x) {
  const Mode m = ps.is_frozen(id) ? Mode::eval : ps.mode;
  return layer_forward(spec, id, ps, x, static_cast<LayerCache<S>*>(nullptr), m,
                       /*check_input=*/true);
}

}  // namespace ewirp
