#pragma once

#include <variant>
#include <vector>

#include "ewirp/layers.hpp"

namespace ewirp {

struct GraphNode {
  std::string id;
  LayerSpec spec;
};

// Bottleneck-style unit: main chain, optional squeeze-excite gate applied to
// the main output, and an identity shortcut that zero-pads channel growth and
// average-pools 2x2/2 when the unit downsamples.
struct ResidualUnit {
  std::string id;
  std::vector<GraphNode> main;
  std::vector<GraphNode> se;  // empty disables the gate
  bool strided = false;
  int in_ch = 0, out_ch = 0;
};

using Segment = std::variant<GraphNode, ResidualUnit>;

struct ModelGraph {
  std::vector<Segment> segments;
  std::string role = "full";

  void push(GraphNode n) { segments.emplace_back(std::move(n)); }
  void push(ResidualUnit u) { segments.emplace_back(std::move(u)); }
  void append(const ModelGraph& g) {
    for (const auto& s : g.segments) segments.push_back(s);
  }
};

template <class S>
struct UnitTrace {
  std::vector<LayerCache<S>> main, se;
  Tensor<S> main_out;  // pre-gate main-branch output
  Tensor<S> gate;      // (N, out_ch)
  std::vector<int> in_shape;
};

template <class S>
struct Tape {
  std::vector<std::variant<LayerCache<S>, UnitTrace<S>>> entries;
};

template <class S>
Mode effective_mode(const ParamStore<S>& ps, const std::string& id) {
  return ps.is_frozen(id) ? Mode::eval : ps.mode;
}

namespace detail {

template <class S>
Tensor<S> shortcut_forward(const Tensor<S>& x, bool strided, int out_ch) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(out_ch >= C, "shortcut cannot shrink channels (", C, " -> ", out_ch, ")");
  const int ho = strided ? H / 2 : H, wo = strided ? W / 2 : W;
  if (strided) require(H % 2 == 0 && W % 2 == 0, "strided shortcut needs even spatial dims");
  Tensor<S> y({N, out_ch, ho, wo}, S(0));
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int h = 0; h < ho; ++h)
        for (int w = 0; w < wo; ++w)
          y.at(n, c, h, w) =
              strided ? static_cast<S>((static_cast<double>(x.at(n, c, 2 * h, 2 * w)) +
                                        x.at(n, c, 2 * h, 2 * w + 1) + x.at(n, c, 2 * h + 1, 2 * w) +
                                        x.at(n, c, 2 * h + 1, 2 * w + 1)) *
                                       0.25)
                      : x.at(n, c, h, w);
  return y;
}

template <class S>
Tensor<S> shortcut_backward(const Tensor<S>& dy, const std::vector<int>& in_shape, bool strided) {
  const int N = in_shape[0], C = in_shape[1];
  Tensor<S> dx(in_shape, S(0));
  const int ho = dy.dim(2), wo = dy.dim(3);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)  // padded channels carry no gradient
      for (int h = 0; h < ho; ++h)
        for (int w = 0; w < wo; ++w) {
          if (strided) {
            const S g = static_cast<S>(dy.at(n, c, h, w) * 0.25);
            dx.at(n, c, 2 * h, 2 * w) += g;
            dx.at(n, c, 2 * h, 2 * w + 1) += g;
            dx.at(n, c, 2 * h + 1, 2 * w) += g;
            dx.at(n, c, 2 * h + 1, 2 * w + 1) += g;
          } else {
            dx.at(n, c, h, w) += dy.at(n, c, h, w);
          }
        }
  return dx;
}

}  // namespace detail

template <class S>
Tensor<S> unit_forward(const ResidualUnit& u, ParamStore<S>& ps, const Tensor<S>& x,
                       UnitTrace<S>* tr) {
  require(x.rank() == 4 && x.dim(1) == u.in_ch, "unit ", u.id, " expects ", u.in_ch,
          " channels, got ", shape_str(x.shape));
  if (tr) {
    tr->main.resize(u.main.size());
    tr->se.resize(u.se.size());
    tr->in_shape = x.shape;
  }
  Tensor<S> h = x;
  for (size_t i = 0; i < u.main.size(); ++i)
    h = layer_forward(u.main[i].spec, u.main[i].id, ps, h, tr ? &tr->main[i] : nullptr,
                      effective_mode(ps, u.main[i].id));
  require(h.dim(1) == u.out_ch, "unit ", u.id, " main branch produced ", shape_str(h.shape),
          " but out_ch is ", u.out_ch);
  Tensor<S> out;
  if (!u.se.empty()) {
    Tensor<S> g = h;
    for (size_t i = 0; i < u.se.size(); ++i)
      g = layer_forward(u.se[i].spec, u.se[i].id, ps, g, tr ? &tr->se[i] : nullptr,
                        effective_mode(ps, u.se[i].id));
    require(g.rank() == 2 && g.dim(1) == u.out_ch, "unit ", u.id, " gate produced ",
            shape_str(g.shape));
    out = Tensor<S>(h.shape);
    const i64 hw = static_cast<i64>(h.dim(2)) * h.dim(3);
    for (int n = 0; n < h.dim(0); ++n)
      for (int c = 0; c < u.out_ch; ++c) {
        const S gv = g.at(n, c);
        const S* src = h.data() + (static_cast<i64>(n) * u.out_ch + c) * hw;
        S* dst = out.data() + (static_cast<i64>(n) * u.out_ch + c) * hw;
        for (i64 i = 0; i < hw; ++i) dst[i] = src[i] * gv;
      }
    if (tr) {
      tr->main_out = std::move(h);
      tr->gate = std::move(g);
    }
  } else {
    out = std::move(h);
  }
  Tensor<S> sc = detail::shortcut_forward(x, u.strided, u.out_ch);
  require(sc.same_shape(out), "unit ", u.id, " shortcut shape ", shape_str(sc.shape),
          " mismatches branch ", shape_str(out.shape));
  for (i64 i = 0; i < out.numel(); ++i) out.v[i] += sc.v[i];
  return out;
}

template <class S>
Tensor<S> unit_backward(const ResidualUnit& u, ParamStore<S>& ps, const UnitTrace<S>& tr,
                        const Tensor<S>& dy, bool param_grads_unfrozen) {
  auto wants = [&](const std::string& id) { return param_grads_unfrozen && !ps.is_frozen(id); };
  Tensor<S> dmain;
  if (!u.se.empty()) {
    const Tensor<S>& h = tr.main_out;
    const i64 hw = static_cast<i64>(h.dim(2)) * h.dim(3);
    dmain = Tensor<S>(h.shape);
    Tensor<S> dgate({h.dim(0), u.out_ch});
    for (int n = 0; n < h.dim(0); ++n)
      for (int c = 0; c < u.out_ch; ++c) {
        const S gv = tr.gate.at(n, c);
        const S* src = h.data() + (static_cast<i64>(n) * u.out_ch + c) * hw;
        const S* dsrc = dy.data() + (static_cast<i64>(n) * u.out_ch + c) * hw;
        S* dst = dmain.data() + (static_cast<i64>(n) * u.out_ch + c) * hw;
        double acc = 0.0;
        for (i64 i = 0; i < hw; ++i) {
          dst[i] = dsrc[i] * gv;
          acc += static_cast<double>(dsrc[i]) * src[i];
        }
        dgate.at(n, c) = static_cast<S>(acc);
      }
    Tensor<S> dg = std::move(dgate);
    for (size_t i = u.se.size(); i-- > 0;)
      dg = layer_backward(u.se[i].spec, u.se[i].id, ps, tr.se[i], dg, wants(u.se[i].id));
    require(dg.same_shape(dmain), "gate backward shape mismatch in ", u.id);
    for (i64 i = 0; i < dmain.numel(); ++i) dmain.v[i] += dg.v[i];
  } else {
    dmain = dy;
  }
  Tensor<S> d = std::move(dmain);
  for (size_t i = u.main.size(); i-- > 0;)
    d = layer_backward(u.main[i].spec, u.main[i].id, ps, tr.main[i], d, wants(u.main[i].id));
  Tensor<S> dsc = detail::shortcut_backward(dy, tr.in_shape, u.strided);
  for (i64 i = 0; i < d.numel(); ++i) d.v[i] += dsc.v[i];
  return d;
}

// Runs the graph. Input finiteness is validated here and after every segment
// boundary rather than inside each primitive.
template <class S>
Tensor<S> graph_forward(const ModelGraph& g, ParamStore<S>& ps, const Tensor<S>& x,
                        Tape<S>* tape) {
  require(x.all_finite(), "graph input contains non-finite values");
  if (tape) {
    tape->entries.clear();
    tape->entries.reserve(g.segments.size());
  }
  Tensor<S> h = x;
  for (const auto& seg : g.segments) {
    if (const auto* node = std::get_if<GraphNode>(&seg)) {
      LayerCache<S>* cache = nullptr;
      if (tape) {
        tape->entries.emplace_back(LayerCache<S>{});
        cache = &std::get<LayerCache<S>>(tape->entries.back());
      }
      h = layer_forward(node->spec, node->id, ps, h, cache, effective_mode(ps, node->id));
    } else {
      const auto& u = std::get<ResidualUnit>(seg);
      UnitTrace<S>* tr = nullptr;
      if (tape) {
        tape->entries.emplace_back(UnitTrace<S>{});
        tr = &std::get<UnitTrace<S>>(tape->entries.back());
      }
      h = unit_forward(u, ps, h, tr);
    }
    require(h.all_finite(), "non-finite activations after segment");
  }
  return h;
}

template <class S>
Tensor<S> graph_backward(const ModelGraph& g, ParamStore<S>& ps, const Tape<S>& tape,
                         const Tensor<S>& dy, bool param_grads = true) {
  require(tape.entries.size() == g.segments.size(),
          "tape does not match graph (", tape.entries.size(), " vs ", g.segments.size(), ")");
  Tensor<S> d = dy;
  for (size_t i = g.segments.size(); i-- > 0;) {
    if (const auto* node = std::get_if<GraphNode>(&g.segments[i])) {
      const bool pg = param_grads && !ps.is_frozen(node->id);
      d = layer_backward(node->spec, node->id, ps, std::get<LayerCache<S>>(tape.entries[i]), d, pg);
    } else {
      const auto& u = std::get<ResidualUnit>(g.segments[i]);
      d = unit_backward(u, ps, std::get<UnitTrace<S>>(tape.entries[i]), d, param_grads);
    }
  }
  return d;
}

// Forward-order visit of every layer node, flattening unit internals.
// The callback receives (node, owning unit or nullptr, position within unit:
// 0 = main chain, 1 = se chain).
template <class F>
void visit_nodes(const ModelGraph& g, F&& f) {
  for (const auto& seg : g.segments) {
    if (const auto* node = std::get_if<GraphNode>(&seg)) {
      f(*node, static_cast<const ResidualUnit*>(nullptr), 0);
    } else {
      const auto& u = std::get<ResidualUnit>(seg);
      for (const auto& n : u.main) f(n, &u, 0);
      for (const auto& n : u.se) f(n, &u, 1);
    }
  }
}

// Creates (or validates) the parameters a single layer owns.
template <class S>
void touch_params(const LayerSpec& spec, const std::string& id, ParamStore<S>& ps) {
  if (const auto* c = std::get_if<Conv2dSpec>(&spec)) {
    ps.ensure(id + ".weight", {c->out_ch, c->in_ch, c->kernel, c->kernel}, InitKind::he_uniform,
              c->in_ch * c->kernel * c->kernel);
    if (c->bias) ps.ensure(id + ".bias", {c->out_ch}, InitKind::zeros);
  } else if (const auto* t = std::get_if<TransConv2dSpec>(&spec)) {
    ps.ensure(id + ".weight", {t->in_ch, t->out_ch, t->kernel, t->kernel}, InitKind::he_uniform,
              t->in_ch * t->kernel * t->kernel);
    if (t->bias) ps.ensure(id + ".bias", {t->out_ch}, InitKind::zeros);
  } else if (const auto* b = std::get_if<BatchNormSpec>(&spec)) {
    ps.ensure(id + ".weight", {b->ch}, InitKind::ones);
    ps.ensure(id + ".bias", {b->ch}, InitKind::zeros);
    ps.ensure(id + ".running_mean", {b->ch}, InitKind::zeros, 0, false);
    ps.ensure(id + ".running_var", {b->ch}, InitKind::ones, 0, false);
  } else if (const auto* p = std::get_if<PreluSpec>(&spec)) {
    ps.ensure(id + ".weight", {p->ch}, InitKind::prelu_slope);
  } else if (const auto* d = std::get_if<DenseSpec>(&spec)) {
    ps.ensure(id + ".weight", {d->out, d->in}, InitKind::he_uniform, d->in);
    if (d->bias) ps.ensure(id + ".bias", {d->out}, InitKind::zeros);
  } else if (const auto* gd = std::get_if<GdnSpec>(&spec)) {
    ps.ensure(id + ".beta_raw", {gd->ch}, InitKind::gdn_beta);
    ps.ensure(id + ".gamma_raw", {gd->ch, gd->ch}, InitKind::gdn_gamma);
  } else if (const auto* ig = std::get_if<IgdnSpec>(&spec)) {
    ps.ensure(id + ".beta_raw", {ig->ch}, InitKind::gdn_beta);
    ps.ensure(id + ".gamma_raw", {ig->ch, ig->ch}, InitKind::gdn_gamma);
  }
}

template <class S>
std::vector<int> unit_out_shape(const ResidualUnit& u, ParamStore<S>* ps, std::vector<int> s) {
  std::vector<int> m = s;
  for (const auto& n : u.main) {
    m = infer_shape(n.spec, m);
    if (ps) touch_params(n.spec, n.id, *ps);
  }
  if (ps)
    for (std::vector<int> se_s = m; const auto& n : u.se) {
      se_s = infer_shape(n.spec, se_s);
      touch_params(n.spec, n.id, *ps);
    }
  return m;
}

// Materializes every parameter a graph will use, without running data through
// it, by walking shapes. Returns the output shape.
template <class S>
std::vector<int> graph_init(const ModelGraph& g, ParamStore<S>& ps, std::vector<int> s) {
  for (const auto& seg : g.segments) {
    if (const auto* node = std::get_if<GraphNode>(&seg)) {
      touch_params(node->spec, node->id, ps);
      s = infer_shape(node->spec, s);
    } else {
      const auto& u = std::get<ResidualUnit>(seg);
      s = unit_out_shape(u, &ps, s);
    }
  }
  return s;
}

// One line per layer with input/output shapes; residual units get a header
// line describing the shortcut. Stable format used by golden tests.
inline std::string graph_manifest(const ModelGraph& g, std::vector<int> s) {
  std::ostringstream os;
  os << "role " << g.role << " input " << shape_str(s) << "\n";
  for (const auto& seg : g.segments) {
    if (const auto* node = std::get_if<GraphNode>(&seg)) {
      auto out = infer_shape(node->spec, s);
      os << node->id << " " << layer_kind(node->spec) << " " << shape_str(s) << " -> "
         << shape_str(out) << "\n";
      s = std::move(out);
    } else {
      const auto& u = std::get<ResidualUnit>(seg);
      os << u.id << " residual in_ch " << u.in_ch << " out_ch " << u.out_ch << " strided "
         << (u.strided ? 1 : 0) << (u.se.empty() ? "" : " se") << "\n";
      std::vector<int> m = s;
      for (const auto& n : u.main) {
        auto out = infer_shape(n.spec, m);
        os << "  " << n.id << " " << layer_kind(n.spec) << " " << shape_str(m) << " -> "
           << shape_str(out) << "\n";
        m = std::move(out);
      }
      for (std::vector<int> se_s = m; const auto& n : u.se) {
        auto out = infer_shape(n.spec, se_s);
        os << "  " << n.id << " " << layer_kind(n.spec) << " " << shape_str(se_s) << " -> "
           << shape_str(out) << "\n";
        se_s = std::move(out);
      }
      s = std::move(m);
    }
  }
  os << "output " << shape_str(s) << "\n";
  return os.str();
}

// Output shape of a graph for a given input shape, without touching params.
inline std::vector<int> graph_out_shape(const ModelGraph& g, std::vector<int> s) {
  for (const auto& seg : g.segments) {
    if (const auto* node = std::get_if<GraphNode>(&seg)) {
      s = infer_shape(node->spec, s);
    } else {
      const auto& u = std::get<ResidualUnit>(seg);
      for (const auto& n : u.main) s = infer_shape(n.spec, s);
    }
  }
  return s;
}

}  // namespace ewirp
