#pragma once

#include "ewirp/graph.hpp"

namespace ewirp {

struct MacRow {
  std::string name;
  std::vector<int> out_shape;
  i64 macs = 0;
  i64 params = 0;
};

struct MacReport {
  std::vector<MacRow> rows;
  i64 total_macs = 0;
  i64 total_params = 0;
  std::string convention = "conv/dense as MACs, norm and act as one op per element";

  void add(std::string name, std::vector<int> out_shape, i64 macs, i64 params) {
    require(macs >= 0 && params >= 0, "negative count for ", name);
    total_macs += macs;
    total_params += params;
    rows.push_back({std::move(name), std::move(out_shape), macs, params});
  }
  void append(const MacReport& other) {
    for (const auto& r : other.rows) add(r.name, r.out_shape, r.macs, r.params);
  }

  std::string to_csv() const {
    std::ostringstream os;
    os << "layer,out_shape,macs,params\n";
    for (const auto& r : rows) {
      os << r.name << ",";
      for (size_t i = 0; i < r.out_shape.size(); ++i)
        os << (i ? "x" : "") << r.out_shape[i];
      os << "," << r.macs << "," << r.params << "\n";
    }
    os << "total,," << total_macs << "," << total_params << "\n";
    return os.str();
  }
};

namespace detail {

inline i64 elems(const std::vector<int>& s) {
  i64 n = 1;
  for (int d : s) n *= d;
  return n;
}

}  // namespace detail

// MACs and trainable parameter count of one layer. Shapes must be resolved;
// counts are per the convention tag above.
inline std::pair<i64, i64> count_layer(const LayerSpec& spec, const std::vector<int>& out_shape) {
  require(!out_shape.empty(), "count_layer needs a resolved output shape");
  for (int d : out_shape) require(d > 0, "unresolved output shape ", shape_str(out_shape));
  const i64 out_elems = detail::elems(out_shape);
  if (const auto* c = std::get_if<Conv2dSpec>(&spec)) {
    const i64 hw = static_cast<i64>(out_shape[2]) * out_shape[3];
    const i64 win = static_cast<i64>(c->kernel) * c->kernel * c->in_ch;
    i64 macs = win * c->out_ch * hw;
    i64 params = win * c->out_ch;
    if (c->bias) {
      macs += static_cast<i64>(c->out_ch) * hw;
      params += c->out_ch;
    }
    return {macs, params};
  }
  if (const auto* t = std::get_if<TransConv2dSpec>(&spec)) {
    const i64 hw = static_cast<i64>(out_shape[2]) * out_shape[3];
    const i64 win = static_cast<i64>(t->kernel) * t->kernel * t->in_ch;
    i64 macs = win * t->out_ch * hw;
    i64 params = win * t->out_ch;
    if (t->bias) {
      macs += static_cast<i64>(t->out_ch) * hw;
      params += t->out_ch;
    }
    return {macs, params};
  }
  if (const auto* b = std::get_if<BatchNormSpec>(&spec)) return {2 * out_elems, 2 * b->ch};
  if (std::get_if<ReluSpec>(&spec)) return {out_elems, 0};
  if (const auto* p = std::get_if<PreluSpec>(&spec)) return {out_elems, p->ch};
  if (std::get_if<SigmoidSpec>(&spec)) return {out_elems, 0};
  if (std::get_if<GlobalAvgPoolSpec>(&spec)) return {out_elems, 0};
  if (std::get_if<AvgPoolSpec>(&spec)) return {out_elems, 0};
  if (std::get_if<UpsampleNearestSpec>(&spec)) return {out_elems, 0};
  if (const auto* d = std::get_if<DenseSpec>(&spec)) {
    const i64 m = static_cast<i64>(d->in) * d->out + (d->bias ? d->out : 0);
    return {m, m};
  }
  const GdnSpec* g = std::get_if<GdnSpec>(&spec);
  const IgdnSpec* ig = std::get_if<IgdnSpec>(&spec);
  if (g || ig) {
    const i64 c = g ? g->ch : ig->ch;
    const i64 hw = static_cast<i64>(out_shape[2]) * out_shape[3];
    return {c * c * hw + 2 * c * hw, c + c * c};
  }
  throw std::logic_error("unhandled layer variant in count_layer");
}

// Walks a graph and reports every layer, plus the SE gate multiply and the
// shortcut pooling of strided residual units. Residual additions are free.
inline MacReport count_graph(const ModelGraph& g, std::vector<int> s) {
  MacReport rep;
  for (const auto& seg : g.segments) {
    if (const auto* node = std::get_if<GraphNode>(&seg)) {
      auto out = infer_shape(node->spec, s);
      auto [m, p] = count_layer(node->spec, out);
      rep.add(node->id, out, m, p);
      s = std::move(out);
    } else {
      const auto& u = std::get<ResidualUnit>(seg);
      const std::vector<int> unit_in = s;
      std::vector<int> m = s;
      for (const auto& n : u.main) {
        auto out = infer_shape(n.spec, m);
        auto [mm, pp] = count_layer(n.spec, out);
        rep.add(n.id, out, mm, pp);
        m = std::move(out);
      }
      for (std::vector<int> se_s = m; const auto& n : u.se) {
        auto out = infer_shape(n.spec, se_s);
        auto [mm, pp] = count_layer(n.spec, out);
        rep.add(n.id, out, mm, pp);
        se_s = std::move(out);
      }
      if (!u.se.empty()) rep.add(u.id + ".se_scale", m, detail::elems(m), 0);
      if (u.strided) {
        std::vector<int> pooled = {unit_in[0], unit_in[1], unit_in[2] / 2, unit_in[3] / 2};
        rep.add(u.id + ".shortcut_pool", pooled, detail::elems(pooled), 0);
      }
      s = std::move(m);
    }
  }
  return rep;
}

// On-device cost: device half of the backbone plus the encoder.
inline MacReport count_ondevice(const ModelGraph& front, const ModelGraph& encoder,
                                const std::vector<int>& in_shape) {
  MacReport rep = count_graph(front, in_shape);
  const std::vector<int> mid = graph_out_shape(front, in_shape);
  MacReport enc = count_graph(encoder, mid);
  rep.append(enc);
  return rep;
}

}  // namespace ewirp
