#pragma once

#include <algorithm>
#include <cmath>

#include "ewirp/graph.hpp"

namespace ewirp {

struct GradDiff {
  double max_rel = 0.0;
  double max_abs = 0.0;
  i64 worst_index = -1;
  i64 checked = 0;
};

// Central-difference check of analytic gradients against a scalar loss.
// `loss` must re-evaluate the full computation from the current values.
// Relative error uses max(|analytic|, |numeric|, floor) as denominator.
template <class LossFn>
GradDiff fd_check(double* vals, i64 n, const double* analytic, LossFn&& loss, double h = 1e-5,
                  double floor = 1e-6) {
  GradDiff gd;
  for (i64 i = 0; i < n; ++i) {
    const double keep = vals[i];
    vals[i] = keep + h;
    const double lp = loss();
    vals[i] = keep - h;
    const double lm = loss();
    vals[i] = keep;
    const double num = (lp - lm) / (2.0 * h);
    const double abs_err = std::abs(num - analytic[i]);
    const double rel = abs_err / std::max({std::abs(num), std::abs(analytic[i]), floor});
    if (rel > gd.max_rel) {
      gd.max_rel = rel;
      gd.worst_index = i;
    }
    gd.max_abs = std::max(gd.max_abs, abs_err);
    ++gd.checked;
  }
  return gd;
}

struct GradCheckReport {
  bool pass = false;
  double max_rel = 0.0;
  std::string worst;
  i64 checked = 0;
  std::string note;
};

namespace detail {

template <class S>
std::map<std::string, Tensor<S>> stash_stats(const ParamStore<S>& ps) {
  std::map<std::string, Tensor<S>> out;
  for (const auto& [name, p] : ps.params)
    if (!p.trainable) out.emplace(name, p.value);
  return out;
}

template <class S>
void unstash_stats(ParamStore<S>& ps, const std::map<std::string, Tensor<S>>& stash) {
  for (const auto& [name, t] : stash) ps.params.at(name).value = t;
}

}  // namespace detail

// Compares every trainable parameter gradient and the input gradient of a
// scalar probe loss (a fixed pseudorandom weighting of the outputs) against
// central finite differences. Running statistics are restored around each
// evaluation so the loss is a pure function. A failure once triggers a small
// input shift and a full retry, which steps off kinks such as ReLU at zero.
template <class S>
GradCheckReport gradient_check(const ModelGraph& g, ParamStore<S>& ps, Tensor<S> input,
                               double tol, double fd_h = 1e-5) {
  static_assert(std::is_same_v<S, double>, "finite differences need double precision");
  graph_init(g, ps, input.shape);
  const auto frozen_keep = ps.frozen_prefixes;
  ps.frozen_prefixes.clear();

  std::vector<std::string> names;
  i64 total = input.numel();
  for (const auto& [name, p] : ps.params)
    if (p.trainable) {
      names.push_back(name);
      total += p.value.numel();
    }
  require(total <= 10000, "too many coordinates for finite differences: ", total);

  const auto stats = detail::stash_stats(ps);
  std::vector<double> w;
  auto loss_of = [&]() {
    detail::unstash_stats(ps, stats);
    Tensor<S> y = graph_forward(g, ps, input, static_cast<Tape<S>*>(nullptr));
    if (w.empty()) {
      RngStream ws(stream_tag("gradcheck.loss"), static_cast<u64>(y.numel()));
      w.resize(static_cast<size_t>(y.numel()));
      for (auto& x : w) x = ws.uniform(-1.0, 1.0);
    }
    double L = 0;
    for (i64 i = 0; i < y.numel(); ++i) L += w[static_cast<size_t>(i)] * double(y.v[i]);
    return L;
  };

  auto attempt = [&]() {
    detail::unstash_stats(ps, stats);
    ps.zero_grads();
    Tape<S> tape;
    Tensor<S> y = graph_forward(g, ps, input, &tape);
    if (w.empty()) {
      RngStream ws(stream_tag("gradcheck.loss"), static_cast<u64>(y.numel()));
      w.resize(static_cast<size_t>(y.numel()));
      for (auto& x : w) x = ws.uniform(-1.0, 1.0);
    }
    Tensor<S> dy(y.shape);
    for (i64 i = 0; i < y.numel(); ++i) dy.v[i] = S(w[static_cast<size_t>(i)]);
    const Tensor<S> dx = graph_backward(g, ps, tape, dy);

    GradCheckReport rep;
    rep.pass = true;
    auto scan = [&](S* vals, const S* analytic, i64 n, const std::string& label) {
      for (i64 i = 0; i < n; ++i) {
        const S keep = vals[i];
        const double h = fd_h * std::max(1.0, std::abs(double(keep)));
        vals[i] = keep + S(h);
        const double lp = loss_of();
        vals[i] = keep - S(h);
        const double lm = loss_of();
        vals[i] = keep;
        const double num = (lp - lm) / (2.0 * h);
        const double ana = double(analytic[i]);
        const double rel =
            std::abs(num - ana) / std::max({std::abs(num), std::abs(ana), 1e-6});
        if (rel > rep.max_rel) {
          rep.max_rel = rel;
          rep.worst = cat(label, "[", i, "]");
        }
        ++rep.checked;
      }
    };
    scan(input.v.data(), dx.v.data(), input.numel(), "input");
    for (const auto& name : names) {
      auto& p = ps.params.at(name);
      scan(p.value.v.data(), p.grad.v.data(), p.value.numel(), name);
    }
    rep.pass = rep.max_rel <= tol;
    return rep;
  };

  GradCheckReport rep = attempt();
  if (!rep.pass) {
    RngStream jitter(stream_tag("gradcheck.retry"), input.numel());
    for (auto& x : input.v) x += S(jitter.uniform(1e-3, 2e-3));
    w.clear();
    rep = attempt();
    rep.note = "retried after shifting the input";
  }
  detail::unstash_stats(ps, stats);
  ps.zero_grads();
  ps.frozen_prefixes = frozen_keep;
  return rep;
}

}  // namespace ewirp
