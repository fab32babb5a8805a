#pragma once

#include <filesystem>

#include "ewirp/checkpoint.hpp"
#include "ewirp/config.hpp"
#include "ewirp/macs.hpp"

namespace ewirp {

enum class SweepAxis { snr, bandwidth, split };

inline std::string to_string(SweepAxis a) {
  switch (a) {
    case SweepAxis::snr: return "snr";
    case SweepAxis::bandwidth: return "bandwidth";
    case SweepAxis::split: return "split";
  }
  throw std::invalid_argument("bad sweep axis");
}

inline SweepAxis sweep_axis_from(const std::string& s) {
  if (s == "snr") return SweepAxis::snr;
  if (s == "bandwidth") return SweepAxis::bandwidth;
  if (s == "split") return SweepAxis::split;
  throw std::invalid_argument(cat("unknown sweep axis '", s, "', expected snr|bandwidth|split"));
}

struct SweepPoint {
  double value = 0;
  bool ok = false;
  std::string note;
  double top1 = 0, top5 = 0;
  double gmacs = 0;
  i64 ondevice_params = 0;
};

struct SweepResult {
  SweepAxis axis = SweepAxis::snr;
  std::vector<SweepPoint> points;
};

// Skipped points are reported by note, never emitted as rows.
inline std::string sweep_csv(const SweepResult& r) {
  std::string out = cat(to_string(r.axis), ",top1,top5,gmacs,params\n");
  for (const auto& p : r.points) {
    if (!p.ok) continue;
    std::ostringstream os;
    os << p.value << ',' << p.top1 << ',' << p.top5 << ',' << p.gmacs << ','
       << p.ondevice_params << '\n';
    out += os.str();
  }
  return out;
}

struct SweepOptions {
  // Stages run per point, in order; empty means evaluate with whatever the
  // init checkpoint provides (or fresh deterministic weights).
  std::vector<std::string> train_stages;
  std::string init_checkpoint;
  std::ostream* log = nullptr;
};

namespace detail {

inline int as_exact_int(double v, const char* what) {
  const int i = static_cast<int>(std::llround(v));
  require(std::abs(v - i) < 1e-9, what, " value ", v, " is not an integer");
  return i;
}

}  // namespace detail

inline ExperimentConfig derive_point(const ExperimentConfig& base, SweepAxis axis, double value) {
  ExperimentConfig c = base;
  switch (axis) {
    case SweepAxis::snr: c.chan.snr_db = value; break;
    case SweepAxis::bandwidth: c.bandwidth = detail::as_exact_int(value, "bandwidth"); break;
    case SweepAxis::split: c.split = detail::as_exact_int(value, "split"); break;
  }
  std::ostringstream tag;
  tag << to_string(axis) << '-' << value;
  c.out_dir = base.out_dir + "/" + tag.str();
  c.pcfg.validate();
  require(c.split >= 1 && c.split <= c.pcfg.R, "split ", c.split, " outside [1, ", c.pcfg.R, "]");
  c.chan.validate();
  c.codec_config().validate();
  return c;
}

// One row per value. Each point owns a disjoint seed stream and output
// subdirectory; invalid derived configs are skipped and reported.
inline SweepResult run_sweep(const ExperimentConfig& base, SweepAxis axis,
                             const std::vector<double>& values, const DataSplit& data,
                             const SweepOptions& opts = {}) {
  require(!values.empty(), "sweep needs at least one value");
  SweepResult result;
  result.axis = axis;
  for (size_t i = 0; i < values.size(); ++i) {
    SweepPoint pt;
    pt.value = values[i];
    ExperimentConfig cfg;
    try {
      cfg = derive_point(base, axis, values[i]);
    } catch (const std::exception& e) {
      pt.note = e.what();
      if (opts.log) *opts.log << "sweep: skipping " << to_string(axis) << '=' << values[i]
                              << ": " << pt.note << '\n';
      result.points.push_back(std::move(pt));
      continue;
    }
    const u64 pseed = mix_streams(stream_tag("sweep.point"), base.seed, static_cast<u64>(i));
    cfg.seed = pseed;
    cfg.chan.seed = mix_streams(base.chan.seed, static_cast<u64>(i));

    const ModelGraph full = build_model(cfg.pcfg);
    const SplitResult split = split_model(cfg.pcfg, full, cfg.split);
    const CodecConfig ccfg = cfg.codec_config();
    const ModelGraph enc = build_encoder(ccfg);
    const ModelGraph dec = build_decoder(ccfg);
    ParamStore<float> ps;
    ps.init_seed = pseed;
    ps.mode = Mode::eval;
    graph_init(full, ps, {1, 3, cfg.pcfg.input_hw, cfg.pcfg.input_hw});
    graph_init(enc, ps, {1, ccfg.split_channels, ccfg.split_h, ccfg.split_w});
    graph_init(dec, ps, {1, ccfg.enc_channels(), ccfg.split_h / 4, ccfg.split_w / 4});
    if (!opts.init_checkpoint.empty()) load_checkpoint(opts.init_checkpoint, ps, false);

    if (!opts.train_stages.empty()) {
      std::filesystem::create_directories(cfg.out_dir);
      StageContext ctx = cfg.stage_context(&data);
      ctx.log = opts.log;
      for (const auto& stage : opts.train_stages) run_stage(cfg.schedule(stage), ctx, ps);
    }

    SplitPipeline pl{&split.front, &split.rest, &enc, &dec, cfg.chan, ccfg.bandwidth};
    const u64 stream_base = mix_streams(stream_tag("eval.channel.sweep"), pseed);
    const EvalResult ev = evaluate_pipeline(pl, ps, data.test, cfg.normalization(),
                                            cfg.eval_limit, cfg.stage_end2end.batch_size,
                                            stream_base);
    const MacReport ondev =
        count_ondevice(split.front, enc, {1, 3, cfg.pcfg.input_hw, cfg.pcfg.input_hw});
    pt.ok = true;
    pt.top1 = ev.top1;
    pt.top5 = ev.top5;
    pt.gmacs = static_cast<double>(ondev.total_macs) / 1e9;
    pt.ondevice_params = ondev.total_params;
    if (opts.log) *opts.log << "sweep: " << to_string(axis) << '=' << values[i] << " top1 "
                            << pt.top1 << " top5 " << pt.top5 << " gmacs " << pt.gmacs << '\n';
    result.points.push_back(std::move(pt));
  }
  return result;
}

}  // namespace ewirp
