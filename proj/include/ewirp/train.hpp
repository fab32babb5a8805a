#pragma once

#include <filesystem>
#include <fstream>

#include "ewirp/checkpoint.hpp"
#include "ewirp/cifar.hpp"
#include "ewirp/pipeline.hpp"

namespace ewirp {

struct TrainingSchedule {
  std::string stage;  // backbone | codec | end2end
  double lr0 = 0.0;
  int epochs = 0;
  std::vector<int> milestones;  // divide lr by 10 from each milestone epoch on
  int batch_size = 0;
  double weight_decay = 0.0;
  double momentum = 0.9;
  std::vector<std::string> frozen_scopes;

  void validate() const {
    require(lr0 > 0 && epochs > 0 && batch_size > 0, "schedule needs positive lr, epochs, batch");
    require(weight_decay >= 0 && momentum >= 0, "negative regularization in schedule");
    for (size_t i = 0; i < milestones.size(); ++i) {
      require(milestones[i] > 0 && milestones[i] < epochs, "milestone ", milestones[i],
              " outside (0, ", epochs, ")");
      if (i) require(milestones[i] > milestones[i - 1], "milestones must be strictly increasing");
    }
  }
};

inline double lr_at_epoch(const TrainingSchedule& s, int epoch) {
  require(epoch >= 0 && epoch < s.epochs, "epoch ", epoch, " outside [0, ", s.epochs, ")");
  int passed = 0;
  for (int m : s.milestones)
    if (m <= epoch) ++passed;
  return s.lr0 * std::pow(10.0, -passed);
}

// The published recipes. Epoch counts and milestones scale down for smoke
// runs through config; these are the full-scale defaults.
inline TrainingSchedule backbone_schedule() {
  return {"backbone", 0.025, 300, {150, 225}, 32, 5e-4, 0.9, {}};
}
inline TrainingSchedule codec_schedule() {
  return {"codec", 0.01, 160, {80, 120}, 64, 5e-4, 0.9, {"stem.", "unit", "head."}};
}
inline TrainingSchedule end2end_schedule() {
  return {"end2end", 0.01, 160, {80, 120}, 64, 5e-4, 0.9, {}};
}

struct EpochMetrics {
  int epoch = 0;
  std::string stage;
  double lr = 0, loss = 0, top1 = 0, top5 = 0;
};

inline std::string metrics_csv_header() { return "epoch,stage,lr,loss,top1,top5\n"; }

inline std::string metrics_csv_row(const EpochMetrics& m) {
  std::ostringstream os;
  os << m.epoch << "," << m.stage << "," << m.lr << "," << m.loss << "," << m.top1 << "," << m.top5
     << "\n";
  return os.str();
}

struct StageContext {
  PyramidConfig pcfg;
  int split_index = 0;
  CodecConfig ccfg;
  ChannelConfig chan;
  const DataSplit* data = nullptr;
  Normalization norm{};
  bool augment = true;
  u64 seed = 0;
  i64 train_limit = 0;  // images per epoch, 0 = full set
  i64 eval_limit = 0;   // test images per evaluation, 0 = full set
  std::string out_dir;  // empty = no checkpoints/metrics written
  std::ostream* log = nullptr;
};

struct EvalResult {
  double top1 = 0, top5 = 0;
  i64 count = 0;
};

namespace detail {

inline void tally_topk(const Tensor<float>& logits, const std::vector<u16>& labels, i64& hit1,
                       i64& hit5) {
  const int c = logits.dim(1);
  for (int i = 0; i < logits.dim(0); ++i) {
    const float* row = logits.data() + static_cast<i64>(i) * c;
    if (in_topk(row, c, labels[i], 1)) ++hit1;
    if (in_topk(row, c, labels[i], std::min(5, c))) ++hit5;
  }
}

}  // namespace detail

// Accuracy of the unsplit backbone, no channel (stage-backbone evaluation).
inline EvalResult evaluate_full(const ModelGraph& full, ParamStore<float>& ps, const Dataset& test,
                                const Normalization& norm, i64 limit, int batch_size) {
  const Mode keep = ps.mode;
  ps.mode = Mode::eval;
  const i64 n = limit > 0 ? std::min<i64>(limit, test.size()) : test.size();
  std::vector<i64> idx(n);
  for (i64 i = 0; i < n; ++i) idx[i] = i;
  i64 hit1 = 0, hit5 = 0;
  for (i64 first = 0; first < n; first += batch_size) {
    const i64 cnt = std::min<i64>(batch_size, n - first);
    Batch b = make_batch(test, idx, first, cnt, norm, false, 0, 0);
    const Tensor<float> logits = graph_forward(full, ps, b.images, static_cast<Tape<float>*>(nullptr));
    detail::tally_topk(logits, b.labels, hit1, hit5);
  }
  ps.mode = keep;
  return {static_cast<double>(hit1) / n, static_cast<double>(hit5) / n, n};
}

// Accuracy through codec and channel at the configured SNR; channel draws are
// derived from (stream_base, sample index) so repeated runs are identical.
inline EvalResult evaluate_pipeline(const SplitPipeline& pl, ParamStore<float>& ps,
                                    const Dataset& test, const Normalization& norm, i64 limit,
                                    int batch_size, u64 stream_base) {
  const Mode keep = ps.mode;
  ps.mode = Mode::eval;
  const i64 n = limit > 0 ? std::min<i64>(limit, test.size()) : test.size();
  std::vector<i64> idx(n);
  for (i64 i = 0; i < n; ++i) idx[i] = i;
  i64 hit1 = 0, hit5 = 0;
  for (i64 first = 0; first < n; first += batch_size) {
    const i64 cnt = std::min<i64>(batch_size, n - first);
    Batch b = make_batch(test, idx, first, cnt, norm, false, 0, 0);
    std::vector<u64> streams(cnt);
    for (i64 i = 0; i < cnt; ++i) streams[i] = mix_streams(stream_base, static_cast<u64>(first + i));
    const Tensor<float> logits = pipeline_forward(pl, ps, b.images, streams, nullptr);
    detail::tally_topk(logits, b.labels, hit1, hit5);
  }
  ps.mode = keep;
  return {static_cast<double>(hit1) / n, static_cast<double>(hit5) / n, n};
}

// Top-k accuracy for one k; the wire server and sweeps reuse the helpers.
inline double evaluate_topk(const SplitPipeline& pl, ParamStore<float>& ps, const Dataset& test,
                            const Normalization& norm, int k, i64 limit, int batch_size,
                            u64 stream_base) {
  require(k >= 1, "k must be at least 1, got ", k);
  require(k <= test.num_classes, "k = ", k, " exceeds class count ", test.num_classes);
  const Mode keep = ps.mode;
  ps.mode = Mode::eval;
  const i64 n = limit > 0 ? std::min<i64>(limit, test.size()) : test.size();
  std::vector<i64> idx(n);
  for (i64 i = 0; i < n; ++i) idx[i] = i;
  i64 hits = 0;
  for (i64 first = 0; first < n; first += batch_size) {
    const i64 cnt = std::min<i64>(batch_size, n - first);
    Batch b = make_batch(test, idx, first, cnt, norm, false, 0, 0);
    std::vector<u64> streams(cnt);
    for (i64 i = 0; i < cnt; ++i) streams[i] = mix_streams(stream_base, static_cast<u64>(first + i));
    const Tensor<float> logits = pipeline_forward(pl, ps, b.images, streams, nullptr);
    for (int i = 0; i < logits.dim(0); ++i)
      if (in_topk(logits.data() + static_cast<i64>(i) * logits.dim(1), logits.dim(1), b.labels[i],
                  k))
        ++hits;
  }
  ps.mode = keep;
  return static_cast<double>(hits) / n;
}

// One training stage. Builds the graphs from the context, trains per the
// schedule, evaluates each epoch, appends metrics, and writes the stage
// checkpoint. Backbone stage bypasses codec and channel entirely.
inline std::vector<EpochMetrics> run_stage(const TrainingSchedule& sched, const StageContext& ctx,
                                           ParamStore<float>& ps) {
  sched.validate();
  require(ctx.data != nullptr, "run_stage needs a dataset");
  const ModelGraph full = build_model(ctx.pcfg);
  const SplitResult split = split_model(ctx.pcfg, full, ctx.split_index);
  const ModelGraph enc = build_encoder(ctx.ccfg);
  const ModelGraph dec = build_decoder(ctx.ccfg);
  graph_init(full, ps, {1, 3, ctx.pcfg.input_hw, ctx.pcfg.input_hw});
  graph_init(enc, ps, {1, ctx.ccfg.split_channels, ctx.ccfg.split_h, ctx.ccfg.split_w});
  graph_init(dec, ps, {1, ctx.ccfg.enc_channels(), ctx.ccfg.split_h / 4, ctx.ccfg.split_w / 4});

  const bool through_channel = sched.stage != "backbone";
  SplitPipeline pl{&split.front, &split.rest, &enc, &dec, ctx.chan, ctx.ccfg.bandwidth};

  ps.frozen_prefixes = sched.frozen_scopes;
  const bool front_trainable = !ps.is_frozen("stem.conv");
  const u64 chan_tag = stream_tag(("train.channel." + sched.stage).c_str());
  const u64 eval_tag = stream_tag(("eval.channel." + sched.stage).c_str());

  const Dataset& train = ctx.data->train;
  const i64 epoch_images = ctx.train_limit > 0 ? std::min(ctx.train_limit, train.size())
                                               : train.size();
  std::vector<EpochMetrics> out;
  std::ofstream metrics;
  if (!ctx.out_dir.empty()) {
    std::filesystem::create_directories(ctx.out_dir);
    const std::string path = ctx.out_dir + "/metrics.csv";
    const bool fresh = !std::filesystem::exists(path);
    metrics.open(path, std::ios::app);
    require(metrics.good(), "cannot open ", path);
    if (fresh) metrics << metrics_csv_header();
  }

  for (int epoch = 0; epoch < sched.epochs; ++epoch) {
    const double lr = lr_at_epoch(sched, epoch);
    ps.mode = Mode::train;
    const std::vector<i64> perm = epoch_permutation(train.size(), ctx.seed, epoch);
    double loss_sum = 0.0;
    i64 batches = 0;
    for (i64 first = 0; first < epoch_images; first += sched.batch_size) {
      const i64 cnt = std::min<i64>(sched.batch_size, epoch_images - first);
      if (cnt < 2) break;  // batch statistics need at least two samples
      Batch b = make_batch(train, perm, first, cnt, ctx.norm, ctx.augment, ctx.seed, epoch);
      Tensor<float> logits;
      Tape<float> tape;
      PipelineTrace tr;
      if (through_channel) {
        std::vector<u64> streams(cnt);
        for (i64 i = 0; i < cnt; ++i)
          streams[i] = mix_streams(chan_tag, static_cast<u64>(epoch),
                                   static_cast<u64>(perm[first + i]));
        logits = pipeline_forward(pl, ps, b.images, streams, &tr);
      } else {
        logits = graph_forward(full, ps, b.images, &tape);
      }
      Tensor<float> dlogits;
      const double loss = cross_entropy(logits, b.labels, &dlogits);
      require(std::isfinite(loss), "non-finite loss in stage ", sched.stage, " epoch ", epoch,
              " batch ", batches);
      if (through_channel)
        pipeline_backward(pl, ps, tr, dlogits, front_trainable);
      else
        graph_backward(full, ps, tape, dlogits);
      sgd_step(ps, lr, sched.weight_decay, sched.momentum);
      loss_sum += loss;
      ++batches;
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.stage = sched.stage;
    m.lr = lr;
    m.loss = batches ? loss_sum / batches : 0.0;
    EvalResult ev =
        through_channel
            ? evaluate_pipeline(pl, ps, ctx.data->test, ctx.norm, ctx.eval_limit, sched.batch_size,
                                mix_streams(eval_tag, static_cast<u64>(epoch)))
            : evaluate_full(full, ps, ctx.data->test, ctx.norm, ctx.eval_limit, sched.batch_size);
    m.top1 = ev.top1;
    m.top5 = ev.top5;
    out.push_back(m);
    if (metrics.is_open()) {
      metrics << metrics_csv_row(m);
      metrics.flush();
    }
    if (ctx.log)
      *ctx.log << "stage " << m.stage << " epoch " << m.epoch << " lr " << m.lr << " loss "
               << m.loss << " top1 " << m.top1 << " top5 " << m.top5 << std::endl;
  }
  ps.mode = Mode::eval;
  if (!ctx.out_dir.empty())
    save_checkpoint(ctx.out_dir + "/checkpoint_" + sched.stage + ".ckpt", ps);
  return out;
}

}  // namespace ewirp
