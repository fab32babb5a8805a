#include "ewirp/config.hpp"

#include <gtest/gtest.h>

#include <sstream>

#include <unistd.h>

#include "ewirp/sweep.hpp"

using namespace ewirp;

namespace {

std::map<std::string, std::string> parse(const std::string& text) {
  std::istringstream in(text);
  return parse_kv(in);
}

ExperimentConfig toy_base() {
  ExperimentConfig c;
  c.pcfg.R = 3;
  c.pcfg.omega = 9.0;
  c.pcfg.num_classes = 4;
  c.split = 2;
  c.bandwidth = 16;
  c.chan.kind = ChannelKind::awgn;
  c.chan.snr_db = 20.0;
  c.chan.seed = 9;
  c.data_variant = "cifar10";
  c.augment = false;
  c.seed = 11;
  c.eval_limit = 8;
  c.out_dir = "/tmp/ewirp_cfg_" + std::to_string(getpid());
  return c;
}

DataSplit toy_data(int classes, i64 train_n, i64 test_n) {
  DataSplit ds;
  RngStream rng(77, 0);
  auto fill = [&](Dataset& d, i64 n) {
    d.num_classes = classes;
    d.pixels.resize(n * kImageBytes);
    d.labels.resize(n);
    for (i64 i = 0; i < n; ++i) {
      const int lab = static_cast<int>(i % classes);
      d.labels[i] = static_cast<u16>(lab);
      for (int c = 0; c < 3; ++c)
        for (int p = 0; p < 1024; ++p) {
          const double v = 40.0 + 45.0 * lab + 25.0 * c + rng.normal() * 6.0;
          d.pixels[i * kImageBytes + c * 1024 + p] =
              static_cast<u8>(std::clamp(v, 0.0, 255.0));
        }
    }
  };
  fill(ds.train, train_n);
  fill(ds.test, test_n);
  return ds;
}

}  // namespace

TEST(ParseKv, CommentsBlanksAndWhitespace) {
  const auto kv = parse(
      "# full line comment\n"
      "\n"
      "  model.r = 54  # trailing comment\n"
      "\tout.dir=runs/x\n"
      "   \t  \n");
  ASSERT_EQ(kv.size(), 2u);
  EXPECT_EQ(kv.at("model.r"), "54");
  EXPECT_EQ(kv.at("out.dir"), "runs/x");
}

TEST(ParseKv, MalformedLinesRejected) {
  EXPECT_THROW(parse("model.r 54\n"), std::invalid_argument);
  EXPECT_THROW(parse("= 54\n"), std::invalid_argument);
  try {
    parse("a = 1\nb = 2\na = 3\n");
    FAIL() << "duplicate key accepted";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("duplicate"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("'a'"), std::string::npos);
  }
}

TEST(Config, DefaultsMatchPublishedRecipes) {
  const ExperimentConfig c = config_from_map({});
  EXPECT_EQ(c.pcfg.R, 54);
  EXPECT_DOUBLE_EQ(c.pcfg.omega, 120.0);
  EXPECT_EQ(c.pcfg.num_classes, 100);
  EXPECT_EQ(c.split, 45);
  EXPECT_EQ(c.bandwidth, 128);
  EXPECT_DOUBLE_EQ(c.power, 1.0);
  EXPECT_EQ(c.chan.kind, ChannelKind::rayleigh);
  EXPECT_DOUBLE_EQ(c.chan.snr_db, 15.0);
  EXPECT_EQ(c.data_variant, "cifar100");
  EXPECT_TRUE(c.augment);
  EXPECT_DOUBLE_EQ(c.stage_backbone.lr0, 0.025);
  EXPECT_EQ(c.stage_codec.epochs, 160);
  EXPECT_EQ(c.stage_end2end.milestones, (std::vector<int>{80, 120}));
  const CodecConfig cc = c.codec_config();
  EXPECT_EQ(cc.split_channels, 460);
  EXPECT_EQ(cc.split_h, 8);
  EXPECT_EQ(cc.enc_channels(), 64);
}

TEST(Config, KeysOverrideEveryField) {
  const ExperimentConfig c = config_from_map(parse(
      "model.r = 9\n"
      "model.omega = 24\n"
      "model.classes = 10\n"
      "model.split = 7\n"
      "codec.bandwidth = 64\n"
      "codec.power = 2.5\n"
      "channel.kind = awgn\n"
      "channel.snr_db = 5\n"
      "channel.sigma_h2 = 2\n"
      "channel.seed = 77\n"
      "data.variant = cifar10\n"
      "data.root = /tmp/nowhere\n"
      "data.augment = false\n"
      "data.synthetic_fallback = yes\n"
      "train.seed = 13\n"
      "train.limit = 4000\n"
      "eval.limit = 500\n"
      "out.dir = /tmp/run\n"
      "stage.backbone.lr = 0.05\n"
      "stage.backbone.epochs = 12\n"
      "stage.backbone.milestones = 6,9\n"
      "stage.codec.batch = 16\n"
      "stage.end2end.momentum = 0.8\n"));
  EXPECT_EQ(c.pcfg.R, 9);
  EXPECT_DOUBLE_EQ(c.pcfg.omega, 24.0);
  EXPECT_EQ(c.split, 7);
  EXPECT_EQ(c.bandwidth, 64);
  EXPECT_DOUBLE_EQ(c.power, 2.5);
  EXPECT_DOUBLE_EQ(c.chan.P, 2.5);
  EXPECT_EQ(c.chan.kind, ChannelKind::awgn);
  EXPECT_DOUBLE_EQ(c.chan.sigma_h2, 2.0);
  EXPECT_EQ(c.chan.seed, 77u);
  EXPECT_EQ(c.data_variant, "cifar10");
  EXPECT_FALSE(c.augment);
  EXPECT_TRUE(c.synthetic_fallback);
  EXPECT_EQ(c.seed, 13u);
  EXPECT_EQ(c.train_limit, 4000);
  EXPECT_EQ(c.eval_limit, 500);
  EXPECT_DOUBLE_EQ(c.stage_backbone.lr0, 0.05);
  EXPECT_EQ(c.stage_backbone.epochs, 12);
  EXPECT_EQ(c.stage_backbone.milestones, (std::vector<int>{6, 9}));
  EXPECT_EQ(c.stage_codec.batch_size, 16);
  EXPECT_DOUBLE_EQ(c.stage_end2end.momentum, 0.8);
}

TEST(Config, AllViolationsReportedTogether) {
  try {
    config_from_map(parse(
        "model.r = 52\n"
        "codec.power = 0\n"
        "stage.backbone.milestones = 300,150\n"
        "eval.limit = -5\n"
        "mdoel.r = 54\n"));
    FAIL() << "invalid config accepted";
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    EXPECT_EQ(msg.rfind("invalid config:", 0), 0u) << msg;
    EXPECT_NE(msg.find("model:"), std::string::npos) << msg;
    EXPECT_NE(msg.find("codec.power:"), std::string::npos) << msg;
    EXPECT_NE(msg.find("stage.backbone:"), std::string::npos) << msg;
    EXPECT_NE(msg.find("limits:"), std::string::npos) << msg;
    EXPECT_NE(msg.find("unknown config key 'mdoel.r'"), std::string::npos) << msg;
  }
}

TEST(Config, ValueParseErrorsNameTheKey) {
  try {
    config_from_map(parse(
        "model.r = fifty\n"
        "data.augment = maybe\n"
        "data.variant = imagenet\n"));
    FAIL() << "unparseable values accepted";
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("model.r:"), std::string::npos) << msg;
    EXPECT_NE(msg.find("data.augment: expected boolean"), std::string::npos) << msg;
    EXPECT_NE(msg.find("data.variant:"), std::string::npos) << msg;
  }
}

TEST(Config, CodecCheckedOnlyWhenRestIsSound) {
  try {
    config_from_map(parse("codec.bandwidth = 1\n"));
    FAIL() << "inadmissible bandwidth accepted";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("admissible"), std::string::npos);
  }
  try {
    config_from_map(parse("model.r = 52\ncodec.bandwidth = 1\n"));
    FAIL() << "invalid model accepted";
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("model:"), std::string::npos);
    EXPECT_EQ(msg.find("admissible"), std::string::npos) << msg;
  }
}

TEST(Config, MissingFileReported) {
  EXPECT_THROW(load_config("/tmp/no_such_ewirp_config.cfg"), std::invalid_argument);
}

TEST(Config, ScheduleLookupAndStageContext) {
  const ExperimentConfig c = toy_base();
  EXPECT_EQ(&c.schedule("backbone"), &c.stage_backbone);
  EXPECT_EQ(&c.schedule("codec"), &c.stage_codec);
  EXPECT_EQ(&c.schedule("end2end"), &c.stage_end2end);
  EXPECT_THROW(c.schedule("warmup"), std::invalid_argument);

  const DataSplit ds = toy_data(4, 8, 8);
  const StageContext ctx = c.stage_context(&ds);
  EXPECT_EQ(ctx.data, &ds);
  EXPECT_EQ(ctx.split_index, 2);
  EXPECT_EQ(ctx.ccfg.split_channels, 84);
  EXPECT_EQ(ctx.ccfg.split_h, 16);
  EXPECT_EQ(ctx.ccfg.bandwidth, 16);
  EXPECT_EQ(ctx.seed, 11u);
  EXPECT_FALSE(ctx.augment);
  EXPECT_EQ(ctx.out_dir, c.out_dir);
}

TEST(Manifest, SortedCompleteAndAFixpoint) {
  const ExperimentConfig c = config_from_map({});
  const std::string m = config_manifest(c);
  std::istringstream in(m);
  std::string line, prev;
  int lines = 0;
  while (std::getline(in, line)) {
    ++lines;
    const std::string key = line.substr(0, line.find(" = "));
    EXPECT_LT(prev, key) << "manifest out of order at " << key;
    prev = key;
  }
  EXPECT_EQ(lines, 36);
  EXPECT_NE(m.find("model.r = 54\n"), std::string::npos);
  EXPECT_NE(m.find("model.omega = 120\n"), std::string::npos);
  EXPECT_NE(m.find("stage.codec.milestones = 80,120\n"), std::string::npos);
  EXPECT_NE(m.find("channel.kind = rayleigh\n"), std::string::npos);
  EXPECT_NE(m.find("data.augment = 1\n"), std::string::npos);

  const ExperimentConfig back = config_from_map(parse(m));
  EXPECT_EQ(config_manifest(back), m);

  ExperimentConfig tweaked = toy_base();
  const std::string mt = config_manifest(tweaked);
  EXPECT_EQ(config_manifest(config_from_map(parse(mt))), mt);
}

TEST(Sweep, AxisNamesRoundtrip) {
  for (const SweepAxis a : {SweepAxis::snr, SweepAxis::bandwidth, SweepAxis::split})
    EXPECT_EQ(sweep_axis_from(to_string(a)), a);
  try {
    sweep_axis_from("channel");
    FAIL() << "bad axis accepted";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("snr|bandwidth|split"), std::string::npos);
  }
}

TEST(Sweep, DerivePointSetsAxisValueAndOutDir) {
  const ExperimentConfig base = toy_base();
  const ExperimentConfig s = derive_point(base, SweepAxis::snr, 7.5);
  EXPECT_DOUBLE_EQ(s.chan.snr_db, 7.5);
  EXPECT_EQ(s.out_dir, base.out_dir + "/snr-7.5");
  EXPECT_EQ(s.bandwidth, base.bandwidth);

  const ExperimentConfig b = derive_point(base, SweepAxis::bandwidth, 32.0);
  EXPECT_EQ(b.bandwidth, 32);
  EXPECT_EQ(b.out_dir, base.out_dir + "/bandwidth-32");

  const ExperimentConfig p = derive_point(base, SweepAxis::split, 3.0);
  EXPECT_EQ(p.split, 3);
}

TEST(Sweep, DerivePointRejectsBadValues) {
  const ExperimentConfig base = toy_base();
  EXPECT_THROW(derive_point(base, SweepAxis::bandwidth, 32.5), std::invalid_argument);
  EXPECT_THROW(derive_point(base, SweepAxis::bandwidth, 4.0), std::invalid_argument);
  EXPECT_THROW(derive_point(base, SweepAxis::split, 9.0), std::invalid_argument);
  EXPECT_THROW(derive_point(base, SweepAxis::split, 0.0), std::invalid_argument);
}

TEST(Sweep, CsvListsOnlySuccessfulPoints) {
  SweepResult r;
  r.axis = SweepAxis::bandwidth;
  SweepPoint a;
  a.value = 64;
  a.ok = true;
  a.top1 = 0.5;
  a.top5 = 0.9;
  a.gmacs = 1.25;
  a.ondevice_params = 1000;
  SweepPoint bad;
  bad.value = 3;
  bad.note = "inadmissible";
  r.points = {a, bad};
  EXPECT_EQ(sweep_csv(r), "bandwidth,top1,top5,gmacs,params\n64,0.5,0.9,1.25,1000\n");
}

TEST(Sweep, EvaluatesEachPointDeterministically) {
  const ExperimentConfig base = toy_base();
  const DataSplit ds = toy_data(4, 8, 16);
  std::ostringstream log;
  SweepOptions opts;
  opts.log = &log;
  const std::vector<double> values{5.0, 25.0};
  const SweepResult r1 = run_sweep(base, SweepAxis::snr, values, ds, opts);
  const SweepResult r2 = run_sweep(base, SweepAxis::snr, values, ds, opts);
  ASSERT_EQ(r1.points.size(), 2u);
  for (size_t i = 0; i < 2; ++i) {
    EXPECT_TRUE(r1.points[i].ok);
    EXPECT_DOUBLE_EQ(r1.points[i].top1, r2.points[i].top1);
    EXPECT_DOUBLE_EQ(r1.points[i].top5, r2.points[i].top5);
    EXPECT_GT(r1.points[i].gmacs, 0.0);
    EXPECT_GT(r1.points[i].ondevice_params, 0);
  }
  EXPECT_DOUBLE_EQ(r1.points[0].gmacs, r1.points[1].gmacs);
  EXPECT_NE(log.str().find("sweep: snr=5"), std::string::npos);

  const SweepResult rb =
      run_sweep(base, SweepAxis::bandwidth, {16.0, 4.0}, ds, opts);
  ASSERT_EQ(rb.points.size(), 2u);
  EXPECT_TRUE(rb.points[0].ok);
  EXPECT_FALSE(rb.points[1].ok);
  EXPECT_NE(rb.points[1].note.find("admissible"), std::string::npos);
  const std::string csv = sweep_csv(rb);
  EXPECT_EQ(csv.find("\n16,"), csv.find('\n'));
  EXPECT_EQ(csv.find("\n4,"), std::string::npos);
}
