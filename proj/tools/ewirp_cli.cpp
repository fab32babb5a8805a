#include <csignal>
#include <filesystem>
#include <iostream>
#include <thread>

#include "CLI11.hpp"
#include "ewirp/config.hpp"
#include "ewirp/gradcheck.hpp"
#include "ewirp/net.hpp"
#include "ewirp/sweep.hpp"

namespace fs = std::filesystem;
using namespace ewirp;

namespace {

std::string resolve_data_root(const ExperimentConfig& cfg, const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("EWIRP_DATA_ROOT"); env && *env) return env;
  return cfg.data_root;
}

DataSplit load_data(ExperimentConfig& cfg, const std::string& root_flag) {
  cfg.data_root = resolve_data_root(cfg, root_flag);
  try {
    return load_cifar(cfg.data_root, cfg.data_variant);
  } catch (const std::exception& e) {
    if (!cfg.synthetic_fallback) throw;
    std::cerr << "dataset not usable (" << e.what() << "); generating a synthetic stand-in at "
              << cfg.data_root << "\n";
    generate_synthetic_cifar(cfg.data_root, cfg.data_variant, cfg.seed);
    return load_cifar(cfg.data_root, cfg.data_variant);
  }
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(f.good(), "cannot write ", path);
  f << text;
}

struct Built {
  ModelGraph full, enc, dec;
  SplitResult split;
  CodecConfig ccfg;
  ParamStore<float> ps;
};

Built build_all(const ExperimentConfig& cfg) {
  Built b;
  b.full = build_model(cfg.pcfg);
  b.split = split_model(cfg.pcfg, b.full, cfg.split);
  b.ccfg = cfg.codec_config();
  b.enc = build_encoder(b.ccfg);
  b.dec = build_decoder(b.ccfg);
  b.ps.init_seed = cfg.seed;
  b.ps.mode = Mode::eval;
  graph_init(b.full, b.ps, {1, 3, cfg.pcfg.input_hw, cfg.pcfg.input_hw});
  graph_init(b.enc, b.ps, {1, b.ccfg.split_channels, b.ccfg.split_h, b.ccfg.split_w});
  graph_init(b.dec, b.ps, {1, b.ccfg.enc_channels(), b.ccfg.split_h / 4, b.ccfg.split_w / 4});
  return b;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

int cmd_train(const std::string& config_path, const std::string& root_flag,
              const std::string& stages_csv, const std::string& init_ckpt) {
  ExperimentConfig cfg = load_config(config_path);
  DataSplit data = load_data(cfg, root_flag);
  fs::create_directories(cfg.out_dir);
  write_text(cfg.out_dir + "/config.txt", config_manifest(cfg));
  fs::remove(cfg.out_dir + "/metrics.csv");

  Built b = build_all(cfg);
  if (!init_ckpt.empty()) load_checkpoint(init_ckpt, b.ps, false);
  StageContext ctx = cfg.stage_context(&data);
  ctx.log = &std::cout;
  for (const auto& stage : split_list(stages_csv)) run_stage(cfg.schedule(stage), ctx, b.ps);
  std::cout << "wrote " << cfg.out_dir << "/metrics.csv\n";
  return 0;
}

int cmd_eval(const std::string& config_path, const std::string& root_flag, std::string ckpt) {
  ExperimentConfig cfg = load_config(config_path);
  DataSplit data = load_data(cfg, root_flag);
  Built b = build_all(cfg);
  if (ckpt.empty()) ckpt = cfg.out_dir + "/checkpoint_end2end.ckpt";
  load_checkpoint(ckpt, b.ps, true);
  SplitPipeline pl{&b.split.front, &b.split.rest, &b.enc, &b.dec, cfg.chan, b.ccfg.bandwidth};
  const u64 stream_base = mix_streams(stream_tag("eval.channel.cli"), cfg.seed);
  const EvalResult ev =
      evaluate_pipeline(pl, b.ps, data.test, cfg.normalization(), cfg.eval_limit,
                        cfg.stage_end2end.batch_size, stream_base);
  std::ostringstream csv;
  csv << "top1,top5,count\n" << ev.top1 << ',' << ev.top5 << ',' << ev.count << '\n';
  fs::create_directories(cfg.out_dir);
  write_text(cfg.out_dir + "/eval.csv", csv.str());
  std::cout << "top1 " << ev.top1 << "\ntop5 " << ev.top5 << "\n";
  return 0;
}

int cmd_count_macs(const std::string& config_path, const std::string& out_path) {
  ExperimentConfig cfg = load_config(config_path);
  Built b = build_all(cfg);
  const MacReport rep =
      count_ondevice(b.split.front, b.enc, {1, 3, cfg.pcfg.input_hw, cfg.pcfg.input_hw});
  const std::string csv = rep.to_csv();
  if (out_path.empty()) {
    std::cout << csv;
  } else {
    write_text(out_path, csv);
  }
  std::cerr << "on-device " << rep.total_macs << " MACs, " << rep.total_params << " params ("
            << static_cast<double>(rep.total_macs) / 1e9 << " GMACs, "
            << static_cast<double>(rep.total_params) / 1e6 << " M)\n";
  return 0;
}

int cmd_sweep(const std::string& config_path, const std::string& root_flag,
              const std::string& axis_str, const std::string& values_csv, std::string out_path,
              const std::string& train_csv, const std::string& init_ckpt) {
  ExperimentConfig cfg = load_config(config_path);
  DataSplit data = load_data(cfg, root_flag);
  const SweepAxis axis = sweep_axis_from(axis_str);
  std::vector<double> values;
  for (const auto& v : split_list(values_csv)) values.push_back(detail::to_double(v));
  SweepOptions opts;
  opts.train_stages = split_list(train_csv);
  opts.init_checkpoint = init_ckpt;
  opts.log = &std::cerr;
  const SweepResult res = run_sweep(cfg, axis, values, data, opts);
  if (out_path.empty()) out_path = cfg.out_dir + "/sweep_" + axis_str + ".csv";
  fs::create_directories(fs::path(out_path).parent_path().empty()
                             ? fs::path(".")
                             : fs::path(out_path).parent_path());
  write_text(out_path, sweep_csv(res));
  std::cout << "wrote " << out_path << "\n";
  int ok = 0;
  for (const auto& p : res.points) ok += p.ok ? 1 : 0;
  return ok > 0 ? 0 : 1;
}

int cmd_serve(const std::string& config_path, std::string ckpt, const std::string& host,
              int port) {
  ExperimentConfig cfg = load_config(config_path);
  Built b = build_all(cfg);
  if (ckpt.empty()) ckpt = cfg.out_dir + "/checkpoint_end2end.ckpt";
  load_checkpoint(ckpt, b.ps, true);
  EdgeServer server(b.ccfg, b.dec, b.split.rest, b.ps);
  server.start(host, port);
  std::cout << "listening on " << server.port() << std::endl;
  for (;;) std::this_thread::sleep_for(std::chrono::seconds(3600));
}

int cmd_proxy(const std::string& config_path, const std::string& host, int port,
              const std::string& up_host, int up_port) {
  ExperimentConfig cfg = load_config(config_path);
  ChannelProxy proxy(cfg.chan, up_host, up_port);
  proxy.start(host, port);
  std::cout << "listening on " << proxy.port() << ", forwarding to " << up_host << ":" << up_port
            << std::endl;
  for (;;) std::this_thread::sleep_for(std::chrono::seconds(3600));
}

int cmd_send(const std::string& config_path, const std::string& root_flag, std::string ckpt,
             const std::string& host, int port, int index, const std::string& image_path) {
  ExperimentConfig cfg = load_config(config_path);
  Built b = build_all(cfg);
  if (ckpt.empty()) ckpt = cfg.out_dir + "/checkpoint_end2end.ckpt";
  load_checkpoint(ckpt, b.ps, true);

  std::vector<u8> pixels(kImageBytes);
  if (!image_path.empty()) {
    std::ifstream f(image_path, std::ios::binary);
    require(f.good(), "cannot open image ", image_path);
    f.read(reinterpret_cast<char*>(pixels.data()), kImageBytes);
    require(f.gcount() == static_cast<std::streamsize>(kImageBytes), "image ", image_path,
            " is shorter than ", kImageBytes, " bytes (raw 32x32 RGB planes expected)");
  } else {
    ExperimentConfig data_cfg = cfg;
    DataSplit data = load_data(data_cfg, root_flag);
    require(index >= 0 && index < data.test.size(), "test index ", index, " outside [0, ",
            data.test.size(), ")");
    std::copy_n(data.test.pixels.begin() + static_cast<i64>(index) * kImageBytes, kImageBytes,
                pixels.begin());
  }
  Tensor<float> image({1, 3, 32, 32});
  preprocess(pixels.data(), cfg.normalization(), false, nullptr, image.v.data());

  const ComplexSymbolBlock blk =
      device_encode(b.split.front, b.enc, b.ps, image, cfg.power);
  const ReplyDecode reply = device_send(host, port, blk);
  if (reply.type == kReplyError) {
    std::cerr << "server rejected the frame\n";
    return 1;
  }
  for (const auto& [cls, prob] : reply.top) std::cout << cls << ' ' << prob << '\n';
  return 0;
}

int cmd_make_data(const std::string& variant, const std::string& root, u64 seed, i64 train,
                  i64 test) {
  generate_synthetic_cifar(root, variant, seed, train, test);
  std::cout << "wrote synthetic " << variant << " corpus under " << root << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  std::signal(SIGPIPE, SIG_IGN);
  CLI::App app{"split wireless image recognition pipeline"};
  app.require_subcommand(1);

  std::string config_path, data_root, stages = "backbone,codec,end2end", init_ckpt, ckpt;
  std::string axis, values, out_path, train_stages, host = "127.0.0.1", up_host = "127.0.0.1";
  std::string image_path, variant = "cifar10", root;
  int port = 0, up_port = 0, index = 0;
  u64 seed = 1;
  i64 train_count = 50000, test_count = 10000;

  auto add_config = [&](CLI::App* c) {
    c->add_option("--config", config_path, "experiment config file")->required();
  };

  auto* train = app.add_subcommand("train", "run the staged training recipe");
  add_config(train);
  train->add_option("--data-root", data_root, "dataset directory (overrides config and env)");
  train->add_option("--stages", stages, "comma list from backbone,codec,end2end");
  train->add_option("--init", init_ckpt, "checkpoint loaded loosely before training");

  auto* eval = app.add_subcommand("eval", "evaluate through the simulated channel");
  add_config(eval);
  eval->add_option("--data-root", data_root, "dataset directory");
  eval->add_option("--checkpoint", ckpt, "checkpoint to load (default from out.dir)");

  auto* macs = app.add_subcommand("count-macs", "report on-device complexity");
  add_config(macs);
  macs->add_option("--out", out_path, "CSV path (default stdout)");

  auto* sweep = app.add_subcommand("sweep", "evaluate along one axis, one CSV row per value");
  add_config(sweep);
  sweep->add_option("--axis", axis, "snr | bandwidth | split")->required();
  sweep->add_option("--values", values, "comma list of axis values")->required();
  sweep->add_option("--out", out_path, "CSV path (default under out.dir)");
  sweep->add_option("--train-stages", train_stages, "stages trained per point, comma list");
  sweep->add_option("--init", init_ckpt, "checkpoint loaded loosely into each point");
  sweep->add_option("--data-root", data_root, "dataset directory");

  auto* serve = app.add_subcommand("serve", "run the edge inference server");
  add_config(serve);
  serve->add_option("--checkpoint", ckpt, "checkpoint to load (default from out.dir)");
  serve->add_option("--host", host, "bind address");
  serve->add_option("--port", port, "bind port, 0 picks one");

  auto* proxy = app.add_subcommand("proxy", "channel-emulating forwarder");
  add_config(proxy);
  proxy->add_option("--host", host, "bind address");
  proxy->add_option("--port", port, "bind port, 0 picks one");
  proxy->add_option("--upstream-host", up_host, "server address");
  proxy->add_option("--upstream-port", up_port, "server port")->required();

  auto* send = app.add_subcommand("send", "encode one image on-device and query a server");
  add_config(send);
  send->add_option("--checkpoint", ckpt, "checkpoint to load (default from out.dir)");
  send->add_option("--host", host, "server or proxy address");
  send->add_option("--port", port, "server or proxy port")->required();
  send->add_option("--index", index, "test-set image index");
  send->add_option("--image", image_path, "raw 3072-byte RGB-plane image file");
  send->add_option("--data-root", data_root, "dataset directory");

  auto* mkdata = app.add_subcommand("make-data", "write a synthetic dataset in CIFAR layout");
  mkdata->add_option("--variant", variant, "cifar10 | cifar100");
  mkdata->add_option("--root", root, "output directory")->required();
  mkdata->add_option("--seed", seed, "generator seed");
  mkdata->add_option("--train-count", train_count, "training records");
  mkdata->add_option("--test-count", test_count, "test records");

  CLI11_PARSE(app, argc, argv);
  try {
    if (train->parsed()) return cmd_train(config_path, data_root, stages, init_ckpt);
    if (eval->parsed()) return cmd_eval(config_path, data_root, ckpt);
    if (macs->parsed()) return cmd_count_macs(config_path, out_path);
    if (sweep->parsed())
      return cmd_sweep(config_path, data_root, axis, values, out_path, train_stages, init_ckpt);
    if (serve->parsed()) return cmd_serve(config_path, ckpt, host, port);
    if (proxy->parsed()) return cmd_proxy(config_path, host, port, up_host, up_port);
    if (send->parsed())
      return cmd_send(config_path, data_root, ckpt, host, port, index, image_path);
    if (mkdata->parsed()) return cmd_make_data(variant, root, seed, train_count, test_count);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
