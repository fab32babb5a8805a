#pragma once

#include <fstream>
#include <map>

#include "ewirp/cifar.hpp"
#include "ewirp/train.hpp"

namespace ewirp {

// Flat "key = value" text; '#' starts a comment, blank lines ignored.
inline std::map<std::string, std::string> parse_kv(std::istream& in) {
  std::map<std::string, std::string> kv;
  std::string line;
  int lineno = 0;
  auto trim = [](std::string s) {
    const auto a = s.find_first_not_of(" \t\r");
    const auto b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, "config line ", lineno, " is not 'key = value': ", line);
    const std::string key = trim(line.substr(0, eq));
    require(!key.empty(), "config line ", lineno, " has an empty key");
    require(kv.emplace(key, trim(line.substr(eq + 1))).second, "duplicate config key '", key,
            "' at line ", lineno);
  }
  return kv;
}

struct ExperimentConfig {
  PyramidConfig pcfg;
  int split = 45;
  int bandwidth = 128;
  double power = 1.0;
  ChannelConfig chan;
  TrainingSchedule stage_backbone = backbone_schedule();
  TrainingSchedule stage_codec = codec_schedule();
  TrainingSchedule stage_end2end = end2end_schedule();
  std::string data_variant = "cifar100";
  std::string data_root = "data/cifar100";
  bool augment = true;
  bool synthetic_fallback = false;
  u64 seed = 1;
  i64 train_limit = 0;
  i64 eval_limit = 0;
  std::string out_dir = "runs/default";

  CodecConfig codec_config() const {
    CodecConfig c;
    c.split_channels = 4 * fmd(split, pcfg.R, pcfg.omega);
    c.split_h = c.split_w = split_spatial(pcfg, split);
    c.bandwidth = bandwidth;
    return c;
  }

  Normalization normalization() const { return default_normalization(data_variant); }

  const TrainingSchedule& schedule(const std::string& stage) const {
    if (stage == "backbone") return stage_backbone;
    if (stage == "codec") return stage_codec;
    if (stage == "end2end") return stage_end2end;
    throw std::invalid_argument(cat("unknown stage '", stage, "'"));
  }

  StageContext stage_context(const DataSplit* data) const {
    StageContext ctx;
    ctx.pcfg = pcfg;
    ctx.split_index = split;
    ctx.ccfg = codec_config();
    ctx.chan = chan;
    ctx.data = data;
    ctx.norm = normalization();
    ctx.augment = augment;
    ctx.seed = seed;
    ctx.train_limit = train_limit;
    ctx.eval_limit = eval_limit;
    ctx.out_dir = out_dir;
    return ctx;
  }
};

namespace detail {

struct ConfigReader {
  std::map<std::string, std::string> kv;
  std::vector<std::string> errors;
  std::vector<std::string> seen;

  bool has(const std::string& k) {
    seen.push_back(k);
    return kv.count(k) != 0;
  }
  template <class F>
  void take(const std::string& k, F&& apply) {
    if (!has(k)) return;
    try {
      apply(kv.at(k));
    } catch (const std::exception& e) {
      errors.push_back(cat(k, ": ", e.what()));
    }
  }
  void unknown_keys() {
    for (const auto& [k, v] : kv)
      if (std::find(seen.begin(), seen.end(), k) == seen.end())
        errors.push_back(cat("unknown config key '", k, "'"));
  }
};

inline int to_int(const std::string& s) {
  size_t pos = 0;
  const int v = std::stoi(s, &pos);
  require(pos == s.size(), "trailing characters in integer '", s, "'");
  return v;
}
inline i64 to_i64(const std::string& s) {
  size_t pos = 0;
  const long long v = std::stoll(s, &pos);
  require(pos == s.size(), "trailing characters in integer '", s, "'");
  return v;
}
inline u64 to_u64(const std::string& s) {
  size_t pos = 0;
  const unsigned long long v = std::stoull(s, &pos);
  require(pos == s.size(), "trailing characters in integer '", s, "'");
  return v;
}
inline double to_double(const std::string& s) {
  size_t pos = 0;
  const double v = std::stod(s, &pos);
  require(pos == s.size(), "trailing characters in number '", s, "'");
  return v;
}
inline bool to_bool(const std::string& s) {
  if (s == "1" || s == "true" || s == "yes") return true;
  if (s == "0" || s == "false" || s == "no") return false;
  throw std::invalid_argument(cat("expected boolean, got '", s, "'"));
}
inline std::vector<int> to_int_list(const std::string& s) {
  std::vector<int> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, ','))
    if (!item.empty()) out.push_back(to_int(item));
  return out;
}

inline void read_schedule(ConfigReader& r, const std::string& prefix, TrainingSchedule& s) {
  r.take(prefix + ".lr", [&](const std::string& v) { s.lr0 = to_double(v); });
  r.take(prefix + ".epochs", [&](const std::string& v) { s.epochs = to_int(v); });
  r.take(prefix + ".milestones", [&](const std::string& v) { s.milestones = to_int_list(v); });
  r.take(prefix + ".batch", [&](const std::string& v) { s.batch_size = to_int(v); });
  r.take(prefix + ".weight_decay", [&](const std::string& v) { s.weight_decay = to_double(v); });
  r.take(prefix + ".momentum", [&](const std::string& v) { s.momentum = to_double(v); });
}

}  // namespace detail

// Builds a config from parsed keys, applying defaults for everything absent.
// All violations are reported together.
inline ExperimentConfig config_from_map(std::map<std::string, std::string> kv) {
  ExperimentConfig c;
  detail::ConfigReader r{std::move(kv), {}, {}};
  using detail::to_bool;
  using detail::to_double;
  using detail::to_i64;
  using detail::to_int;
  using detail::to_u64;
  r.take("model.r", [&](const std::string& v) { c.pcfg.R = to_int(v); });
  r.take("model.omega", [&](const std::string& v) { c.pcfg.omega = to_double(v); });
  r.take("model.classes", [&](const std::string& v) { c.pcfg.num_classes = to_int(v); });
  r.take("model.split", [&](const std::string& v) { c.split = to_int(v); });
  r.take("codec.bandwidth", [&](const std::string& v) { c.bandwidth = to_int(v); });
  r.take("codec.power", [&](const std::string& v) { c.power = to_double(v); });
  r.take("channel.kind", [&](const std::string& v) { c.chan.kind = channel_kind_from(v); });
  r.take("channel.snr_db", [&](const std::string& v) { c.chan.snr_db = to_double(v); });
  r.take("channel.sigma_h2", [&](const std::string& v) { c.chan.sigma_h2 = to_double(v); });
  r.take("channel.seed", [&](const std::string& v) { c.chan.seed = to_u64(v); });
  r.take("data.variant", [&](const std::string& v) { dataset_variant(v), c.data_variant = v; });
  r.take("data.root", [&](const std::string& v) { c.data_root = v; });
  r.take("data.augment", [&](const std::string& v) { c.augment = to_bool(v); });
  r.take("data.synthetic_fallback",
         [&](const std::string& v) { c.synthetic_fallback = to_bool(v); });
  r.take("train.seed", [&](const std::string& v) { c.seed = to_u64(v); });
  r.take("train.limit", [&](const std::string& v) { c.train_limit = to_i64(v); });
  r.take("eval.limit", [&](const std::string& v) { c.eval_limit = to_i64(v); });
  r.take("out.dir", [&](const std::string& v) { c.out_dir = v; });
  detail::read_schedule(r, "stage.backbone", c.stage_backbone);
  detail::read_schedule(r, "stage.codec", c.stage_codec);
  detail::read_schedule(r, "stage.end2end", c.stage_end2end);
  r.unknown_keys();
  c.chan.P = c.power;

  auto check = [&](auto&& fn, const char* what) {
    try {
      fn();
    } catch (const std::exception& e) {
      r.errors.push_back(cat(what, ": ", e.what()));
    }
  };
  check([&] { c.pcfg.validate(); }, "model");
  check([&] { require(c.split >= 1 && c.split <= c.pcfg.R, "split ", c.split, " outside [1, ",
                      c.pcfg.R, "]"); },
        "model.split");
  check([&] { require(c.power > 0, "power must be positive, got ", c.power); }, "codec.power");
  check([&] { c.chan.validate(); }, "channel");
  check([&] { c.stage_backbone.validate(); }, "stage.backbone");
  check([&] { c.stage_codec.validate(); }, "stage.codec");
  check([&] { c.stage_end2end.validate(); }, "stage.end2end");
  check([&] { require(c.train_limit >= 0 && c.eval_limit >= 0, "limits cannot be negative"); },
        "limits");
  if (r.errors.empty())
    check([&] { c.codec_config().validate(); }, "codec");
  if (!r.errors.empty()) {
    std::string all = "invalid config:";
    for (const auto& e : r.errors) all += "\n  - " + e;
    throw std::invalid_argument(all);
  }
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path);
  require(f.good(), "cannot open config ", path);
  return config_from_map(parse_kv(f));
}

namespace detail {

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

}  // namespace detail

// Every effective setting, defaults included, in stable sorted order. Written
// next to run outputs so an experiment is fully determined by one file.
inline std::string config_manifest(const ExperimentConfig& c) {
  std::map<std::string, std::string> kv;
  kv["model.r"] = std::to_string(c.pcfg.R);
  kv["model.omega"] = detail::fmt_double(c.pcfg.omega);
  kv["model.classes"] = std::to_string(c.pcfg.num_classes);
  kv["model.split"] = std::to_string(c.split);
  kv["codec.bandwidth"] = std::to_string(c.bandwidth);
  kv["codec.power"] = detail::fmt_double(c.power);
  kv["channel.kind"] = to_string(c.chan.kind);
  kv["channel.snr_db"] = detail::fmt_double(c.chan.snr_db);
  kv["channel.sigma_h2"] = detail::fmt_double(c.chan.sigma_h2);
  kv["channel.seed"] = std::to_string(c.chan.seed);
  kv["data.variant"] = c.data_variant;
  kv["data.root"] = c.data_root;
  kv["data.augment"] = c.augment ? "1" : "0";
  kv["data.synthetic_fallback"] = c.synthetic_fallback ? "1" : "0";
  kv["train.seed"] = std::to_string(c.seed);
  kv["train.limit"] = std::to_string(c.train_limit);
  kv["eval.limit"] = std::to_string(c.eval_limit);
  kv["out.dir"] = c.out_dir;
  auto sched = [&](const std::string& p, const TrainingSchedule& s) {
    kv[p + ".lr"] = detail::fmt_double(s.lr0);
    kv[p + ".epochs"] = std::to_string(s.epochs);
    std::string ms;
    for (size_t i = 0; i < s.milestones.size(); ++i)
      ms += (i ? "," : "") + std::to_string(s.milestones[i]);
    kv[p + ".milestones"] = ms;
    kv[p + ".batch"] = std::to_string(s.batch_size);
    kv[p + ".weight_decay"] = detail::fmt_double(s.weight_decay);
    kv[p + ".momentum"] = detail::fmt_double(s.momentum);
  };
  sched("stage.backbone", c.stage_backbone);
  sched("stage.codec", c.stage_codec);
  sched("stage.end2end", c.stage_end2end);
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

}  // namespace ewirp
