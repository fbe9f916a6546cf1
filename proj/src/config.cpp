#include "rsddpm/config.hpp"

#include <algorithm>
#include <cstdlib>

#include <yaml-cpp/yaml.h>

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "rsddpm/parallel.hpp"

namespace rsddpm {

std::string to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

Precision parse_precision(const std::string& s) {
  if (s == "f32") return Precision::f32;
  if (s == "f64") return Precision::f64;
  throw ConfigError("precision must be f32 or f64, got '" + s + "'");
}

void RunConfig::normalize() {
  scene.seed = seed;
  denoiser.T = T;
  e2e_train.threads = effective_threads();
  diffusion_train.train.threads = effective_threads();
}

std::size_t RunConfig::effective_threads() const {
  if (!threads) return default_threads();
  // RSDDPM_THREADS caps an explicit setting as well.
  return std::getenv("RSDDPM_THREADS") ? std::min(threads, default_threads()) : threads;
}

namespace {

std::string where(const std::string& origin, const YAML::Node& n, const std::string& field) {
  const auto m = n.Mark();
  std::ostringstream os;
  os << origin;
  if (m.line >= 0) os << ":" << m.line + 1 << ":" << m.column + 1;
  os << ": field '" << field << "'";
  return os.str();
}

// Checks that a mapping only holds known keys and hands typed values to the caller.
class Section {
 public:
  Section(const YAML::Node& node, std::string path, std::string origin, std::set<std::string> allowed)
      : node_(node), path_(std::move(path)), origin_(std::move(origin)) {
    if (!node_ || node_.IsNull()) return;
    if (!node_.IsMap()) throw ConfigError(where(origin_, node_, path_.empty() ? "<root>" : path_) + ": expected a mapping");
    for (const auto& kv : node_) {
      const auto key = kv.first.as<std::string>();
      if (!allowed.count(key)) {
        throw ConfigError(where(origin_, kv.first, full(key)) + ": unknown key");
      }
    }
  }

  YAML::Node child(const std::string& key) const {
    if (!node_ || !node_.IsMap()) return YAML::Node(YAML::NodeType::Undefined);
    const YAML::Node& view = node_;  // const lookup does not insert the key
    return view[key];
  }
  std::string full(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  const std::string& origin() const { return origin_; }

  template <class T>
  void get(const std::string& key, T& out) const {
    const auto n = child(key);
    if (!n) return;
    if (!n.IsScalar()) throw ConfigError(where(origin_, n, full(key)) + ": expected a scalar");
    try {
      out = n.as<T>();
    } catch (const YAML::Exception&) {
      throw ConfigError(where(origin_, n, full(key)) + ": cannot convert '" + n.Scalar() + "'");
    }
  }

  template <class T>
  void get_positive(const std::string& key, T& out) const {
    const auto n = child(key);
    if (!n) return;
    // yaml-cpp happily converts "-1" to a huge unsigned, so parse signed first.
    long long v = 0;
    get(key, v);
    if (v <= 0) throw ConfigError(where(origin_, n, full(key)) + ": must be positive");
    out = static_cast<T>(v);
  }

  template <class T>
  void get_nonnegative(const std::string& key, T& out) const {
    const auto n = child(key);
    if (!n) return;
    long long v = 0;
    get(key, v);
    if (v < 0) throw ConfigError(where(origin_, n, full(key)) + ": must be non-negative");
    out = static_cast<T>(v);
  }

  void get_range(const std::string& key, double& lo, double& hi) const {
    const auto n = child(key);
    if (!n) return;
    if (!n.IsSequence() || n.size() != 2) throw ConfigError(where(origin_, n, full(key)) + ": expected [low, high]");
    try {
      lo = n[0].as<double>();
      hi = n[1].as<double>();
    } catch (const YAML::Exception&) {
      throw ConfigError(where(origin_, n, full(key)) + ": expected two numbers");
    }
    if (!(lo <= hi)) throw ConfigError(where(origin_, n, full(key)) + ": low must not exceed high");
  }

  void fail(const std::string& key, const std::string& msg) const {
    throw ConfigError(where(origin_, child(key) ? child(key) : node_, full(key)) + ": " + msg);
  }

 private:
  YAML::Node node_;
  std::string path_;
  std::string origin_;
};

void read_training(const Section& s, TrainConfig& tc) {
  s.get_nonnegative("steps", tc.steps);
  s.get_positive("batch", tc.batch);
  s.get("lr", tc.adam.lr);
  s.get_nonnegative("eval_every", tc.eval_every);
  s.get_nonnegative("patience", tc.patience);
  if (!(tc.adam.lr > 0)) s.fail("lr", "must be positive");
}

}  // namespace

RunConfig parse_config(const std::string& yaml_text, const std::string& origin) {
  YAML::Node root;
  try {
    root = YAML::Load(yaml_text);
  } catch (const YAML::ParserException& e) {
    throw ConfigError(origin + ":" + std::to_string(e.mark.line + 1) + ": YAML syntax error: " + e.msg);
  }
  RunConfig cfg;
  const Section top(root, "", origin,
                    {"mode", "seed", "precision", "threads", "out", "schedule", "data", "e2e", "denoiser", "optimizer"});

  std::string mode = to_string(cfg.mode), precision = to_string(cfg.precision);
  top.get("mode", mode);
  top.get("precision", precision);
  try {
    cfg.mode = parse_mode(mode);
  } catch (const std::invalid_argument& e) {
    top.fail("mode", e.what());
  }
  try {
    cfg.precision = parse_precision(precision);
  } catch (const ConfigError& e) {
    top.fail("precision", e.what());
  }
  top.get_nonnegative("seed", cfg.seed);
  top.get_nonnegative("threads", cfg.threads);
  top.get("out", cfg.out_dir);

  const Section sched(top.child("schedule"), "schedule", origin, {"T"});
  sched.get("T", cfg.T);
  if (cfg.T < 2) sched.fail("T", "must be at least 2");

  const Section data(top.child("data"), "data", origin,
                     {"image_size", "n_train", "n_val", "n_test", "path", "generate", "min_shapes", "max_shapes",
                      "noise", "ramp", "corruption", "fg_range", "bg_range", "fg_fraction"});
  std::size_t size = cfg.scene.height;
  data.get_positive("image_size", size);
  if (size < kMinImageSize || size % 4 != 0) {
    data.fail("image_size", "must be a multiple of 4 and at least " + std::to_string(kMinImageSize));
  }
  cfg.scene.height = cfg.scene.width = size;
  data.get_positive("n_train", cfg.n_train);
  data.get_nonnegative("n_val", cfg.n_val);
  data.get_positive("n_test", cfg.n_test);
  data.get("path", cfg.data_path);
  data.get("generate", cfg.generate);
  data.get_positive("min_shapes", cfg.scene.min_shapes);
  data.get_positive("max_shapes", cfg.scene.max_shapes);
  if (cfg.scene.max_shapes < cfg.scene.min_shapes) data.fail("max_shapes", "must be >= min_shapes");
  data.get("noise", cfg.scene.noise);
  data.get("ramp", cfg.scene.ramp);
  data.get("corruption", cfg.scene.corruption);
  if (!(cfg.scene.noise >= 0)) data.fail("noise", "must be non-negative");
  if (!(cfg.scene.ramp >= 0)) data.fail("ramp", "must be non-negative");
  if (!(cfg.scene.corruption >= 0)) data.fail("corruption", "must be non-negative");
  data.get_range("fg_range", cfg.scene.fg_low, cfg.scene.fg_high);
  data.get_range("bg_range", cfg.scene.bg_low, cfg.scene.bg_high);
  data.get_range("fg_fraction", cfg.scene.min_fg_fraction, cfg.scene.max_fg_fraction);
  if (!cfg.generate && cfg.data_path.empty()) data.fail("generate", "false requires data.path");

  const Section e2e(top.child("e2e"), "e2e", origin, {"channels", "groups", "steps", "batch", "lr", "eval_every", "patience"});
  e2e.get_positive("channels", cfg.e2e.base_channels);
  e2e.get_positive("groups", cfg.e2e.groups);
  if (cfg.e2e.base_channels % cfg.e2e.groups) e2e.fail("groups", "must divide channels");
  read_training(e2e, cfg.e2e_train);

  const Section den(top.child("denoiser"), "denoiser", origin,
                    {"channels", "groups", "time_embed_dim", "steps", "batch", "lr", "eval_every", "patience",
                     "val_items", "ema_decay"});
  den.get_positive("channels", cfg.denoiser.base_channels);
  den.get_positive("groups", cfg.denoiser.groups);
  if (cfg.denoiser.base_channels % cfg.denoiser.groups) den.fail("groups", "must divide channels");
  den.get_positive("time_embed_dim", cfg.denoiser.time_embed_dim);
  if (cfg.denoiser.time_embed_dim % 2) den.fail("time_embed_dim", "must be even");
  read_training(den, cfg.diffusion_train.train);
  den.get_nonnegative("val_items", cfg.diffusion_train.val_items);
  den.get("ema_decay", cfg.diffusion_train.ema_decay);
  if (!(cfg.diffusion_train.ema_decay >= 0 && cfg.diffusion_train.ema_decay < 1)) {
    den.fail("ema_decay", "must lie in [0, 1)");
  }

  const Section opt(top.child("optimizer"), "optimizer", origin, {"beta1", "beta2", "eps"});
  AdamConfig adam;
  opt.get("beta1", adam.beta1);
  opt.get("beta2", adam.beta2);
  opt.get("eps", adam.eps);
  if (!(adam.beta1 >= 0 && adam.beta1 < 1)) opt.fail("beta1", "must lie in [0, 1)");
  if (!(adam.beta2 >= 0 && adam.beta2 < 1)) opt.fail("beta2", "must lie in [0, 1)");
  if (!(adam.eps > 0)) opt.fail("eps", "must be positive");
  for (auto* tc : {&cfg.e2e_train, &cfg.diffusion_train.train}) {
    tc->adam.beta1 = adam.beta1;
    tc->adam.beta2 = adam.beta2;
    tc->adam.eps = adam.eps;
  }

  cfg.normalize();
  return cfg;
}

RunConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path + ": cannot open config file");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path);
}

namespace {

nlohmann::json train_json(const TrainConfig& tc) {
  return {{"steps", tc.steps}, {"batch", tc.batch}, {"lr", tc.adam.lr}, {"eval_every", tc.eval_every},
          {"patience", tc.patience}};
}

void train_from(const nlohmann::json& j, TrainConfig& tc) {
  tc.steps = j.at("steps");
  tc.batch = j.at("batch");
  tc.adam.lr = j.at("lr");
  tc.eval_every = j.at("eval_every");
  tc.patience = j.at("patience");
}

}  // namespace

std::string config_to_json(const RunConfig& c) {
  nlohmann::json j;
  j["mode"] = to_string(c.mode);
  j["seed"] = c.seed;
  j["precision"] = to_string(c.precision);
  j["threads"] = c.threads;
  j["out"] = c.out_dir;
  j["schedule"] = {{"T", c.T}};
  j["data"] = {{"image_size", c.scene.height},
               {"n_train", c.n_train},
               {"n_val", c.n_val},
               {"n_test", c.n_test},
               {"path", c.data_path},
               {"generate", c.generate},
               {"min_shapes", c.scene.min_shapes},
               {"max_shapes", c.scene.max_shapes},
               {"noise", c.scene.noise},
               {"ramp", c.scene.ramp},
               {"corruption", c.scene.corruption},
               {"fg_range", {c.scene.fg_low, c.scene.fg_high}},
               {"bg_range", {c.scene.bg_low, c.scene.bg_high}},
               {"fg_fraction", {c.scene.min_fg_fraction, c.scene.max_fg_fraction}}};
  auto e2e = train_json(c.e2e_train);
  e2e["channels"] = c.e2e.base_channels;
  e2e["groups"] = c.e2e.groups;
  j["e2e"] = e2e;
  auto den = train_json(c.diffusion_train.train);
  den["channels"] = c.denoiser.base_channels;
  den["groups"] = c.denoiser.groups;
  den["time_embed_dim"] = c.denoiser.time_embed_dim;
  den["val_items"] = c.diffusion_train.val_items;
  den["ema_decay"] = c.diffusion_train.ema_decay;
  j["denoiser"] = den;
  const auto& a = c.e2e_train.adam;
  j["optimizer"] = {{"beta1", a.beta1}, {"beta2", a.beta2}, {"eps", a.eps}};
  return j.dump(2);
}

RunConfig config_from_json(const std::string& text) {
  RunConfig c;
  try {
    const auto j = nlohmann::json::parse(text);
    c.mode = parse_mode(j.at("mode"));
    c.seed = j.at("seed");
    c.precision = parse_precision(j.at("precision"));
    c.threads = j.at("threads");
    c.out_dir = j.at("out");
    c.T = j.at("schedule").at("T");
    const auto& d = j.at("data");
    c.scene.height = c.scene.width = d.at("image_size");
    c.n_train = d.at("n_train");
    c.n_val = d.at("n_val");
    c.n_test = d.at("n_test");
    c.data_path = d.at("path");
    c.generate = d.at("generate");
    c.scene.min_shapes = d.at("min_shapes");
    c.scene.max_shapes = d.at("max_shapes");
    c.scene.noise = d.at("noise");
    c.scene.ramp = d.at("ramp");
    c.scene.corruption = d.at("corruption");
    c.scene.fg_low = d.at("fg_range")[0];
    c.scene.fg_high = d.at("fg_range")[1];
    c.scene.bg_low = d.at("bg_range")[0];
    c.scene.bg_high = d.at("bg_range")[1];
    c.scene.min_fg_fraction = d.at("fg_fraction")[0];
    c.scene.max_fg_fraction = d.at("fg_fraction")[1];
    const auto& e = j.at("e2e");
    c.e2e.base_channels = e.at("channels");
    c.e2e.groups = e.at("groups");
    train_from(e, c.e2e_train);
    const auto& n = j.at("denoiser");
    c.denoiser.base_channels = n.at("channels");
    c.denoiser.groups = n.at("groups");
    c.denoiser.time_embed_dim = n.at("time_embed_dim");
    c.diffusion_train.val_items = n.at("val_items");
    c.diffusion_train.ema_decay = n.at("ema_decay");
    train_from(n, c.diffusion_train.train);
    const auto& o = j.at("optimizer");
    for (auto* tc : {&c.e2e_train, &c.diffusion_train.train}) {
      tc->adam.beta1 = o.at("beta1");
      tc->adam.beta2 = o.at("beta2");
      tc->adam.eps = o.at("eps");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config snapshot: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config snapshot: ") + e.what());
  }
  c.normalize();
  return c;
}

}  // namespace rsddpm
