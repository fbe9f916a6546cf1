#include "rsddpm/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "rsddpm/checkpoint.hpp"
#include "rsddpm/config.hpp"
#include "rsddpm/io.hpp"
#include "rsddpm/pipeline.hpp"
#include "rsddpm/verify.hpp"

namespace rsddpm {

namespace fs = std::filesystem;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Sub-seeds derived from the run seed.
enum Stream : std::uint64_t { kE2EInit = 1, kDenoiserInit = 2, kE2ETrain = 3, kDiffusionTrain = 4 };

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> mode;
  std::vector<std::string> ckpts;
  std::vector<std::string> inputs;
  std::string split = "test";
  bool require_improvement = false;
  bool inject_fault = false;
};

RunConfig resolve_config(const Options& o) {
  auto cfg = o.config.empty() ? RunConfig{} : load_config_file(o.config);
  if (o.seed) cfg.seed = *o.seed;
  if (o.out) cfg.out_dir = *o.out;
  if (o.mode) {
    try {
      cfg.mode = parse_mode(*o.mode);
    } catch (const std::invalid_argument& e) {
      throw UsageError(std::string("--mode: ") + e.what());
    }
  }
  cfg.normalize();
  return cfg;
}

std::string fmt(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string path_in(const RunConfig& cfg, const std::string& name) { return (fs::path(cfg.out_dir) / name).string(); }

void write_json(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  out << j.dump(2) << "\n";
}

nlohmann::json run_header(const RunConfig& cfg, const std::string& command) {
  return {{"command", command},
          {"seed", cfg.seed},
          {"rng", Rng::algorithm()},
          {"precision", to_string(cfg.precision)},
          {"threads", cfg.effective_threads()},
          {"config", nlohmann::json::parse(config_to_json(cfg))}};
}

class JsonlLog {
 public:
  JsonlLog(const std::string& path, std::string phase, std::uint64_t seed, std::ostream& err)
      : out_(path), phase_(std::move(phase)), seed_(seed), err_(err) {
    if (!out_) throw std::runtime_error(path + ": cannot open log");
  }
  TrainLogger logger() {
    return [this](const TrainRecord& r) {
      nlohmann::json j{{"phase", phase_}, {"step", r.step}, {"loss", r.loss}, {"wall_time", r.wall_seconds},
                       {"seed", seed_}};
      j["eval_loss"] = r.eval_loss >= 0 ? nlohmann::json(r.eval_loss) : nlohmann::json();
      out_ << j.dump() << "\n";
      if (r.eval_loss >= 0) {
        err_ << phase_ << " step " << r.step << " loss " << fmt(r.loss) << " eval " << fmt(r.eval_loss) << " ("
             << fmt(r.wall_seconds) << " s)\n";
      }
    };
  }

 private:
  std::ofstream out_;
  std::string phase_;
  std::uint64_t seed_;
  std::ostream& err_;
};

template <class Real>
Dataset<Real> build_dataset(const RunConfig& cfg) {
  if (!cfg.generate) {
    auto data = load_dataset<Real>(cfg.data_path);
    if (data.mode != cfg.mode) {
      throw ConfigError(cfg.data_path + ": dataset mode " + to_string(data.mode) + " does not match config mode " +
                        to_string(cfg.mode));
    }
    return data;
  }
  auto data = make_benchmark<Real>(cfg.scene, cfg.mode, cfg.n_train, cfg.n_val, cfg.n_test);
  if (!cfg.data_path.empty()) save_dataset(cfg.data_path, data);
  return data;
}

struct LoadedCheckpoints {
  std::optional<Checkpoint> e2e, denoiser;
};

LoadedCheckpoints load_ckpts(const std::vector<std::string>& paths) {
  LoadedCheckpoints out;
  for (const auto& p : paths) {
    auto c = read_checkpoint(p);
    if (c.kind != "e2e" && c.kind != "denoiser") throw CheckpointError(p + ": unknown checkpoint kind '" + c.kind + "'");
    auto& slot = c.kind == "e2e" ? out.e2e : out.denoiser;
    if (slot) throw UsageError("two " + c.kind + " checkpoints given");
    slot = std::move(c);
  }
  return out;
}

void require_precision(const Checkpoint& c, Precision want, const std::string& what) {
  if (c.precision != want) {
    throw PrecisionError(what + " checkpoint stores " + to_string(c.precision) + " parameters but the run requests " +
                         to_string(want));
  }
}

template <class Real>
E2EModel<Real> restore_e2e(const Checkpoint& c, Precision want) {
  require_precision(c, want, "e2e");
  const auto snap = config_from_json(c.config_json);
  E2EModel<Real> model(snap.e2e, 0);
  load_parameters(c, model.parameters());
  model.freeze();
  return model;
}

template <class Real>
Denoiser<Real> restore_denoiser(const Checkpoint& c, Precision want) {
  require_precision(c, want, "denoiser");
  if (c.schedule_algorithm != Schedule::kAlgorithm) {
    throw CheckpointError("denoiser checkpoint uses schedule '" + c.schedule_algorithm + "'");
  }
  auto snap = config_from_json(c.config_json);
  Denoiser<Real> model(snap.denoiser, 0);
  load_parameters(c, model.parameters());
  return model;
}

template <class Real>
int train_e2e_cmd(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  if (cfg.mode != Mode::segmentation) {
    throw UsageError("train-e2e: restoration mode uses the input image as x_hat and has no end-to-end model");
  }
  fs::create_directories(cfg.out_dir);
  const auto data = build_dataset<Real>(cfg);
  std::vector<SupervisedPair<Real>> train, val;
  for (const auto* it : data.split(Split::train)) train.push_back({it->image, encoded_target(*it, data.mode)});
  for (const auto* it : data.split(Split::val)) val.push_back({it->image, encoded_target(*it, data.mode)});

  E2EModel<Real> model(cfg.e2e, Rng::derive(cfg.seed, kE2EInit).next_u64());
  auto rng = Rng::derive(cfg.seed, kE2ETrain);
  JsonlLog log(path_in(cfg, "e2e_log.jsonl"), "e2e", cfg.seed, err);
  const auto start = std::chrono::steady_clock::now();
  const auto result = train_e2e(model, train, val, cfg.e2e_train, rng, log.logger());
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  auto ckpt = make_checkpoint("e2e", model.parameters(), cfg);
  const auto digest = save_checkpoint(path_in(cfg, "e2e.ckpt"), ckpt);
  auto meta = run_header(cfg, "train-e2e");
  meta["checkpoint"] = {{"path", "e2e.ckpt"}, {"sha256", digest}};
  meta["steps_run"] = result.steps_run;
  meta["eval_losses"] = result.eval_losses;
  meta["wall_seconds"] = wall;
  write_json(path_in(cfg, "e2e_run.json"), meta);
  out << "e2e checkpoint " << path_in(cfg, "e2e.ckpt") << " sha256 " << digest << "\n";
  return kExitOk;
}

template <class Real>
int train_diffusion_cmd(const RunConfig& cfg, const Options& o, std::ostream& out, std::ostream& err) {
  const auto ck = load_ckpts(o.ckpts);
  std::optional<E2EModel<Real>> e2e;
  if (cfg.mode == Mode::segmentation) {
    if (!ck.e2e) throw UsageError("train-diffusion: segmentation mode needs a pretrained e2e checkpoint (--ckpt)");
    e2e = restore_e2e<Real>(*ck.e2e, cfg.precision);
  } else if (ck.e2e) {
    throw UsageError("train-diffusion: restoration mode takes no e2e checkpoint");
  }
  fs::create_directories(cfg.out_dir);
  const auto data = build_dataset<Real>(cfg);
  const Schedule schedule(cfg.T);
  Denoiser<Real> denoiser(cfg.denoiser, Rng::derive(cfg.seed, kDenoiserInit).next_u64());
  auto rng = Rng::derive(cfg.seed, kDiffusionTrain);
  JsonlLog log(path_in(cfg, "diffusion_log.jsonl"), "diffusion", cfg.seed, err);
  const auto start = std::chrono::steady_clock::now();
  const auto result =
      train_diffusion(denoiser, e2e ? &*e2e : nullptr, data, schedule, cfg.diffusion_train, rng, log.logger());
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  auto ckpt = make_checkpoint("denoiser", denoiser.parameters(), cfg);
  const auto digest = save_checkpoint(path_in(cfg, "denoiser.ckpt"), ckpt);
  auto meta = run_header(cfg, "train-diffusion");
  meta["checkpoint"] = {{"path", "denoiser.ckpt"}, {"sha256", digest}};
  if (ck.e2e) meta["e2e_checkpoint_sha256"] = ck.e2e->digest;
  meta["steps_run"] = result.steps_run;
  meta["val_losses"] = result.val_losses;
  meta["epoch_losses"] = result.epoch_losses;
  meta["e2e_cache"] = {{"hits", result.cache_hits},
                       {"misses", result.cache_misses},
                       {"later_epoch_lookups", result.later_epoch_lookups},
                       {"later_epoch_hits", result.later_epoch_hits}};
  meta["wall_seconds"] = wall;
  write_json(path_in(cfg, "diffusion_run.json"), meta);
  out << "denoiser checkpoint " << path_in(cfg, "denoiser.ckpt") << " sha256 " << digest << "\n";
  return kExitOk;
}

template <class Real>
std::optional<E2EModel<Real>> e2e_for_mode(const LoadedCheckpoints& ck, const RunConfig& cfg, const char* verb) {
  if (cfg.mode == Mode::restoration) {
    if (ck.e2e) throw UsageError(std::string(verb) + ": restoration mode takes no e2e checkpoint");
    return std::nullopt;
  }
  if (!ck.e2e) throw UsageError(std::string(verb) + ": segmentation mode needs an e2e checkpoint (--ckpt)");
  return restore_e2e<Real>(*ck.e2e, cfg.precision);
}

template <class Real>
int infer_cmd(const RunConfig& cfg, const Options& o, std::ostream& out) {
  const auto ck = load_ckpts(o.ckpts);
  if (!ck.denoiser) throw UsageError("infer: a denoiser checkpoint is required (--ckpt)");
  if (o.inputs.empty()) throw UsageError("infer: at least one --input tensor file is required");
  const auto e2e = e2e_for_mode<Real>(ck, cfg, "infer");
  const auto denoiser = restore_denoiser<Real>(*ck.denoiser, cfg.precision);
  const Schedule schedule(ck.denoiser->T);
  fs::create_directories(cfg.out_dir);

  auto meta = run_header(cfg, "infer");
  meta["outputs"] = nlohmann::json::array();
  for (std::size_t i = 0; i < o.inputs.size(); ++i) {
    const auto image = read_tensor<Real>(o.inputs[i]);
    if (image.rank() != 3 || image.dim(0) != denoiser.config().cond_channels) {
      throw UsageError(o.inputs[i] + ": expected a [" + std::to_string(denoiser.config().cond_channels) +
                       ", H, W] image");
    }
    auto rng = Rng::derive(cfg.seed, i);
    const auto res = infer(denoiser, e2e ? &*e2e : nullptr, image, schedule, rng);
    const auto stem = (fs::path(cfg.out_dir) / fs::path(o.inputs[i]).stem()).string();
    const std::pair<const char*, const Tensor<Real>*> parts[] = {
        {"x_hat", &res.x_hat}, {"x_bar", &res.x_bar}, {"combined", &res.combined}};
    for (const auto& [name, t] : parts) {
      write_tensor(stem + "." + name + ".rst", *t);
      write_pgm(stem + "." + name + ".pgm", clamp(*t, Real(-1), Real(1)));
    }
    Tensor<Real> mask(res.combined.shape());
    for (std::size_t k = 0; k < mask.size(); ++k) mask[k] = res.combined[k] > Real(0) ? Real(1) : Real(0);
    write_tensor(stem + ".mask.rst", mask);
    write_pgm(stem + ".mask.pgm", mask, 0.0, 1.0);
    meta["outputs"].push_back({{"input", o.inputs[i]}, {"stem", stem}, {"rng_stream", i}});
    out << o.inputs[i] << " -> " << stem << ".{x_hat,x_bar,combined,mask}.rst\n";
  }
  write_json(path_in(cfg, "infer_run.json"), meta);
  return kExitOk;
}

void write_metrics(std::ostream& csv, const MetricReport& r, const std::string& split) {
  const auto m = r.aggregate();
  csv << r.method << "," << split << "," << fmt(m.iou) << "," << fmt(m.dice) << "," << fmt(m.mse) << ","
      << fmt(m.psnr) << "," << r.size() << "\n";
}

template <class Real>
int eval_cmd(const RunConfig& cfg, const Options& o, std::ostream& out) {
  Split split;
  try {
    split = parse_split(o.split);
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string("--split: ") + e.what());
  }
  const auto ck = load_ckpts(o.ckpts);
  if (!ck.denoiser) throw UsageError("eval: a denoiser checkpoint is required (--ckpt)");
  const auto e2e = e2e_for_mode<Real>(ck, cfg, "eval");
  const auto denoiser = restore_denoiser<Real>(*ck.denoiser, cfg.precision);
  const Schedule schedule(ck.denoiser->T);
  fs::create_directories(cfg.out_dir);
  const auto data = build_dataset<Real>(cfg);

  const auto start = std::chrono::steady_clock::now();
  const auto ev = evaluate_split(denoiser, e2e ? &*e2e : nullptr, data, split, schedule, cfg.seed,
                                 cfg.effective_threads());
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  std::ofstream csv(path_in(cfg, "metrics.csv"));
  csv << "method,split,iou,dice,mse,psnr,n_images\n";
  std::ofstream per(path_in(cfg, "metrics_per_image.csv"));
  per << "method,split,image,iou,dice,mse,psnr\n";
  const auto items = data.split(split);
  for (const auto* r : {&ev.baseline, &ev.diffusion, &ev.ensemble}) {
    write_metrics(csv, *r, o.split);
    write_metrics(out, *r, o.split);
    for (std::size_t i = 0; i < r->size(); ++i) {
      const auto& m = r->images[i];
      per << r->method << "," << o.split << "," << items[i]->index << "," << fmt(m.iou) << "," << fmt(m.dice) << ","
          << fmt(m.mse) << "," << fmt(m.psnr) << "\n";
    }
  }
  auto meta = run_header(cfg, "eval");
  meta["split"] = o.split;
  meta["checkpoints"] = nlohmann::json::object();
  meta["checkpoints"]["denoiser"] = ck.denoiser->digest;
  if (ck.e2e) meta["checkpoints"]["e2e"] = ck.e2e->digest;
  meta["wall_seconds"] = wall;
  write_json(path_in(cfg, "eval_run.json"), meta);

  const auto base = ev.baseline.aggregate(), ens = ev.ensemble.aggregate();
  const bool improved = cfg.mode == Mode::segmentation ? (ens.iou >= base.iou && ens.mse <= base.mse) : ens.mse < base.mse;
  if (o.require_improvement && !improved) {
    out << "ensemble does not improve on " << ev.baseline.method << "\n";
    return kExitFailure;
  }
  return kExitOk;
}

int verify_cmd(const RunConfig& cfg, const Options& o, std::ostream& out) {
  const auto results = run_verification(cfg.seed, o.inject_fault);
  std::size_t failed = 0;
  for (const auto& r : results) {
    out << format_check(r) << "\n";
    failed += !r.passed;
  }
  out << results.size() - failed << "/" << results.size() << " checks passed\n";
  return failed ? kExitFailure : kExitOk;
}

template <class Real>
int dispatch(const std::string& verb, const RunConfig& cfg, const Options& o, std::ostream& out, std::ostream& err) {
  if (verb == "train-e2e") return train_e2e_cmd<Real>(cfg, out, err);
  if (verb == "train-diffusion") return train_diffusion_cmd<Real>(cfg, o, out, err);
  if (verb == "infer") return infer_cmd<Real>(cfg, o, out);
  if (verb == "eval") return eval_cmd<Real>(cfg, o, out);
  return verify_cmd(cfg, o, out);
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Residual-target diffusion ensembles for segmentation and restoration", "rsddpm"};
  app.require_subcommand(1, 1);
  Options o;
  std::uint64_t seed = 0;
  std::string out_dir, mode;

  auto common = [&](CLI::App* sub, bool ckpt) {
    sub->add_option("--config", o.config, "YAML run configuration")->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "run seed (overrides the config)");
    sub->add_option("--out", out_dir, "output directory (overrides the config)");
    sub->add_option("--mode", mode, "segmentation or restoration (overrides the config)")
        ->check(CLI::IsMember({"segmentation", "restoration"}));
    if (ckpt) sub->add_option("--ckpt", o.ckpts, "checkpoint file; repeat for e2e and denoiser")->check(CLI::ExistingFile);
  };
  auto* te = app.add_subcommand("train-e2e", "train the end-to-end segmentation model");
  common(te, false);
  auto* td = app.add_subcommand("train-diffusion", "train the residual-target denoiser");
  common(td, true);
  auto* inf = app.add_subcommand("infer", "sample ensemble outputs for image tensors");
  common(inf, true);
  inf->add_option("--input", o.inputs, "input image tensor (.rst); repeatable")->check(CLI::ExistingFile);
  auto* ev = app.add_subcommand("eval", "score the baseline, diffusion and ensemble on a split");
  common(ev, true);
  ev->add_option("--split", o.split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  ev->add_flag("--require-improvement", o.require_improvement, "exit 1 unless the ensemble beats the baseline");
  auto* ve = app.add_subcommand("verify", "run the numerical self-checks");
  common(ve, false);
  ve->add_flag("--inject-fault", o.inject_fault, "run the posterior check with alpha_t in place of alpha_bar_t");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  auto* sub = app.get_subcommands().front();
  if (sub->count("--seed")) o.seed = seed;
  if (sub->count("--out")) o.out = out_dir;
  if (sub->count("--mode")) o.mode = mode;

  try {
    const auto cfg = resolve_config(o);
    const auto& verb = sub->get_name();
    return cfg.precision == Precision::f32 ? dispatch<float>(verb, cfg, o, out, err)
                                           : dispatch<double>(verb, cfg, o, out, err);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const PrecisionError& e) {
    err << "precision error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << "\n";
    return kExitFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace rsddpm
