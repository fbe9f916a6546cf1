#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include "rsddpm/data.hpp"
#include "rsddpm/models.hpp"
#include "rsddpm/pipeline.hpp"

namespace rsddpm {

/// Invalid configuration: unknown keys, bad types or values. Messages carry the
/// line and field where possible.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Precision { f32, f64 };

std::string to_string(Precision p);
Precision parse_precision(const std::string& s);

struct RunConfig {
  Mode mode = Mode::segmentation;
  std::uint64_t seed = 1234;
  Precision precision = Precision::f32;
  std::size_t threads = 0;  // 0 = RSDDPM_THREADS or hardware concurrency; RSDDPM_THREADS caps it otherwise
  int T = 100;

  ShapeSceneSpec scene;  // scene.seed is always overwritten by seed
  std::size_t n_train = 2048, n_val = 256, n_test = 256;
  std::string data_path;
  bool generate = true;

  E2EConfig e2e;
  TrainConfig e2e_train;
  DenoiserConfig denoiser;
  DiffusionTrainConfig diffusion_train;

  std::string out_dir = "runs/default";

  /// Copies the shared fields (seed, T, threads, Adam moments) into the nested
  /// structs. Called by the loaders; call again after editing fields by hand.
  void normalize();
  std::size_t effective_threads() const;
};

/// Parses the YAML run configuration. Every key is optional; unknown keys are
/// rejected.
RunConfig load_config_file(const std::string& path);
RunConfig parse_config(const std::string& yaml_text, const std::string& origin = "<config>");

/// Lossless JSON snapshot used inside checkpoints and run outputs.
std::string config_to_json(const RunConfig& cfg);
RunConfig config_from_json(const std::string& json_text);

}  // namespace rsddpm
