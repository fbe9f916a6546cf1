#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "rsddpm/autograd.hpp"
#include "rsddpm/config.hpp"

namespace rsddpm {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Stored and requested floating-point widths differ. Never converted silently.
class PrecisionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

inline constexpr char kCheckpointMagic[9] = "RSDDPM01";

struct CheckpointBlock {
  std::string name;
  std::uint8_t dtype = 4;  // bytes per element: 4 = f32, 8 = f64
  Shape shape;
  std::vector<std::uint8_t> bytes;  // little-endian element data
};

/// Layout (all integers little-endian):
///   magic[8] u8 endian(=1) u8 dtype
///   str kind  str config_json  u32 T  str schedule_algorithm
///   u32 n_blocks { str name  u8 dtype  u32 rank  u64 dims[rank]  u64 n_bytes  bytes }
///   sha256[32] over every preceding byte
/// where str = u32 length followed by UTF-8 bytes.
struct Checkpoint {
  std::string kind;  // "e2e" or "denoiser"
  Precision precision = Precision::f32;
  std::string config_json;
  int T = 0;
  std::string schedule_algorithm;
  std::vector<CheckpointBlock> blocks;
  std::string digest;  // hex of the trailing SHA-256, filled by save/read
};

template <class Real>
Checkpoint make_checkpoint(const std::string& kind, const ParameterSet<Real>& params, const RunConfig& config);

std::vector<std::uint8_t> encode_checkpoint(Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& origin = "<memory>");

/// Writes the file and returns the hex digest.
std::string save_checkpoint(const std::string& path, Checkpoint& ckpt);
/// Reads and verifies the magic, endianness and digest.
Checkpoint read_checkpoint(const std::string& path);

/// Copies blocks into params by name. Throws PrecisionError when the stored
/// dtype differs from Real and CheckpointError on missing blocks or shape mismatches.
template <class Real>
void load_parameters(const Checkpoint& ckpt, ParameterSet<Real>& params);

}  // namespace rsddpm
