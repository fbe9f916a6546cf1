#include "rsddpm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "rsddpm/digest.hpp"
#include "rsddpm/schedule.hpp"

namespace rsddpm {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace {

class Writer {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  std::vector<std::uint8_t>& bytes() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  Reader(const std::uint8_t* p, std::size_t n, std::string origin) : p_(p), n_(n), origin_(std::move(origin)) {}

  void need(std::size_t k) const {
    if (n_ - pos_ < k) throw CheckpointError(origin_ + ": truncated at byte " + std::to_string(pos_));
  }
  std::uint8_t u8() {
    need(1);
    return p_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p_[pos_++]) << (8 * i);
    return v;
  }
  std::vector<std::uint8_t> raw(std::size_t k) {
    need(k);
    std::vector<std::uint8_t> out(p_ + pos_, p_ + pos_ + k);
    pos_ += k;
    return out;
  }
  std::string str() {
    const auto k = u32();
    need(k);
    std::string s(reinterpret_cast<const char*>(p_ + pos_), k);
    pos_ += k;
    return s;
  }
  bool done() const { return pos_ == n_; }

 private:
  const std::uint8_t* p_;
  std::size_t n_;
  std::size_t pos_ = 0;
  std::string origin_;
};

std::uint8_t dtype_of(Precision p) { return p == Precision::f32 ? 4 : 8; }

template <class Real>
constexpr Precision precision_of() {
  return sizeof(Real) == 4 ? Precision::f32 : Precision::f64;
}

}  // namespace

template <class Real>
Checkpoint make_checkpoint(const std::string& kind, const ParameterSet<Real>& params, const RunConfig& config) {
  Checkpoint c;
  c.kind = kind;
  c.precision = precision_of<Real>();
  // Output location and thread count do not affect the weights; keep them out
  // so identical runs produce identical bytes.
  RunConfig snapshot = config;
  snapshot.out_dir.clear();
  snapshot.threads = 0;
  c.config_json = config_to_json(snapshot);
  c.T = config.T;
  c.schedule_algorithm = Schedule::kAlgorithm;
  for (std::size_t i = 0; i < params.count(); ++i) {
    const auto& p = params[i];
    CheckpointBlock b;
    b.name = p.name;
    b.dtype = sizeof(Real);
    b.shape = p.value.shape();
    b.bytes.resize(p.value.size() * sizeof(Real));
    std::memcpy(b.bytes.data(), p.value.data().data(), b.bytes.size());
    c.blocks.push_back(std::move(b));
  }
  return c;
}

std::vector<std::uint8_t> encode_checkpoint(Checkpoint& c) {
  Writer w;
  w.raw(kCheckpointMagic, 8);
  w.u8(1);
  w.u8(dtype_of(c.precision));
  w.str(c.kind);
  w.str(c.config_json);
  w.u32(static_cast<std::uint32_t>(c.T));
  w.str(c.schedule_algorithm);
  w.u32(static_cast<std::uint32_t>(c.blocks.size()));
  for (const auto& b : c.blocks) {
    w.str(b.name);
    w.u8(b.dtype);
    w.u32(static_cast<std::uint32_t>(b.shape.size()));
    for (auto d : b.shape) w.u64(d);
    w.u64(b.bytes.size());
    w.raw(b.bytes.data(), b.bytes.size());
  }
  const auto digest = Sha256::of(w.bytes().data(), w.bytes().size());
  w.raw(digest.data(), digest.size());
  c.digest = Sha256::hex(digest);
  return std::move(w.bytes());
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
  if (bytes.size() < 8 + 32 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw CheckpointError(origin + ": not an RSDDPM01 checkpoint");
  }
  const auto body = bytes.size() - 32;
  const auto digest = Sha256::of(bytes.data(), body);
  if (std::memcmp(digest.data(), bytes.data() + body, 32) != 0) {
    throw CheckpointError(origin + ": integrity digest mismatch; refusing to load");
  }
  Reader r(bytes.data() + 8, body - 8, origin);
  Checkpoint c;
  if (r.u8() != 1) throw CheckpointError(origin + ": unsupported byte order");
  const auto dtype = r.u8();
  if (dtype != 4 && dtype != 8) throw CheckpointError(origin + ": unknown dtype " + std::to_string(dtype));
  c.precision = dtype == 4 ? Precision::f32 : Precision::f64;
  c.kind = r.str();
  c.config_json = r.str();
  c.T = static_cast<int>(r.u32());
  c.schedule_algorithm = r.str();
  const auto n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    CheckpointBlock b;
    b.name = r.str();
    b.dtype = r.u8();
    const auto rank = r.u32();
    std::size_t numel = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      b.shape.push_back(static_cast<std::size_t>(r.u64()));
      numel *= b.shape.back();
    }
    const auto nbytes = r.u64();
    if (nbytes != numel * b.dtype) throw CheckpointError(origin + ": block '" + b.name + "' has inconsistent size");
    b.bytes = r.raw(static_cast<std::size_t>(nbytes));
    c.blocks.push_back(std::move(b));
  }
  if (!r.done()) throw CheckpointError(origin + ": trailing bytes before digest");
  c.digest = Sha256::hex(digest);
  return c;
}

std::string save_checkpoint(const std::string& path, Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError(path + ": cannot open for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError(path + ": write failed");
  return ckpt.digest;
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(path + ": cannot open checkpoint");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, path);
}

template <class Real>
void load_parameters(const Checkpoint& c, ParameterSet<Real>& params) {
  if (c.precision != precision_of<Real>()) {
    throw PrecisionError("checkpoint holds " + to_string(c.precision) + " parameters but " +
                         to_string(precision_of<Real>()) + " was requested");
  }
  if (c.blocks.size() != params.count()) {
    throw CheckpointError("checkpoint has " + std::to_string(c.blocks.size()) + " blocks, model expects " +
                          std::to_string(params.count()));
  }
  for (const auto& b : c.blocks) {
    if (b.dtype != sizeof(Real)) throw PrecisionError("block '" + b.name + "' has a different dtype");
    std::size_t idx = 0;
    try {
      idx = params.find(b.name);
    } catch (const std::exception&) {
      throw CheckpointError("checkpoint block '" + b.name + "' does not exist in the model");
    }
    auto& v = params.mutable_value(idx);
    if (v.shape() != b.shape) throw CheckpointError("checkpoint block '" + b.name + "' has the wrong shape");
    std::memcpy(v.data().data(), b.bytes.data(), b.bytes.size());
  }
}

template Checkpoint make_checkpoint(const std::string&, const ParameterSet<float>&, const RunConfig&);
template Checkpoint make_checkpoint(const std::string&, const ParameterSet<double>&, const RunConfig&);
template void load_parameters(const Checkpoint&, ParameterSet<float>&);
template void load_parameters(const Checkpoint&, ParameterSet<double>&);

}  // namespace rsddpm
