#include "rsddpm/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

#include <json.hpp>

#include "rsddpm/checkpoint.hpp"

namespace rsddpm {

namespace fs = std::filesystem;

namespace {

constexpr char kTensorMagic[9] = "RSTENS01";

void put_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>(v >> (8 * i));
  out.write(b, 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>(v >> (8 * i));
  out.write(b, 8);
}

std::uint64_t get_le(std::istream& in, int n, const std::string& path) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), n)) throw std::runtime_error(path + ": truncated tensor file");
  std::uint64_t v = 0;
  for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

template <class Real>
void write_tensor(const std::string& path, const Tensor<Real>& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  out.write(kTensorMagic, 8);
  out.put(static_cast<char>(sizeof(Real)));
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put_u64(out, d);
  out.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(Real)));
  if (!out) throw std::runtime_error(path + ": write failed");
}

template <class Real>
Tensor<Real> read_tensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(path + ": cannot open tensor file");
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kTensorMagic, 8) != 0) {
    throw std::runtime_error(path + ": not an RSTENS01 tensor file");
  }
  const auto dtype = get_le(in, 1, path);
  if (dtype != sizeof(Real)) {
    throw PrecisionError(path + ": stored with " + std::to_string(dtype * 8) + "-bit elements, requested " +
                         std::to_string(sizeof(Real) * 8));
  }
  const auto rank = get_le(in, 4, path);
  if (rank == 0 || rank > 8) throw std::runtime_error(path + ": bad tensor rank");
  Shape shape;
  for (std::uint64_t i = 0; i < rank; ++i) shape.push_back(static_cast<std::size_t>(get_le(in, 8, path)));
  Tensor<Real> t(shape);
  if (!in.read(reinterpret_cast<char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(Real)))) {
    throw std::runtime_error(path + ": truncated tensor data");
  }
  if (in.peek() != std::char_traits<char>::eof()) throw std::runtime_error(path + ": trailing bytes");
  return t;
}

template <class Real>
void write_pgm(const std::string& path, const Tensor<Real>& t, double lo, double hi) {
  if (!(t.rank() == 2 || (t.rank() == 3 && t.dim(0) == 1))) {
    throw ShapeError("write_pgm expects [H, W] or [1, H, W]");
  }
  const auto h = t.dim(t.rank() - 2), w = t.dim(t.rank() - 1);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  out << "P5\n" << w << " " << h << "\n255\n";
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double u = (static_cast<double>(t[i]) - lo) / (hi - lo);
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(u, 0.0, 1.0) * 255.0))));
  }
}

template <class Real>
void save_dataset(const std::string& dir, const Dataset<Real>& data) {
  fs::create_directories(dir);
  nlohmann::json items = nlohmann::json::array();
  for (const auto& it : data.items) {
    const auto stem = to_string(it.split) + "_" + std::to_string(it.index);
    nlohmann::json e{{"index", it.index}, {"split", to_string(it.split)}, {"image", stem + ".image.rst"},
                     {"target", stem + ".target.rst"}};
    write_tensor((fs::path(dir) / (stem + ".image.rst")).string(), it.image);
    write_tensor((fs::path(dir) / (stem + ".target.rst")).string(), it.target);
    if (it.corruption) {
      e["corruption"] = stem + ".corruption.rst";
      write_tensor((fs::path(dir) / (stem + ".corruption.rst")).string(), *it.corruption);
    }
    items.push_back(std::move(e));
  }
  nlohmann::json m{{"mode", to_string(data.mode)}, {"dtype_bytes", sizeof(Real)}, {"items", std::move(items)}};
  std::ofstream out(fs::path(dir) / "manifest.json");
  out << m.dump(1) << "\n";
}

template <class Real>
Dataset<Real> load_dataset(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "manifest.json");
  if (!in) throw std::runtime_error(dir + ": missing manifest.json");
  nlohmann::json m;
  try {
    in >> m;
    Dataset<Real> data;
    data.mode = parse_mode(m.at("mode"));
    for (const auto& e : m.at("items")) {
      DataItem<Real> it;
      it.index = e.at("index");
      it.split = parse_split(e.at("split"));
      it.image = read_tensor<Real>((fs::path(dir) / e.at("image").get<std::string>()).string());
      it.target = read_tensor<Real>((fs::path(dir) / e.at("target").get<std::string>()).string());
      if (e.contains("corruption")) {
        it.corruption = read_tensor<Real>((fs::path(dir) / e.at("corruption").get<std::string>()).string());
      }
      data.items.push_back(std::move(it));
    }
    return data;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(dir + "/manifest.json: " + e.what());
  }
}

#define RSDDPM_INSTANTIATE(Real)                                                      \
  template void write_tensor(const std::string&, const Tensor<Real>&);               \
  template Tensor<Real> read_tensor(const std::string&);                             \
  template void write_pgm(const std::string&, const Tensor<Real>&, double, double);  \
  template void save_dataset(const std::string&, const Dataset<Real>&);              \
  template Dataset<Real> load_dataset(const std::string&);

RSDDPM_INSTANTIATE(float)
RSDDPM_INSTANTIATE(double)

#undef RSDDPM_INSTANTIATE

}  // namespace rsddpm
