#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "rsddpm/checkpoint.hpp"
#include "rsddpm/config.hpp"
#include "rsddpm/io.hpp"

using namespace rsddpm;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("rsddpm_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string error_of(const std::string& yaml) {
  try {
    parse_config(yaml, "cfg.yaml");
  } catch (const ConfigError& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST_CASE("config defaults and overrides") {
  const auto d = parse_config("");
  CHECK(d.mode == Mode::segmentation);
  CHECK(d.T == 100);
  CHECK(d.precision == Precision::f32);
  CHECK(d.e2e_train.adam.lr == 1e-4);
  CHECK(d.diffusion_train.train.adam.beta2 == 0.999);

  const auto c = parse_config(R"(
mode: restoration
seed: 9
precision: f64
schedule: {T: 50}
data:
  image_size: 32
  n_train: 10
  fg_range: [0.5, 0.9]
denoiser:
  channels: 8
  groups: 2
  lr: 3.0e-4
optimizer:
  beta1: 0.8
)");
  CHECK(c.mode == Mode::restoration);
  CHECK(c.seed == 9);
  CHECK(c.scene.seed == 9);
  CHECK(c.precision == Precision::f64);
  CHECK(c.T == 50);
  CHECK(c.denoiser.T == 50);
  CHECK(c.scene.height == 32);
  CHECK(c.scene.width == 32);
  CHECK(c.n_train == 10);
  CHECK(c.scene.fg_low == 0.5);
  CHECK(c.denoiser.base_channels == 8);
  CHECK(c.diffusion_train.train.adam.lr == 3e-4);
  CHECK(c.diffusion_train.train.adam.beta1 == 0.8);
  CHECK(c.e2e_train.adam.beta1 == 0.8);
}

TEST_CASE("config rejects unknown keys with line and field") {
  const auto msg = error_of("seed: 1\ndata:\n  n_train: 4\n  n_trian: 5\n");
  CHECK(msg.find("cfg.yaml:4:") != std::string::npos);
  CHECK(msg.find("data.n_trian") != std::string::npos);
  CHECK(msg.find("unknown key") != std::string::npos);
  CHECK(error_of("colour: red\n").find("'colour'") != std::string::npos);
}

TEST_CASE("config rejects bad values") {
  CHECK(error_of("schedule: {T: 1}").find("schedule.T") != std::string::npos);
  CHECK(error_of("seed: -3").find("seed") != std::string::npos);
  CHECK(error_of("mode: detection").find("mode") != std::string::npos);
  CHECK(error_of("precision: f16").find("precision") != std::string::npos);
  CHECK(error_of("data: {image_size: 18}").find("multiple of 4") != std::string::npos);
  CHECK(error_of("data: {generate: false}").find("data.path") != std::string::npos);
  CHECK(error_of("e2e: {lr: fast}").find("e2e.lr") != std::string::npos);
  CHECK(error_of("denoiser: {channels: 12, groups: 5}").find("divide") != std::string::npos);
  CHECK(error_of("data: [1, 2]").find("mapping") != std::string::npos);
  CHECK(error_of("seed: [unclosed").find("syntax") != std::string::npos);
  CHECK_THROWS_AS(load_config_file("/nonexistent/cfg.yaml"), ConfigError);
}

TEST_CASE("config JSON snapshot round-trips") {
  auto c = parse_config("mode: restoration\nseed: 77\nschedule: {T: 30}\ndata: {noise: 0.1, bg_range: [0.2, 0.3]}\n");
  const auto j = config_to_json(c);
  const auto back = config_from_json(j);
  CHECK(config_to_json(back) == j);
  CHECK(back.seed == 77);
  CHECK(back.scene.bg_high == 0.3);
  CHECK_THROWS_AS(config_from_json("{}"), ConfigError);
}

TEST_CASE("checkpoint round-trip is bit-exact") {
  RunConfig cfg;
  cfg.T = 40;
  Denoiser<float> d(DenoiserConfig{}, 3);
  auto ckpt = make_checkpoint("denoiser", d.parameters(), cfg);
  const auto dir = scratch("ckpt");
  const auto path = (dir / "d.ckpt").string();
  const auto digest = save_checkpoint(path, ckpt);
  CHECK(digest.size() == 64);

  const auto loaded = read_checkpoint(path);
  CHECK(loaded.digest == digest);
  CHECK(loaded.kind == "denoiser");
  CHECK(loaded.T == 40);
  CHECK(loaded.schedule_algorithm == "linear-eq24");
  CHECK(loaded.precision == Precision::f32);
  CHECK(config_from_json(loaded.config_json).T == 40);
  Denoiser<float> other(DenoiserConfig{}, 4);
  load_parameters(loaded, other.parameters());
  CHECK(other.parameters() == d.parameters());

  std::ifstream in(path, std::ios::binary);
  std::string head(8, '\0');
  in.read(head.data(), 8);
  CHECK(head == "RSDDPM01");

  auto again = make_checkpoint("denoiser", d.parameters(), cfg);
  CHECK(encode_checkpoint(again) == encode_checkpoint(ckpt));
}

TEST_CASE("checkpoint integrity and precision errors") {
  E2EModel<double> m(E2EConfig{}, 1);
  auto ckpt = make_checkpoint("e2e", m.parameters(), RunConfig{});
  const auto bytes = encode_checkpoint(ckpt);

  for (std::size_t pos : {std::size_t{20}, bytes.size() / 2, bytes.size() - 1}) {
    auto bad = bytes;
    bad[pos] ^= 0x40;
    CHECK_THROWS_AS(decode_checkpoint(bad), CheckpointError);
  }
  auto truncated = bytes;
  truncated.resize(bytes.size() - 40);
  CHECK_THROWS_AS(decode_checkpoint(truncated), CheckpointError);
  auto wrong_magic = bytes;
  wrong_magic[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(wrong_magic), CheckpointError);

  E2EModel<float> narrow(E2EConfig{}, 1);
  CHECK_THROWS_AS(load_parameters(decode_checkpoint(bytes), narrow.parameters()), PrecisionError);

  E2EConfig wide_cfg;
  wide_cfg.base_channels = 16;
  wide_cfg.groups = 4;
  E2EModel<double> mismatch(wide_cfg, 1);
  CHECK_THROWS_AS(load_parameters(decode_checkpoint(bytes), mismatch.parameters()), CheckpointError);

  auto frozen = m;
  frozen.freeze();
  CHECK_THROWS(load_parameters(decode_checkpoint(bytes), frozen.parameters()));
}

TEST_CASE("tensor files") {
  const auto dir = scratch("tensor");
  Rng rng(1);
  const auto t = gaussian<float>(rng, {1, 3, 5});
  const auto p = (dir / "t.rst").string();
  write_tensor(p, t);
  CHECK(read_tensor<float>(p) == t);
  CHECK_THROWS_AS(read_tensor<double>(p), PrecisionError);
  std::ofstream((dir / "junk.rst").string()) << "nope";
  CHECK_THROWS(read_tensor<float>((dir / "junk.rst").string()));
}

TEST_CASE("pgm output") {
  const auto dir = scratch("pgm");
  const Tensor<float> t({1, 2, 3}, std::vector<float>{-1, 0, 1, -2, 2, 0.5f});
  const auto p = (dir / "x.pgm").string();
  write_pgm(p, t);
  std::ifstream in(p, std::ios::binary);
  std::string magic;
  int w = 0, h = 0, maxv = 0;
  in >> magic >> w >> h >> maxv;
  in.get();
  CHECK(magic == "P5");
  CHECK(w == 3);
  CHECK(h == 2);
  CHECK(maxv == 255);
  std::vector<unsigned char> px(6);
  in.read(reinterpret_cast<char*>(px.data()), 6);
  CHECK(px == std::vector<unsigned char>{0, 128, 255, 0, 255, 191});
  CHECK_THROWS_AS(write_pgm(p, Tensor<float>({2, 2, 2})), ShapeError);
}

TEST_CASE("dataset directories round-trip") {
  ShapeSceneSpec spec;
  spec.seed = 2;
  const auto d = make_benchmark<float>(spec, Mode::restoration, 3, 1, 2);
  const auto dir = scratch("dataset");
  save_dataset(dir.string(), d);
  CHECK(fs::exists(dir / "manifest.json"));
  const auto back = load_dataset<float>(dir.string());
  CHECK(back.mode == Mode::restoration);
  REQUIRE(back.items.size() == d.items.size());
  for (std::size_t i = 0; i < d.items.size(); ++i) {
    CHECK(back.items[i].index == d.items[i].index);
    CHECK(back.items[i].split == d.items[i].split);
    CHECK(back.items[i].image == d.items[i].image);
    CHECK(back.items[i].target == d.items[i].target);
    CHECK(*back.items[i].corruption == *d.items[i].corruption);
  }
  CHECK_THROWS(load_dataset<double>(dir.string()));
  CHECK_THROWS(load_dataset<float>((dir / "missing").string()));
}
