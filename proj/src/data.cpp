#include "rsddpm/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "rsddpm/rng.hpp"

namespace rsddpm {

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

std::string to_string(Mode m) { return m == Mode::segmentation ? "segmentation" : "restoration"; }

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw std::invalid_argument("unknown split '" + s + "' (expected train, val or test)");
}

Mode parse_mode(const std::string& s) {
  if (s == "segmentation") return Mode::segmentation;
  if (s == "restoration") return Mode::restoration;
  throw std::invalid_argument("unknown mode '" + s + "' (expected segmentation or restoration)");
}

namespace {

constexpr int kMaxAttempts = 1000;

struct Scene {
  std::vector<double> intensity;  // clean, in [0, 1] units before the ramp
  std::vector<double> mask;       // {0, 1}
  std::vector<double> ramp;
};

void validate(const ShapeSceneSpec& spec, std::size_t n) {
  if (n < 1) throw std::invalid_argument("dataset generation needs n >= 1");
  if (spec.height < kMinImageSize || spec.width < kMinImageSize) {
    throw std::invalid_argument("image " + std::to_string(spec.height) + "x" + std::to_string(spec.width) +
                                " is smaller than the minimum " + std::to_string(kMinImageSize) + "x" +
                                std::to_string(kMinImageSize));
  }
  if (spec.min_shapes < 1 || spec.max_shapes < spec.min_shapes) {
    throw std::invalid_argument("invalid shape count range");
  }
  if (spec.kinds.empty()) throw std::invalid_argument("no shape kinds enabled");
  if (!(spec.min_fg_fraction < spec.max_fg_fraction)) throw std::invalid_argument("invalid foreground bounds");
}

bool inside_triangle(double px, double py, const double (&v)[3][2]) {
  auto edge = [&](int a, int b) {
    return (v[b][0] - v[a][0]) * (py - v[a][1]) - (v[b][1] - v[a][1]) * (px - v[a][0]);
  };
  const double e0 = edge(0, 1), e1 = edge(1, 2), e2 = edge(2, 0);
  return (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
}

Scene render(const ShapeSceneSpec& spec, Rng& rng) {
  const std::size_t H = spec.height, W = spec.width;
  const double min_edge = static_cast<double>(std::min(H, W));
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    Scene sc;
    sc.intensity.assign(H * W, 0.0);
    sc.mask.assign(H * W, 0.0);
    sc.ramp.assign(H * W, 0.0);

    const double bg = spec.bg_low + (spec.bg_high - spec.bg_low) * rng.uniform();
    std::fill(sc.intensity.begin(), sc.intensity.end(), bg);
    const double theta = 2.0 * std::numbers::pi * rng.uniform();
    const double amp = spec.ramp * (2.0 * rng.uniform() - 1.0);
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        const double u = (static_cast<double>(x) + 0.5) / static_cast<double>(W) - 0.5;
        const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(H) - 0.5;
        sc.ramp[y * W + x] = amp * (u * std::cos(theta) + v * std::sin(theta));
      }
    }

    const auto count = rng.uniform_int(spec.min_shapes, spec.max_shapes);
    for (std::int64_t s = 0; s < count; ++s) {
      const auto kind = spec.kinds[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(spec.kinds.size()) - 1))];
      const double fg = spec.fg_low + (spec.fg_high - spec.fg_low) * rng.uniform();
      const double cx = static_cast<double>(W) * rng.uniform();
      const double cy = static_cast<double>(H) * rng.uniform();
      const double extent = 2.0 + (min_edge / 4.0 - 1.0) * rng.uniform();  // half-size in px
      double tri[3][2];
      double half_w = extent, half_h = extent;
      if (kind == ShapeKind::rectangle) {
        half_w = 1.0 + (min_edge / 4.0) * rng.uniform();
        half_h = 1.0 + (min_edge / 4.0) * rng.uniform();
      } else if (kind == ShapeKind::triangle) {
        for (auto& vtx : tri) {
          const double a = 2.0 * std::numbers::pi * rng.uniform();
          const double r = extent * (0.6 + 0.8 * rng.uniform());
          vtx[0] = cx + r * std::cos(a);
          vtx[1] = cy + r * std::sin(a);
        }
      }
      for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
          const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
          bool in = false;
          switch (kind) {
            case ShapeKind::disk: in = (px - cx) * (px - cx) + (py - cy) * (py - cy) <= extent * extent; break;
            case ShapeKind::rectangle: in = std::abs(px - cx) <= half_w && std::abs(py - cy) <= half_h; break;
            case ShapeKind::triangle: in = inside_triangle(px, py, tri); break;
          }
          if (in) {
            sc.intensity[y * W + x] = fg;
            sc.mask[y * W + x] = 1.0;
          }
        }
      }
    }

    double fg_pixels = 0;
    for (auto m : sc.mask) fg_pixels += m;
    const double frac = fg_pixels / static_cast<double>(H * W);
    if (frac >= spec.min_fg_fraction && frac <= spec.max_fg_fraction) return sc;
  }
  throw std::runtime_error("scene generator could not meet the foreground-fraction bounds");
}

template <class Real>
Tensor<Real> to_tensor(const std::vector<double>& v, std::size_t H, std::size_t W) {
  Tensor<Real> t({1, H, W});
  for (std::size_t i = 0; i < v.size(); ++i) t[i] = static_cast<Real>(v[i]);
  return t;
}

template <class Real>
DataItem<Real> segmentation_item(const ShapeSceneSpec& spec, std::uint64_t index, Split split) {
  auto rng = Rng::derive(spec.seed, index);
  const auto sc = render(spec, rng);
  std::vector<double> image(sc.intensity.size());
  for (std::size_t i = 0; i < image.size(); ++i) {
    image[i] = 2.0 * (sc.intensity[i] + sc.ramp[i] + spec.noise * rng.normal()) - 1.0;
  }
  DataItem<Real> item;
  item.index = index;
  item.split = split;
  item.image = to_tensor<Real>(image, spec.height, spec.width);
  item.target = to_tensor<Real>(sc.mask, spec.height, spec.width);
  return item;
}

template <class Real>
DataItem<Real> restoration_item(const ShapeSceneSpec& spec, std::uint64_t index, Split split) {
  auto rng = Rng::derive(spec.seed, index);
  const auto sc = render(spec, rng);
  const std::size_t n = sc.intensity.size();
  Tensor<Real> clean({1, spec.height, spec.width}), noisy({1, spec.height, spec.width}),
      corruption({1, spec.height, spec.width});
  for (std::size_t i = 0; i < n; ++i) {
    clean[i] = static_cast<Real>(2.0 * (sc.intensity[i] + sc.ramp[i]) - 1.0);
    noisy[i] = clean[i] + static_cast<Real>(spec.corruption * rng.normal());
    // Stored as the rounded difference so that image - target reproduces it exactly.
    corruption[i] = noisy[i] - clean[i];
  }
  DataItem<Real> item;
  item.index = index;
  item.split = split;
  item.image = std::move(noisy);
  item.target = std::move(clean);
  item.corruption = std::move(corruption);
  return item;
}

}  // namespace

template <class Real>
Dataset<Real> gen_segmentation(const ShapeSceneSpec& spec, std::size_t n, std::uint64_t first_index, Split split) {
  validate(spec, n);
  Dataset<Real> ds;
  ds.mode = Mode::segmentation;
  ds.items.reserve(n);
  for (std::size_t i = 0; i < n; ++i) ds.items.push_back(segmentation_item<Real>(spec, first_index + i, split));
  return ds;
}

template <class Real>
Dataset<Real> gen_restoration(const ShapeSceneSpec& spec, std::size_t n, std::uint64_t first_index, Split split) {
  validate(spec, n);
  Dataset<Real> ds;
  ds.mode = Mode::restoration;
  ds.items.reserve(n);
  for (std::size_t i = 0; i < n; ++i) ds.items.push_back(restoration_item<Real>(spec, first_index + i, split));
  return ds;
}

template <class Real>
Dataset<Real> make_benchmark(const ShapeSceneSpec& spec, Mode mode, std::size_t n_train, std::size_t n_val,
                             std::size_t n_test) {
  Dataset<Real> ds;
  ds.mode = mode;
  std::uint64_t next = 0;
  for (auto [split, n] : {std::pair{Split::train, n_train}, std::pair{Split::val, n_val}, std::pair{Split::test, n_test}}) {
    if (n == 0) continue;
    auto part = mode == Mode::segmentation ? gen_segmentation<Real>(spec, n, next, split)
                                           : gen_restoration<Real>(spec, n, next, split);
    for (auto& it : part.items) ds.items.push_back(std::move(it));
    next += n;
  }
  return ds;
}

template <class Real>
Tensor<Real> encode_mask(const Tensor<Real>& mask) {
  Tensor<Real> out(mask.shape());
  for (std::size_t i = 0; i < mask.size(); ++i) out[i] = Real(2) * mask[i] - Real(1);
  return out;
}

template <class Real>
Tensor<Real> encoded_target(const DataItem<Real>& item, Mode mode) {
  return mode == Mode::segmentation ? encode_mask(item.target) : item.target;
}

#define RSDDPM_INSTANTIATE(Real)                                                                             \
  template Dataset<Real> gen_segmentation(const ShapeSceneSpec&, std::size_t, std::uint64_t, Split);       \
  template Dataset<Real> gen_restoration(const ShapeSceneSpec&, std::size_t, std::uint64_t, Split);        \
  template Dataset<Real> make_benchmark(const ShapeSceneSpec&, Mode, std::size_t, std::size_t, std::size_t); \
  template Tensor<Real> encode_mask(const Tensor<Real>&);                                                  \
  template Tensor<Real> encoded_target(const DataItem<Real>&, Mode);

RSDDPM_INSTANTIATE(float)
RSDDPM_INSTANTIATE(double)

#undef RSDDPM_INSTANTIATE

}  // namespace rsddpm
