#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "rsddpm/tensor.hpp"

namespace rsddpm {

enum class ShapeKind { disk, rectangle, triangle };
enum class Split { train, val, test };
enum class Mode { segmentation, restoration };

std::string to_string(Split s);
std::string to_string(Mode m);
Split parse_split(const std::string& s);
Mode parse_mode(const std::string& s);

/// Parameters of the synthetic shape scenes. Intensities live in [0, 1] and are
/// mapped to [-1, 1] on output.
struct ShapeSceneSpec {
  std::size_t height = 16;
  std::size_t width = 16;
  int min_shapes = 1;
  int max_shapes = 3;
  std::vector<ShapeKind> kinds{ShapeKind::disk, ShapeKind::rectangle, ShapeKind::triangle};
  double fg_low = 0.45, fg_high = 0.85;
  double bg_low = 0.15, bg_high = 0.55;
  double ramp = 0.2;    // amplitude of a random linear illumination ramp
  double noise = 0.15;  // per-pixel Gaussian noise in segmentation images
  double min_fg_fraction = 0.05, max_fg_fraction = 0.6;
  double corruption = 0.2;  // std of the additive corruption in restoration mode
  std::uint64_t seed = 0;
};

/// Smallest edge the generator accepts; shapes are at least 2 px across.
inline constexpr std::size_t kMinImageSize = 8;

/// One (I0, x0) pair. In segmentation mode target is the binary mask in {0, 1};
/// in restoration mode it is the clean image and corruption holds c = I0 - x0.
template <class Real>
struct DataItem {
  std::uint64_t index = 0;
  Split split = Split::train;
  Tensor<Real> image;
  Tensor<Real> target;
  std::optional<Tensor<Real>> corruption;
};

template <class Real>
struct Dataset {
  Mode mode = Mode::segmentation;
  std::vector<DataItem<Real>> items;

  std::vector<const DataItem<Real>*> split(Split s) const {
    std::vector<const DataItem<Real>*> out;
    for (const auto& it : items) {
      if (it.split == s) out.push_back(&it);
    }
    return out;
  }
};

/// Items for indices [first_index, first_index + n), each a pure function of
/// (spec, index). Throws std::invalid_argument for n < 1 or images smaller than
/// kMinImageSize.
template <class Real>
Dataset<Real> gen_segmentation(const ShapeSceneSpec& spec, std::size_t n, std::uint64_t first_index = 0,
                               Split split = Split::train);

template <class Real>
Dataset<Real> gen_restoration(const ShapeSceneSpec& spec, std::size_t n, std::uint64_t first_index = 0,
                              Split split = Split::train);

/// Train/val/test over disjoint index ranges [0, n_train), [n_train, n_train + n_val), ...
template <class Real>
Dataset<Real> make_benchmark(const ShapeSceneSpec& spec, Mode mode, std::size_t n_train, std::size_t n_val,
                             std::size_t n_test);

/// {0, 1} -> {-1, +1}
template <class Real>
Tensor<Real> encode_mask(const Tensor<Real>& mask);

/// Training target in x0-space: encoded mask (segmentation) or clean image (restoration).
template <class Real>
Tensor<Real> encoded_target(const DataItem<Real>& item, Mode mode);

}  // namespace rsddpm
