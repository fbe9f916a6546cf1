#pragma once

#include <limits>
#include <string>
#include <vector>

#include "rsddpm/tensor.hpp"

namespace rsddpm {

// Masks are compared in {-1, +1}-encoded space: a pixel is foreground when its
// value is > 0. Two empty masks score iou = dice = 1.

template <class Real>
double iou(const Tensor<Real>& pred, const Tensor<Real>& truth);

template <class Real>
double dice(const Tensor<Real>& pred, const Tensor<Real>& truth);

template <class Real>
double mse(const Tensor<Real>& pred, const Tensor<Real>& truth);

/// 10 log10(range^2 / mse); +inf when mse == 0.
template <class Real>
double psnr(const Tensor<Real>& pred, const Tensor<Real>& truth, double range = 2.0);

struct ImageMetrics {
  double iou = 0, dice = 0, mse = 0, psnr = 0;
};

/// Per-image metrics plus their means. Infinite PSNRs are excluded from the
/// PSNR mean; if every image is infinite the mean is +inf.
struct MetricReport {
  std::string method;
  std::vector<ImageMetrics> images;

  void add(const ImageMetrics& m) { images.push_back(m); }
  ImageMetrics aggregate() const;
  std::size_t size() const noexcept { return images.size(); }
};

template <class Real>
ImageMetrics score(const Tensor<Real>& pred, const Tensor<Real>& truth, double range = 2.0);

}  // namespace rsddpm
