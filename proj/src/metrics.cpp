#include "rsddpm/metrics.hpp"

#include <cmath>

namespace rsddpm {

namespace {

struct Counts {
  double inter = 0, pred = 0, truth = 0;
};

template <class Real>
Counts count(const Tensor<Real>& pred, const Tensor<Real>& truth) {
  require_same_shape(pred.shape(), truth.shape(), "mask metric");
  Counts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] > Real(0), t = truth[i] > Real(0);
    c.inter += (p && t);
    c.pred += p;
    c.truth += t;
  }
  return c;
}

}  // namespace

template <class Real>
double iou(const Tensor<Real>& pred, const Tensor<Real>& truth) {
  const auto c = count(pred, truth);
  const double uni = c.pred + c.truth - c.inter;
  return uni == 0 ? 1.0 : c.inter / uni;
}

template <class Real>
double dice(const Tensor<Real>& pred, const Tensor<Real>& truth) {
  const auto c = count(pred, truth);
  const double denom = c.pred + c.truth;
  return denom == 0 ? 1.0 : 2.0 * c.inter / denom;
}

template <class Real>
double mse(const Tensor<Real>& pred, const Tensor<Real>& truth) {
  require_same_shape(pred.shape(), truth.shape(), "mse");
  double acc = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - static_cast<double>(truth[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(pred.size());
}

template <class Real>
double psnr(const Tensor<Real>& pred, const Tensor<Real>& truth, double range) {
  const double e = mse(pred, truth);
  if (e == 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(range * range / e);
}

template <class Real>
ImageMetrics score(const Tensor<Real>& pred, const Tensor<Real>& truth, double range) {
  return {iou(pred, truth), dice(pred, truth), mse(pred, truth), psnr(pred, truth, range)};
}

ImageMetrics MetricReport::aggregate() const {
  ImageMetrics m;
  if (images.empty()) return m;
  double finite_psnr = 0;
  std::size_t finite_n = 0;
  for (const auto& im : images) {
    m.iou += im.iou;
    m.dice += im.dice;
    m.mse += im.mse;
    if (std::isfinite(im.psnr)) {
      finite_psnr += im.psnr;
      ++finite_n;
    }
  }
  const auto n = static_cast<double>(images.size());
  m.iou /= n;
  m.dice /= n;
  m.mse /= n;
  m.psnr = finite_n ? finite_psnr / static_cast<double>(finite_n) : std::numeric_limits<double>::infinity();
  return m;
}

#define RSDDPM_INSTANTIATE(Real)                                        \
  template double iou(const Tensor<Real>&, const Tensor<Real>&);        \
  template double dice(const Tensor<Real>&, const Tensor<Real>&);       \
  template double mse(const Tensor<Real>&, const Tensor<Real>&);        \
  template double psnr(const Tensor<Real>&, const Tensor<Real>&, double); \
  template ImageMetrics score(const Tensor<Real>&, const Tensor<Real>&, double);

RSDDPM_INSTANTIATE(float)
RSDDPM_INSTANTIATE(double)

#undef RSDDPM_INSTANTIATE

}  // namespace rsddpm
