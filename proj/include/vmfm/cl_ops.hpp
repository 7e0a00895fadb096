#pragma once

#include <algorithm>
#include <stdexcept>
#include <utility>

#include "vmfm/tensor.hpp"

namespace vmfm::cl {

inline constexpr int kQRadius = 2;  // 5x5 square structuring element

// Widens a nonnegative residual map by grayscale dilation (separable max
// filter over a 5x5 square), then clamps to [0,1]. The widened band is the
// regression target for the error estimator.
template <class S>
Plane<S> q_widen(const Plane<S>& residual) {
  if ((residual < S(0)).any())
    throw std::invalid_argument("q_widen: residual map has negative entries");
  const int h = static_cast<int>(residual.rows());
  const int w = static_cast<int>(residual.cols());
  Plane<S> tmp(h, w), out(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      S m = residual(y, x);
      for (int d = -kQRadius; d <= kQRadius; ++d) {
        int xx = std::clamp(x + d, 0, w - 1);
        m = std::max(m, residual(y, xx));
      }
      tmp(y, x) = m;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      S m = tmp(y, x);
      for (int d = -kQRadius; d <= kQRadius; ++d) {
        int yy = std::clamp(y + d, 0, h - 1);
        m = std::max(m, tmp(yy, x));
      }
      out(y, x) = std::min(m, S(1));
    }
  return out;
}

// Confidence saturation: entries above tau snap to exactly 1; the rest pass
// through unchanged. tau must lie strictly inside (0,1).
template <class S>
Plane<S> threshold_update(const Plane<S>& cl_map, S tau) {
  if (!(tau > S(0) && tau < S(1)))
    throw std::invalid_argument("threshold_update: tau outside (0,1)");
  Plane<S> out = cl_map;
  for (Eigen::Index i = 0; i < out.size(); ++i)
    if (out.data()[i] > tau) out.data()[i] = S(1);
  return out;
}

// Winner indicators for cross supervision: beta1 marks pixels where branch 1's
// estimated deviation strictly exceeds branch 2's (branch 1 is worse there and
// should learn from branch 2), and vice versa. Ties select neither.
template <class S>
std::pair<MaskPlane, MaskPlane> complementary_area(const Plane<S>& cl1, const Plane<S>& cl2) {
  if (cl1.rows() != cl2.rows() || cl1.cols() != cl2.cols())
    throw std::invalid_argument("complementary_area: shape mismatch");
  MaskPlane beta1(cl1.rows(), cl1.cols()), beta2(cl1.rows(), cl1.cols());
  for (Eigen::Index i = 0; i < cl1.size(); ++i) {
    beta1.data()[i] = cl1.data()[i] > cl2.data()[i] ? 1 : 0;
    beta2.data()[i] = cl2.data()[i] > cl1.data()[i] ? 1 : 0;
  }
  return {beta1, beta2};
}

// Pixels where both thresholded maps saturated to exactly 1: neither branch
// can supervise the other, so the deviation-correction term takes over.
template <class S>
MaskPlane deviation_correction_area(const Plane<S>& cl1_thr, const Plane<S>& cl2_thr) {
  if (cl1_thr.rows() != cl2_thr.rows() || cl1_thr.cols() != cl2_thr.cols())
    throw std::invalid_argument("deviation_correction_area: shape mismatch");
  MaskPlane sigma(cl1_thr.rows(), cl1_thr.cols());
  for (Eigen::Index i = 0; i < cl1_thr.size(); ++i)
    sigma.data()[i] = (cl1_thr.data()[i] == S(1) && cl2_thr.data()[i] == S(1)) ? 1 : 0;
  return sigma;
}

}  // namespace vmfm::cl
