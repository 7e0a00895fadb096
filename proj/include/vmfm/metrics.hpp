#pragma once

#include <cmath>
#include <queue>
#include <stdexcept>
#include <vector>

#include "vmfm/tensor.hpp"

namespace vmfm::metrics {

// ---- error maps ----------------------------------------------------------------
//
// Every metric is the aggregate of a per-pixel error map, so regional
// breakdowns use the same definition as the whole-image value.

template <class S>
void require_same_size(const Plane<S>& a, const Plane<S>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument(std::string(op) + ": size mismatch");
}

template <class S>
Plane<double> abs_error_map(const Plane<S>& pd, const Plane<S>& gt) {
  require_same_size(pd, gt, "abs_error_map");
  return (pd.template cast<double>() - gt.template cast<double>()).abs();
}

template <class S>
Plane<double> sq_error_map(const Plane<S>& pd, const Plane<S>& gt) {
  require_same_size(pd, gt, "sq_error_map");
  return (pd.template cast<double>() - gt.template cast<double>()).square();
}

// ---- gaussian gradient metric -----------------------------------------------------

inline constexpr double kGradSigma = 1.4;
inline constexpr int kGradRadius = 5;  // ceil(3 * sigma)

namespace detail {

struct GradKernels {
  std::vector<double> smooth;  // gaussian, sums to 1
  std::vector<double> deriv;   // gaussian derivative, unit response to a unit ramp
};

inline const GradKernels& grad_kernels() {
  static const GradKernels k = [] {
    GradKernels g;
    const int r = kGradRadius;
    g.smooth.resize(2 * r + 1);
    g.deriv.resize(2 * r + 1);
    double ssum = 0.0;
    for (int i = -r; i <= r; ++i) {
      double e = std::exp(-double(i) * i / (2.0 * kGradSigma * kGradSigma));
      g.smooth[i + r] = e;
      g.deriv[i + r] = -double(i) * e;
      ssum += e;
    }
    for (auto& v : g.smooth) v /= ssum;
    // Correlation with f(x) = x must produce exactly 1.
    double ramp = 0.0;
    for (int i = -r; i <= r; ++i) ramp += double(i) * g.deriv[i + r];
    for (auto& v : g.deriv) v /= ramp;
    return g;
  }();
  return k;
}

// Separable correlation with replicate boundary; kx runs along columns, ky
// along rows.
inline Plane<double> correlate_sep(const Plane<double>& img, const std::vector<double>& kx,
                                   const std::vector<double>& ky) {
  const int h = static_cast<int>(img.rows()), w = static_cast<int>(img.cols());
  const int rx = (static_cast<int>(kx.size()) - 1) / 2;
  const int ry = (static_cast<int>(ky.size()) - 1) / 2;
  Plane<double> tmp(h, w), out(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int d = -rx; d <= rx; ++d) s += kx[d + rx] * img(y, std::clamp(x + d, 0, w - 1));
      tmp(y, x) = s;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int d = -ry; d <= ry; ++d) s += ky[d + ry] * tmp(std::clamp(y + d, 0, h - 1), x);
      out(y, x) = s;
    }
  return out;
}

}  // namespace detail

// Per-pixel squared difference of the two gaussian-derivative components.
template <class S>
Plane<double> grad_error_map(const Plane<S>& pd, const Plane<S>& gt) {
  require_same_size(pd, gt, "grad_error_map");
  const auto& k = detail::grad_kernels();
  Plane<double> pdd = pd.template cast<double>();
  Plane<double> gtd = gt.template cast<double>();
  Plane<double> gx_p = detail::correlate_sep(pdd, k.deriv, k.smooth);
  Plane<double> gy_p = detail::correlate_sep(pdd, k.smooth, k.deriv);
  Plane<double> gx_g = detail::correlate_sep(gtd, k.deriv, k.smooth);
  Plane<double> gy_g = detail::correlate_sep(gtd, k.smooth, k.deriv);
  return (gx_p - gx_g).square() + (gy_p - gy_g).square();
}

// ---- connectivity metric ------------------------------------------------------------

inline constexpr double kConnStep = 0.1;
inline constexpr double kConnPhiThreshold = 0.15;

namespace detail {

// Largest 4-connected component of a binary map; ties go to the component
// whose first pixel appears earliest in raster order. Empty input gives an
// all-zero map.
inline MaskPlane largest_component(const MaskPlane& bin) {
  const int h = static_cast<int>(bin.rows()), w = static_cast<int>(bin.cols());
  Eigen::Array<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> label(h, w);
  label.setConstant(-1);
  int best_label = -1;
  long best_size = 0;
  int next = 0;
  std::vector<std::pair<int, int>> stack;
  for (int sy = 0; sy < h; ++sy)
    for (int sx = 0; sx < w; ++sx) {
      if (!bin(sy, sx) || label(sy, sx) >= 0) continue;
      long size = 0;
      stack.clear();
      stack.push_back({sy, sx});
      label(sy, sx) = next;
      while (!stack.empty()) {
        auto [y, x] = stack.back();
        stack.pop_back();
        size++;
        const int dy[4] = {-1, 1, 0, 0}, dx[4] = {0, 0, -1, 1};
        for (int d = 0; d < 4; ++d) {
          int ny = y + dy[d], nx = x + dx[d];
          if (ny >= 0 && ny < h && nx >= 0 && nx < w && bin(ny, nx) && label(ny, nx) < 0) {
            label(ny, nx) = next;
            stack.push_back({ny, nx});
          }
        }
      }
      if (size > best_size) {  // strict: earlier label wins ties
        best_size = size;
        best_label = next;
      }
      next++;
    }
  MaskPlane out = MaskPlane::Zero(h, w);
  if (best_label >= 0)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out(y, x) = label(y, x) == best_label ? 1 : 0;
  return out;
}

}  // namespace detail

// Connectivity error map: levels 0.1..0.9, l_map holds the last level at which
// a pixel still belonged to the largest jointly-connected region, and
// phi = 1 - d * [d >= 0.15] on the distance to that level.
template <class S>
Plane<double> conn_error_map(const Plane<S>& pd, const Plane<S>& gt) {
  require_same_size(pd, gt, "conn_error_map");
  const int h = static_cast<int>(pd.rows()), w = static_cast<int>(pd.cols());
  Plane<double> pdd = pd.template cast<double>();
  Plane<double> gtd = gt.template cast<double>();
  Plane<double> l_map = Plane<double>::Constant(h, w, -1.0);
  double prev = 0.0;
  for (int step = 1; step <= 9; ++step) {
    double theta = step * kConnStep;
    MaskPlane joint(h, w);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        joint(y, x) = (pdd(y, x) >= theta && gtd(y, x) >= theta) ? 1 : 0;
    MaskPlane omega = detail::largest_component(joint);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (l_map(y, x) == -1.0 && !omega(y, x)) l_map(y, x) = prev;
    prev = theta;
  }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (l_map(y, x) == -1.0) l_map(y, x) = 1.0;

  Plane<double> out(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double dp = pdd(y, x) - l_map(y, x);
      double dg = gtd(y, x) - l_map(y, x);
      double phi_p = 1.0 - (dp >= kConnPhiThreshold ? dp : 0.0);
      double phi_g = 1.0 - (dg >= kConnPhiThreshold ? dg : 0.0);
      out(y, x) = std::abs(phi_p - phi_g);
    }
  return out;
}

// ---- aggregates ---------------------------------------------------------------------

struct MetricValues {
  double sad = 0.0;   // sum of absolute differences
  double mse = 0.0;   // mean squared error
  double grad = 0.0;  // sum of squared gaussian-derivative differences
  double conn = 0.0;  // sum of connectivity errors
};

// Sums/means of an error map restricted to a mask; empty masks give zeros.
inline double masked_sum(const Plane<double>& m, const MaskPlane& mask) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < m.size(); ++i)
    if (mask.data()[i]) s += m.data()[i];
  return s;
}

inline double masked_mean(const Plane<double>& m, const MaskPlane& mask) {
  double s = 0.0;
  long n = 0;
  for (Eigen::Index i = 0; i < m.size(); ++i)
    if (mask.data()[i]) {
      s += m.data()[i];
      n++;
    }
  return n == 0 ? 0.0 : s / double(n);
}

struct RegionMasks {
  MaskPlane all, human, object, rest;  // object excludes human; rest is the remainder
};

inline RegionMasks make_region_masks(const MaskPlane& human_mask, const MaskPlane& object_mask) {
  RegionMasks r;
  const auto h = human_mask.rows(), w = human_mask.cols();
  r.all = MaskPlane::Constant(h, w, 1);
  r.human = human_mask;
  r.object = MaskPlane::Zero(h, w);
  r.rest = MaskPlane::Zero(h, w);
  for (Eigen::Index i = 0; i < r.all.size(); ++i) {
    bool hu = human_mask.data()[i] != 0;
    bool ob = object_mask.data()[i] != 0;
    r.object.data()[i] = (ob && !hu) ? 1 : 0;
    r.rest.data()[i] = (!ob && !hu) ? 1 : 0;
  }
  return r;
}

template <class S>
MetricValues evaluate_masked(const Plane<S>& pd, const Plane<S>& gt, const MaskPlane& mask) {
  Plane<double> ae = abs_error_map(pd, gt);
  Plane<double> se = sq_error_map(pd, gt);
  Plane<double> ge = grad_error_map(pd, gt);
  Plane<double> ce = conn_error_map(pd, gt);
  MetricValues v;
  v.sad = masked_sum(ae, mask);
  v.mse = masked_mean(se, mask);
  v.grad = masked_sum(ge, mask);
  v.conn = masked_sum(ce, mask);
  return v;
}

struct RegionReport {
  MetricValues all, human, object, rest;
};

template <class S>
RegionReport evaluate_regions(const Plane<S>& pd, const Plane<S>& gt, const RegionMasks& masks) {
  Plane<double> ae = abs_error_map(pd, gt);
  Plane<double> se = sq_error_map(pd, gt);
  Plane<double> ge = grad_error_map(pd, gt);
  Plane<double> ce = conn_error_map(pd, gt);
  auto fill = [&](const MaskPlane& m) {
    MetricValues v;
    v.sad = masked_sum(ae, m);
    v.mse = masked_mean(se, m);
    v.grad = masked_sum(ge, m);
    v.conn = masked_sum(ce, m);
    return v;
  };
  RegionReport r;
  r.all = fill(masks.all);
  r.human = fill(masks.human);
  r.object = fill(masks.object);
  r.rest = fill(masks.rest);
  return r;
}

// ---- trimap ---------------------------------------------------------------------------

enum class TrimapLabel : std::uint8_t { background = 0, foreground = 1, unknown = 2 };

struct Circle {
  double cy = 0, cx = 0, r = 0;
};

// Foreground where the silhouette probability is decisive (> 0.95); unknown on
// the soft band (0.05..0.95) plus the interaction circles, minus foreground;
// background elsewhere. Circles falling outside the image are clipped.
template <class S>
MaskPlane generate_trimap(const Plane<S>& seg_prob, const std::vector<Circle>& circles) {
  const int h = static_cast<int>(seg_prob.rows()), w = static_cast<int>(seg_prob.cols());
  MaskPlane out(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double p = double(seg_prob(y, x));
      bool fg = p > 0.95;
      bool band = p >= 0.05 && p <= 0.95;
      bool circ = false;
      for (const Circle& c : circles) {
        double dy = y - c.cy, dx = x - c.cx;
        if (dy * dy + dx * dx <= c.r * c.r) {
          circ = true;
          break;
        }
      }
      TrimapLabel l = TrimapLabel::background;
      if (fg)
        l = TrimapLabel::foreground;
      else if (band || circ)
        l = TrimapLabel::unknown;
      out(y, x) = static_cast<std::uint8_t>(l);
    }
  return out;
}

}  // namespace vmfm::metrics
