#pragma once

#include <stdexcept>

#include "vmfm/tensor.hpp"

namespace vmfm {

// Number of dyadic levels used when quantizing synthetic alpha and colors.
// With all operands on the k/256 grid, a*f + (1-a)*b has an exact binary
// representation (numerators below 2^17 over denominator 2^16), so composites
// are bit-exact in float as well as double.
inline constexpr int kColorLevels = 256;

template <class S>
S quantize_unit(S x) {
  if (x < S(0)) x = S(0);
  if (x > S(1)) x = S(1);
  return static_cast<S>(static_cast<long long>(static_cast<double>(x) * kColorLevels + 0.5)) /
         S(kColorLevels);
}

template <class S>
Plane<S> quantize_unit_plane(const Plane<S>& p) {
  Plane<S> q = p;
  for (Eigen::Index i = 0; i < q.size(); ++i) q.data()[i] = quantize_unit(q.data()[i]);
  return q;
}

template <class S>
void check_alpha_range(const Plane<S>& alpha, const char* op) {
  if ((alpha < S(0)).any() || (alpha > S(1)).any())
    throw std::invalid_argument(std::string(op) + ": alpha outside [0,1]");
}

template <class S>
Plane<S> composite_plane(const Plane<S>& fg, const Plane<S>& bg, const Plane<S>& alpha) {
  return alpha * fg + (S(1) - alpha) * bg;
}

// I = a*F + (1-a)*B with a single-channel matte broadcast over color channels.
template <class S>
Image<S> composite(const Image<S>& fg, const Image<S>& bg, const Plane<S>& alpha) {
  if (fg.rows() != bg.rows() || fg.cols() != bg.cols() || fg.rows() != alpha.rows() ||
      fg.cols() != alpha.cols())
    throw std::invalid_argument("composite: size mismatch between fg, bg and alpha");
  check_alpha_range(alpha, "composite");
  Image<S> out;
  out.r = composite_plane(fg.r, bg.r, alpha);
  out.g = composite_plane(fg.g, bg.g, alpha);
  out.b = composite_plane(fg.b, bg.b, alpha);
  return out;
}

template <class S>
Image<S> solid_image(Eigen::Index rows, Eigen::Index cols, S r, S g, S b) {
  Image<S> im;
  im.r = Plane<S>::Constant(rows, cols, r);
  im.g = Plane<S>::Constant(rows, cols, g);
  im.b = Plane<S>::Constant(rows, cols, b);
  return im;
}

}  // namespace vmfm
