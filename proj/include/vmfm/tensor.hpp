#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace vmfm {

// All image math is kept in Eigen dense arrays templated on scalar so the same
// code runs the float pipeline and the double verification paths.
template <class S>
using Plane = Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using MaskPlane = Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class S>
using Vec = Eigen::Array<S, Eigen::Dynamic, 1>;

template <class S>
struct Image {
  Plane<S> r, g, b;

  Eigen::Index rows() const { return r.rows(); }
  Eigen::Index cols() const { return r.cols(); }
  const Plane<S>& channel(int c) const { return c == 0 ? r : (c == 1 ? g : b); }
  Plane<S>& channel(int c) { return c == 0 ? r : (c == 1 ? g : b); }
};

template <class S>
Image<S> make_image(Eigen::Index rows, Eigen::Index cols, S fill = S(0)) {
  Image<S> im;
  im.r = Plane<S>::Constant(rows, cols, fill);
  im.g = Plane<S>::Constant(rows, cols, fill);
  im.b = Plane<S>::Constant(rows, cols, fill);
  return im;
}

// Batched NCHW tensor backed by one flat array; rows are laid out
// n-major, then channel, then row, then column.
template <class S>
struct Tensor {
  int n = 0, c = 0, h = 0, w = 0;
  Vec<S> v;

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_)
      : n(n_), c(c_), h(h_), w(w_), v(Vec<S>::Zero(static_cast<Eigen::Index>(n_) * c_ * h_ * w_)) {}

  Eigen::Index size() const { return v.size(); }
  bool same_shape(const Tensor& o) const { return n == o.n && c == o.c && h == o.h && w == o.w; }

  S& at(int in, int ic, int ih, int iw) {
    return v[((static_cast<Eigen::Index>(in) * c + ic) * h + ih) * w + iw];
  }
  S at(int in, int ic, int ih, int iw) const {
    return v[((static_cast<Eigen::Index>(in) * c + ic) * h + ih) * w + iw];
  }

  // Contiguous view of one (n, c) plane.
  Eigen::Map<Plane<S>> plane(int in, int ic) {
    return Eigen::Map<Plane<S>>(v.data() + (static_cast<Eigen::Index>(in) * c + ic) * h * w, h, w);
  }
  Eigen::Map<const Plane<S>> plane(int in, int ic) const {
    return Eigen::Map<const Plane<S>>(v.data() + (static_cast<Eigen::Index>(in) * c + ic) * h * w,
                                      h, w);
  }
};

template <class S>
std::string shape_string(const Tensor<S>& t) {
  return "(" + std::to_string(t.n) + "," + std::to_string(t.c) + "," + std::to_string(t.h) + "," +
         std::to_string(t.w) + ")";
}

template <class S>
void require_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " +
                                shape_string(b));
}

template <class S>
Tensor<S> tensor_from_plane(const Plane<S>& p) {
  Tensor<S> t(1, 1, static_cast<int>(p.rows()), static_cast<int>(p.cols()));
  t.plane(0, 0) = p;
  return t;
}

template <class S>
Tensor<S> tensor_from_image(const Image<S>& im) {
  Tensor<S> t(1, 3, static_cast<int>(im.rows()), static_cast<int>(im.cols()));
  for (int c = 0; c < 3; ++c) t.plane(0, c) = im.channel(c);
  return t;
}

template <class T, class F>
Tensor<T> cast_tensor(const Tensor<F>& x) {
  Tensor<T> t(x.n, x.c, x.h, x.w);
  t.v = x.v.template cast<T>();
  return t;
}

template <class T, class F>
Plane<T> cast_plane(const Plane<F>& p) {
  return p.template cast<T>();
}

}  // namespace vmfm
