#pragma once

#include <stdexcept>

#include "vmfm/autodiff.hpp"

namespace vmfm::ad {

namespace detail {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;  // column major

template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline int conv_out_dim(int in, int k, int stride, int pad) {
  int out = (in + 2 * pad - k) / stride + 1;
  if (out <= 0) throw std::invalid_argument("conv: output dimension would be empty");
  return out;
}

// Gathers k x k patches of one sample (c channels, hi x wi) into a
// (c*kh*kw) x (ho*wo) matrix; out-of-image taps read as zero.
template <class S>
void im2col(const S* img, int c, int hi, int wi, int kh, int kw, int stride, int pad, int ho,
            int wo, Mat<S>& col) {
  col.setZero(Eigen::Index(c) * kh * kw, Eigen::Index(ho) * wo);
  for (int oy = 0; oy < ho; ++oy)
    for (int ox = 0; ox < wo; ++ox) {
      Eigen::Index p = Eigen::Index(oy) * wo + ox;
      S* dst = col.data() + p * col.rows();
      for (int ci = 0; ci < c; ++ci)
        for (int ky = 0; ky < kh; ++ky) {
          int iy = oy * stride - pad + ky;
          for (int kx = 0; kx < kw; ++kx) {
            int ix = ox * stride - pad + kx;
            S v = S(0);
            if (iy >= 0 && iy < hi && ix >= 0 && ix < wi)
              v = img[(Eigen::Index(ci) * hi + iy) * wi + ix];
            dst[(Eigen::Index(ci) * kh + ky) * kw + kx] = v;
          }
        }
    }
}

// Scatter-add of the column matrix back into one sample image; the adjoint of
// im2col with identical geometry.
template <class S>
void col2im_add(const Mat<S>& col, S* img, int c, int hi, int wi, int kh, int kw, int stride,
                int pad, int ho, int wo) {
  for (int oy = 0; oy < ho; ++oy)
    for (int ox = 0; ox < wo; ++ox) {
      Eigen::Index p = Eigen::Index(oy) * wo + ox;
      const S* src = col.data() + p * col.rows();
      for (int ci = 0; ci < c; ++ci)
        for (int ky = 0; ky < kh; ++ky) {
          int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= hi) continue;
          for (int kx = 0; kx < kw; ++kx) {
            int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= wi) continue;
            img[(Eigen::Index(ci) * hi + iy) * wi + ix] +=
                src[(Eigen::Index(ci) * kh + ky) * kw + kx];
          }
        }
    }
}

}  // namespace detail

// 2-D convolution. x: (n, cin, h, w); w: (cout, cin, kh, kw); b: (1, cout, 1, 1).
template <class S>
Var<S> conv2d(const Var<S>& x, const Var<S>& w, const Var<S>& b, int stride, int pad) {
  detail::check_same_tape(x, w, "conv2d");
  detail::check_same_tape(x, b, "conv2d");
  const Tensor<S>&tx = x->val, &tw = w->val, &tb = b->val;
  if (tw.c != tx.c)
    throw std::invalid_argument("conv2d: weight expects " + std::to_string(tw.c) +
                                " input channels, got " + shape_string(tx));
  if (tb.n != 1 || tb.c != tw.n || tb.h != 1 || tb.w != 1)
    throw std::invalid_argument("conv2d: bias shape must be (1,cout,1,1)");
  const int cout = tw.n, cin = tx.c, kh = tw.h, kw = tw.w;
  const int ho = detail::conv_out_dim(tx.h, kh, stride, pad);
  const int wo = detail::conv_out_dim(tx.w, kw, stride, pad);
  const Eigen::Index kdim = Eigen::Index(cin) * kh * kw;
  const Eigen::Index pdim = Eigen::Index(ho) * wo;

  Tensor<S> out(tx.n, cout, ho, wo);
  {
    Eigen::Map<const detail::RowMat<S>> wmat(tw.v.data(), cout, kdim);
    detail::Mat<S> col;
    for (int n = 0; n < tx.n; ++n) {
      detail::im2col(tx.v.data() + Eigen::Index(n) * cin * tx.h * tx.w, cin, tx.h, tx.w, kh, kw,
                     stride, pad, ho, wo, col);
      Eigen::Map<detail::RowMat<S>> omat(out.v.data() + Eigen::Index(n) * cout * pdim, cout, pdim);
      omat.noalias() = wmat * col;
      for (int c = 0; c < cout; ++c) omat.row(c).array() += tb.v[c];
    }
  }

  bool rg = x->requires_grad || w->requires_grad || b->requires_grad;
  BackwardFn<S> back;
  if (rg)
    back = [x, w, b, stride, pad, cout, cin, kh, kw, ho, wo, kdim, pdim](Node<S>& self) {
      const Tensor<S>&tx = x->val, &tw = w->val;
      Eigen::Map<const detail::RowMat<S>> wmat(tw.v.data(), cout, kdim);
      detail::Mat<S> col;
      if (w->requires_grad) ensure_grad(w);
      if (b->requires_grad) ensure_grad(b);
      if (x->requires_grad) ensure_grad(x);
      for (int n = 0; n < tx.n; ++n) {
        Eigen::Map<const detail::RowMat<S>> gmat(
            self.grad.v.data() + Eigen::Index(n) * cout * pdim, cout, pdim);
        if (w->requires_grad || x->requires_grad)
          detail::im2col(tx.v.data() + Eigen::Index(n) * cin * tx.h * tx.w, cin, tx.h, tx.w, kh,
                         kw, stride, pad, ho, wo, col);
        if (w->requires_grad) {
          Eigen::Map<detail::RowMat<S>> dw(w->grad.v.data(), cout, kdim);
          dw.noalias() += gmat * col.transpose();
        }
        if (b->requires_grad)
          for (int c = 0; c < cout; ++c) b->grad.v[c] += gmat.row(c).sum();
        if (x->requires_grad) {
          detail::Mat<S> dcol = wmat.transpose() * gmat;
          detail::col2im_add(dcol, x->grad.v.data() + Eigen::Index(n) * cin * tx.h * tx.w, cin,
                             tx.h, tx.w, kh, kw, stride, pad, ho, wo);
        }
      }
    };
  return detail::tape_of(x).make(std::move(out), rg, std::move(back));
}

// Transposed convolution (fractionally strided). x: (n, cin, h, w);
// w: (cin, cout, kh, kw); b: (1, cout, 1, 1). Output spatial size is
// (h-1)*stride - 2*pad + k.
template <class S>
Var<S> conv_transpose2d(const Var<S>& x, const Var<S>& w, const Var<S>& b, int stride, int pad) {
  detail::check_same_tape(x, w, "conv_transpose2d");
  detail::check_same_tape(x, b, "conv_transpose2d");
  const Tensor<S>&tx = x->val, &tw = w->val, &tb = b->val;
  if (tw.n != tx.c)
    throw std::invalid_argument("conv_transpose2d: weight expects " + std::to_string(tw.n) +
                                " input channels, got " + shape_string(tx));
  const int cin = tx.c, cout = tw.c, kh = tw.h, kw = tw.w;
  if (tb.n != 1 || tb.c != cout || tb.h != 1 || tb.w != 1)
    throw std::invalid_argument("conv_transpose2d: bias shape must be (1,cout,1,1)");
  const int ho = (tx.h - 1) * stride - 2 * pad + kh;
  const int wo = (tx.w - 1) * stride - 2 * pad + kw;
  if (ho <= 0 || wo <= 0)
    throw std::invalid_argument("conv_transpose2d: output dimension would be empty");
  const Eigen::Index kdim = Eigen::Index(cout) * kh * kw;
  const Eigen::Index pdim = Eigen::Index(tx.h) * tx.w;

  Tensor<S> out(tx.n, cout, ho, wo);
  {
    Eigen::Map<const detail::RowMat<S>> wmat(tw.v.data(), cin, kdim);
    for (int n = 0; n < tx.n; ++n) {
      Eigen::Map<const detail::RowMat<S>> xmat(tx.v.data() + Eigen::Index(n) * cin * pdim, cin,
                                               pdim);
      detail::Mat<S> col = wmat.transpose() * xmat;
      S* optr = out.v.data() + Eigen::Index(n) * cout * ho * wo;
      detail::col2im_add(col, optr, cout, ho, wo, kh, kw, stride, pad, tx.h, tx.w);
      Eigen::Map<detail::RowMat<S>> omat(optr, cout, Eigen::Index(ho) * wo);
      for (int c = 0; c < cout; ++c) omat.row(c).array() += tb.v[c];
    }
  }

  bool rg = x->requires_grad || w->requires_grad || b->requires_grad;
  BackwardFn<S> back;
  if (rg)
    back = [x, w, b, stride, pad, cin, cout, kh, kw, ho, wo, kdim, pdim](Node<S>& self) {
      const Tensor<S>&tx = x->val, &tw = w->val;
      Eigen::Map<const detail::RowMat<S>> wmat(tw.v.data(), cin, kdim);
      detail::Mat<S> gcol;
      if (w->requires_grad) ensure_grad(w);
      if (b->requires_grad) ensure_grad(b);
      if (x->requires_grad) ensure_grad(x);
      for (int n = 0; n < tx.n; ++n) {
        const S* gptr = self.grad.v.data() + Eigen::Index(n) * cout * ho * wo;
        detail::im2col(gptr, cout, ho, wo, kh, kw, stride, pad, tx.h, tx.w, gcol);
        if (x->requires_grad) {
          Eigen::Map<detail::RowMat<S>> dx(x->grad.v.data() + Eigen::Index(n) * cin * pdim, cin,
                                           pdim);
          dx.noalias() += wmat * gcol;
        }
        if (w->requires_grad) {
          Eigen::Map<const detail::RowMat<S>> xmat(tx.v.data() + Eigen::Index(n) * cin * pdim,
                                                   cin, pdim);
          Eigen::Map<detail::RowMat<S>> dw(w->grad.v.data(), cin, kdim);
          dw.noalias() += xmat * gcol.transpose();
        }
        if (b->requires_grad) {
          Eigen::Map<const detail::RowMat<S>> gmat(gptr, cout, Eigen::Index(ho) * wo);
          for (int c = 0; c < cout; ++c) b->grad.v[c] += gmat.row(c).sum();
        }
      }
    };
  return detail::tape_of(x).make(std::move(out), rg, std::move(back));
}

}  // namespace vmfm::ad
