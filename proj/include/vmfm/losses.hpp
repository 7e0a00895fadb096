#pragma once

#include "vmfm/autodiff.hpp"

namespace vmfm::loss {

using ad::Var;

// a*F + (1-a)*B with a single-channel matte broadcast over the color channels.
template <class S>
Var<S> composite_v(const Var<S>& alpha, const Var<S>& fg, const Var<S>& bg) {
  return ad::add(ad::bmul(alpha, fg), ad::bmul(ad::affine(alpha, S(-1), S(1)), bg));
}

// Matte reconstruction: per-pixel mean L1 on values plus on both forward
// difference components.
template <class S>
Var<S> matte_loss(const Var<S>& a, const Var<S>& a_ref) {
  Var<S> lv = ad::mean_all(ad::abs_(ad::sub(a, a_ref)));
  Var<S> lx = ad::mean_all(ad::abs_(ad::sub(ad::fwd_diff_x(a), ad::fwd_diff_x(a_ref))));
  Var<S> ly = ad::mean_all(ad::abs_(ad::sub(ad::fwd_diff_y(a), ad::fwd_diff_y(a_ref))));
  return ad::add(lv, ad::add(lx, ly));
}

// Composition consistency: mean L1 between a*F + (1-a)*B and the frame.
template <class S>
Var<S> composition_loss(const Var<S>& a, const Var<S>& fg, const Var<S>& bg, const Var<S>& rgb) {
  return ad::mean_all(ad::abs_(ad::sub(composite_v(a, fg, bg), rgb)));
}

// Least-squares adversarial terms over per-image critic scores (n,1,1,1).
template <class S>
Var<S> adv_real_target_loss(const Var<S>& score) {
  return ad::mean_all(ad::square(ad::add_scalar(score, S(-1))));
}

template <class S>
Var<S> adv_fake_target_loss(const Var<S>& score) {
  return ad::mean_all(ad::square(score));
}

// Error-estimator regression: mean L1 against the widened residual target.
template <class S>
Var<S> cl_regression_loss(const Var<S>& cl_pred, const Var<S>& q_target) {
  return ad::mean_all(ad::abs_(ad::sub(cl_pred, q_target)));
}

// Cross supervision: L1 toward the other branch's matte, gated by the
// per-pixel winner indicator. The target side must already be detached.
template <class S>
Var<S> cross_supervision_loss(const Var<S>& a, const Var<S>& a_other_detached,
                              const Var<S>& beta_indicator) {
  return ad::mean_all(ad::mul(beta_indicator, ad::abs_(ad::sub(a, a_other_detached))));
}

// Deviation correction: pushes the live (frozen-weight) error estimate toward
// zero where both thresholded maps saturated; mean of gated squares.
template <class S>
Var<S> deviation_correction_loss(const Var<S>& cl_raw, const Var<S>& sigma_indicator) {
  return ad::mean_all(ad::mul(sigma_indicator, ad::square(cl_raw)));
}

}  // namespace vmfm::loss
