#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <utility>
#include <vector>

#include "vmfm/tensor.hpp"

namespace vmfm::ad {

// Reverse-mode tape over batched NCHW tensors. Each op records a closure that
// scatters the output gradient to its parents; backward() walks the creation
// order in reverse. The closure receives its own node as an argument (instead
// of capturing it) so no node ever owns a reference to itself. Nodes whose
// gradient buffer was never touched are dead branches and are skipped, so "no
// gradient ever flowed" is observable as an exactly absent gradient rather
// than a numerically small one.
template <class S>
struct Node;

template <class S>
class Tape;

template <class S>
using Var = std::shared_ptr<Node<S>>;

template <class S>
using BackwardFn = std::function<void(Node<S>&)>;

template <class S>
struct Node {
  Tensor<S> val;
  Tensor<S> grad;
  bool requires_grad = false;
  bool grad_ready = false;
  BackwardFn<S> backward;
  Tape<S>* tape = nullptr;
};

template <class S>
void ensure_grad(const Var<S>& n) {
  if (!n->grad_ready) {
    n->grad = Tensor<S>(n->val.n, n->val.c, n->val.h, n->val.w);
    n->grad_ready = true;
  }
}

template <class S>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<S> make(Tensor<S> val, bool requires_grad, BackwardFn<S> backward) {
    auto n = std::make_shared<Node<S>>();
    n->val = std::move(val);
    n->requires_grad = requires_grad;
    n->backward = std::move(backward);
    n->tape = this;
    order_.push_back(n);
    return n;
  }

  Var<S> leaf(Tensor<S> val, bool requires_grad) {
    return make(std::move(val), requires_grad, nullptr);
  }

  Var<S> constant(Tensor<S> val) { return leaf(std::move(val), false); }

  // Seeds d(loss)/d(loss) = 1 and propagates. loss must be a scalar tensor.
  void backward(const Var<S>& loss) {
    if (loss->val.size() != 1)
      throw std::invalid_argument("backward: loss is not a scalar");
    ensure_grad(loss);
    loss->grad.v[0] += S(1);
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      Node<S>& n = **it;
      if (n.requires_grad && n.grad_ready && n.backward) n.backward(n);
    }
  }

  std::size_t node_count() const { return order_.size(); }

 private:
  std::vector<Var<S>> order_;
};

namespace detail {

template <class S>
Tape<S>& tape_of(const Var<S>& a) {
  return *a->tape;
}

template <class S>
void check_same_tape(const Var<S>& a, const Var<S>& b, const char* op) {
  if (a->tape != b->tape) throw std::invalid_argument(std::string(op) + ": mixed tapes");
}

}  // namespace detail

// Adds expr into the gradient buffer of target if it participates in autodiff.
template <class S, class Expr>
void add_grad(const Var<S>& target, const Expr& expr) {
  if (!target->requires_grad) return;
  ensure_grad(target);
  target->grad.v += expr;
}

// ---- elementwise ops ---------------------------------------------------------

template <class S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  detail::check_same_tape(a, b, "add");
  require_same_shape(a->val, b->val, "add");
  Tensor<S> out = a->val;
  out.v += b->val.v;
  bool rg = a->requires_grad || b->requires_grad;
  BackwardFn<S> back;
  if (rg)
    back = [a, b](Node<S>& self) {
      add_grad(a, self.grad.v);
      add_grad(b, self.grad.v);
    };
  return detail::tape_of(a).make(std::move(out), rg, std::move(back));
}

template <class S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  detail::check_same_tape(a, b, "sub");
  require_same_shape(a->val, b->val, "sub");
  Tensor<S> out = a->val;
  out.v -= b->val.v;
  bool rg = a->requires_grad || b->requires_grad;
  BackwardFn<S> back;
  if (rg)
    back = [a, b](Node<S>& self) {
      add_grad(a, self.grad.v);
      add_grad(b, -self.grad.v);
    };
  return detail::tape_of(a).make(std::move(out), rg, std::move(back));
}

template <class S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  detail::check_same_tape(a, b, "mul");
  require_same_shape(a->val, b->val, "mul");
  Tensor<S> out = a->val;
  out.v *= b->val.v;
  bool rg = a->requires_grad || b->requires_grad;
  BackwardFn<S> back;
  if (rg)
    back = [a, b](Node<S>& self) {
      add_grad(a, self.grad.v * b->val.v);
      add_grad(b, self.grad.v * a->val.v);
    };
  return detail::tape_of(a).make(std::move(out), rg, std::move(back));
}

// k * a + m, elementwise with scalars.
template <class S>
Var<S> affine(const Var<S>& a, S k, S m) {
  Tensor<S> out = a->val;
  out.v = k * out.v + m;
  BackwardFn<S> back;
  if (a->requires_grad)
    back = [a, k](Node<S>& self) { add_grad(a, k * self.grad.v); };
  return detail::tape_of(a).make(std::move(out), a->requires_grad, std::move(back));
}

template <class S>
Var<S> mul_scalar(const Var<S>& a, S k) {
  return affine(a, k, S(0));
}

template <class S>
Var<S> add_scalar(const Var<S>& a, S m) {
  return affine(a, S(1), m);
}

template <class S>
Var<S> neg(const Var<S>& a) {
  return affine(a, S(-1), S(0));
}

template <class S>
Var<S> abs_(const Var<S>& a) {
  Tensor<S> out = a->val;
  out.v = out.v.abs();
  BackwardFn<S> back;
  if (a->requires_grad)
    back = [a](Node<S>& self) { add_grad(a, self.grad.v * a->val.v.sign()); };
  return detail::tape_of(a).make(std::move(out), a->requires_grad, std::move(back));
}

template <class S>
Var<S> square(const Var<S>& a) {
  Tensor<S> out = a->val;
  out.v = out.v.square();
  BackwardFn<S> back;
  if (a->requires_grad)
    back = [a](Node<S>& self) { add_grad(a, S(2) * self.grad.v * a->val.v); };
  return detail::tape_of(a).make(std::move(out), a->requires_grad, std::move(back));
}

template <class S>
Var<S> tanh_(const Var<S>& a) {
  Tensor<S> out = a->val;
  out.v = out.v.tanh();
  BackwardFn<S> back;
  if (a->requires_grad)
    back = [a](Node<S>& self) { add_grad(a, self.grad.v * (S(1) - self.val.v.square())); };
  return detail::tape_of(a).make(std::move(out), a->requires_grad, std::move(back));
}

// x / (2 + 2|x|) + 1/2: maps onto (0, 1) for matte and error-map heads. The
// algebraic form is deliberate: float tanh saturates to exactly +-1 around
// |x| = 9 and its derivative rounds to zero, which permanently freezes any
// head that lands there; 1 / (2 (1+|x|)^2) stays representable far beyond
// any preactivation a trained head can reach.
template <class S>
Var<S> squash01(const Var<S>& a) {
  Tensor<S> out = a->val;
  out.v = S(0.5) + S(0.5) * out.v / (S(1) + out.v.abs());
  BackwardFn<S> back;
  if (a->requires_grad)
    back = [a](Node<S>& self) {
      auto d = S(1) + a->val.v.abs();
      add_grad(a, self.grad.v * S(0.5) / d.square());
    };
  return detail::tape_of(a).make(std::move(out), a->requires_grad, std::move(back));
}

template <class S>
Var<S> relu(const Var<S>& a) {
  Tensor<S> out = a->val;
  out.v = out.v.max(S(0));
  BackwardFn<S> back;
  if (a->requires_grad)
    back = [a](Node<S>& self) {
      add_grad(a, self.grad.v * (a->val.v > S(0)).template cast<S>());
    };
  return detail::tape_of(a).make(std::move(out), a->requires_grad, std::move(back));
}

template <class S>
Var<S> leaky_relu(const Var<S>& a, S slope) {
  Tensor<S> out = a->val;
  out.v = out.v.max(slope * out.v);
  BackwardFn<S> back;
  if (a->requires_grad)
    back = [a, slope](Node<S>& self) {
      auto pos = (a->val.v > S(0)).template cast<S>();
      add_grad(a, self.grad.v * (pos + slope * (S(1) - pos)));
    };
  return detail::tape_of(a).make(std::move(out), a->requires_grad, std::move(back));
}

// ---- structure ops -----------------------------------------------------------

template <class S>
Var<S> concat_c(const Var<S>& a, const Var<S>& b) {
  detail::check_same_tape(a, b, "concat_c");
  const Tensor<S>&ta = a->val, &tb = b->val;
  if (ta.n != tb.n || ta.h != tb.h || ta.w != tb.w)
    throw std::invalid_argument("concat_c: shape mismatch " + shape_string(ta) + " vs " +
                                shape_string(tb));
  Tensor<S> out(ta.n, ta.c + tb.c, ta.h, ta.w);
  const Eigen::Index hw = Eigen::Index(ta.h) * ta.w;
  for (int n = 0; n < ta.n; ++n) {
    out.v.segment(Eigen::Index(n) * (ta.c + tb.c) * hw, Eigen::Index(ta.c) * hw) =
        ta.v.segment(Eigen::Index(n) * ta.c * hw, Eigen::Index(ta.c) * hw);
    out.v.segment(Eigen::Index(n) * (ta.c + tb.c) * hw + Eigen::Index(ta.c) * hw,
                  Eigen::Index(tb.c) * hw) =
        tb.v.segment(Eigen::Index(n) * tb.c * hw, Eigen::Index(tb.c) * hw);
  }
  bool rg = a->requires_grad || b->requires_grad;
  BackwardFn<S> back;
  if (rg)
    back = [a, b, hw](Node<S>& self) {
      const Tensor<S>&ta = a->val, &tb = b->val;
      if (a->requires_grad) {
        ensure_grad(a);
        for (int n = 0; n < ta.n; ++n)
          a->grad.v.segment(Eigen::Index(n) * ta.c * hw, Eigen::Index(ta.c) * hw) +=
              self.grad.v.segment(Eigen::Index(n) * (ta.c + tb.c) * hw, Eigen::Index(ta.c) * hw);
      }
      if (b->requires_grad) {
        ensure_grad(b);
        for (int n = 0; n < tb.n; ++n)
          b->grad.v.segment(Eigen::Index(n) * tb.c * hw, Eigen::Index(tb.c) * hw) +=
              self.grad.v.segment(
                  Eigen::Index(n) * (ta.c + tb.c) * hw + Eigen::Index(ta.c) * hw,
                  Eigen::Index(tb.c) * hw);
      }
    };
  return detail::tape_of(a).make(std::move(out), rg, std::move(back));
}

// Broadcast multiply: a single-channel map scales every channel of x.
template <class S>
Var<S> bmul(const Var<S>& m, const Var<S>& x) {
  detail::check_same_tape(m, x, "bmul");
  const Tensor<S>&tm = m->val, &tx = x->val;
  if (tm.c != 1 || tm.n != tx.n || tm.h != tx.h || tm.w != tx.w)
    throw std::invalid_argument("bmul: mask must be (n,1,h,w) matching x, got " +
                                shape_string(tm) + " vs " + shape_string(tx));
  const Eigen::Index hw = Eigen::Index(tx.h) * tx.w;
  Tensor<S> out(tx.n, tx.c, tx.h, tx.w);
  for (int n = 0; n < tx.n; ++n)
    for (int c = 0; c < tx.c; ++c)
      out.v.segment((Eigen::Index(n) * tx.c + c) * hw, hw) =
          tx.v.segment((Eigen::Index(n) * tx.c + c) * hw, hw) *
          tm.v.segment(Eigen::Index(n) * hw, hw);
  bool rg = m->requires_grad || x->requires_grad;
  BackwardFn<S> back;
  if (rg)
    back = [m, x, hw](Node<S>& self) {
      const Tensor<S>& tx = x->val;
      if (m->requires_grad) {
        ensure_grad(m);
        for (int n = 0; n < tx.n; ++n)
          for (int c = 0; c < tx.c; ++c)
            m->grad.v.segment(Eigen::Index(n) * hw, hw) +=
                self.grad.v.segment((Eigen::Index(n) * tx.c + c) * hw, hw) *
                tx.v.segment((Eigen::Index(n) * tx.c + c) * hw, hw);
      }
      if (x->requires_grad) {
        ensure_grad(x);
        for (int n = 0; n < tx.n; ++n)
          for (int c = 0; c < tx.c; ++c)
            x->grad.v.segment((Eigen::Index(n) * tx.c + c) * hw, hw) +=
                self.grad.v.segment((Eigen::Index(n) * tx.c + c) * hw, hw) *
                m->val.v.segment(Eigen::Index(n) * hw, hw);
      }
    };
  return detail::tape_of(m).make(std::move(out), rg, std::move(back));
}

template <class S>
Var<S> mean_all(const Var<S>& a) {
  Tensor<S> out(1, 1, 1, 1);
  out.v[0] = a->val.v.mean();
  BackwardFn<S> back;
  if (a->requires_grad)
    back = [a](Node<S>& self) {
      add_grad(a, Vec<S>::Constant(a->val.size(), self.grad.v[0] / S(a->val.size())));
    };
  return detail::tape_of(a).make(std::move(out), a->requires_grad, std::move(back));
}

// Per-image spatial average: (n,c,h,w) -> (n,c,1,1).
template <class S>
Var<S> spatial_mean(const Var<S>& a) {
  const Tensor<S>& ta = a->val;
  const Eigen::Index hw = Eigen::Index(ta.h) * ta.w;
  Tensor<S> out(ta.n, ta.c, 1, 1);
  for (Eigen::Index i = 0; i < Eigen::Index(ta.n) * ta.c; ++i)
    out.v[i] = a->val.v.segment(i * hw, hw).mean();
  BackwardFn<S> back;
  if (a->requires_grad)
    back = [a, hw](Node<S>& self) {
      ensure_grad(a);
      const Tensor<S>& ta = a->val;
      for (Eigen::Index i = 0; i < Eigen::Index(ta.n) * ta.c; ++i)
        a->grad.v.segment(i * hw, hw) += Vec<S>::Constant(hw, self.grad.v[i] / S(hw));
    };
  return detail::tape_of(a).make(std::move(out), a->requires_grad, std::move(back));
}

// Forward differences with replicate boundary: the last column (or row) of the
// output is exactly zero.
template <class S>
Var<S> fwd_diff_x(const Var<S>& a) {
  const Tensor<S>& ta = a->val;
  Tensor<S> out(ta.n, ta.c, ta.h, ta.w);
  for (int n = 0; n < ta.n; ++n)
    for (int c = 0; c < ta.c; ++c) {
      auto src = ta.plane(n, c);
      auto dst = out.plane(n, c);
      for (int i = 0; i < ta.h; ++i) {
        for (int j = 0; j + 1 < ta.w; ++j) dst(i, j) = src(i, j + 1) - src(i, j);
        dst(i, ta.w - 1) = S(0);
      }
    }
  BackwardFn<S> back;
  if (a->requires_grad)
    back = [a](Node<S>& self) {
      ensure_grad(a);
      const Tensor<S>& ta = a->val;
      for (int n = 0; n < ta.n; ++n)
        for (int c = 0; c < ta.c; ++c) {
          auto g = self.grad.plane(n, c);
          auto da = a->grad.plane(n, c);
          for (int i = 0; i < ta.h; ++i)
            for (int j = 0; j + 1 < ta.w; ++j) {
              da(i, j + 1) += g(i, j);
              da(i, j) -= g(i, j);
            }
        }
    };
  return detail::tape_of(a).make(std::move(out), a->requires_grad, std::move(back));
}

template <class S>
Var<S> fwd_diff_y(const Var<S>& a) {
  const Tensor<S>& ta = a->val;
  Tensor<S> out(ta.n, ta.c, ta.h, ta.w);
  for (int n = 0; n < ta.n; ++n)
    for (int c = 0; c < ta.c; ++c) {
      auto src = ta.plane(n, c);
      auto dst = out.plane(n, c);
      for (int j = 0; j < ta.w; ++j) {
        for (int i = 0; i + 1 < ta.h; ++i) dst(i, j) = src(i + 1, j) - src(i, j);
        dst(ta.h - 1, j) = S(0);
      }
    }
  BackwardFn<S> back;
  if (a->requires_grad)
    back = [a](Node<S>& self) {
      ensure_grad(a);
      const Tensor<S>& ta = a->val;
      for (int n = 0; n < ta.n; ++n)
        for (int c = 0; c < ta.c; ++c) {
          auto g = self.grad.plane(n, c);
          auto da = a->grad.plane(n, c);
          for (int j = 0; j < ta.w; ++j)
            for (int i = 0; i + 1 < ta.h; ++i) {
              da(i + 1, j) += g(i, j);
              da(i, j) -= g(i, j);
            }
        }
    };
  return detail::tape_of(a).make(std::move(out), a->requires_grad, std::move(back));
}

// Nearest-neighbor 2x upsampling.
template <class S>
Var<S> upsample2(const Var<S>& a) {
  const Tensor<S>& ta = a->val;
  Tensor<S> out(ta.n, ta.c, ta.h * 2, ta.w * 2);
  for (int n = 0; n < ta.n; ++n)
    for (int c = 0; c < ta.c; ++c) {
      auto src = ta.plane(n, c);
      auto dst = out.plane(n, c);
      for (int i = 0; i < ta.h * 2; ++i)
        for (int j = 0; j < ta.w * 2; ++j) dst(i, j) = src(i / 2, j / 2);
    }
  BackwardFn<S> back;
  if (a->requires_grad)
    back = [a](Node<S>& self) {
      ensure_grad(a);
      const Tensor<S>& ta = a->val;
      for (int n = 0; n < ta.n; ++n)
        for (int c = 0; c < ta.c; ++c) {
          auto g = self.grad.plane(n, c);
          auto da = a->grad.plane(n, c);
          for (int i = 0; i < ta.h * 2; ++i)
            for (int j = 0; j < ta.w * 2; ++j) da(i / 2, j / 2) += g(i, j);
        }
    };
  return detail::tape_of(a).make(std::move(out), a->requires_grad, std::move(back));
}

// Value copy with the graph cut: gradients never flow past a detach.
template <class S>
Var<S> detach(const Var<S>& a) {
  return detail::tape_of(a).constant(a->val);
}

}  // namespace vmfm::ad
