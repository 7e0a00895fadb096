#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "vmfm/conv.hpp"
#include "vmfm/hash.hpp"
#include "vmfm/rng.hpp"

namespace vmfm::net {

template <class S>
struct Layer {
  Tensor<S> w, b;
  int stride = 1, pad = 1;
  bool transpose = false;
};

// Kaiming-uniform weights (bound sqrt(6/fan_in)); biases zero. Output heads
// pass gain < 1 so the squashed initial prediction starts near 0.5.
template <class S>
Layer<S> make_conv(int cin, int cout, int k, int stride, int pad, std::mt19937_64& rng,
                   double gain = 1.0) {
  Layer<S> l;
  l.w = Tensor<S>(cout, cin, k, k);
  l.b = Tensor<S>(1, cout, 1, 1);
  l.stride = stride;
  l.pad = pad;
  double bound = gain * std::sqrt(6.0 / (double(cin) * k * k));
  for (Eigen::Index i = 0; i < l.w.size(); ++i) l.w.v[i] = S(uniform(rng, -bound, bound));
  return l;
}

template <class S>
Layer<S> make_deconv(int cin, int cout, int k, int stride, int pad, std::mt19937_64& rng,
                     double gain = 1.0) {
  Layer<S> l;
  l.w = Tensor<S>(cin, cout, k, k);
  l.b = Tensor<S>(1, cout, 1, 1);
  l.stride = stride;
  l.pad = pad;
  l.transpose = true;
  double bound = gain * std::sqrt(6.0 / (double(cin) * k * k));
  for (Eigen::Index i = 0; i < l.w.size(); ++i) l.w.v[i] = S(uniform(rng, -bound, bound));
  return l;
}

// Pairs each parameter tensor with its tape leaf for one optimization step.
template <class S>
struct Binding {
  std::vector<std::pair<Tensor<S>*, ad::Var<S>>> entries;
};

// Creates the layer's leaves on the tape. With a binding the leaves carry
// gradients and are recorded for the optimizer; without one the layer is
// frozen for this graph (its weights are plain constants).
template <class S>
ad::Var<S> apply(ad::Tape<S>& t, Layer<S>& l, const ad::Var<S>& x, Binding<S>* bind) {
  ad::Var<S> wv = t.leaf(l.w, bind != nullptr);
  ad::Var<S> bv = t.leaf(l.b, bind != nullptr);
  if (bind) {
    bind->entries.push_back({&l.w, wv});
    bind->entries.push_back({&l.b, bv});
  }
  return l.transpose ? ad::conv_transpose2d(x, wv, bv, l.stride, l.pad)
                     : ad::conv2d(x, wv, bv, l.stride, l.pad);
}

template <class S, class Fn>
void visit_layers(std::vector<Layer<S>>& ls, const std::string& prefix, Fn&& fn) {
  for (std::size_t i = 0; i < ls.size(); ++i) {
    fn(prefix + "." + std::to_string(i) + ".w", ls[i].w);
    fn(prefix + "." + std::to_string(i) + ".b", ls[i].b);
  }
}

// ---- foreground prediction network -------------------------------------------
//
// Two-stream encoder (image+heatmap stream, modality stream), fused at 1/4
// resolution, decoded back to a full-resolution single-channel matte in (0,1).

template <class S>
struct FPNetwork {
  int modality_id = 1;  // 1: segmentation branch, 2: depth branch
  std::vector<Layer<S>> img_enc, mod_enc, fuse, dec;

  template <class Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    visit_layers(img_enc, prefix + ".img_enc", fn);
    visit_layers(mod_enc, prefix + ".mod_enc", fn);
    visit_layers(fuse, prefix + ".fuse", fn);
    visit_layers(dec, prefix + ".dec", fn);
  }
};

template <class S>
FPNetwork<S> make_fp_network(int modality_id, std::uint64_t seed) {
  auto rng = make_engine(seed);
  FPNetwork<S> n;
  n.modality_id = modality_id;
  n.img_enc = {make_conv<S>(4, 16, 3, 1, 1, rng), make_conv<S>(16, 32, 3, 2, 1, rng),
               make_conv<S>(32, 64, 3, 2, 1, rng)};
  n.mod_enc = {make_conv<S>(1, 16, 3, 1, 1, rng), make_conv<S>(16, 32, 3, 2, 1, rng),
               make_conv<S>(32, 64, 3, 2, 1, rng)};
  n.fuse = {make_conv<S>(128, 64, 3, 1, 1, rng), make_conv<S>(64, 64, 3, 1, 1, rng),
            make_conv<S>(64, 64, 3, 1, 1, rng)};
  n.dec = {make_deconv<S>(64, 32, 4, 2, 1, rng), make_conv<S>(32, 32, 3, 1, 1, rng),
           make_deconv<S>(32, 16, 4, 2, 1, rng), make_conv<S>(16, 16, 3, 1, 1, rng),
           make_conv<S>(16, 1, 3, 1, 1, rng, 0.25)};
  return n;
}

// Hidden activation of every non-critic network. The slope keeps each unit
// trainable: with a hard relu, a unit whose preactivation goes negative on
// the whole corpus gets an exactly zero gradient and never recovers.
inline constexpr double kHiddenLeak = 0.01;

template <class S>
ad::Var<S> hidden(const ad::Var<S>& x) {
  return ad::leaky_relu(x, S(kHiddenLeak));
}

// rgb: (n,3,h,w); modality, heatmap: (n,1,h,w). Returns the matte (n,1,h,w).
template <class S>
ad::Var<S> fp_forward(ad::Tape<S>& t, FPNetwork<S>& net, const ad::Var<S>& rgb,
                      const ad::Var<S>& modality, const ad::Var<S>& heatmap,
                      Binding<S>* bind = nullptr) {
  const Tensor<S>& tr = rgb->val;
  if (tr.h % 4 != 0 || tr.w % 4 != 0)
    throw std::invalid_argument("fp_forward: spatial size must be divisible by 4, got " +
                                shape_string(tr));
  ad::Var<S> xi = ad::concat_c(rgb, heatmap);
  for (auto& l : net.img_enc) xi = hidden(apply(t, l, xi, bind));
  ad::Var<S> xm = modality;
  for (auto& l : net.mod_enc) xm = hidden(apply(t, l, xm, bind));
  ad::Var<S> x = ad::concat_c(xi, xm);
  for (auto& l : net.fuse) x = hidden(apply(t, l, x, bind));
  for (std::size_t i = 0; i + 1 < net.dec.size(); ++i) x = hidden(apply(t, net.dec[i], x, bind));
  return ad::squash01(apply(t, net.dec.back(), x, bind));
}

// ---- discriminator -------------------------------------------------------------
//
// Strided patch critic on RGB composites: four downsampling convs with leaky
// relu, a 1x1 score map, then a per-image spatial average (least-squares GAN).

inline constexpr double kLeakySlope = 0.2;

template <class S>
struct Discriminator {
  std::vector<Layer<S>> body;
  Layer<S> head;

  template <class Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    visit_layers(body, prefix + ".body", fn);
    fn(prefix + ".head.w", head.w);
    fn(prefix + ".head.b", head.b);
  }
};

template <class S>
Discriminator<S> make_discriminator(std::uint64_t seed) {
  auto rng = make_engine(seed);
  Discriminator<S> d;
  d.body = {make_conv<S>(3, 16, 3, 2, 1, rng), make_conv<S>(16, 32, 3, 2, 1, rng),
            make_conv<S>(32, 64, 3, 2, 1, rng), make_conv<S>(64, 64, 3, 2, 1, rng)};
  d.head = make_conv<S>(64, 1, 1, 1, 0, rng);
  return d;
}

// img: (n,3,h,w) -> per-image score (n,1,1,1).
template <class S>
ad::Var<S> disc_forward(ad::Tape<S>& t, Discriminator<S>& d, const ad::Var<S>& img,
                        Binding<S>* bind = nullptr) {
  ad::Var<S> x = img;
  for (auto& l : d.body) x = ad::leaky_relu(apply(t, l, x, bind), S(kLeakySlope));
  x = apply(t, d.head, x, bind);
  return ad::spatial_mean(x);
}

// ---- complementary error estimator ----------------------------------------------
//
// Two modality-specific encoders over (rgb, matte) pairs sharing one decoder;
// predicts a per-pixel deviation map in (0,1).

template <class S>
struct CLModule {
  std::vector<Layer<S>> enc1, enc2, dec;

  template <class Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    visit_layers(enc1, prefix + ".enc1", fn);
    visit_layers(enc2, prefix + ".enc2", fn);
    visit_layers(dec, prefix + ".dec", fn);
  }
};

template <class S>
CLModule<S> make_cl_module(std::uint64_t seed) {
  auto rng = make_engine(seed);
  CLModule<S> m;
  auto enc = [&rng]() {
    return std::vector<Layer<S>>{make_conv<S>(4, 8, 3, 2, 1, rng), make_conv<S>(8, 16, 3, 2, 1, rng),
                                 make_conv<S>(16, 32, 3, 2, 1, rng),
                                 make_conv<S>(32, 64, 3, 1, 1, rng)};
  };
  m.enc1 = enc();
  m.enc2 = enc();
  m.dec = {make_deconv<S>(64, 32, 3, 1, 1, rng), make_conv<S>(32, 32, 3, 1, 1, rng),
           make_deconv<S>(32, 16, 4, 2, 1, rng), make_conv<S>(16, 16, 3, 1, 1, rng),
           make_conv<S>(16, 8, 3, 1, 1, rng),    make_conv<S>(8, 8, 3, 1, 1, rng),
           make_conv<S>(8, 1, 3, 1, 1, rng, 0.25)};
  return m;
}

// branch selects the modality-specific encoder; rgb (n,3,h,w), matte (n,1,h,w).
// Returns the raw (pre-threshold) deviation estimate (n,1,h,w) in (0,1).
template <class S>
ad::Var<S> cl_forward(ad::Tape<S>& t, CLModule<S>& m, int branch, const ad::Var<S>& rgb,
                      const ad::Var<S>& matte, Binding<S>* bind = nullptr) {
  if (branch != 1 && branch != 2)
    throw std::invalid_argument("cl_forward: branch must be 1 or 2");
  const Tensor<S>& tr = rgb->val;
  if (tr.h % 8 != 0 || tr.w % 8 != 0)
    throw std::invalid_argument("cl_forward: spatial size must be divisible by 8, got " +
                                shape_string(tr));
  ad::Var<S> x = ad::concat_c(rgb, matte);
  for (auto& l : (branch == 1 ? m.enc1 : m.enc2)) x = hidden(apply(t, l, x, bind));
  x = hidden(apply(t, m.dec[0], x, bind));
  x = hidden(apply(t, m.dec[1], x, bind));
  x = hidden(apply(t, m.dec[2], x, bind));
  x = hidden(apply(t, m.dec[3], x, bind));
  x = ad::upsample2(x);
  x = hidden(apply(t, m.dec[4], x, bind));
  x = ad::upsample2(x);
  x = hidden(apply(t, m.dec[5], x, bind));
  return ad::squash01(apply(t, m.dec[6], x, bind));
}

// ---- patch refinement ------------------------------------------------------------
//
// Small fully convolutional head over (matte, rgb) patches; emits a refined
// matte patch. All strides are 1 so any patch size >= 3 works.

template <class S>
struct RefineNet {
  std::vector<Layer<S>> body;

  template <class Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    visit_layers(body, prefix + ".body", fn);
  }
};

template <class S>
RefineNet<S> make_refine_net(std::uint64_t seed) {
  auto rng = make_engine(seed);
  RefineNet<S> r;
  r.body = {make_conv<S>(4, 4, 3, 1, 1, rng), make_conv<S>(4, 8, 3, 1, 1, rng),
            make_conv<S>(8, 8, 3, 1, 1, rng), make_conv<S>(8, 4, 3, 1, 1, rng),
            make_conv<S>(4, 1, 3, 1, 1, rng, 0.25)};
  return r;
}

// matte, rgb patches: (n,1,s,s) and (n,3,s,s) -> refined matte patch (n,1,s,s).
template <class S>
ad::Var<S> rn_forward(ad::Tape<S>& t, RefineNet<S>& r, const ad::Var<S>& matte_patch,
                      const ad::Var<S>& rgb_patch, Binding<S>* bind = nullptr) {
  ad::Var<S> x = ad::concat_c(matte_patch, rgb_patch);
  for (std::size_t i = 0; i + 1 < r.body.size(); ++i) x = hidden(apply(t, r.body[i], x, bind));
  return ad::squash01(apply(t, r.body.back(), x, bind));
}

// ---- model bundle ------------------------------------------------------------------

template <class S>
struct Models {
  FPNetwork<S> fp1, fp2;
  Discriminator<S> disc1, disc2;
  CLModule<S> cl;
  RefineNet<S> rn;

  template <class Fn>
  void visit(Fn&& fn) {
    fp1.visit("fp1", fn);
    fp2.visit("fp2", fn);
    disc1.visit("disc1", fn);
    disc2.visit("disc2", fn);
    cl.visit("cl", fn);
    rn.visit("rn", fn);
  }
};

template <class S>
Models<S> make_models(std::uint64_t seed) {
  Models<S> m;
  m.fp1 = make_fp_network<S>(1, derive_seed(seed, "init-fp1"));
  m.fp2 = make_fp_network<S>(2, derive_seed(seed, "init-fp2"));
  m.disc1 = make_discriminator<S>(derive_seed(seed, "init-disc1"));
  m.disc2 = make_discriminator<S>(derive_seed(seed, "init-disc2"));
  m.cl = make_cl_module<S>(derive_seed(seed, "init-cl"));
  m.rn = make_refine_net<S>(derive_seed(seed, "init-rn"));
  return m;
}

// Order-stable digest of a parameter group; freeze tests compare these before
// and after a training stage.
template <class S, class Net>
std::uint64_t weight_checksum(Net& net, const std::string& prefix) {
  std::uint64_t h = kFnvOffset;
  net.visit(prefix, [&h](const std::string& name, Tensor<S>& t) {
    h = fnv1a64(name, h);
    h = fnv1a64(t.v.data(), std::size_t(t.size()) * sizeof(S), h);
  });
  return h;
}

}  // namespace vmfm::net
