#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>

#include "vmfm/composite.hpp"
#include "vmfm/rng.hpp"
#include "vmfm/tensor.hpp"

namespace vmfm::synth {

struct SynthConfig {
  int image_size = 64;
  double object_prob = 0.75;  // fraction of scenes with a human/object interaction
  int feather_px = 2;         // half width of the triangular boundary blur

  void validate() const {
    if (image_size < 32) throw std::invalid_argument("SynthConfig: image_size below minimum (32)");
    if (image_size % 8 != 0)
      throw std::invalid_argument("SynthConfig: image_size must be divisible by 8");
    if (object_prob < 0.0 || object_prob > 1.0)
      throw std::invalid_argument("SynthConfig: object_prob outside [0,1]");
    if (feather_px < 1 || feather_px > 4)
      throw std::invalid_argument("SynthConfig: feather_px outside [1,4]");
  }
};

struct SceneSample {
  std::uint64_t seed = 0;
  int h = 0, w = 0;
  bool interactive = false;  // true when an object overlaps the human
  Image<float> rgb, fg, bg;
  Plane<float> alpha;
  MaskPlane human_mask, object_mask;
};

struct ModalityBundle {
  Plane<float> depth, seg, heatmap;
};

// ---- feathering -------------------------------------------------------------

// Separable triangular blur of a binary mask with integer accumulation, then
// quantization onto the k/256 grid. Integer sums keep the result independent
// of summation order and floating point mode.
inline Plane<double> feather_mask(const MaskPlane& m, int feather_px) {
  const int h = static_cast<int>(m.rows());
  const int w = static_cast<int>(m.cols());
  const int f = feather_px;
  const int tap_norm = (f + 1) * (f + 1);
  Eigen::Array<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> hsum(h, w), vsum(h, w);
  auto tap = [f](int d) { return f + 1 - std::abs(d); };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int s = 0;
      for (int d = -f; d <= f; ++d) {
        int xx = std::clamp(x + d, 0, w - 1);
        s += tap(d) * static_cast<int>(m(y, xx));
      }
      hsum(y, x) = s;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int s = 0;
      for (int d = -f; d <= f; ++d) {
        int yy = std::clamp(y + d, 0, h - 1);
        s += tap(d) * hsum(yy, x);
      }
      vsum(y, x) = s;
    }
  const double norm = static_cast<double>(tap_norm) * tap_norm;
  Plane<double> out(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      out(y, x) = static_cast<double>(std::llround(vsum(y, x) * kColorLevels / norm)) /
                  kColorLevels;
  return out;
}

// ---- procedural textures ----------------------------------------------------

namespace detail {

struct Rgb {
  double r, g, b;
};

inline Rgb random_color(std::mt19937_64& rng) {
  return {uniform(rng, 0.05, 0.95), uniform(rng, 0.05, 0.95), uniform(rng, 0.05, 0.95)};
}

inline Rgb warm_color(std::mt19937_64& rng) {
  double r = uniform(rng, 0.45, 0.85);
  double g = uniform(rng, 0.28, std::max(0.30, r - 0.08));
  double b = uniform(rng, 0.12, std::max(0.14, g - 0.06));
  return {r, g, b};
}

inline Rgb jitter_color(std::mt19937_64& rng, Rgb c, double amp) {
  auto j = [&](double v) { return std::clamp(v + uniform(rng, -amp, amp), 0.05, 0.95); };
  return {j(c.r), j(c.g), j(c.b)};
}

// Stateless lattice value for the noise texture so evaluation order is free.
inline double lattice_value(std::uint64_t field_seed, int octave, int i, int j) {
  std::uint64_t h = derive_seed(field_seed, "lattice",
                                {static_cast<std::uint64_t>(octave),
                                 static_cast<std::uint64_t>(i) + 4096,
                                 static_cast<std::uint64_t>(j) + 4096});
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

inline double value_noise(std::uint64_t field_seed, int octave, double cell, double x, double y) {
  double gx = x / cell, gy = y / cell;
  int i0 = static_cast<int>(std::floor(gx)), j0 = static_cast<int>(std::floor(gy));
  double fx = gx - i0, fy = gy - j0;
  double v00 = lattice_value(field_seed, octave, i0, j0);
  double v10 = lattice_value(field_seed, octave, i0 + 1, j0);
  double v01 = lattice_value(field_seed, octave, i0, j0 + 1);
  double v11 = lattice_value(field_seed, octave, i0 + 1, j0 + 1);
  double a = v00 + (v10 - v00) * fx;
  double b = v01 + (v11 - v01) * fx;
  return a + (b - a) * fy;
}

inline Rgb lerp(Rgb a, Rgb b, double t) {
  return {a.r + (b.r - a.r) * t, a.g + (b.g - a.g) * t, a.b + (b.b - a.b) * t};
}

}  // namespace detail

enum class TextureKind { gradient, checker, noise };

// One field from the shared texture family. Background and distractor object
// fills draw from the same family and palette, so color alone cannot separate
// the object from the scene behind it.
inline Image<double> texture_field(std::mt19937_64& rng, std::uint64_t field_seed, int h, int w) {
  const int kind_ix = static_cast<int>(uniform_index(rng, 3));
  detail::Rgb ca = detail::random_color(rng);
  detail::Rgb cb = detail::random_color(rng);
  Image<double> im = make_image<double>(h, w);
  auto put = [&](int y, int x, detail::Rgb c) {
    im.r(y, x) = c.r;
    im.g(y, x) = c.g;
    im.b(y, x) = c.b;
  };
  if (kind_ix == 0) {  // linear gradient
    double th = uniform(rng, 0.0, 2.0 * M_PI);
    double cx = std::cos(th), sy = std::sin(th);
    double lo = 1e30, hi = -1e30;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double t = x * cx + y * sy;
        lo = std::min(lo, t);
        hi = std::max(hi, t);
      }
    double span = std::max(hi - lo, 1e-9);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        put(y, x, detail::lerp(ca, cb, (x * cx + y * sy - lo) / span));
  } else if (kind_ix == 1) {  // checkerboard
    static const int kCells[4] = {4, 6, 8, 12};
    int cell = kCells[uniform_index(rng, 4)];
    int px = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(cell)));
    int py = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(cell)));
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        int parity = (((x + px) / cell) + ((y + py) / cell)) & 1;
        put(y, x, parity ? ca : cb);
      }
  } else {  // two-octave value noise
    static const double kCellSizes[2] = {8.0, 16.0};
    double cell = kCellSizes[uniform_index(rng, 2)];
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double v = 0.65 * detail::value_noise(field_seed, 0, cell, x, y) +
                   0.35 * detail::value_noise(field_seed, 1, cell * 0.5, x, y);
        put(y, x, detail::lerp(ca, cb, std::clamp(v, 0.0, 1.0)));
      }
  }
  return im;
}

// Warm-palette field for the human foreground: base color plus a soft
// large-scale noise modulation toward a jittered second color.
inline Image<double> human_texture(std::mt19937_64& rng, std::uint64_t field_seed, int h, int w) {
  detail::Rgb ca = detail::warm_color(rng);
  detail::Rgb cb = detail::jitter_color(rng, ca, 0.18);
  Image<double> im = make_image<double>(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double v = detail::value_noise(field_seed, 0, 14.0, x, y);
      detail::Rgb c = detail::lerp(ca, cb, std::clamp(v, 0.0, 1.0));
      im.r(y, x) = c.r;
      im.g(y, x) = c.g;
      im.b(y, x) = c.b;
    }
  return im;
}

// ---- shape rasterization ----------------------------------------------------

namespace detail {

struct HumanShape {
  double cx, cy, r0, elong;
  double amp[4], phase[4];
  double head_cx, head_cy, head_r;
};

inline HumanShape draw_human_shape(std::mt19937_64& rng, int h, int w) {
  HumanShape s{};
  const double m = std::min(h, w);
  s.cx = uniform(rng, 0.38, 0.62) * w;
  s.cy = uniform(rng, 0.44, 0.62) * h;
  s.r0 = uniform(rng, 0.16, 0.23) * m;
  s.elong = uniform(rng, 1.05, 1.45);
  for (int k = 0; k < 4; ++k) {
    s.amp[k] = uniform(rng, -0.09, 0.09);
    s.phase[k] = uniform(rng, 0.0, 2.0 * M_PI);
  }
  s.head_cx = s.cx + uniform(rng, -2.0, 2.0);
  s.head_cy = s.cy - s.elong * s.r0 * uniform(rng, 0.85, 1.05);
  s.head_r = s.r0 * uniform(rng, 0.35, 0.5);
  return s;
}

inline double body_radius(const HumanShape& s, double theta) {
  double r = 1.0;
  for (int k = 0; k < 4; ++k) r += s.amp[k] * std::cos((k + 2) * theta + s.phase[k]);
  return s.r0 * r;
}

inline bool inside_human(const HumanShape& s, double x, double y) {
  double dx = x - s.cx;
  double dy = (y - s.cy) / s.elong;
  double rho = std::hypot(dx, dy);
  double theta = std::atan2(dy, dx);
  if (rho <= body_radius(s, theta)) return true;
  double hx = x - s.head_cx, hy = y - s.head_cy;
  return hx * hx + hy * hy <= s.head_r * s.head_r;
}

struct ObjectShape {
  bool is_bar;
  double cx, cy, rot;
  double ra, rb;  // ellipse radii, or bar half length / half width
};

inline bool inside_object(const ObjectShape& o, double x, double y) {
  double dx = x - o.cx, dy = y - o.cy;
  double u = dx * std::cos(o.rot) + dy * std::sin(o.rot);
  double v = -dx * std::sin(o.rot) + dy * std::cos(o.rot);
  if (o.is_bar) return std::abs(u) <= o.ra && std::abs(v) <= o.rb;
  return (u / o.ra) * (u / o.ra) + (v / o.rb) * (v / o.rb) <= 1.0;
}

// Object anchored on the human silhouette: its center sits a short step
// inside the boundary so the rasterized masks always share a contact zone
// while roughly half of the object sticks out.
inline ObjectShape draw_object_shape(std::mt19937_64& rng, const HumanShape& hs) {
  ObjectShape o{};
  o.is_bar = bernoulli(rng, 0.5);
  double ta = uniform(rng, 0.0, 2.0 * M_PI);
  double br = body_radius(hs, ta);
  double bx = hs.cx + br * std::cos(ta);
  double by = hs.cy + hs.elong * br * std::sin(ta);
  if (o.is_bar) {
    o.ra = uniform(rng, 0.60, 0.95) * hs.r0;
    o.rb = uniform(rng, 0.24, 0.36) * o.ra;
  } else {
    o.ra = uniform(rng, 0.30, 0.55) * hs.r0;
    o.rb = uniform(rng, 0.30, 0.55) * hs.r0;
  }
  o.rot = uniform(rng, 0.0, M_PI);
  double scale = std::max(o.ra, o.rb);
  double ux = bx - hs.cx, uy = by - hs.cy;
  double un = std::max(std::hypot(ux, uy), 1e-9);
  o.cx = bx - 0.35 * scale * ux / un;
  o.cy = by - 0.35 * scale * uy / un;
  return o;
}

}  // namespace detail

// ---- scene synthesis ---------------------------------------------------------

inline SceneSample synth_scene(std::uint64_t seed, const SynthConfig& cfg) {
  cfg.validate();
  const int h = cfg.image_size, w = cfg.image_size;

  auto rng_human = make_engine(derive_seed(seed, "human"));
  auto rng_obj = make_engine(derive_seed(seed, "object"));
  auto rng_bg = make_engine(derive_seed(seed, "background"));
  auto rng_fg = make_engine(derive_seed(seed, "foreground"));

  SceneSample s;
  s.seed = seed;
  s.h = h;
  s.w = w;

  detail::HumanShape hs = detail::draw_human_shape(rng_human, h, w);
  s.human_mask = MaskPlane::Zero(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (detail::inside_human(hs, x, y)) s.human_mask(y, x) = 1;

  s.object_mask = MaskPlane::Zero(h, w);
  s.interactive = bernoulli(rng_obj, cfg.object_prob);
  if (s.interactive) {
    bool placed = false;
    for (std::uint64_t attempt = 0; attempt < 16 && !placed; ++attempt) {
      auto rng_try = make_engine(derive_seed(seed, "object-shape", {attempt}));
      detail::ObjectShape os = detail::draw_object_shape(rng_try, hs);
      MaskPlane om = MaskPlane::Zero(h, w);
      int contact = 0, outside = 0;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          if (detail::inside_object(os, x, y)) {
            om(y, x) = 1;
            (s.human_mask(y, x) ? contact : outside)++;
          }
      if (contact >= 2 && outside >= 4) {
        s.object_mask = om;
        placed = true;
      }
    }
    if (!placed) throw std::logic_error("synth_scene: failed to place an overlapping object");
  }

  MaskPlane fg_union = (s.human_mask.max(s.object_mask)).eval();
  Plane<double> alpha_d = feather_mask(fg_union, cfg.feather_px);
  s.alpha = cast_plane<float>(alpha_d);

  Image<double> bg_d = texture_field(rng_bg, derive_seed(seed, "bg-field"), h, w);
  Image<double> human_d = human_texture(rng_fg, derive_seed(seed, "human-field"), h, w);
  Image<double> obj_d = texture_field(rng_fg, derive_seed(seed, "obj-field"), h, w);

  Image<double> fg_d = human_d;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (s.object_mask(y, x)) {
        fg_d.r(y, x) = obj_d.r(y, x);
        fg_d.g(y, x) = obj_d.g(y, x);
        fg_d.b(y, x) = obj_d.b(y, x);
      }

  for (int c = 0; c < 3; ++c) {
    s.bg.channel(c) = cast_plane<float>(quantize_unit_plane(bg_d.channel(c)));
    s.fg.channel(c) = cast_plane<float>(quantize_unit_plane(fg_d.channel(c)));
  }
  s.rgb = composite(s.fg, s.bg, s.alpha);
  return s;
}

// Background-only field drawn from a dedicated seed stream. Training stages use
// these as the substitute backgrounds behind predicted mattes.
inline Image<float> synth_background(std::uint64_t seed, int h, int w) {
  auto rng = make_engine(derive_seed(seed, "bbar"));
  Image<double> im = texture_field(rng, derive_seed(seed, "bbar-field"), h, w);
  Image<float> out;
  for (int c = 0; c < 3; ++c) out.channel(c) = cast_plane<float>(quantize_unit_plane(im.channel(c)));
  return out;
}

// ---- modality derivation -----------------------------------------------------

inline constexpr double kDepthNoise = 0.009;
inline constexpr double kSegNoise = 0.02;

inline ModalityBundle derive_modalities(const SceneSample& scene) {
  const int h = scene.h, w = scene.w;
  auto rng = make_engine(derive_seed(scene.seed, "modalities"));
  ModalityBundle mb;

  // Depth: background ramp, one near plateau over the full foreground, small
  // sensor noise. The plateau is what lets the depth branch see the object.
  double plateau = uniform(rng, 0.08, 0.18);
  double ramp_bottom = uniform(rng, 0.42, 0.50);
  double ramp_top = uniform(rng, 0.80, 0.92);
  Plane<double> depth(h, w);
  for (int y = 0; y < h; ++y) {
    double base = ramp_top + (ramp_bottom - ramp_top) * (h > 1 ? double(y) / (h - 1) : 0.0);
    for (int x = 0; x < w; ++x) {
      bool fg = scene.human_mask(y, x) || scene.object_mask(y, x);
      double v = (fg ? plateau : base) + uniform(rng, -kDepthNoise, kDepthNoise);
      depth(y, x) = std::clamp(v, 0.0, 1.0);
    }
  }
  mb.depth = cast_plane<float>(depth);

  // Segmentation: feathered human-only silhouette, zero off the human mask.
  // The object is invisible here by construction.
  Plane<double> seg = feather_mask(scene.human_mask, 2);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!scene.human_mask(y, x)) {
        seg(y, x) = 0.0;
      } else {
        seg(y, x) = std::clamp(seg(y, x) + uniform(rng, -kSegNoise, kSegNoise), 0.0, 1.0);
      }
    }
  mb.seg = cast_plane<float>(seg);

  // Heatmap: one normalized gaussian bump at the human/object contact centroid
  // (human centroid when the scene has no object).
  double cy = 0.0, cx = 0.0;
  long count = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (scene.human_mask(y, x) && scene.object_mask(y, x)) {
        cy += y;
        cx += x;
        ++count;
      }
  if (count == 0) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (scene.human_mask(y, x)) {
          cy += y;
          cx += x;
          ++count;
        }
  }
  if (count == 0) throw std::logic_error("derive_modalities: empty human mask");
  cy /= count;
  cx /= count;
  const double sigma = 0.09 * std::min(h, w);
  Plane<double> heat(h, w);
  double peak = 0.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
      heat(y, x) = std::exp(-d2 / (2.0 * sigma * sigma));
      peak = std::max(peak, heat(y, x));
    }
  heat /= peak;
  mb.heatmap = cast_plane<float>(heat);
  return mb;
}

}  // namespace vmfm::synth
