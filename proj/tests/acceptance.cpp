#include <doctest.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <deque>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "test_support.hpp"
#include "vmfm/array_file.hpp"
#include "vmfm/cl_ops.hpp"
#include "vmfm/composite.hpp"
#include "vmfm/evaluate.hpp"
#include "vmfm/losses.hpp"
#include "vmfm/metrics.hpp"
#include "vmfm/refinement.hpp"
#include "vmfm/rng.hpp"
#include "vmfm/trainer.hpp"

using namespace vmfm;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Collects named sub-checks for one criterion and prints a single verdict
// line when it goes out of scope; the recorded checks are then asserted so a
// failing criterion still fails the test run.
struct Criterion {
  int id;
  std::vector<std::pair<std::string, bool>> checks;

  explicit Criterion(int id_) : id(id_) {}
  void expect(const std::string& name, bool ok) { checks.emplace_back(name, ok); }

  ~Criterion() {
    bool unwinding = std::uncaught_exceptions() > 0;
    bool all = !checks.empty() && !unwinding;
    for (const auto& [name, ok] : checks) all = all && ok;
    std::printf("criterion %d: %s\n", id, all ? "pass" : "FAIL");
    std::fflush(stdout);
    if (unwinding) return;  // the in-flight doctest failure already fails the run
    for (const auto& [name, ok] : checks) CHECK_MESSAGE(ok, "criterion ", id, ": ", name);
  }
};

double rel_diff(double a, double b) {
  double scale = std::max({std::fabs(a), std::fabs(b), 1e-12});
  return std::fabs(a - b) / scale;
}

bool near(double a, double b) { return rel_diff(a, b) < 1e-6; }

Plane<float> random_plane(std::mt19937_64& rng, int h, int w, double lo = 0.0, double hi = 1.0) {
  Plane<float> p(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) p(y, x) = static_cast<float>(uniform(rng, lo, hi));
  return p;
}

Plane<double> random_plane_d(std::mt19937_64& rng, int h, int w, double lo = 0.0,
                             double hi = 1.0) {
  Plane<double> p(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) p(y, x) = uniform(rng, lo, hi);
  return p;
}

Image<float> random_image(std::mt19937_64& rng, int h, int w) {
  return Image<float>{random_plane(rng, h, w), random_plane(rng, h, w),
                      random_plane(rng, h, w)};
}

Tensor<double> random_tensor(std::mt19937_64& rng, int n, int c, int h, int w, double lo = 0.0,
                             double hi = 1.0) {
  Tensor<double> t(n, c, h, w);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.v[i] = uniform(rng, lo, hi);
  return t;
}

// Shared small corpus for the stage-contract and determinism criteria.
const io::Corpus& contract_corpus() {
  static testsup::TempDir dir("acceptance-corpus");
  static const io::Corpus corpus = [] {
    io::CorpusConfig cfg;
    cfg.seed = 77;
    cfg.synth.image_size = 48;
    cfg.split_counts = {{"pretrain", 8},
                        {"labeled-train", 8},
                        {"labeled-test", 4},
                        {"unlabeled-train", 8},
                        {"unlabeled-test", 4}};
    io::write_corpus(dir.path(), cfg, false);
    return io::Corpus::open(dir.path());
  }();
  return corpus;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

// ---- criterion 1: exact oracles -------------------------------------------------------

TEST_CASE("criterion 1: exact identities, partitions and idempotence") {
  Criterion crit(1);
  auto t0 = Clock::now();
  auto rng = make_engine(derive_seed(1001, "criterion-1"));

  // compositing identities on the dyadic color grid
  {
    bool ones_gives_fg = true, zeros_gives_bg = true, binary_selects = true, same_is_fixed = true;
    for (int trial = 0; trial < 50; ++trial) {
      int h = 6 + int(uniform_index(rng, 16)), w = 6 + int(uniform_index(rng, 16));
      Image<float> fg = random_image(rng, h, w), bg = random_image(rng, h, w);
      for (int c = 0; c < 3; ++c) {
        fg.channel(c) = quantize_unit_plane(fg.channel(c));
        bg.channel(c) = quantize_unit_plane(bg.channel(c));
      }

      Plane<float> ones = Plane<float>::Constant(h, w, 1.0f);
      Plane<float> zeros = Plane<float>::Zero(h, w);
      Image<float> c1 = composite(fg, bg, ones);
      Image<float> c0 = composite(fg, bg, zeros);
      ones_gives_fg = ones_gives_fg && (c1.r == fg.r).all() && (c1.g == fg.g).all() &&
                      (c1.b == fg.b).all();
      zeros_gives_bg = zeros_gives_bg && (c0.r == bg.r).all() && (c0.g == bg.g).all() &&
                       (c0.b == bg.b).all();

      Plane<float> hard(h, w);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) hard(y, x) = uniform01(rng) < 0.5 ? 0.0f : 1.0f;
      Image<float> ch = composite(fg, bg, hard);
      for (int y = 0; y < h && binary_selects; ++y)
        for (int x = 0; x < w; ++x) {
          const Image<float>& pick = hard(y, x) == 1.0f ? fg : bg;
          if (ch.r(y, x) != pick.r(y, x) || ch.g(y, x) != pick.g(y, x) ||
              ch.b(y, x) != pick.b(y, x)) {
            binary_selects = false;
            break;
          }
        }

      Plane<float> soft = quantize_unit_plane(random_plane(rng, h, w));
      Image<float> cf = composite(fg, fg, soft);
      same_is_fixed = same_is_fixed && (cf.r == fg.r).all() && (cf.g == fg.g).all() &&
                      (cf.b == fg.b).all();
    }
    crit.expect("alpha of one returns the foreground exactly", ones_gives_fg);
    crit.expect("alpha of zero returns the background exactly", zeros_gives_bg);
    crit.expect("binary alpha selects per pixel exactly", binary_selects);
    crit.expect("equal layers compose to themselves on the color grid", same_is_fixed);
  }

  // metric zero cases: a matte against itself scores zero on every metric
  {
    bool zeros = true;
    for (int trial = 0; trial < 25; ++trial) {
      int h = 8 + int(uniform_index(rng, 24)), w = 8 + int(uniform_index(rng, 24));
      Plane<float> a = random_plane(rng, h, w);
      MaskPlane all = MaskPlane::Constant(h, w, 1);
      metrics::MetricValues v = metrics::evaluate_masked(a, a, all);
      zeros = zeros && v.sad == 0.0 && v.mse == 0.0 && v.grad == 0.0 && v.conn == 0.0;
    }
    crit.expect("identical mattes score exactly zero on sad, mse, grad and conn", zeros);
  }

  // trimap labels partition the image and match the region predicates
  {
    int bad = 0;
    const int h = 12, w = 12;
    for (int input = 0; input < 1000; ++input) {
      Plane<float> seg = random_plane(rng, h, w);
      std::vector<metrics::Circle> circles;
      int nc = int(uniform_index(rng, 4));
      for (int c = 0; c < nc; ++c)
        circles.push_back({uniform(rng, -2.0, h + 2.0), uniform(rng, -2.0, w + 2.0),
                           uniform(rng, 0.5, 5.0)});
      MaskPlane tri = metrics::generate_trimap(seg, circles);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          double p = seg(y, x);
          bool in_circle = false;
          for (const auto& c : circles) {
            double dy = y - c.cy, dx = x - c.cx;
            if (dy * dy + dx * dx <= c.r * c.r) in_circle = true;
          }
          int fg = p > 0.95 ? 1 : 0;
          int unknown = (!fg && (in_circle || (p >= 0.05 && p <= 0.95))) ? 1 : 0;
          int bg = (!fg && !unknown) ? 1 : 0;
          if (fg + unknown + bg != 1) ++bad;  // the predicate classes must partition
          std::uint8_t want = fg ? 1 : (unknown ? 2 : 0);
          if (tri(y, x) != want) ++bad;
        }
    }
    crit.expect("trimap is a disjoint exhaustive partition over 1000 random inputs", bad == 0);
  }

  // threshold update is idempotent
  {
    bool idem = true;
    for (int trial = 0; trial < 100; ++trial) {
      int h = 5 + int(uniform_index(rng, 20)), w = 5 + int(uniform_index(rng, 20));
      float tau = static_cast<float>(uniform(rng, 0.05, 0.95));
      Plane<float> raw = random_plane(rng, h, w);
      Plane<float> once = cl::threshold_update(raw, tau);
      Plane<float> twice = cl::threshold_update(once, tau);
      idem = idem && (once == twice).all();
    }
    crit.expect("threshold update is idempotent", idem);
  }

  // beta and sigma area maps are disjoint over ten thousand pixel pairs
  {
    const int h = 100, w = 100;
    Plane<float> raw1 = random_plane(rng, h, w), raw2 = random_plane(rng, h, w);
    // make exact saturation and exact ties common enough to matter
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        if (uniform01(rng) < 0.25) raw1(y, x) = 1.0f;
        if (uniform01(rng) < 0.25) raw2(y, x) = 1.0f;
        if (uniform01(rng) < 0.1) raw2(y, x) = raw1(y, x);
      }
    Plane<float> thr1 = cl::threshold_update(raw1, 0.5f);
    Plane<float> thr2 = cl::threshold_update(raw2, 0.5f);
    auto [beta1, beta2] = cl::complementary_area(thr1, thr2);
    MaskPlane sigma = cl::deviation_correction_area(thr1, thr2);
    int overlaps = 0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (int(beta1(y, x)) + int(beta2(y, x)) + int(sigma(y, x)) > 1) ++overlaps;
    crit.expect("beta and sigma maps are pairwise disjoint over 10^4 pixel pairs", overlaps == 0);
  }

  crit.expect("criterion 1 runtime stays under one minute", seconds_since(t0) < 60.0);
}

// ---- criterion 2: dense-oracle equivalence -----------------------------------------------

namespace oracle {

// Everything below recomputes the shipped formulas with plain loops; shared
// code with the library would defeat the comparison, so nothing from
// vmfm::metrics, vmfm::cl or vmfm::loss is called here.

double mean_abs(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) s += std::fabs(a.v[i] - b.v[i]);
  return s / double(a.size());
}

double matte_loss(const Tensor<double>& a, const Tensor<double>& g) {
  double lv = 0.0, lx = 0.0, ly = 0.0;
  for (int n = 0; n < a.n; ++n)
    for (int y = 0; y < a.h; ++y)
      for (int x = 0; x < a.w; ++x) {
        lv += std::fabs(a.at(n, 0, y, x) - g.at(n, 0, y, x));
        if (x + 1 < a.w) {
          double da = a.at(n, 0, y, x + 1) - a.at(n, 0, y, x);
          double dg = g.at(n, 0, y, x + 1) - g.at(n, 0, y, x);
          lx += std::fabs(da - dg);
        }
        if (y + 1 < a.h) {
          double da = a.at(n, 0, y + 1, x) - a.at(n, 0, y, x);
          double dg = g.at(n, 0, y + 1, x) - g.at(n, 0, y, x);
          ly += std::fabs(da - dg);
        }
      }
  double total = double(a.n) * a.h * a.w;  // difference maps keep the full size
  return lv / total + lx / total + ly / total;
}

Tensor<double> composite(const Tensor<double>& a, const Tensor<double>& f,
                         const Tensor<double>& b) {
  Tensor<double> out(f.n, f.c, f.h, f.w);
  for (int n = 0; n < f.n; ++n)
    for (int c = 0; c < f.c; ++c)
      for (int y = 0; y < f.h; ++y)
        for (int x = 0; x < f.w; ++x)
          out.at(n, c, y, x) = a.at(n, 0, y, x) * f.at(n, c, y, x) +
                               (1.0 - a.at(n, 0, y, x)) * b.at(n, c, y, x);
  return out;
}

double adv_real(const Tensor<double>& score) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < score.size(); ++i) s += (score.v[i] - 1.0) * (score.v[i] - 1.0);
  return s / double(score.size());
}

double adv_fake(const Tensor<double>& score) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < score.size(); ++i) s += score.v[i] * score.v[i];
  return s / double(score.size());
}

Plane<double> widen(const Plane<double>& r) {
  const int h = int(r.rows()), w = int(r.cols());
  Plane<double> out(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double m = 0.0;
      for (int dy = -2; dy <= 2; ++dy)
        for (int dx = -2; dx <= 2; ++dx)
          m = std::max(m, r(std::clamp(y + dy, 0, h - 1), std::clamp(x + dx, 0, w - 1)));
      out(y, x) = std::min(m, 1.0);
    }
  return out;
}

double estimator_fit(const Tensor<double>& raw, const Tensor<double>& a,
                     const Tensor<double>& g) {
  double s = 0.0;
  for (int n = 0; n < raw.n; ++n) {
    Plane<double> resid = (a.plane(n, 0) - g.plane(n, 0)).abs();
    Plane<double> target = widen(resid);
    for (int y = 0; y < raw.h; ++y)
      for (int x = 0; x < raw.w; ++x) s += std::fabs(raw.at(n, 0, y, x) - target(y, x));
  }
  return s / double(raw.size());
}

double threshold(double v, double tau) { return v > tau ? 1.0 : v; }

double cross_supervision(const Tensor<double>& a1, const Tensor<double>& a2,
                         const Tensor<double>& raw1, const Tensor<double>& raw2, double tau) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < a1.size(); ++i) {
    double t1 = threshold(raw1.v[i], tau), t2 = threshold(raw2.v[i], tau);
    double beta1 = t1 > t2 ? 1.0 : 0.0;
    s += beta1 * std::fabs(a1.v[i] - a2.v[i]);
  }
  return s / double(a1.size());
}

double deviation_correction(const Tensor<double>& raw1, const Tensor<double>& raw2, double tau) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < raw1.size(); ++i) {
    double t1 = threshold(raw1.v[i], tau), t2 = threshold(raw2.v[i], tau);
    double sigma = (t1 == 1.0 && t2 == 1.0) ? 1.0 : 0.0;
    s += sigma * raw1.v[i] * raw1.v[i];
  }
  return s / double(raw1.size());
}

double sad(const Plane<double>& p, const Plane<double>& g, const MaskPlane& m) {
  double s = 0.0;
  for (Eigen::Index y = 0; y < p.rows(); ++y)
    for (Eigen::Index x = 0; x < p.cols(); ++x)
      if (m(y, x)) s += std::fabs(p(y, x) - g(y, x));
  return s;
}

double mse(const Plane<double>& p, const Plane<double>& g, const MaskPlane& m) {
  double s = 0.0;
  long n = 0;
  for (Eigen::Index y = 0; y < p.rows(); ++y)
    for (Eigen::Index x = 0; x < p.cols(); ++x)
      if (m(y, x)) {
        double d = p(y, x) - g(y, x);
        s += d * d;
        ++n;
      }
  return n ? s / double(n) : 0.0;
}

double grad_metric(const Plane<double>& p, const Plane<double>& g, const MaskPlane& m) {
  const int r = 5;
  const double sigma = 1.4;
  double smooth[2 * r + 1], deriv[2 * r + 1];
  double ssum = 0.0, ramp = 0.0;
  for (int i = -r; i <= r; ++i) {
    double e = std::exp(-double(i) * i / (2.0 * sigma * sigma));
    smooth[i + r] = e;
    deriv[i + r] = -double(i) * e;
    ssum += e;
  }
  for (int i = 0; i <= 2 * r; ++i) smooth[i] /= ssum;
  for (int i = -r; i <= r; ++i) ramp += double(i) * deriv[i + r];
  for (int i = 0; i <= 2 * r; ++i) deriv[i] /= ramp;

  const int h = int(p.rows()), w = int(p.cols());
  auto corr2 = [&](const Plane<double>& img, const double* kx, const double* ky, int y, int x) {
    double s = 0.0;
    for (int dy = -r; dy <= r; ++dy)
      for (int dx = -r; dx <= r; ++dx)
        s += ky[dy + r] * kx[dx + r] *
             img(std::clamp(y + dy, 0, h - 1), std::clamp(x + dx, 0, w - 1));
    return s;
  };
  double total = 0.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!m(y, x)) continue;
      double gxp = corr2(p, deriv, smooth, y, x), gyp = corr2(p, smooth, deriv, y, x);
      double gxg = corr2(g, deriv, smooth, y, x), gyg = corr2(g, smooth, deriv, y, x);
      total += (gxp - gxg) * (gxp - gxg) + (gyp - gyg) * (gyp - gyg);
    }
  return total;
}

// Flood fill per level with an explicit queue; first drop-out level decides l.
double conn_metric(const Plane<double>& p, const Plane<double>& g, const MaskPlane& m) {
  const int h = int(p.rows()), w = int(p.cols());
  Plane<double> l_map = Plane<double>::Constant(h, w, 2.0);  // 2 marks "never dropped out"
  for (int step = 1; step <= 9; ++step) {
    double theta = 0.1 * step;
    MaskPlane joint(h, w);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) joint(y, x) = (p(y, x) >= theta && g(y, x) >= theta) ? 1 : 0;

    // largest 4-connected component by BFS; earliest component wins ties
    Eigen::Array<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> comp(h, w);
    comp.setConstant(-1);
    int next_id = 0, best_id = -1;
    long best_n = 0;
    for (int sy = 0; sy < h; ++sy)
      for (int sx = 0; sx < w; ++sx) {
        if (!joint(sy, sx) || comp(sy, sx) >= 0) continue;
        std::deque<std::pair<int, int>> queue{{sy, sx}};
        comp(sy, sx) = next_id;
        long n = 0;
        while (!queue.empty()) {
          auto [y, x] = queue.front();
          queue.pop_front();
          ++n;
          const int dy[4] = {0, 0, 1, -1}, dx[4] = {1, -1, 0, 0};
          for (int d = 0; d < 4; ++d) {
            int ny = y + dy[d], nx = x + dx[d];
            if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
            if (!joint(ny, nx) || comp(ny, nx) >= 0) continue;
            comp(ny, nx) = next_id;
            queue.push_back({ny, nx});
          }
        }
        if (n > best_n) {
          best_n = n;
          best_id = next_id;
        }
        ++next_id;
      }
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (l_map(y, x) == 2.0 && !(comp(y, x) == best_id && best_id >= 0))
          l_map(y, x) = theta - 0.1;
  }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (l_map(y, x) == 2.0) l_map(y, x) = 1.0;

  double total = 0.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!m(y, x)) continue;
      double dp = p(y, x) - l_map(y, x), dg = g(y, x) - l_map(y, x);
      double phi_p = 1.0 - (dp >= 0.15 ? dp : 0.0);
      double phi_g = 1.0 - (dg >= 0.15 ? dg : 0.0);
      total += std::fabs(phi_p - phi_g);
    }
  return total;
}

}  // namespace oracle

TEST_CASE("criterion 2: losses and metrics match dense oracles") {
  Criterion crit(2);
  auto rng = make_engine(derive_seed(1002, "criterion-2"));

  const int n = 2, h = 8, w = 8;
  const double l_matte = 1.0, l_com = 0.5, l_cl = 1.0, l_cs = 6.0, l_dc = 1.0, tau = 0.5;

  Tensor<double> rgb = random_tensor(rng, n, 3, h, w);
  Tensor<double> heat = random_tensor(rng, n, 1, h, w);
  Tensor<double> mod1 = random_tensor(rng, n, 1, h, w);
  Tensor<double> mod2 = random_tensor(rng, n, 1, h, w);
  Tensor<double> gt = random_tensor(rng, n, 1, h, w);
  Tensor<double> fg = random_tensor(rng, n, 3, h, w);
  Tensor<double> bg = random_tensor(rng, n, 3, h, w);
  Tensor<double> bbar = random_tensor(rng, n, 3, h, w);

  net::Models<double> M = net::make_models<double>(4242);
  ad::Tape<double> t;
  auto rgbC = t.constant(rgb), heatC = t.constant(heat), mod1C = t.constant(mod1),
       mod2C = t.constant(mod2), gtC = t.constant(gt), fgC = t.constant(fg), bgC = t.constant(bg),
       bbarC = t.constant(bbar);

  auto a1 = net::fp_forward(t, M.fp1, rgbC, mod1C, heatC);
  auto a2 = net::fp_forward(t, M.fp2, rgbC, mod2C, heatC);

  // supervised generator objective and its parts
  auto la = loss::matte_loss(a1, gtC);
  auto lcom = loss::composition_loss(a1, fgC, bgC, rgbC);
  auto comp1 = loss::composite_v(a1, fgC, bbarC);
  auto adv1 = loss::adv_real_target_loss(net::disc_forward(t, M.disc1, comp1));
  auto lg1 = ad::add(adv1, ad::add(ad::mul_scalar(la, l_matte), ad::mul_scalar(lcom, l_com)));

  crit.expect("matte loss matches its dense recomputation",
              near(la->val.v[0], oracle::matte_loss(a1->val, gt)));

  Tensor<double> comp_oracle = oracle::composite(a1->val, fg, bbar);
  bool comp_ok = true;
  for (Eigen::Index i = 0; i < comp_oracle.size(); ++i)
    comp_ok = comp_ok && rel_diff(comp1->val.v[i], comp_oracle.v[i]) < 1e-6;
  crit.expect("matte compositing matches per-pixel recomputation", comp_ok);

  double lcom_oracle = oracle::mean_abs(oracle::composite(a1->val, fg, bg), rgb);
  crit.expect("composition loss matches its dense recomputation",
              near(lcom->val.v[0], lcom_oracle));

  auto fake_score = net::disc_forward(t, M.disc1, comp1);
  double lg1_oracle = oracle::adv_real(fake_score->val) +
                      l_matte * oracle::matte_loss(a1->val, gt) + l_com * lcom_oracle;
  crit.expect("supervised generator objective matches its dense recomputation",
              near(lg1->val.v[0], lg1_oracle));

  // critic objective
  auto real = loss::composite_v(gtC, fgC, bbarC);
  auto real_score = net::disc_forward(t, M.disc1, real);
  auto ld = ad::add(loss::adv_fake_target_loss(fake_score), loss::adv_real_target_loss(real_score));
  double ld_oracle = oracle::adv_fake(fake_score->val) + oracle::adv_real(real_score->val);
  crit.expect("critic objective matches its dense recomputation", near(ld->val.v[0], ld_oracle));

  // estimator regression
  Tensor<double> q_target(n, 1, h, w);
  for (int i = 0; i < n; ++i)
    q_target.plane(i, 0) =
        cl::q_widen(Plane<double>((a1->val.plane(i, 0) - gt.plane(i, 0)).abs()));
  auto raw1_fit = net::cl_forward(t, M.cl, 1, rgbC, t.constant(a1->val));
  auto lc = loss::cl_regression_loss(raw1_fit, t.constant(q_target));
  crit.expect("estimator regression loss matches its dense recomputation",
              near(lc->val.v[0], oracle::estimator_fit(raw1_fit->val, a1->val, gt)));

  // self-supervised terms from live deviation maps
  auto raw1 = net::cl_forward(t, M.cl, 1, rgbC, a1);
  auto raw2 = net::cl_forward(t, M.cl, 2, rgbC, a2);
  Tensor<double> beta1(n, 1, h, w), sigma(n, 1, h, w);
  for (int i = 0; i < n; ++i) {
    Plane<double> thr1 = cl::threshold_update(Plane<double>(raw1->val.plane(i, 0)), tau);
    Plane<double> thr2 = cl::threshold_update(Plane<double>(raw2->val.plane(i, 0)), tau);
    auto [b1, b2] = cl::complementary_area(thr1, thr2);
    beta1.plane(i, 0) = b1.cast<double>();
    sigma.plane(i, 0) = cl::deviation_correction_area(thr1, thr2).cast<double>();
  }
  auto lcs = loss::cross_supervision_loss(a1, ad::detach(a2), t.constant(beta1));
  auto ldc = loss::deviation_correction_loss(raw1, t.constant(sigma));
  crit.expect("cross-supervision loss matches its dense recomputation",
              near(lcs->val.v[0],
                   oracle::cross_supervision(a1->val, a2->val, raw1->val, raw2->val, tau)));
  crit.expect("deviation-correction loss matches its dense recomputation",
              near(ldc->val.v[0], oracle::deviation_correction(raw1->val, raw2->val, tau)));

  auto comp_u = loss::composite_v(a1, rgbC, bbarC);
  auto adv_u = loss::adv_real_target_loss(net::disc_forward(t, M.disc1, comp_u));
  auto lg2 = ad::add(
      adv_u, ad::mul_scalar(ad::add(ad::mul_scalar(lcs, l_cs), ad::mul_scalar(ldc, l_dc)), l_cl));
  auto score_u = net::disc_forward(t, M.disc1, comp_u);
  double lg2_oracle =
      oracle::adv_real(score_u->val) +
      l_cl * (l_cs * oracle::cross_supervision(a1->val, a2->val, raw1->val, raw2->val, tau) +
              l_dc * oracle::deviation_correction(raw1->val, raw2->val, tau));
  crit.expect("self-supervised generator objective matches its dense recomputation",
              near(lg2->val.v[0], lg2_oracle));

  // metrics on 8x8 planes, whole image and under a random region mask
  for (int trial = 0; trial < 10; ++trial) {
    Plane<double> pd = random_plane_d(rng, h, w);
    Plane<double> gtp = random_plane_d(rng, h, w);
    MaskPlane all = MaskPlane::Constant(h, w, 1);
    MaskPlane part(h, w);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) part(y, x) = uniform01(rng) < 0.5 ? 1 : 0;

    for (const MaskPlane* mask : {&all, &part}) {
      metrics::MetricValues v = metrics::evaluate_masked(pd, gtp, *mask);
      if (!near(v.sad, oracle::sad(pd, gtp, *mask)) ||
          !near(v.mse, oracle::mse(pd, gtp, *mask)) ||
          !near(v.grad, oracle::grad_metric(pd, gtp, *mask)) ||
          !near(v.conn, oracle::conn_metric(pd, gtp, *mask))) {
        crit.expect("metric equivalence trial " + std::to_string(trial), false);
      }
    }
  }
  crit.expect("sad, mse, grad and conn match dense recomputations on random 8x8 pairs", true);
}

// ---- criterion 3: gradient checks ---------------------------------------------------------

namespace {

struct GradCheckResult {
  int tested = 0;
  int ok = 0;
};

// Compares analytic leaf gradients against central differences for `coords`
// randomly chosen parameter coordinates. `build` must construct the full
// graph from current parameter values and return the scalar loss node;
// `bind_size` coordinates are addressed through the binding recorded by it.
template <class Build>
GradCheckResult check_gradients(std::mt19937_64& rng, Build build, int coords) {
  net::Binding<double> bind;
  ad::Tape<double> tape;
  auto loss_var = build(tape, &bind);
  tape.backward(loss_var);

  std::vector<std::pair<Tensor<double>*, Vec<double>>> grads;
  for (auto& [tensor, var] : bind.entries) {
    Vec<double> g = var->grad_ready ? var->grad.v : Vec<double>(Vec<double>::Zero(tensor->size()));
    grads.emplace_back(tensor, std::move(g));
  }

  GradCheckResult res;
  for (int k = 0; k < coords; ++k) {
    std::size_t e = uniform_index(rng, grads.size());
    Tensor<double>* param = grads[e].first;
    Eigen::Index i = Eigen::Index(uniform_index(rng, std::uint64_t(param->size())));
    double analytic = grads[e].second[i];

    double saved = param->v[i];
    // small enough that L1 and relu kinks rarely fall inside [w-h, w+h], far
    // above the 1e-16/h roundoff floor of double central differences
    double step = 1e-6 * std::max(1.0, std::fabs(saved));
    param->v[i] = saved + step;
    double up;
    {
      ad::Tape<double> t2;
      up = build(t2, nullptr)->val.v[0];
    }
    param->v[i] = saved - step;
    double down;
    {
      ad::Tape<double> t2;
      down = build(t2, nullptr)->val.v[0];
    }
    param->v[i] = saved;

    double fd = (up - down) / (2.0 * step);
    double denom = std::max({std::fabs(analytic), std::fabs(fd), 1e-8});
    res.tested++;
    if (std::fabs(analytic - fd) / denom < 1e-3) res.ok++;
  }
  return res;
}

}  // namespace

TEST_CASE("criterion 3: analytic gradients match finite differences") {
  Criterion crit(3);
  auto rng = make_engine(derive_seed(1003, "criterion-3"));

  const int h = 8, w = 8;
  Tensor<double> rgb = random_tensor(rng, 1, 3, h, w);
  Tensor<double> heat = random_tensor(rng, 1, 1, h, w);
  Tensor<double> mod = random_tensor(rng, 1, 1, h, w);
  Tensor<double> gt = random_tensor(rng, 1, 1, h, w);
  Tensor<double> fg = random_tensor(rng, 1, 3, h, w);
  Tensor<double> bg = random_tensor(rng, 1, 3, h, w);

  // matte plus composition objective through the matting network
  {
    net::Models<double> M = net::make_models<double>(515);
    auto build = [&](ad::Tape<double>& t, net::Binding<double>* bind) {
      auto a = net::fp_forward(t, M.fp1, t.constant(rgb), t.constant(mod), t.constant(heat), bind);
      auto la = loss::matte_loss(a, t.constant(gt));
      auto lcom = loss::composition_loss(a, t.constant(fg), t.constant(bg), t.constant(rgb));
      return ad::add(la, ad::mul_scalar(lcom, 0.5));
    };
    GradCheckResult r = check_gradients(rng, build, 200);
    std::printf("  matte+composition agreement %d/200\n", r.ok);
    crit.expect("matte+composition gradient agreement on at least 95% of 200 coordinates",
                r.ok >= 190);
  }

  // estimator regression objective through the estimator network
  {
    net::Models<double> M = net::make_models<double>(626);
    Tensor<double> matte = random_tensor(rng, 1, 1, h, w);
    Tensor<double> target(1, 1, h, w);
    target.plane(0, 0) = cl::q_widen(Plane<double>((matte.plane(0, 0) - gt.plane(0, 0)).abs()));
    auto build = [&](ad::Tape<double>& t, net::Binding<double>* bind) {
      auto raw = net::cl_forward(t, M.cl, 1, t.constant(rgb), t.constant(matte), bind);
      return loss::cl_regression_loss(raw, t.constant(target));
    };
    GradCheckResult r = check_gradients(rng, build, 200);
    std::printf("  estimator regression agreement %d/200\n", r.ok);
    crit.expect("estimator regression gradient agreement on at least 95% of 200 coordinates",
                r.ok >= 190);
  }

  // patch matte objective through the refinement network
  {
    net::Models<double> M = net::make_models<double>(737);
    const int s = refinement::kPatchSize;
    Tensor<double> mp = random_tensor(rng, 3, 1, s, s);
    Tensor<double> rp = random_tensor(rng, 3, 3, s, s);
    Tensor<double> gp = random_tensor(rng, 3, 1, s, s);
    auto build = [&](ad::Tape<double>& t, net::Binding<double>* bind) {
      auto refined = net::rn_forward(t, M.rn, t.constant(mp), t.constant(rp), bind);
      return loss::matte_loss(refined, t.constant(gp));
    };
    GradCheckResult r = check_gradients(rng, build, 200);
    std::printf("  patch matte agreement %d/200\n", r.ok);
    crit.expect("patch matte gradient agreement on at least 95% of 200 coordinates",
                r.ok >= 190);
  }
}

// ---- criterion 4: freeze and detach contracts ----------------------------------------------

TEST_CASE("criterion 4: freeze and detach contracts hold") {
  Criterion crit(4);
  const io::Corpus& corpus = contract_corpus();

  testsup::TempDir run("acceptance-freeze");
  train::TrainConfig cfg;
  cfg.seed = 404;
  cfg.stage_epochs = {{"pretrain", 1}, {"sup1", 1}, {"sup2", 1}, {"cl_selfsup", 1}, {"refine", 1}};
  train::Trainer tr(run.path(), corpus, cfg);
  tr.run_stage(train::Stage::pretrain);
  tr.run_stage(train::Stage::sup1);
  tr.run_stage(train::Stage::sup2);

  net::Models<float>& m = tr.checkpoint().models;
  std::uint64_t cl_before = net::weight_checksum<float>(m.cl, "cl");
  tr.run_stage(train::Stage::cl_selfsup);
  crit.expect("estimator weights unchanged across the self-supervised stage",
              net::weight_checksum<float>(m.cl, "cl") == cl_before);

  std::uint64_t fp1_before = net::weight_checksum<float>(m.fp1, "fp1");
  std::uint64_t fp2_before = net::weight_checksum<float>(m.fp2, "fp2");
  tr.run_stage(train::Stage::refine);
  crit.expect("matting weights unchanged across the refinement stage",
              net::weight_checksum<float>(m.fp1, "fp1") == fp1_before &&
                  net::weight_checksum<float>(m.fp2, "fp2") == fp2_before);

  // the supervising branch receives exactly zero gradient from cross supervision
  auto rng = make_engine(derive_seed(1004, "criterion-4"));
  const int h = 8, w = 8;
  net::Models<double> M = net::make_models<double>(848);
  ad::Tape<double> t;
  net::Binding<double> bind1, bind2;
  auto rgbC = t.constant(random_tensor(rng, 1, 3, h, w));
  auto heatC = t.constant(random_tensor(rng, 1, 1, h, w));
  auto a1 = net::fp_forward(t, M.fp1, rgbC, t.constant(random_tensor(rng, 1, 1, h, w)), heatC,
                            &bind1);
  auto a2 = net::fp_forward(t, M.fp2, rgbC, t.constant(random_tensor(rng, 1, 1, h, w)), heatC,
                            &bind2);
  Tensor<double> beta(1, 1, h, w);
  beta.v.setConstant(1.0);
  auto lcs = loss::cross_supervision_loss(a1, ad::detach(a2), t.constant(beta));
  t.backward(lcs);

  bool supervising_zero = true;
  for (auto& [tensor, var] : bind2.entries)
    if (var->grad_ready && var->grad.v.abs().maxCoeff() != 0.0) supervising_zero = false;
  bool learner_nonzero = false;
  for (auto& [tensor, var] : bind1.entries)
    if (var->grad_ready && var->grad.v.abs().maxCoeff() > 0.0) learner_nonzero = true;
  crit.expect("cross supervision sends exactly zero gradient into the supervising branch",
              supervising_zero);
  crit.expect("cross supervision still trains the supervised branch", learner_nonzero);
}

// ---- criterion 5: desk-scale curriculum ------------------------------------------------------

TEST_CASE("criterion 5: desk-scale curriculum reaches the directional targets") {
  Criterion crit(5);
  auto t0 = Clock::now();

  testsup::TempDir scratch("acceptance-curriculum");
  fs::path corpus_dir = scratch.path() / "corpus";
  io::CorpusConfig ccfg;
  ccfg.seed = 1302;
  ccfg.synth.image_size = 64;
  ccfg.split_counts = {{"pretrain", 200},
                       {"labeled-train", 200},
                       {"labeled-test", 50},
                       {"unlabeled-train", 400},
                       {"unlabeled-test", 50}};
  io::write_corpus(corpus_dir, ccfg, false);
  io::Corpus corpus = io::Corpus::open(corpus_dir);

  train::TrainConfig cfg;
  cfg.seed = 1302;
  cfg.batch_size = 8;
  cfg.stage_epochs = {
      {"pretrain", 8}, {"sup1", 4}, {"sup2", 10}, {"cl_selfsup", 8}, {"refine", 6}};

  auto whole_sad = [&](net::Models<float>& m, const std::string& pipe) {
    return eval::evaluate_split(m, corpus, "labeled-test", pipe).mean.all.sad;
  };
  auto object_sad = [&](net::Models<float>& m, const std::string& pipe) {
    return eval::evaluate_split(m, corpus, "labeled-test", pipe).mean.object.sad;
  };

  net::Models<float> init = net::make_models<float>(cfg.seed);
  double sad_s_init = whole_sad(init, "s");
  double sad_d_init = whole_sad(init, "d");

  fs::path base = scratch.path() / "base";
  {
    train::Trainer tr(base, corpus, cfg);
    tr.run_stage(train::Stage::pretrain);
    tr.run_stage(train::Stage::sup1);
    tr.run_stage(train::Stage::sup2);
  }

  auto sup2 = train::load_checkpoint(base / "checkpoint");
  double sad_s_sup2 = whole_sad(sup2->models, "s");
  double sad_d_sup2 = whole_sad(sup2->models, "d");
  double obj_s_sup2 = object_sad(sup2->models, "s");
  double obj_d_sup2 = object_sad(sup2->models, "d");
  std::printf("  whole sad  init s %.1f d %.1f -> sup2 s %.1f d %.1f\n", sad_s_init, sad_d_init,
              sad_s_sup2, sad_d_sup2);
  std::printf("  object sad sup2 s %.2f d %.2f\n", obj_s_sup2, obj_d_sup2);

  crit.expect("(a) supervised training halves whole-image sad versus random initialization",
              sad_s_sup2 <= 0.5 * sad_s_init && sad_d_sup2 <= 0.5 * sad_d_init);
  crit.expect("(b) depth branch beats segmentation branch on object-region sad after sup2",
              obj_d_sup2 < obj_s_sup2);

  // three self-supervision variants continue from the same sup2 checkpoint
  std::map<std::string, double> obj_after;
  for (const std::string mode : {"full", "cs_only", "dc_only"}) {
    fs::path vdir = scratch.path() / mode;
    fs::create_directories(vdir);
    fs::copy(base / "checkpoint", vdir / "checkpoint", fs::copy_options::recursive);
    fs::copy(base / "logs", vdir / "logs", fs::copy_options::recursive);

    train::TrainConfig vcfg = cfg;
    vcfg.cl_mode = mode;
    train::Trainer tr(vdir, corpus, vcfg);
    tr.run_stage(train::Stage::cl_selfsup);
    obj_after[mode] = object_sad(tr.checkpoint().models, "s");
  }
  std::printf("  object sad after cl: full %.2f cs_only %.2f dc_only %.2f (sup2 %.2f)\n",
              obj_after["full"], obj_after["cs_only"], obj_after["dc_only"], obj_s_sup2);

  crit.expect("(c) full self-supervision cuts segmentation object sad by at least 20%",
              obj_after["full"] <= 0.8 * obj_s_sup2);
  crit.expect("(c) ablation ordering: full <= cs_only <= dc_only in object sad",
              obj_after["full"] <= obj_after["cs_only"] &&
                  obj_after["cs_only"] <= obj_after["dc_only"]);

  // refinement on top of the full variant must not hurt
  {
    train::TrainConfig vcfg = cfg;
    vcfg.cl_mode = "full";
    train::Trainer tr(scratch.path() / "full", corpus, vcfg);
    tr.run_stage(train::Stage::refine);

    net::Models<float>& m = tr.checkpoint().models;
    double s_plain = whole_sad(m, "s"), s_rn = whole_sad(m, "s+rn");
    double d_plain = whole_sad(m, "d"), d_rn = whole_sad(m, "d+rn");
    double train_plain =
        eval::evaluate_split(m, corpus, "labeled-train", "s").mean.all.sad;
    double train_rn =
        eval::evaluate_split(m, corpus, "labeled-train", "s+rn").mean.all.sad;
    std::printf("  refine: test s %.1f -> %.1f, d %.1f -> %.1f; train s %.1f -> %.1f\n", s_plain,
                s_rn, d_plain, d_rn, train_plain, train_rn);
    crit.expect("(d) refinement does not increase whole-image sad on the test split",
                s_rn <= s_plain * (1.0 + 1e-9) && d_rn <= d_plain * (1.0 + 1e-9));
    crit.expect("(d) refinement does not increase whole-image sad on the training split",
                train_rn <= train_plain * (1.0 + 1e-9));
  }

  double elapsed = seconds_since(t0);
  std::printf("  curriculum wall time %.0f s\n", elapsed);
  crit.expect("curriculum finishes in under 30 minutes", elapsed < 1800.0);
}

// ---- criterion 6: determinism ---------------------------------------------------------------

TEST_CASE("criterion 6: identical seeded runs are byte-identical") {
  Criterion crit(6);
  const io::Corpus& corpus = contract_corpus();

  struct RunProducts {
    std::uint64_t weights = 0;
    std::string state, manifest, report_json, report_csv;
    std::map<std::string, std::string> logs;
  };

  auto full_run = [&](const fs::path& dir) {
    train::TrainConfig cfg;
    cfg.seed = 2024;
    cfg.stage_epochs = {
        {"pretrain", 1}, {"sup1", 1}, {"sup2", 1}, {"cl_selfsup", 1}, {"refine", 1}};
    train::Trainer tr(dir, corpus, cfg);
    for (auto stage : {train::Stage::pretrain, train::Stage::sup1, train::Stage::sup2,
                       train::Stage::cl_selfsup, train::Stage::refine})
      tr.run_stage(stage);

    RunProducts p;
    p.weights = io::file_checksum(dir / "checkpoint" / "model.vmt");
    p.state = slurp(dir / "checkpoint" / "state.json");
    p.manifest = slurp(dir / "run.json");
    for (const auto& e : fs::directory_iterator(dir / "logs"))
      p.logs[e.path().filename().string()] = slurp(e.path());
    eval::SplitReport rep =
        eval::evaluate_split(tr.checkpoint().models, corpus, "labeled-test", "s+rn");
    p.report_json = eval::report_to_json(rep);
    p.report_csv = eval::report_to_csv(rep);
    return p;
  };

  testsup::TempDir scratch("acceptance-determinism");
  RunProducts first = full_run(scratch.path() / "one");
  RunProducts second = full_run(scratch.path() / "two");

  crit.expect("checkpoint weight files are byte-identical", first.weights == second.weights);
  crit.expect("checkpoint state files are byte-identical", first.state == second.state);
  crit.expect("run manifests are byte-identical", first.manifest == second.manifest);
  crit.expect("per-stage loss logs are byte-identical",
              first.logs == second.logs && first.logs.size() == 5);
  crit.expect("metric reports are byte-identical", first.report_json == second.report_json &&
                                                       first.report_csv == second.report_csv);
}
