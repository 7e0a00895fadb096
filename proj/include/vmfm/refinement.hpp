#pragma once

#include <stdexcept>
#include <vector>

#include "vmfm/errors.hpp"
#include "vmfm/tensor.hpp"

namespace vmfm::refinement {

inline constexpr int kPatchSize = 16;
inline constexpr int kDefaultPatchCount = 4;

struct PatchWindow {
  int row = 0, col = 0;  // top-left corner
  double score = 0.0;    // deviation mass inside the window at selection time
};

inline bool windows_overlap(const PatchWindow& a, const PatchWindow& b) {
  return a.row < b.row + kPatchSize && b.row < a.row + kPatchSize && a.col < b.col + kPatchSize &&
         b.col < a.col + kPatchSize;
}

// Greedy selection of up to k disjoint patch windows centered on the strongest
// deviation pixels. Each round takes the argmax pixel of the deviation map
// (first in raster order on ties), clamps a patch-size window around it to the
// image, and skips candidates whose window would overlap an already chosen
// one. Pixels covered by chosen windows are suppressed for later rounds.
template <class S>
std::vector<PatchWindow> select_topk_patches(const Plane<S>& deviation, int k) {
  const int h = static_cast<int>(deviation.rows()), w = static_cast<int>(deviation.cols());
  if (h < kPatchSize || w < kPatchSize)
    throw std::invalid_argument("select_topk_patches: map smaller than a patch");
  if (k < 0) throw std::invalid_argument("select_topk_patches: negative patch count");

  std::vector<PatchWindow> chosen;
  MaskPlane suppressed = MaskPlane::Zero(h, w);
  while (static_cast<int>(chosen.size()) < k) {
    int best_y = -1, best_x = -1;
    double best = 0.0;
    bool found = false;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        if (suppressed(y, x)) continue;
        double v = double(deviation(y, x));
        if (!found || v > best) {
          found = true;
          best = v;
          best_y = y;
          best_x = x;
        }
      }
    if (!found) break;

    PatchWindow win;
    win.row = std::clamp(best_y - kPatchSize / 2 + 1, 0, h - kPatchSize);
    win.col = std::clamp(best_x - kPatchSize / 2 + 1, 0, w - kPatchSize);
    bool clash = false;
    for (const auto& c : chosen)
      if (windows_overlap(win, c)) clash = true;
    if (clash) {
      suppressed(best_y, best_x) = 1;  // peak sits inside an existing window's reach
      continue;
    }
    double mass = 0.0;
    for (int y = win.row; y < win.row + kPatchSize; ++y)
      for (int x = win.col; x < win.col + kPatchSize; ++x) {
        mass += double(deviation(y, x));
        suppressed(y, x) = 1;
      }
    win.score = mass;
    chosen.push_back(win);
  }
  return chosen;
}

template <class S>
Plane<S> extract_patch(const Plane<S>& src, const PatchWindow& win) {
  if (win.row < 0 || win.col < 0 || win.row + kPatchSize > src.rows() ||
      win.col + kPatchSize > src.cols())
    throw std::invalid_argument("extract_patch: window outside image");
  return src.block(win.row, win.col, kPatchSize, kPatchSize);
}

template <class S>
Image<S> extract_patch(const Image<S>& src, const PatchWindow& win) {
  return Image<S>{extract_patch(src.r, win), extract_patch(src.g, win), extract_patch(src.b, win)};
}

// Replaces each window of the base matte with its refined patch. Windows must
// be pairwise disjoint; with no windows the base is returned unchanged.
template <class S>
Plane<S> merge_patches(const Plane<S>& base, const std::vector<PatchWindow>& windows,
                       const std::vector<Plane<S>>& patches) {
  if (windows.size() != patches.size())
    throw std::invalid_argument("merge_patches: window/patch count mismatch");
  for (size_t i = 0; i < windows.size(); ++i)
    for (size_t j = i + 1; j < windows.size(); ++j)
      if (windows_overlap(windows[i], windows[j]))
        throw invariant_error("merge_patches: overlapping windows");
  Plane<S> out = base;
  for (size_t i = 0; i < windows.size(); ++i) {
    const auto& win = windows[i];
    if (win.row < 0 || win.col < 0 || win.row + kPatchSize > base.rows() ||
        win.col + kPatchSize > base.cols())
      throw std::invalid_argument("merge_patches: window outside image");
    if (patches[i].rows() != kPatchSize || patches[i].cols() != kPatchSize)
      throw std::invalid_argument("merge_patches: patch is not patch-sized");
    out.block(win.row, win.col, kPatchSize, kPatchSize) = patches[i];
  }
  return out;
}

}  // namespace vmfm::refinement
