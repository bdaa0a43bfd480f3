#include "angio/mask.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "angio/error.hpp"

namespace angio {

double otsu_threshold(const Tensor& img) {
  constexpr int kBins = 256;
  std::array<std::int64_t, kBins> hist{};
  for (double v : img.v) {
    int b = static_cast<int>(std::clamp(v, 0.0, 1.0) * (kBins - 1) + 0.5);
    hist[static_cast<std::size_t>(b)]++;
  }
  const std::int64_t total = static_cast<std::int64_t>(img.v.size());
  int occupied = 0;
  for (auto c : hist)
    if (c > 0) ++occupied;
  if (occupied < 2) return -1.0;  // degenerate: uniform difference image

  double sum_all = 0.0;
  for (int b = 0; b < kBins; ++b) sum_all += static_cast<double>(b) * hist[static_cast<std::size_t>(b)];

  double best_sigma = -1.0;
  int best_bin = 0;
  std::int64_t w0 = 0;
  double sum0 = 0.0;
  for (int b = 0; b < kBins - 1; ++b) {
    w0 += hist[static_cast<std::size_t>(b)];
    sum0 += static_cast<double>(b) * hist[static_cast<std::size_t>(b)];
    if (w0 == 0) continue;
    const std::int64_t w1 = total - w0;
    if (w1 == 0) break;
    const double mu0 = sum0 / w0;
    const double mu1 = (sum_all - sum0) / w1;
    const double sigma = static_cast<double>(w0) * static_cast<double>(w1) * (mu0 - mu1) * (mu0 - mu1);
    if (sigma > best_sigma) {
      best_sigma = sigma;
      best_bin = b;
    }
  }
  // Threshold sits between the best bin and the next.
  return (best_bin + 0.5) / (kBins - 1);
}

Tensor morphological_open(const Tensor& mask, int radius) {
  if (radius <= 0) return mask;
  const int h = mask.dim(0), w = mask.dim(1);
  auto erode_or_dilate = [&](const Tensor& in, bool erode) {
    Tensor out({h, w});
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        bool acc = erode;
        for (int dy = -radius; dy <= radius && (erode ? acc : !acc); ++dy)
          for (int dx = -radius; dx <= radius && (erode ? acc : !acc); ++dx) {
            const int yy = y + dy, xx = x + dx;
            // outside the image counts as background
            const bool on = yy >= 0 && yy < h && xx >= 0 && xx < w &&
                            in.v[static_cast<std::size_t>(yy) * w + xx] >= 0.5;
            if (erode)
              acc = acc && on;
            else
              acc = acc || on;
          }
        out.v[static_cast<std::size_t>(y) * w + x] = acc ? 1.0 : 0.0;
      }
    return out;
  };
  return erode_or_dilate(erode_or_dilate(mask, true), false);
}

KnowledgeMask compute_mask_frames(const Tensor& first, const Tensor& last,
                                  const ThresholdPolicy& policy) {
  check_same_shape(first, last, "compute_mask");
  require(first.ndim() == 2, "mask", "frames must be {H,W}");

  Tensor diff(first.shape);
  for (std::size_t i = 0; i < diff.v.size(); ++i)
    diff.v[i] = std::abs(last.v[i] - first.v[i]);

  double threshold = policy.fixed_value;
  if (policy.mode == ThresholdPolicy::Mode::otsu) {
    const double t = otsu_threshold(diff);
    threshold = t >= 0.0 ? t : policy.fixed_value;
  }

  KnowledgeMask m;
  m.threshold_used = threshold;
  m.map = Tensor(first.shape);
  for (std::size_t i = 0; i < diff.v.size(); ++i)
    m.map.v[i] = diff.v[i] > threshold ? 1.0 : 0.0;
  if (policy.morphological_open_radius > 0)
    m.map = morphological_open(m.map, policy.morphological_open_radius);

  m.coverage = m.map.mean();
  if (m.coverage < policy.min_coverage) {
    // Degenerate lesion-free case: keep the attention target informative by
    // supervising uniformly instead of passing a zero-gradient mask.
    for (auto& v : m.map.v) v = 1.0;
    m.coverage = 1.0;
  }
  return m;
}

KnowledgeMask compute_mask(const AngioVideo& video, const ThresholdPolicy& policy) {
  require(video.frame_count() >= 2, "mask", "video must have at least 2 frames");
  return compute_mask_frames(video.frames.front(), video.frames.back(), policy);
}

Tensor downsample_mask_area(const Tensor& mask, int out_h, int out_w) {
  require(mask.ndim() == 2, "shape", "downsample_mask_area expects {H,W}");
  require(out_h >= 1 && out_w >= 1, "shape", "target grid must be positive");
  const int h = mask.dim(0), w = mask.dim(1);
  if (h == out_h && w == out_w) return mask;
  Tensor out({out_h, out_w});
  for (int oy = 0; oy < out_h; ++oy) {
    const int y0 = oy * h / out_h;
    const int y1 = std::max(y0 + 1, (oy + 1) * h / out_h);
    for (int ox = 0; ox < out_w; ++ox) {
      const int x0 = ox * w / out_w;
      const int x1 = std::max(x0 + 1, (ox + 1) * w / out_w);
      double s = 0.0;
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) s += mask.v[static_cast<std::size_t>(y) * w + x];
      out.v[static_cast<std::size_t>(oy) * out_w + ox] =
          s / (static_cast<double>(y1 - y0) * (x1 - x0));
    }
  }
  return out;
}

}  // namespace angio
