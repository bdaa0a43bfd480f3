#pragma once

#include "angio/data.hpp"
#include "angio/tensor.hpp"

namespace angio {

// Policy for the threshold function applied to the first/last frame
// difference. Otsu adapts per sample; `fixed_value` is both the fixed-mode
// threshold and the fallback when Otsu degenerates.
struct ThresholdPolicy {
  enum class Mode { fixed, otsu };
  Mode mode = Mode::otsu;
  double fixed_value = 0.15;
  double min_coverage = 0.005;  // below this, the mask degrades to all-ones
  int morphological_open_radius = 1;
};

// Binary saliency map of fluorescent change between the first and last
// frames; drives the attention, contrastive and adversarial weightings.
struct KnowledgeMask {
  Tensor map;  // {H,W}, values exactly 0 or 1
  double coverage = 0.0;
  double threshold_used = 0.0;
};

KnowledgeMask compute_mask(const AngioVideo& video, const ThresholdPolicy& policy = {});
KnowledgeMask compute_mask_frames(const Tensor& first, const Tensor& last,
                                  const ThresholdPolicy& policy = {});

// Otsu threshold over a [0,1] image (256 bins); returns negative on a
// degenerate histogram (single occupied bin).
double otsu_threshold(const Tensor& img);

// Binary opening with a square structuring element of the given radius.
Tensor morphological_open(const Tensor& mask, int radius);

// Area-average downsampling of a mask to an arbitrary grid; values land in
// [0,1] and preserve coverage mass. Used to align masks with feature maps and
// patch-score grids.
Tensor downsample_mask_area(const Tensor& mask, int out_h, int out_w);

}  // namespace angio
