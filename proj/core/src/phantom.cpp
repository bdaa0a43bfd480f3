#include <algorithm>
#include <cmath>
#include <cstdio>
#include <vector>

#include "angio/data.hpp"
#include "angio/error.hpp"
#include "angio/rng.hpp"

namespace angio {

namespace {

constexpr double kPi = 3.14159265358979323846;

struct Segment {
  double x0, y0, x1, y1, width;
  double dist0 = 0.0;  // dye path length from the disc to the segment start
};

// Soft-edged capsule rasterisation accumulated with max(). When an arrival
// buffer is given, each covered pixel also records the earliest dye path
// distance reaching it.
void draw_segment(Tensor& alpha, const Segment& s, Tensor* arrival = nullptr) {
  const int h = alpha.dim(0), w = alpha.dim(1);
  const double r = s.width * 0.5;
  const double feather = 0.8;
  const int x_lo = std::max(0, static_cast<int>(std::floor(std::min(s.x0, s.x1) - r - 2)));
  const int x_hi = std::min(w - 1, static_cast<int>(std::ceil(std::max(s.x0, s.x1) + r + 2)));
  const int y_lo = std::max(0, static_cast<int>(std::floor(std::min(s.y0, s.y1) - r - 2)));
  const int y_hi = std::min(h - 1, static_cast<int>(std::ceil(std::max(s.y0, s.y1) + r + 2)));
  const double dx = s.x1 - s.x0, dy = s.y1 - s.y0;
  const double len2 = dx * dx + dy * dy;
  const double len = std::sqrt(len2);
  for (int y = y_lo; y <= y_hi; ++y)
    for (int x = x_lo; x <= x_hi; ++x) {
      const double px = x - s.x0, py = y - s.y0;
      double t = len2 > 0 ? std::clamp((px * dx + py * dy) / len2, 0.0, 1.0) : 0.0;
      const double ex = px - t * dx, ey = py - t * dy;
      const double d = std::sqrt(ex * ex + ey * ey);
      const double a = std::clamp((r + feather - d) / feather, 0.0, 1.0);
      if (a > 0) {
        const std::size_t idx = static_cast<std::size_t>(y) * w + x;
        alpha.v[idx] = std::max(alpha.v[idx], a);
        if (arrival) {
          const double reach = s.dist0 + t * len;
          if (arrival->v[idx] < 0.0 || reach < arrival->v[idx]) arrival->v[idx] = reach;
        }
      }
    }
}

void grow_tree(std::vector<Segment>& segs, Rng& rng, double x, double y, double angle,
               int depth, int max_depth, double res, double dist0) {
  if (depth >= max_depth) return;
  const double decay = std::pow(0.78, depth);
  const double len = res * 0.22 * decay * (0.8 + 0.4 * rng.uniform());
  const double width = std::max(0.6, res * 0.028 * std::pow(0.76, depth));
  const double x1 = x + len * std::cos(angle);
  const double y1 = y + len * std::sin(angle);
  segs.push_back({x, y, x1, y1, width, dist0});
  const double spread = 0.35 + 0.25 * rng.uniform();
  grow_tree(segs, rng, x1, y1, angle + spread, depth + 1, max_depth, res, dist0 + len);
  grow_tree(segs, rng, x1, y1, angle - spread, depth + 1, max_depth, res, dist0 + len);
}

struct Lesion {
  LesionKind kind;
  double cx, cy, radius;
  double wobble_amp1, wobble_phase1, wobble_amp2, wobble_phase2;

  double boundary(double theta) const {
    return radius * (1.0 + wobble_amp1 * std::sin(3 * theta + wobble_phase1) +
                     wobble_amp2 * std::sin(5 * theta + wobble_phase2));
  }

  // Soft membership at radius scale `scale` in (0,1].
  double alpha_at(int x, int y, double scale) const {
    const double dx = x - cx, dy = y - cy;
    const double d = std::sqrt(dx * dx + dy * dy);
    const double b = boundary(std::atan2(dy, dx)) * scale;
    return std::clamp((b - d) / 1.2 + 0.5, 0.0, 1.0);
  }
};

// Dye transit brightness for the 12-frame schedule: arterial ramp, venous
// saturation, late-phase washout.
std::vector<double> dye_curve(const PhantomSpec& spec) {
  std::vector<double> v(12);
  for (int t = 0; t < 4; ++t)
    v[static_cast<std::size_t>(t)] = 0.18 + (spec.arterial_peak - 0.18) * t / 3.0;
  const double venous_end = spec.venous_peak * 0.94;
  for (int t = 0; t < 4; ++t)
    v[static_cast<std::size_t>(4 + t)] =
        spec.venous_peak + (venous_end - spec.venous_peak) * t / 3.0;
  static const double late_frac[4] = {0.58, 0.34, 0.14, 0.0};
  for (int t = 0; t < 4; ++t)
    v[static_cast<std::size_t>(8 + t)] =
        spec.late_floor + late_frac[t] * (venous_end - spec.late_floor);
  return v;
}

// Leakage pool brightness, strictly increasing over the video.
double leak_intensity(int t) { return 0.05 + 0.85 * std::pow(t / 11.0, 0.8); }
// Leakage pool spread, growing from 60% to full footprint.
double leak_scale(int t) { return 0.6 + 0.4 * t / 11.0; }

}  // namespace

void validate_spec(const PhantomSpec& spec) {
  require(spec.resolution >= 16, "phantom", "resolution must be >= 16");
  require(spec.lesion_count >= 0, "phantom", "lesion_count must be >= 0");
  require(spec.noise_level >= 0.0 && spec.noise_level <= 0.5, "phantom",
          "noise_level must lie in [0, 0.5]");
  require(spec.vessel_branching_depth >= 1, "phantom", "branching depth must be >= 1");
  require(spec.leakage_mix >= 0.0 && spec.leakage_mix <= 1.0, "phantom",
          "leakage_mix must lie in [0, 1]");
  require(spec.arterial_peak < spec.venous_peak, "phantom",
          "dye curve needs arterial peak below venous saturation");
  require(spec.late_floor > 0.0 && spec.late_floor < spec.arterial_peak, "phantom",
          "late_floor must lie below the arterial peak");
}

PairedSample generate_phantom(const PhantomSpec& spec) {
  validate_spec(spec);
  Rng rng(spec.seed);
  const int res = spec.resolution;
  const double cx = res * 0.5, cy = res * 0.5;
  const double fov_r = res * 0.48;

  // Optic disc sits nasally, off-centre.
  const double disc_x = res * (0.28 + 0.06 * rng.uniform());
  const double disc_y = res * (0.42 + 0.16 * rng.uniform());
  const double disc_r = res * (0.065 + 0.02 * rng.uniform());

  // Vessel arcades radiating from the disc. The arrival buffer holds each
  // pixel's dye path length from the disc; the arterial frames show the dye
  // front advancing along it.
  std::vector<Segment> segs;
  const int trunks = 4;
  for (int k = 0; k < trunks; ++k) {
    const double angle = 2.0 * kPi * k / trunks + kPi / trunks + rng.uniform(-0.3, 0.3);
    grow_tree(segs, rng, disc_x, disc_y, angle, 0, spec.vessel_branching_depth, res, 0.0);
  }
  Tensor vessel_alpha({res, res});
  Tensor vessel_arrival = Tensor::full({res, res}, -1.0);
  for (const auto& s : segs) draw_segment(vessel_alpha, s, &vessel_arrival);
  double max_arrival = 1.0;
  for (double a : vessel_arrival.v) max_arrival = std::max(max_arrival, a);
  for (auto& a : vessel_arrival.v)
    if (a >= 0.0) a /= max_arrival;

  // Color-fundus-only distractors: short pigment/choroidal streaks that mimic
  // vessel contrast locally but never carry dye in the angiogram. Telling the
  // two apart is exactly what the cross-modal mapping must learn.
  Tensor streak_alpha({res, res});
  {
    const int n_streaks = 10 + static_cast<int>(rng.below(6));
    for (int k = 0; k < n_streaks; ++k) {
      const double ang = rng.uniform(0.0, 2.0 * kPi);
      const double rad = fov_r * (0.2 + 0.7 * rng.uniform());
      const double sx = cx + rad * std::cos(ang);
      const double sy = cy + rad * std::sin(ang);
      const double dir = rng.uniform(0.0, 2.0 * kPi);
      const double len = res * (0.06 + 0.06 * rng.uniform());
      const double width = std::max(0.6, res * 0.016 * (0.7 + 0.6 * rng.uniform()));
      Segment s{sx, sy, sx + len * std::cos(dir), sy + len * std::sin(dir), width};
      draw_segment(streak_alpha, s);
    }
  }

  // Lesions, placed inside the field and away from the disc, preferring spots
  // with little vessel overlap so leakage pools dominate their own footprint.
  const int n_leak = static_cast<int>(std::lround(spec.lesion_count * spec.leakage_mix));
  std::vector<Lesion> lesions;
  for (int i = 0; i < spec.lesion_count; ++i) {
    Lesion best{};
    double best_overlap = 1e18;
    for (int attempt = 0; attempt < 12; ++attempt) {
      Lesion l;
      l.kind = i < n_leak ? LesionKind::leakage : LesionKind::nonperfusion;
      const double ang = rng.uniform(0.0, 2.0 * kPi);
      const double rad = fov_r * (0.25 + 0.55 * rng.uniform());
      l.cx = cx + rad * std::cos(ang);
      l.cy = cy + rad * std::sin(ang);
      l.radius = res * (0.07 + 0.06 * rng.uniform());
      l.wobble_amp1 = 0.12 + 0.1 * rng.uniform();
      l.wobble_phase1 = rng.uniform(0.0, 2.0 * kPi);
      l.wobble_amp2 = 0.05 + 0.08 * rng.uniform();
      l.wobble_phase2 = rng.uniform(0.0, 2.0 * kPi);
      const double dd = std::hypot(l.cx - disc_x, l.cy - disc_y);
      if (dd < disc_r + l.radius + res * 0.04) continue;
      if (std::hypot(l.cx - cx, l.cy - cy) + l.radius > fov_r * 0.96) continue;
      double overlap = 0.0;
      const int lo_y = std::max(0, static_cast<int>(l.cy - l.radius));
      const int hi_y = std::min(res - 1, static_cast<int>(l.cy + l.radius));
      const int lo_x = std::max(0, static_cast<int>(l.cx - l.radius));
      const int hi_x = std::min(res - 1, static_cast<int>(l.cx + l.radius));
      for (int y = lo_y; y <= hi_y; ++y)
        for (int x = lo_x; x <= hi_x; ++x)
          overlap += vessel_alpha.v[static_cast<std::size_t>(y) * res + x];
      if (overlap < best_overlap) {
        best_overlap = overlap;
        best = l;
      }
    }
    if (best.radius > 0) lesions.push_back(best);
  }

  // Ground-truth lesion footprint (union over kinds, at full spread).
  Tensor lesion_truth({res, res});
  for (const auto& l : lesions)
    for (int y = 0; y < res; ++y)
      for (int x = 0; x < res; ++x)
        if (l.alpha_at(x, y, 1.0) >= 0.5)
          lesion_truth.v[static_cast<std::size_t>(y) * res + x] = 1.0;

  const auto dye = dye_curve(spec);

  // Background glow with a mild central vignette, constant across frames.
  Tensor bg({res, res});
  for (int y = 0; y < res; ++y)
    for (int x = 0; x < res; ++x) {
      const double d = std::hypot(x - cx, y - cy) / fov_r;
      bg.v[static_cast<std::size_t>(y) * res + x] = d <= 1.0 ? 0.10 + 0.05 * (1.0 - d * d) : 0.0;
    }

  PairedSample sample;
  sample.patient_id = "phantom-" + std::to_string(spec.seed);
  sample.lesion_truth = lesion_truth;

  // --- target video -------------------------------------------------------
  static const double timestamps[12] = {8,  13, 18, 23,  30,  55,
                                        80, 105, 130, 180, 240, 300};
  for (int t = 0; t < 12; ++t) {
    Tensor frame = bg;
    const double d = dye[static_cast<std::size_t>(t)];
    // the dye front travels outward along the tree during the arterial
    // phase; from the venous phase on, the full tree is perfused
    const double front = t < 4 ? 0.35 + 0.28 * t : 2.0;
    for (std::size_t i = 0; i < frame.v.size(); ++i) {
      frame.v[i] += 0.02 * d;  // faint haze tracking the dye
      const double arr = vessel_arrival.v[i];
      if (arr >= 0.0) {
        const double fill = std::clamp((front - arr) / 0.12, 0.0, 1.0);
        frame.v[i] = std::max(frame.v[i], vessel_alpha.v[i] * d * fill);
      }
    }
    // Disc is only faintly fluorescent; keep it below vessel brightness.
    for (int y = 0; y < res; ++y)
      for (int x = 0; x < res; ++x) {
        const double dd = std::hypot(x - disc_x, y - disc_y);
        const double a = std::clamp((disc_r - dd) / 1.0 + 0.5, 0.0, 1.0);
        if (a > 0) {
          double& cell = frame.v[static_cast<std::size_t>(y) * res + x];
          cell = std::max(cell, a * 0.3 * d);
        }
      }
    for (const auto& l : lesions) {
      if (l.kind != LesionKind::leakage) continue;
      const double li = leak_intensity(t);
      const double scale = leak_scale(t);
      for (int y = 0; y < res; ++y)
        for (int x = 0; x < res; ++x) {
          const double a = l.alpha_at(x, y, scale);
          if (a > 0) {
            double& cell = frame.v[static_cast<std::size_t>(y) * res + x];
            cell = std::max(cell, a * li);
          }
        }
    }
    // Pixel noise, then the hard constraints: clamping, dark nonperfusion,
    // black outside the field of view.
    for (auto& v : frame.v) v = std::clamp(v + rng.normal(0.0, spec.noise_level), 0.0, 1.0);
    for (const auto& l : lesions) {
      if (l.kind != LesionKind::nonperfusion) continue;
      for (int y = 0; y < res; ++y)
        for (int x = 0; x < res; ++x)
          if (l.alpha_at(x, y, 1.0) >= 0.5) {
            double& cell = frame.v[static_cast<std::size_t>(y) * res + x];
            cell = std::min(cell, 0.08);
          }
    }
    for (int y = 0; y < res; ++y)
      for (int x = 0; x < res; ++x)
        if (std::hypot(x - cx, y - cy) > fov_r)
          frame.v[static_cast<std::size_t>(y) * res + x] = 0.0;

    sample.target.frames.push_back(std::move(frame));
    sample.target.phase_tags.push_back(t < 4 ? Phase::arterial
                                      : t < 8 ? Phase::venous
                                              : Phase::late);
    sample.target.timestamps.push_back(timestamps[t]);
  }

  // --- source fundus photograph -------------------------------------------
  Tensor src({3, res, res});
  const std::size_t hw = static_cast<std::size_t>(res) * res;
  for (int y = 0; y < res; ++y)
    for (int x = 0; x < res; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * res + x;
      const double d = std::hypot(x - cx, y - cy) / fov_r;
      if (d > 1.0) continue;
      const double vign = 0.72 + 0.28 * (1.0 - d * d);
      double r = 0.82 * vign, g = 0.45 * vign, b = 0.16 * vign;

      // vessels read faintly in color fundus, unlike their strong
      // fluorescein signal
      const double va = vessel_alpha.v[i] * 0.45;
      r = r * (1 - va) + 0.55 * va;
      g = g * (1 - va) + 0.22 * va;
      b = b * (1 - va) + 0.10 * va;

      // distractor streaks blend almost like vessels; a small color offset
      // and their disconnected structure are the only cues
      const double sa = streak_alpha.v[i] * 0.42;
      r = r * (1 - sa) + 0.58 * sa;
      g = g * (1 - sa) + 0.26 * sa;
      b = b * (1 - sa) + 0.13 * sa;

      const double dd = std::hypot(x - disc_x, y - disc_y);
      const double da = std::clamp((disc_r - dd) / 1.5 + 0.5, 0.0, 1.0);
      r = r * (1 - da) + 0.97 * da;
      g = g * (1 - da) + 0.88 * da;
      b = b * (1 - da) + 0.62 * da;

      for (const auto& l : lesions) {
        const double a = l.alpha_at(x, y, 1.0);
        if (a <= 0) continue;
        if (l.kind == LesionKind::leakage) {
          r = std::min(1.0, r + 0.10 * a);
          g = std::min(1.0, g + 0.09 * a);
        } else {
          r *= 1.0 - 0.18 * a;
          g *= 1.0 - 0.18 * a;
          b *= 1.0 - 0.10 * a;
        }
      }
      src.v[0 * hw + i] = r;
      src.v[1 * hw + i] = g;
      src.v[2 * hw + i] = b;
    }
  for (auto& v : src.v) v = std::clamp(v, 0.0, 1.0);
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < hw; ++i) {
      double& v = src.v[c * hw + i];
      if (v > 0.0) v = std::clamp(v + rng.normal(0.0, spec.noise_level * 0.5), 0.0, 1.0);
    }

  sample.source.pixels = std::move(src);
  sample.source.patient_id = sample.patient_id;
  sample.source.eye = Eye::right;
  return sample;
}

Tensor derive_vessel_mask(const PairedSample& sample, double threshold) {
  const auto& video = sample.target;
  require(!video.frames.empty(), "phantom", "sample has no target frames");
  Tensor peak({video.height(), video.width()});
  bool any = false;
  for (int t = 0; t < video.frame_count(); ++t) {
    if (video.phase_tags[static_cast<std::size_t>(t)] != Phase::venous) continue;
    any = true;
    const auto& f = video.frames[static_cast<std::size_t>(t)];
    for (std::size_t i = 0; i < peak.v.size(); ++i) peak.v[i] = std::max(peak.v[i], f.v[i]);
  }
  require(any, "phantom", "sample has no venous frames");
  Tensor mask({video.height(), video.width()});
  for (std::size_t i = 0; i < peak.v.size(); ++i) {
    const bool lesioned = sample.lesion_truth && sample.lesion_truth->v[i] >= 0.5;
    mask.v[i] = (!lesioned && peak.v[i] > threshold) ? 1.0 : 0.0;
  }
  return mask;
}

DatasetManifest write_phantom_dataset(const std::filesystem::path& dir, int count,
                                      const PhantomSpec& base,
                                      const std::vector<std::string>& splits,
                                      bool balanced_classes) {
  require(count > 0, "empty_dataset", "empty dataset: phantom count must be positive");
  require(splits.empty() || static_cast<int>(splits.size()) == count, "phantom",
          "split list must match sample count");
  std::filesystem::create_directories(dir);
  DatasetManifest m;
  m.root = dir;
  for (int i = 0; i < count; ++i) {
    PhantomSpec spec = base;
    spec.seed = derive_seed(base.seed, static_cast<std::uint64_t>(i));
    if (balanced_classes && i % 2 == 1) spec.lesion_count = 0;
    PairedSample sample = generate_phantom(spec);
    char name[32];
    std::snprintf(name, sizeof name, "sample_%03d", i);
    const std::string split = splits.empty() ? "train" : splits[static_cast<std::size_t>(i)];
    m.records.push_back(save_sample(dir / name, sample, split));
  }
  save_manifest(dir / "manifest.jsonl", m);
  return m;
}

}  // namespace angio
