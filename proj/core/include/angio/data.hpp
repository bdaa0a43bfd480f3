#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "angio/tensor.hpp"

namespace angio {

using nn::Tensor;

enum class Phase { arterial, venous, late };

const char* phase_name(Phase p);
Phase phase_from_string(const std::string& s);

enum class Eye { left, right, unknown };

// Source modality: a color fundus photograph, {3,H,W} in [0,1].
struct FundusImage {
  Tensor pixels;
  std::string patient_id;
  Eye eye = Eye::unknown;

  int height() const { return pixels.dim(1); }
  int width() const { return pixels.dim(2); }
};

// Target modality: an ordered angiography frame sequence with phase tags.
// Frames are single-channel {H,W} in [0,1].
struct AngioVideo {
  std::vector<Tensor> frames;
  std::vector<Phase> phase_tags;
  std::vector<double> timestamps;  // empty or one per frame, monotone nonneg

  int frame_count() const { return static_cast<int>(frames.size()); }
  int height() const { return frames.empty() ? 0 : frames[0].dim(0); }
  int width() const { return frames.empty() ? 0 : frames[0].dim(1); }
  std::vector<int> phase_extent() const;  // frame count per phase
};

// Throws when invariants are broken. `sampled` additionally requires exactly
// 12 frames; raw videos need >= 3.
void validate_video(const AngioVideo& v, bool sampled = false);

struct PairedSample {
  FundusImage source;
  AngioVideo target;
  std::string patient_id;
  std::optional<Tensor> lesion_truth;  // phantoms only, {H,W} binary
};

struct ManifestRecord {
  std::string source_path;
  std::vector<std::string> target_frame_paths;
  std::vector<Phase> phase_tags;
  std::string patient_id;
  std::string split;
};

struct DatasetManifest {
  std::vector<ManifestRecord> records;
  std::filesystem::path root;  // paths resolve against this

  std::vector<std::string> split_names() const;
  std::vector<const ManifestRecord*> split(const std::string& name) const;
};

// Loads a JSON-lines manifest and validates every invariant: referenced files
// exist, phase tags are ordered, and no patient leaks across splits.
DatasetManifest load_manifest(const std::filesystem::path& file);
void save_manifest(const std::filesystem::path& file, const DatasetManifest& m);

// Materialises one record from disk, optionally resizing to `resolution`.
PairedSample load_sample(const DatasetManifest& m, const ManifestRecord& rec,
                         int resolution = 0);

// Writes one sample as source.ppm + frames/NNN.pgm + index.json (+
// lesion_truth.pbm when present) under `dir`; returns the manifest record.
ManifestRecord save_sample(const std::filesystem::path& dir, const PairedSample& sample,
                           const std::string& split, int bit_depth = 16);

AngioVideo load_video(const std::filesystem::path& dir);

// Even selection indices over [0, length): round(i*(length-1)/(k-1)),
// repeating entries when the phase is shorter than k.
std::vector<int> evenly_spaced_indices(int length, int k);

// Reduces a tagged video to per_phase frames per phase (default 4+4+4 = 12).
AngioVideo sample_phase_frames(const AngioVideo& video, int per_phase = 4);

// Tags an untagged video from its timestamps with configurable cutoffs
// (seconds): t < arterial_end -> arterial, t < venous_end -> venous, else late.
AngioVideo assign_phases_from_timestamps(const AngioVideo& video,
                                         double arterial_end = 25.0,
                                         double venous_end = 120.0);

// Linear scaling of integer samples by 1/(2^bit_depth - 1).
Tensor normalize_frame(const std::vector<std::uint32_t>& raw, int h, int w, int bit_depth);

// ---- procedural phantom data -------------------------------------------

enum class LesionKind { leakage, nonperfusion };

struct PhantomSpec {
  int resolution = 64;
  int vessel_branching_depth = 5;
  int lesion_count = 1;
  double leakage_mix = 1.0;  // fraction of lesions that leak; rest nonperfusion
  // dye arrival curve: arterial ramps to `arterial_peak`, venous saturates at
  // `venous_peak`, late phase fades toward `late_floor`
  double arterial_peak = 0.8;
  double venous_peak = 0.95;
  double late_floor = 0.25;
  double noise_level = 0.02;  // additive Gaussian sigma before clamping
  std::uint64_t seed = 0;
};

void validate_spec(const PhantomSpec& spec);

// Deterministic paired sample: a color fundus-like source and a 12-frame
// angiography video following the dye-arrival curve, with lesion ground truth.
PairedSample generate_phantom(const PhantomSpec& spec);

// Vessel footprint reconstructed from a sample's venous-phase frames; serves
// as segmentation ground truth for phantom vessel tasks.
Tensor derive_vessel_mask(const PairedSample& sample, double threshold = 0.45);

// Writes `count` phantoms under `dir` with the given base seed and returns the
// manifest (split layout: all "train" unless split_spec maps index -> split).
// With `balanced_classes`, odd-indexed samples are generated lesion-free so
// classification tasks see both classes.
DatasetManifest write_phantom_dataset(const std::filesystem::path& dir, int count,
                                      const PhantomSpec& base,
                                      const std::vector<std::string>& splits = {},
                                      bool balanced_classes = false);

}  // namespace angio
