#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "angio/autodiff.hpp"
#include "angio/data.hpp"
#include "angio/mask.hpp"

namespace angio {

// Generator trunk: encoder (stem + strided downsampling), residual blocks,
// decoder (resize-convolutions), a bounded 1-channel frame head and a
// parallel 1-channel attention head. Input stacks the 3-channel source with
// `window_size` previous grayscale frames.
struct GeneratorConfig {
  int resolution = 128;
  int base_channels = 32;
  int downsample_stages = 3;
  int residual_blocks = 4;
  int window_size = 3;
  int frame_count = 12;

  int input_channels() const { return 3 + window_size; }
  int bottleneck_channels() const { return base_channels << downsample_stages; }

  static GeneratorConfig desk_scale() { return {}; }
  static GeneratorConfig full_scale() {
    GeneratorConfig c;
    c.resolution = 768;
    c.base_channels = 64;
    c.downsample_stages = 3;
    c.residual_blocks = 12;
    return c;
  }
};

// Feature tap from the encoder's deepest stage before the residual trunk,
// plus its pooled vector form.
struct EncoderFeatures {
  Tensor grid;    // {C, H/2^s, W/2^s}
  Tensor pooled;  // {C}, C = base_channels * 2^downsample_stages
};

struct AttentionMap {
  Tensor map;  // {H,W} in [0,1]
};

class Generator {
 public:
  explicit Generator(GeneratorConfig cfg);

  const GeneratorConfig& config() const { return cfg_; }

  // Creates all gen.* parameters (normal init, stddev 0.02; zero biases).
  void init_params(nn::ParamStore& params, std::uint64_t seed) const;

  struct Forward {
    nn::Var frame;                        // {1,H,W}, sigmoid-bounded
    nn::Var attention;                    // {1,H,W}, sigmoid-bounded
    std::vector<nn::Var> encoder_stages;  // stage 0 .. downsample_stages
  };

  // Graph-building forward from an already-stacked input {3+ws, H, W}.
  Forward forward_stack(nn::Tape& tape, const nn::ParamStore& params, nn::Var stack,
                        bool trainable = true) const;

  // Stacks source + window tensors as constants and runs forward_stack.
  Forward forward(nn::Tape& tape, const nn::ParamStore& params, const Tensor& source,
                  const std::vector<Tensor>& window, bool trainable = true) const;

  // Encoder-only pass over a stacked input; returns stage features
  // [stage0, ..., bottleneck]. With `include_trunk` the deepest entry is the
  // residual-trunk output (same shape), where the cross-modal computation
  // lives; without it the bottleneck is the raw downsampling tap.
  std::vector<nn::Var> encoder_stages(nn::Tape& tape, const nn::ParamStore& params, nn::Var stack,
                                      bool trainable = true, bool include_trunk = false) const;

  nn::Var build_stack(nn::Tape& tape, const Tensor& source,
                      const std::vector<Tensor>& window) const;
  // Replaces the most recent window slot with an in-graph frame (used to
  // extract features of generated or ground-truth frames in context).
  nn::Var build_stack_shifted(nn::Tape& tape, const Tensor& source,
                              const std::vector<Tensor>& window, nn::Var newest) const;

  // ---- value-level inference (no-grad tapes) ----

  std::pair<Tensor, Tensor> generate_next_frame(const nn::ParamStore& params, const Tensor& source,
                                                const std::vector<Tensor>& window) const;

  // Free-running autoregressive generation from the source alone; the initial
  // window is all zeros and every later window holds the generator's own
  // previous outputs.
  std::pair<AngioVideo, std::vector<AttentionMap>> rollout(const nn::ParamStore& params,
                                                           const Tensor& source,
                                                           int frame_count = 12) const;

  EncoderFeatures encode(const nn::ParamStore& params, const Tensor& source) const;
  // All encoder stage grids (value level), zeros-filled window.
  std::vector<Tensor> encode_stage_grids(const nn::ParamStore& params, const Tensor& source,
                                         bool include_trunk = false) const;

  // Parameter count of the reusable feature extractor (stem + downsampling
  // stages + residual trunk), by config arithmetic alone.
  static std::int64_t encoder_parameter_count(const GeneratorConfig& cfg);
  static std::int64_t total_parameter_count(const GeneratorConfig& cfg);

 private:
  GeneratorConfig cfg_;
};

// Multi-scale patch discriminators; every scale consumes the channel stack
// (source, frame, mask) average-pooled to its working resolution and emits a
// grid of patch realism scores. Four stride-2 convolutions put the patch
// stride at 2^4.
struct DiscriminatorConfig {
  int scales = 2;
  int base_channels = 16;
  int input_channels = 5;

  static DiscriminatorConfig desk_scale() { return {}; }
  static DiscriminatorConfig full_scale() {
    DiscriminatorConfig c;
    c.scales = 3;
    c.base_channels = 64;
    return c;
  }
};

class DiscriminatorBank {
 public:
  explicit DiscriminatorBank(DiscriminatorConfig cfg);

  const DiscriminatorConfig& config() const { return cfg_; }
  void init_params(nn::ParamStore& params, std::uint64_t seed) const;

  struct ScaleOut {
    nn::Var scores;                 // {1,h,w} patch grid
    std::vector<nn::Var> features;  // intermediate taps for feature matching
  };

  std::vector<ScaleOut> forward(nn::Tape& tape, const nn::ParamStore& params, nn::Var source,
                                nn::Var frame, nn::Var mask, bool trainable = true) const;

  // Value-level scoring; one patch grid per scale.
  std::vector<Tensor> discriminate(const nn::ParamStore& params, const Tensor& source,
                                   const Tensor& frame, const KnowledgeMask& mask) const;

 private:
  DiscriminatorConfig cfg_;
};

// ---- checkpoint container ------------------------------------------------
//
// Single binary archive: magic, format-version integer, a JSON directory
// (configs, metadata, blob shapes) and raw little-endian double blobs keyed
// by module path.

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  GeneratorConfig gen;
  DiscriminatorConfig disc;
  nn::ParamStore params;
  std::map<std::string, std::string> meta;
};

void save_checkpoint(const std::filesystem::path& file, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& file);

}  // namespace angio
