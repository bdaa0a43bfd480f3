#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "angio/model.hpp"
#include "angio/objectives.hpp"

namespace angio {

struct TrainConfig {
  int epochs = 10;
  int batch_size = 1;
  double generator_lr = 2e-4;
  double discriminator_lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  std::uint64_t seed = 0;
  bool smoothing = true;  // triple-frame averaging on evaluation rollouts
  int checkpoint_every = 100;
  int resolution = 64;
  bool lr_linear_decay = true;  // linear decay to zero over the second half
  double feature_matching_weight = 10.0;
  LossWeights weights;
  PatchSamplingConfig patch;
  ThresholdPolicy mask_policy;
};

void validate_config(const TrainConfig& cfg);

// Frame t <- mean of frames (t-1, t, t+1) with edge replication; a linear,
// length-preserving smoother applied after generation.
AngioVideo temporal_smooth(const AngioVideo& video);

class Adam {
 public:
  Adam() = default;
  Adam(double beta1, double beta2, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(nn::ParamStore& params, const nn::GradMap& grads, double lr);

  long updates() const { return t_; }

  void export_state(nn::ParamStore& blobs, std::map<std::string, std::string>& meta,
                    const std::string& prefix) const;
  void import_state(const nn::ParamStore& blobs,
                    const std::map<std::string, std::string>& meta,
                    const std::string& prefix);

 private:
  double beta1_ = 0.5, beta2_ = 0.999, eps_ = 1e-8;
  long t_ = 0;
  std::map<std::string, std::pair<Tensor, Tensor>> moments_;
};

// A training example: a sample whose target is already phase-sampled to 12
// frames, with its knowledge mask precomputed.
struct TrainExample {
  PairedSample sample;
  KnowledgeMask mask;
};

TrainExample make_train_example(PairedSample sample, const ThresholdPolicy& policy);

// Loads a manifest split, resizes to the training resolution, phase-samples
// targets to 12 frames and computes masks.
std::vector<TrainExample> prepare_split(const DatasetManifest& manifest,
                                        const std::string& split, int resolution,
                                        const ThresholdPolicy& policy);

// Owns parameters and optimizer state for the alternating GAN update.
class Trainer {
 public:
  Trainer(GeneratorConfig gen_cfg, DiscriminatorConfig disc_cfg, TrainConfig cfg);

  // Fresh parameter init from the config seed.
  void init();

  // One teacher-forced optimization step over a batch: for every window
  // position the generator predicts from ground-truth context, losses are
  // accumulated, then the discriminator and generator are each updated once.
  LossReport teacher_forced_step(const std::vector<const TrainExample*>& batch);

  // Full loop: epochs over the train split with per-epoch validation rollouts
  // appended to <out_dir>/metrics.jsonl and periodic checkpoints.
  void fit(const DatasetManifest& manifest, const std::filesystem::path& out_dir);

  Checkpoint to_checkpoint() const;
  static Trainer from_checkpoint(const Checkpoint& ckpt, TrainConfig cfg);

  const nn::ParamStore& params() const { return params_; }
  nn::ParamStore& mutable_params() { return params_; }
  const Generator& generator() const { return gen_; }
  const DiscriminatorBank& discriminators() const { return disc_; }
  long step() const { return step_; }
  int epoch() const { return epoch_; }
  // Set before standalone stepping to enable the lr decay schedule.
  void set_total_steps(long n) { total_steps_ = n; }
  double current_lr(double base) const;

 private:
  Generator gen_;
  DiscriminatorBank disc_;
  TrainConfig cfg_;
  nn::ParamStore params_;
  Adam opt_g_, opt_d_;
  long step_ = 0;
  int epoch_ = 0;
  long total_steps_ = 0;
};

}  // namespace angio
