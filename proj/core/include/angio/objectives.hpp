#pragma once

#include <cstdint>
#include <vector>

#include "angio/autodiff.hpp"
#include "angio/mask.hpp"

namespace angio {

// Composite objective coefficients, fixed at 1 / 4 / 2.
struct LossWeights {
  double lambda_mask = 1.0;
  double lambda_att = 4.0;
  double lambda_gan = 2.0;
};

struct LossReport {
  double l_att = 0.0;
  double l_mask = 0.0;
  double l_gan = 0.0;
  double total = 0.0;
  long step = 0;
};

struct PatchSamplingConfig {
  int patches_per_image = 64;
  std::vector<int> feature_layers = {1, 2};  // encoder stage indices
  double temperature = 0.07;
  double mask_weight_alpha = 1.0;
  // Optional masked L1 reconstruction folded into L_Mask (an extrapolation
  // beyond the contrastive term; weight relative to PatchNCE).
  double l1_weight = 10.0;
};

enum class GanRole { generator, discriminator };

// Mean squared difference between the attention map and the knowledge mask.
nn::Var attention_loss(nn::Tape& tape, nn::Var attention, const Tensor& mask);
double attention_loss_value(const Tensor& attention, const Tensor& mask);

// InfoNCE over matched patch locations of real/fake feature maps (one entry
// per tapped layer, aligned pairwise), each location's term multiplied by
// w = 1 + alpha * m̄(location). Locations are drawn per layer from
// `sampling_seed`.
nn::Var masked_patchnce_loss(nn::Tape& tape, const std::vector<nn::Var>& real_feats,
                             const std::vector<nn::Var>& fake_feats, const Tensor& mask,
                             const PatchSamplingConfig& cfg, std::uint64_t sampling_seed);

// Least-squares adversarial objective over patch score grids (one per scale),
// each patch term weighted by 1 + m̄(patch), averaged over scales. For the
// generator role `scores_real` may be empty.
nn::Var gan_loss(nn::Tape& tape, const std::vector<nn::Var>& scores_real,
                 const std::vector<nn::Var>& scores_fake, const Tensor& mask, GanRole role);
double gan_loss_value(const std::vector<Tensor>& scores_real,
                      const std::vector<Tensor>& scores_fake, const Tensor& mask,
                      GanRole role);

// Mean absolute difference between discriminator feature taps of real and
// fake inputs, averaged over layers and scales.
nn::Var feature_matching_loss(nn::Tape& tape,
                              const std::vector<std::vector<nn::Var>>& real_features,
                              const std::vector<std::vector<nn::Var>>& fake_features);

// Mask-weighted L1: mean((1 + alpha*m) .* |pred - target|).
nn::Var masked_l1_loss(nn::Tape& tape, nn::Var pred, const Tensor& target, const Tensor& mask,
                       double alpha);

// Weighted total; throws naming the term if any component is non-finite.
LossReport total_loss(double l_mask, double l_att, double l_gan,
                      const LossWeights& w = {});

// The per-location weight grid used by both the contrastive and adversarial
// weightings: 1 + alpha * area-averaged mask.
Tensor patch_weight_grid(const Tensor& mask, int h, int w, double alpha);

}  // namespace angio
