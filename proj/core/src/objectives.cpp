#include "angio/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "angio/error.hpp"
#include "angio/rng.hpp"

namespace angio {

using nn::Tape;
using nn::Var;

Var attention_loss(Tape& tape, Var attention, const Tensor& mask) {
  const Tensor& a = tape.val(attention);
  require(a.numel() == mask.numel(), "shape",
          "attention_loss: attention " + a.shape_str() + " vs mask " + mask.shape_str());
  Var m = tape.constant(Tensor(a.shape, mask.v));
  return nn::mean_all(nn::square(nn::sub(attention, m)));
}

double attention_loss_value(const Tensor& attention, const Tensor& mask) {
  Tape tape(false);
  return tape.val(attention_loss(tape, tape.constant(attention), mask)).v[0];
}

Tensor patch_weight_grid(const Tensor& mask, int h, int w, double alpha) {
  Tensor down = downsample_mask_area(mask, h, w);
  for (auto& v : down.v) v = 1.0 + alpha * v;
  return down;
}

namespace {

std::vector<int> sample_locations(int hw, int want, Rng& rng) {
  std::vector<int> all(static_cast<std::size_t>(hw));
  std::iota(all.begin(), all.end(), 0);
  const int n = std::min(want, hw);
  // partial Fisher-Yates: first n entries are a uniform sample w/o replacement
  for (int i = 0; i < n; ++i) {
    const int j = i + static_cast<int>(rng.below(static_cast<std::uint64_t>(hw - i)));
    std::swap(all[static_cast<std::size_t>(i)], all[static_cast<std::size_t>(j)]);
  }
  all.resize(static_cast<std::size_t>(n));
  return all;
}

}  // namespace

Var masked_patchnce_loss(Tape& tape, const std::vector<Var>& real_feats,
                         const std::vector<Var>& fake_feats, const Tensor& mask,
                         const PatchSamplingConfig& cfg, std::uint64_t sampling_seed) {
  require(!real_feats.empty() && real_feats.size() == fake_feats.size(), "patchnce",
          "need aligned real/fake feature lists");
  require(cfg.temperature > 0.0, "patchnce", "temperature must be positive");

  Var acc{};
  for (std::size_t layer = 0; layer < real_feats.size(); ++layer) {
    const Tensor& rv = tape.val(real_feats[layer]);
    const Tensor& fv = tape.val(fake_feats[layer]);
    check_same_shape(rv, fv, "masked_patchnce_loss");
    require(rv.ndim() == 3, "shape", "features must be {C,H,W}");
    const int h = rv.dim(1), w = rv.dim(2);

    Rng rng(derive_seed(sampling_seed, static_cast<std::uint64_t>(layer)));
    auto locs = sample_locations(h * w, cfg.patches_per_image, rng);
    require(locs.size() >= 2, "patchnce",
            "fewer than 2 sampled locations: no negatives available");

    Var q = nn::l2_normalize_rows(nn::gather_locations(fake_feats[layer], locs));
    Var k = nn::l2_normalize_rows(nn::gather_locations(real_feats[layer], locs));
    Var sims = nn::matmul_nt(q, k);

    const Tensor wgrid = patch_weight_grid(mask, h, w, cfg.mask_weight_alpha);
    Tensor weights({static_cast<int>(locs.size())});
    for (std::size_t i = 0; i < locs.size(); ++i)
      weights.v[i] = wgrid.v[static_cast<std::size_t>(locs[i])];

    Var term = nn::info_nce(sims, cfg.temperature, tape.constant(std::move(weights)));
    acc = acc.valid() ? nn::add(acc, term) : term;
  }
  return nn::smul(acc, 1.0 / static_cast<double>(real_feats.size()));
}

namespace {

Var gan_scale_term(Tape& tape, Var scores, const Tensor& mask, double target, double alpha) {
  const Tensor& sv = tape.val(scores);
  const int h = sv.ndim() == 3 ? sv.dim(1) : sv.dim(0);
  const int w = sv.ndim() == 3 ? sv.dim(2) : sv.dim(1);
  Tensor wgrid = patch_weight_grid(mask, h, w, alpha);
  Var weights = tape.constant(Tensor(sv.shape, wgrid.v));
  Var diff = sadd(scores, -target);
  return nn::mean_all(nn::mul(weights, nn::square(diff)));
}

}  // namespace

Var gan_loss(Tape& tape, const std::vector<Var>& scores_real, const std::vector<Var>& scores_fake,
             const Tensor& mask, GanRole role) {
  require(!scores_fake.empty(), "gan", "gan_loss needs fake scores");
  if (role == GanRole::discriminator)
    require(scores_real.size() == scores_fake.size(), "gan",
            "discriminator role needs matching real/fake score lists");

  Var acc{};
  for (std::size_t s = 0; s < scores_fake.size(); ++s) {
    Var term{};
    if (role == GanRole::generator) {
      term = gan_scale_term(tape, scores_fake[s], mask, 1.0, 1.0);
    } else {
      Var real_term = gan_scale_term(tape, scores_real[s], mask, 1.0, 1.0);
      Var fake_term = gan_scale_term(tape, scores_fake[s], mask, 0.0, 1.0);
      term = nn::smul(nn::add(real_term, fake_term), 0.5);
    }
    acc = acc.valid() ? nn::add(acc, term) : term;
  }
  return nn::smul(acc, 1.0 / static_cast<double>(scores_fake.size()));
}

double gan_loss_value(const std::vector<Tensor>& scores_real,
                      const std::vector<Tensor>& scores_fake, const Tensor& mask,
                      GanRole role) {
  Tape tape(false);
  std::vector<Var> real, fake;
  for (const auto& t : scores_real) real.push_back(tape.constant(t));
  for (const auto& t : scores_fake) fake.push_back(tape.constant(t));
  return tape.val(gan_loss(tape, real, fake, mask, role)).v[0];
}

Var feature_matching_loss(Tape&, const std::vector<std::vector<Var>>& real_features,
                          const std::vector<std::vector<Var>>& fake_features) {
  require(!real_features.empty() && real_features.size() == fake_features.size(), "gan",
          "feature matching needs aligned per-scale taps");
  Var acc{};
  int terms = 0;
  for (std::size_t s = 0; s < real_features.size(); ++s) {
    require(real_features[s].size() == fake_features[s].size(), "gan",
            "feature matching needs aligned layer taps");
    for (std::size_t l = 0; l < real_features[s].size(); ++l) {
      Var term = nn::mean_all(nn::vabs(nn::sub(fake_features[s][l], real_features[s][l])));
      acc = acc.valid() ? nn::add(acc, term) : term;
      ++terms;
    }
  }
  require(terms > 0, "gan", "feature matching with no taps");
  return nn::smul(acc, 1.0 / terms);
}

Var masked_l1_loss(Tape& tape, Var pred, const Tensor& target, const Tensor& mask,
                   double alpha) {
  const Tensor& pv = tape.val(pred);
  require(pv.numel() == target.numel(), "shape", "masked_l1_loss: pred/target mismatch");
  require(pv.numel() == mask.numel(), "shape", "masked_l1_loss: pred/mask mismatch");
  Var tgt = tape.constant(Tensor(pv.shape, target.v));
  Tensor wts(pv.shape, mask.v);
  for (auto& v : wts.v) v = 1.0 + alpha * v;
  Var weights = tape.constant(std::move(wts));
  return nn::mean_all(nn::mul(weights, nn::vabs(nn::sub(pred, tgt))));
}

LossReport total_loss(double l_mask, double l_att, double l_gan, const LossWeights& w) {
  require(std::isfinite(l_mask), "loss", "non-finite loss term: l_mask");
  require(std::isfinite(l_att), "loss", "non-finite loss term: l_att");
  require(std::isfinite(l_gan), "loss", "non-finite loss term: l_gan");
  LossReport r;
  r.l_mask = l_mask;
  r.l_att = l_att;
  r.l_gan = l_gan;
  r.total = w.lambda_mask * l_mask + w.lambda_att * l_att + w.lambda_gan * l_gan;
  return r;
}

}  // namespace angio
