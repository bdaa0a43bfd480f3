#include "angio/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "angio/error.hpp"
#include "angio/metrics.hpp"
#include "angio/rng.hpp"

namespace angio {

using nlohmann::json;
using nn::GradMap;
using nn::ParamStore;
using nn::Tape;
using nn::Var;

void validate_config(const TrainConfig& cfg) {
  require(cfg.epochs >= 1, "config", "epochs must be >= 1");
  require(cfg.batch_size >= 1, "config", "batch_size must be >= 1");
  require(cfg.generator_lr > 0.0 && cfg.discriminator_lr > 0.0, "config",
          "learning rates must be positive");
  require(cfg.checkpoint_every >= 1, "config", "checkpoint_every must be >= 1");
}

AngioVideo temporal_smooth(const AngioVideo& video) {
  require(!video.frames.empty(), "video", "temporal_smooth on empty video");
  AngioVideo out = video;
  const int n = video.frame_count();
  for (int t = 0; t < n; ++t) {
    const Tensor& prev = video.frames[static_cast<std::size_t>(std::max(0, t - 1))];
    const Tensor& cur = video.frames[static_cast<std::size_t>(t)];
    const Tensor& next = video.frames[static_cast<std::size_t>(std::min(n - 1, t + 1))];
    Tensor& dst = out.frames[static_cast<std::size_t>(t)];
    for (std::size_t i = 0; i < dst.v.size(); ++i)
      dst.v[i] = (prev.v[i] + cur.v[i] + next.v[i]) / 3.0;
  }
  return out;
}

void Adam::step(ParamStore& params, const GradMap& grads, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (const auto& [name, g] : grads) {
    Tensor& p = params.get(name);
    auto it = moments_.find(name);
    if (it == moments_.end())
      it = moments_.emplace(name, std::make_pair(Tensor::zeros(p.shape), Tensor::zeros(p.shape)))
               .first;
    Tensor& m = it->second.first;
    Tensor& v = it->second.second;
    for (std::size_t i = 0; i < p.v.size(); ++i) {
      m.v[i] = beta1_ * m.v[i] + (1.0 - beta1_) * g.v[i];
      v.v[i] = beta2_ * v.v[i] + (1.0 - beta2_) * g.v[i] * g.v[i];
      const double mhat = m.v[i] / bc1;
      const double vhat = v.v[i] / bc2;
      p.v[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

void Adam::export_state(ParamStore& blobs, std::map<std::string, std::string>& meta,
                        const std::string& prefix) const {
  meta[prefix + ".t"] = std::to_string(t_);
  for (const auto& [name, mv] : moments_) {
    blobs.create(prefix + ".m." + name, mv.first);
    blobs.create(prefix + ".v." + name, mv.second);
  }
}

void Adam::import_state(const ParamStore& blobs, const std::map<std::string, std::string>& meta,
                        const std::string& prefix) {
  moments_.clear();
  t_ = 0;
  auto it = meta.find(prefix + ".t");
  if (it != meta.end()) t_ = std::stol(it->second);
  const std::string mkey = prefix + ".m.";
  for (const auto& [name, tensor] : blobs.t) {
    if (name.rfind(mkey, 0) != 0) continue;
    const std::string pname = name.substr(mkey.size());
    moments_[pname] = {tensor, blobs.get(prefix + ".v." + pname)};
  }
}

TrainExample make_train_example(PairedSample sample, const ThresholdPolicy& policy) {
  if (sample.target.frame_count() != 12) sample.target = sample_phase_frames(sample.target);
  TrainExample ex;
  ex.mask = compute_mask(sample.target, policy);
  ex.sample = std::move(sample);
  return ex;
}

std::vector<TrainExample> prepare_split(const DatasetManifest& manifest,
                                        const std::string& split, int resolution,
                                        const ThresholdPolicy& policy) {
  std::vector<TrainExample> out;
  for (const ManifestRecord* rec : manifest.split(split))
    out.push_back(make_train_example(load_sample(manifest, *rec, resolution), policy));
  return out;
}

// ------------------------------------------------------------------ trainer

Trainer::Trainer(GeneratorConfig gen_cfg, DiscriminatorConfig disc_cfg, TrainConfig cfg)
    : gen_(gen_cfg), disc_(disc_cfg), cfg_(cfg) {
  validate_config(cfg_);
}

void Trainer::init() {
  require(params_.t.empty(), "training", "trainer already initialized");
  gen_.init_params(params_, cfg_.seed);
  disc_.init_params(params_, cfg_.seed);
  opt_g_ = Adam(cfg_.beta1, cfg_.beta2);
  opt_d_ = Adam(cfg_.beta1, cfg_.beta2);
}

double Trainer::current_lr(double base) const {
  if (!cfg_.lr_linear_decay || total_steps_ <= 0) return base;
  const long half = total_steps_ / 2;
  if (step_ < half) return base;
  const double frac =
      static_cast<double>(step_ - half) / static_cast<double>(std::max<long>(1, total_steps_ - half));
  return base * std::max(0.0, 1.0 - frac);
}

LossReport Trainer::teacher_forced_step(const std::vector<const TrainExample*>& batch) {
  require(!batch.empty(), "training", "empty batch");
  const GeneratorConfig& gc = gen_.config();
  const int ws = gc.window_size;

  GradMap d_grads, g_grads;
  double sum_att = 0.0, sum_mask = 0.0, sum_gan = 0.0;
  long positions = 0;
  for (const TrainExample* ex : batch)
    positions += ex->sample.target.frame_count();
  const double inv_positions = 1.0 / static_cast<double>(positions);

  for (const TrainExample* ex : batch) {
    const PairedSample& s = ex->sample;
    require(s.target.frame_count() == 12, "training",
            "unsampled target: expected 12 frames, got " +
                std::to_string(s.target.frame_count()));
    const Tensor& source = s.source.pixels;
    const Tensor& mask_map = ex->mask.map;
    const int h = s.target.height(), w = s.target.width();

    for (int t = 0; t < s.target.frame_count(); ++t) {
      // Ground-truth sliding window; positions before the start are zeros.
      std::vector<Tensor> window;
      for (int k = t - ws; k < t; ++k)
        window.push_back(k >= 0 ? s.target.frames[static_cast<std::size_t>(k)]
                                : Tensor({h, w}));
      const Tensor& real = s.target.frames[static_cast<std::size_t>(t)];
      const Tensor real3{{1, h, w}, real.v};
      const Tensor mask3{{1, h, w}, mask_map.v};

      // --- generator graph -------------------------------------------------
      Tape tape;
      auto fwd = gen_.forward(tape, params_, source, window, true);

      Var l_att = attention_loss(tape, fwd.attention, mask_map);

      // contrastive features: the stack whose newest slot is the generated
      // frame vs. the same stack with the ground-truth frame
      Var fake_stack = gen_.build_stack_shifted(tape, source, window, fwd.frame);
      std::vector<Tensor> real_window(window.begin() + 1, window.end());
      real_window.push_back(real);
      Var real_stack = gen_.build_stack(tape, source, real_window);
      auto fake_stages = gen_.encoder_stages(tape, params_, fake_stack, true);
      auto real_stages = gen_.encoder_stages(tape, params_, real_stack, true);
      std::vector<Var> fake_sel, real_sel;
      for (int layer : cfg_.patch.feature_layers) {
        require(layer >= 0 && layer < static_cast<int>(fake_stages.size()), "config",
                "patchnce feature layer out of range");
        fake_sel.push_back(fake_stages[static_cast<std::size_t>(layer)]);
        real_sel.push_back(real_stages[static_cast<std::size_t>(layer)]);
      }
      Var l_nce = masked_patchnce_loss(
          tape, real_sel, fake_sel, mask_map, cfg_.patch,
          derive_seed(cfg_.seed, static_cast<std::uint64_t>(step_),
                      static_cast<std::uint64_t>(t), fnv1a(s.patient_id)));
      Var l_mask = l_nce;
      if (cfg_.patch.l1_weight > 0.0) {
        Var l1 = masked_l1_loss(tape, fwd.frame, real, mask_map, cfg_.patch.mask_weight_alpha);
        l_mask = nn::add(l_mask, nn::smul(l1, cfg_.patch.l1_weight));
      }

      // adversarial + feature matching with discriminator parameters frozen
      Var src_c = tape.constant(source);
      Var mask_c = tape.constant(mask3);
      auto d_fake = disc_.forward(tape, params_, src_c, fwd.frame, mask_c, false);
      auto d_real = disc_.forward(tape, params_, src_c, tape.constant(real3), mask_c, false);
      std::vector<Var> fake_scores, real_scores;
      std::vector<std::vector<Var>> fake_feats, real_feats;
      for (auto& so : d_fake) {
        fake_scores.push_back(so.scores);
        fake_feats.push_back(so.features);
      }
      for (auto& so : d_real) {
        real_scores.push_back(so.scores);
        real_feats.push_back(so.features);
      }
      Var l_adv = gan_loss(tape, {}, fake_scores, mask_map, GanRole::generator);
      Var l_fm = feature_matching_loss(tape, real_feats, fake_feats);
      Var l_gan = nn::add(l_adv, nn::smul(l_fm, cfg_.feature_matching_weight));

      sum_att += tape.val(l_att).v[0];
      sum_mask += tape.val(l_mask).v[0];
      sum_gan += tape.val(l_gan).v[0];

      Var total = nn::add(nn::add(nn::smul(l_mask, cfg_.weights.lambda_mask),
                                  nn::smul(l_att, cfg_.weights.lambda_att)),
                          nn::smul(l_gan, cfg_.weights.lambda_gan));
      tape.backward(nn::smul(total, inv_positions));
      tape.accumulate_param_grads(g_grads);

      // --- discriminator graph against the detached fake frame -------------
      Tape dtape;
      Var d_src = dtape.constant(source);
      Var d_mask = dtape.constant(mask3);
      const Tensor& fake_val = tape.val(fwd.frame);
      auto dd_real = disc_.forward(dtape, params_, d_src, dtape.constant(real3), d_mask, true);
      auto dd_fake = disc_.forward(dtape, params_, d_src, dtape.constant(fake_val), d_mask, true);
      std::vector<Var> dr, df;
      for (auto& so : dd_real) dr.push_back(so.scores);
      for (auto& so : dd_fake) df.push_back(so.scores);
      Var d_loss = gan_loss(dtape, dr, df, mask_map, GanRole::discriminator);
      dtape.backward(nn::smul(d_loss, inv_positions));
      dtape.accumulate_param_grads(d_grads);
    }
  }

  // discriminator first, then generator
  opt_d_.step(params_, d_grads, current_lr(cfg_.discriminator_lr));
  opt_g_.step(params_, g_grads, current_lr(cfg_.generator_lr));
  ++step_;

  LossReport report = total_loss(sum_mask * inv_positions, sum_att * inv_positions,
                                 sum_gan * inv_positions, cfg_.weights);
  report.step = step_;
  return report;
}

Checkpoint Trainer::to_checkpoint() const {
  Checkpoint ckpt;
  ckpt.gen = gen_.config();
  ckpt.disc = disc_.config();
  ckpt.params = params_;
  ckpt.meta["kind"] = "train_state";
  ckpt.meta["step"] = std::to_string(step_);
  ckpt.meta["epoch"] = std::to_string(epoch_);
  ckpt.meta["seed"] = std::to_string(cfg_.seed);
  ckpt.meta["total_steps"] = std::to_string(total_steps_);
  opt_g_.export_state(ckpt.params, ckpt.meta, "opt.g");
  opt_d_.export_state(ckpt.params, ckpt.meta, "opt.d");
  return ckpt;
}

Trainer Trainer::from_checkpoint(const Checkpoint& ckpt, TrainConfig cfg) {
  Trainer tr(ckpt.gen, ckpt.disc, cfg);
  for (const auto& [name, tensor] : ckpt.params.t)
    if (name.rfind("gen.", 0) == 0 || name.rfind("disc.", 0) == 0)
      tr.params_.create(name, tensor);
  tr.opt_g_ = Adam(cfg.beta1, cfg.beta2);
  tr.opt_d_ = Adam(cfg.beta1, cfg.beta2);
  tr.opt_g_.import_state(ckpt.params, ckpt.meta, "opt.g");
  tr.opt_d_.import_state(ckpt.params, ckpt.meta, "opt.d");
  if (auto it = ckpt.meta.find("step"); it != ckpt.meta.end()) tr.step_ = std::stol(it->second);
  if (auto it = ckpt.meta.find("epoch"); it != ckpt.meta.end())
    tr.epoch_ = std::stoi(it->second);
  if (auto it = ckpt.meta.find("total_steps"); it != ckpt.meta.end())
    tr.total_steps_ = std::stol(it->second);
  return tr;
}

void Trainer::fit(const DatasetManifest& manifest, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  auto train = prepare_split(manifest, "train", cfg_.resolution, cfg_.mask_policy);
  require(!train.empty(), "training", "train split is empty");
  auto val = prepare_split(manifest, "val", cfg_.resolution, cfg_.mask_policy);

  const long steps_per_epoch =
      (static_cast<long>(train.size()) + cfg_.batch_size - 1) / cfg_.batch_size;
  total_steps_ = steps_per_epoch * cfg_.epochs;

  const auto log_path = out_dir / "metrics.jsonl";
  std::ofstream log(log_path, std::ios::app);
  require(log.good(), "io", "cannot open metrics log: " + log_path.string());

  const auto extractor = metrics::default_video_extractor();

  while (epoch_ < cfg_.epochs) {
    // Deterministic per-epoch order, independent of resume point.
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(derive_seed(cfg_.seed, fnv1a("epoch-order"),
                                static_cast<std::uint64_t>(epoch_)));
    shuffle_rng.shuffle(order);

    long batch_index = step_ - epoch_ * steps_per_epoch;  // mid-epoch resume
    for (; batch_index < steps_per_epoch; ++batch_index) {
      std::vector<const TrainExample*> batch;
      for (int b = 0; b < cfg_.batch_size; ++b) {
        const std::size_t idx = static_cast<std::size_t>(batch_index) * cfg_.batch_size + b;
        if (idx < order.size()) batch.push_back(&train[order[idx]]);
      }
      const LossReport r = teacher_forced_step(batch);
      json rec{{"kind", "train_step"}, {"step", r.step},     {"epoch", epoch_},
               {"l_att", r.l_att},     {"l_mask", r.l_mask}, {"l_gan", r.l_gan},
               {"total", r.total}};
      log << rec.dump() << "\n";
      log.flush();
      if (step_ % cfg_.checkpoint_every == 0) {
        char name[32];
        std::snprintf(name, sizeof name, "ckpt_%06ld.ckpt", step_);
        save_checkpoint(out_dir / name, to_checkpoint());
      }
    }
    ++epoch_;

    if (!val.empty()) {
      std::vector<AngioVideo> gt, pred;
      for (const auto& ex : val) {
        auto [video, atts] = gen_.rollout(params_, ex.sample.source.pixels,
                                          gen_.config().frame_count);
        if (cfg_.smoothing) video = temporal_smooth(video);
        pred.push_back(std::move(video));
        gt.push_back(ex.sample.target);
      }
      json rec{{"kind", "validation"}, {"epoch", epoch_}, {"step", step_}};
      if (gt.size() >= 2) {
        const auto q = metrics::evaluate_videos(gt, pred, extractor);
        rec["fvd"] = q.fvd;
        rec["ssim"] = q.ssim;
        rec["psnr"] = std::isinf(q.psnr) ? json("inf") : json(q.psnr);
        rec["perceptual"] = q.perceptual;
      } else {
        // FVD needs >= 2 videos for covariance; report per-frame metrics only.
        double s = 0.0, p = 0.0, lp = 0.0;
        int n = 0;
        for (std::size_t i = 0; i < gt.size(); ++i)
          for (int t = 0; t < gt[i].frame_count(); ++t) {
            s += metrics::ssim(gt[i].frames[static_cast<std::size_t>(t)],
                               pred[i].frames[static_cast<std::size_t>(t)]);
            const double pp = metrics::psnr(gt[i].frames[static_cast<std::size_t>(t)],
                                            pred[i].frames[static_cast<std::size_t>(t)]);
            if (!std::isinf(pp)) p += pp;
            lp += metrics::perceptual_distance(gt[i].frames[static_cast<std::size_t>(t)],
                                               pred[i].frames[static_cast<std::size_t>(t)]);
            ++n;
          }
        rec["fvd"] = nullptr;
        rec["ssim"] = n ? s / n : 0.0;
        rec["psnr"] = n ? p / n : 0.0;
        rec["perceptual"] = n ? lp / n : 0.0;
      }
      log << rec.dump() << "\n";
      log.flush();
    }
  }
  save_checkpoint(out_dir / "ckpt_final.ckpt", to_checkpoint());
}

}  // namespace angio
