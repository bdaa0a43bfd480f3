// Acceptance suite: every release criterion, one pass/fail line each.
//
// The heavyweight stage is the 200-step smoke training (criterion 4), which
// also supplies the pretrained encoder for the transfer check (criterion 5).
// Everything runs single-threaded and is bit-reproducible under fixed seeds.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>
#include <vector>

#include "angio/autodiff.hpp"
#include "angio/data.hpp"
#include "angio/downstream.hpp"
#include "angio/error.hpp"
#include "angio/mask.hpp"
#include "angio/metrics.hpp"
#include "angio/model.hpp"
#include "angio/objectives.hpp"
#include "angio/training.hpp"

using namespace angio;
using nn::Tape;
using nn::Tensor;
using nn::Var;

namespace {

struct Criterion {
  int number;
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

std::vector<Criterion> g_results;

void run_criterion(int number, const std::string& name,
                   const std::function<std::string()>& body) {
  Criterion c;
  c.number = number;
  c.name = name;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    c.detail = body();
    c.passed = true;
  } catch (const std::exception& e) {
    c.detail = e.what();
    c.passed = false;
  }
  c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  g_results.push_back(c);
  std::printf("[%s] criterion %d: %s — %s (%.1fs)\n", c.passed ? "PASS" : "FAIL", number,
              name.c_str(), c.detail.c_str(), c.seconds);
  std::fflush(stdout);
}

void check(bool cond, const std::string& msg) {
  if (!cond) throw std::runtime_error(msg);
}

Tensor random_toy(std::vector<int> shape, std::uint64_t seed, bool unit = false) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  for (auto& v : t.v) v = unit ? rng.uniform() : rng.normal();
  return t;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

// ----------------------------------------------------------- shared state

// pinned smoke-training recipe (criterion 4), reused by criterion 5
GeneratorConfig smoke_generator_config() {
  GeneratorConfig g;
  g.resolution = 64;
  g.base_channels = 16;
  g.downsample_stages = 3;
  g.residual_blocks = 2;
  return g;
}

TrainConfig smoke_train_config() {
  TrainConfig t;
  t.epochs = 100;  // 100 passes x 2 batch-2 steps = the pinned 200 steps
  t.batch_size = 2;
  t.seed = 42;
  t.resolution = 64;
  t.generator_lr = 3e-4;
  t.discriminator_lr = 3e-4;
  t.patch.patches_per_image = 48;
  t.patch.l1_weight = 2.0;
  return t;
}

std::vector<TrainExample> smoke_examples() {
  std::vector<TrainExample> ex;
  for (int i = 0; i < 4; ++i) {
    PhantomSpec s;
    s.resolution = 64;
    s.seed = 1000 + static_cast<std::uint64_t>(i);
    ex.push_back(make_train_example(generate_phantom(s), ThresholdPolicy{}));
  }
  return ex;
}

struct SmokeRun {
  Checkpoint checkpoint;
  std::vector<double> totals;
};

SmokeRun run_smoke_training() {
  const TrainConfig cfg = smoke_train_config();
  DiscriminatorConfig dc;
  dc.scales = 2;
  dc.base_channels = 16;
  Trainer tr(smoke_generator_config(), dc, cfg);
  tr.init();
  tr.set_total_steps(200);
  auto ex = smoke_examples();
  SmokeRun run;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order = {0, 1, 2, 3};
    Rng rng(derive_seed(cfg.seed, fnv1a("epoch-order"), static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    for (int b = 0; b < 2; ++b) {
      const LossReport r =
          tr.teacher_forced_step({&ex[order[static_cast<std::size_t>(2 * b)]],
                                  &ex[order[static_cast<std::size_t>(2 * b + 1)]]});
      run.totals.push_back(r.total);
    }
  }
  run.checkpoint = tr.to_checkpoint();
  return run;
}

Checkpoint g_smoke_checkpoint;  // filled by criterion 4, used by criterion 5

}  // namespace

// --------------------------------------------------------------- criteria

// 1. analytic vs central finite-difference gradients on 4x4 toys
std::string criterion1() {
  Tensor mask = random_toy({4, 4}, 10, true);
  for (auto& v : mask.v) v = v > 0.5 ? 1.0 : 0.0;

  const double att = nn::gradcheck(
      [&](Tape& t, const std::vector<Var>& v) { return attention_loss(t, v[0], mask); },
      {random_toy({4, 4}, 11, true)});

  PatchSamplingConfig pcfg;
  pcfg.patches_per_image = 8;
  const double nce = nn::gradcheck(
      [&](Tape& t, const std::vector<Var>& v) {
        return masked_patchnce_loss(t, {v[0]}, {v[1]}, mask, pcfg, 13);
      },
      {random_toy({3, 4, 4}, 12), random_toy({3, 4, 4}, 13)});

  const double gan_d = nn::gradcheck(
      [&](Tape& t, const std::vector<Var>& v) {
        return gan_loss(t, {v[0]}, {v[1]}, mask, GanRole::discriminator);
      },
      {random_toy({4, 4}, 14), random_toy({4, 4}, 15)});
  const double gan_g = nn::gradcheck(
      [&](Tape& t, const std::vector<Var>& v) {
        return gan_loss(t, {}, {v[0]}, mask, GanRole::generator);
      },
      {random_toy({4, 4}, 16)});

  const double worst = std::max({att, nce, gan_d, gan_g});
  check(worst < 1e-4, "relative error " + fmt(worst) + " >= 1e-4");
  return "max relative error " + fmt(worst);
}

// 2. metric oracles: analytic FVD Gaussians, AUROC vs brute force, SSIM/PSNR/Dice
std::string criterion2() {
  // Frechet closed forms
  Tensor mu0({1}, {0.0}), mu1({1}, {1.0});
  Tensor s1({1, 1}, {1.0}), s4({1, 1}, {4.0});
  const double f1 = metrics::frechet_distance(mu0, s1, mu1, s1);
  const double f2 = metrics::frechet_distance(mu0, s1, mu0, s4);
  check(std::abs(f1 - 1.0) <= 1e-6, "N(0,1) vs N(1,1) gave " + fmt(f1));
  check(std::abs(f2 - 1.0) <= 1e-6, "N(0,1) vs N(0,4) gave " + fmt(f2));

  // AUROC rank statistic equals the pairwise fraction on sets up to 12 items
  Rng rng(77);
  int compared = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const int n = 2 + static_cast<int>(rng.below(11));
    std::vector<int> labels;
    std::vector<double> scores;
    int pos = 0;
    for (int i = 0; i < n; ++i) {
      labels.push_back(static_cast<int>(rng.below(2)));
      pos += labels.back();
      scores.push_back(static_cast<double>(rng.below(6)) / 5.0);
    }
    if (pos == 0 || pos == n) continue;
    double wins = 0.0, total = 0.0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        if (labels[i] != 1 || labels[j] != 0) continue;
        total += 1.0;
        if (scores[i] > scores[j]) wins += 1.0;
        if (scores[i] == scores[j]) wins += 0.5;
      }
    const double fast = metrics::auroc(labels, scores);
    check(std::abs(fast - wins / total) < 1e-12,
          "rank AUROC diverged from the pairwise oracle");
    ++compared;
  }

  // hand values from the module examples
  const Tensor zeros({4, 4});
  const Tensor half = Tensor::full({4, 4}, 0.5);
  check(std::abs(metrics::psnr(zeros, half) - 10.0 * std::log10(4.0)) < 1e-9, "psnr hand value");
  check(std::isinf(metrics::psnr(half, half)), "psnr identity sentinel");
  const Tensor c3 = Tensor::full({16, 16}, 0.3);
  const Tensor c7 = Tensor::full({16, 16}, 0.7);
  const double c1c = 1e-4;
  check(std::abs(metrics::ssim(c3, c7) - (0.42 + c1c) / (0.58 + c1c)) < 1e-9,
        "ssim constants value");
  const Tensor img = random_toy({16, 16}, 20, true);
  check(std::abs(metrics::ssim(img, img) - 1.0) < 1e-9, "ssim identity");
  Tensor d1({4, 4}), d2({4, 4});
  for (int i = 0; i < 4; ++i) d1.v[static_cast<std::size_t>(i)] = 1.0;
  for (int i = 2; i < 6; ++i) d2.v[static_cast<std::size_t>(i)] = 1.0;
  check(std::abs(metrics::dice(d1, d2) - 0.5) < 1e-12, "dice overlap value");
  check(std::abs(metrics::dice(d1, d1) - 1.0) < 1e-12, "dice identity");

  return fmt(static_cast<double>(compared)) + " AUROC oracle sets, closed forms exact";
}

// 3. knowledge-mask recovery of single leakage lesions
std::string criterion3() {
  std::vector<double> ious;
  for (int i = 0; i < 20; ++i) {
    PhantomSpec spec;
    spec.resolution = 64;
    spec.lesion_count = 1;
    spec.leakage_mix = 1.0;
    spec.seed = 9000 + static_cast<std::uint64_t>(i);
    const PairedSample s = generate_phantom(spec);
    check(s.lesion_truth && s.lesion_truth->sum() > 0.0, "phantom lost its lesion");
    const KnowledgeMask m = compute_mask(s.target);  // default policy
    double inter = 0.0, uni = 0.0;
    for (std::size_t px = 0; px < m.map.v.size(); ++px) {
      const bool a = m.map.v[px] >= 0.5, b = s.lesion_truth->v[px] >= 0.5;
      if (a && b) inter += 1.0;
      if (a || b) uni += 1.0;
    }
    ious.push_back(inter / uni);
  }
  std::sort(ious.begin(), ious.end());
  const double median = 0.5 * (ious[9] + ious[10]);
  check(median >= 0.5, "median IoU " + fmt(median) + " < 0.5");
  return "median IoU " + fmt(median) + " over 20 phantoms";
}

// 4. end-to-end smoke training: loss halves, rollout clean, bit-identical rerun
std::string criterion4() {
  const SmokeRun first = run_smoke_training();
  const double mean10 =
      std::accumulate(first.totals.begin(), first.totals.begin() + 10, 0.0) / 10.0;
  const double final_total = first.totals.back();
  check(final_total < 0.5 * mean10,
        "final " + fmt(final_total) + " not below half of first-10 mean " + fmt(mean10));

  // free-running rollout: exactly 12 in-range frames
  Generator gen(first.checkpoint.gen);
  nn::ParamStore params;
  for (const auto& [name, tensor] : first.checkpoint.params.t)
    if (name.rfind("gen.", 0) == 0) params.create(name, tensor);
  const auto ex = smoke_examples();
  auto [video, atts] = gen.rollout(params, ex[0].sample.source.pixels, 12);
  check(video.frame_count() == 12, "rollout frame count");
  for (const auto& f : video.frames)
    check(f.min() >= 0.0 && f.max() <= 1.0 && f.all_finite(), "rollout frame out of range");

  // repeat with the same seed: checkpoints must match byte for byte
  const SmokeRun second = run_smoke_training();
  check(first.checkpoint.params.fingerprint() == second.checkpoint.params.fingerprint(),
        "rerun parameters differ");
  check(first.totals == second.totals, "rerun loss stream differs");

  g_smoke_checkpoint = first.checkpoint;
  return "loss " + fmt(mean10) + " -> " + fmt(final_total) + " (ratio " +
         fmt(final_total / mean10) + "), rerun bit-identical";
}

// 5. directional transfer: smoke-trained encoder beats random init at 1-shot
std::string criterion5() {
  check(!g_smoke_checkpoint.params.t.empty(), "smoke checkpoint unavailable (criterion 4)");
  const EncoderHandle trained = encoder_from_checkpoint(g_smoke_checkpoint);
  const EncoderHandle random = random_encoder(smoke_generator_config(), 777);

  std::vector<SegSample> all;
  std::vector<ImageInput> inputs;
  for (int i = 0; i < 32; ++i) {
    PhantomSpec s;
    s.resolution = 64;
    s.seed = 5000 + static_cast<std::uint64_t>(i);
    const PairedSample p = generate_phantom(s);
    all.push_back({p.source.pixels, derive_vessel_mask(p), p.patient_id});
    inputs.push_back({p.source.pixels, p.patient_id, p.patient_id});
  }
  // one fixed patient split; the five runs resample the 1-shot support
  const auto splits = split_by_patient(inputs, 0.55, 0.15, 0);
  std::vector<SegSample> pool, test;
  for (auto i : splits[0]) pool.push_back(all[i]);
  for (auto i : splits[1]) pool.push_back(all[i]);
  for (auto i : splits[2]) test.push_back(all[i]);

  SegmentationConfig sc;
  sc.shots = 1;
  sc.epochs = 80;
  sc.resolution = 64;
  sc.lr = 1e-3;
  sc.encoder_lr_scale = 0.1;
  std::vector<double> dice_trained, dice_random;
  for (std::uint64_t seed : {1, 2, 3, 4, 5}) {
    dice_trained.push_back(finetune_segmentation(trained, sc, pool, test, seed).dice);
    dice_random.push_back(finetune_segmentation(random, sc, pool, test, seed).dice);
  }
  const auto s = metrics::summarize(dice_trained, &dice_random);
  double mean_random = 0.0;
  for (double d : dice_random) mean_random += d / 5.0;
  check(s.mean > mean_random, "trained mean " + fmt(s.mean) + " does not beat random " +
                                  fmt(mean_random));
  check(s.p_value.has_value() && *s.p_value < 0.05,
        "paired t-test p " + fmt(s.p_value.value_or(1.0)) + " >= 0.05");
  return "dice " + fmt(s.mean) + " vs " + fmt(mean_random) + ", p " + fmt(*s.p_value);
}

// 6. probe harness contract on separable toys
std::string criterion6() {
  const EncoderHandle enc = random_encoder(smoke_generator_config(), 5);
  const std::uint64_t fp = enc.fingerprint();

  auto clusters = [](int per_class, double spread, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Embedding> out;
    std::vector<int> labels;
    for (int c = 0; c < 2; ++c)
      for (int i = 0; i < per_class; ++i) {
        Embedding e;
        e.vector.assign(8, 0.0);
        e.vector[static_cast<std::size_t>(c)] = 4.0;
        for (auto& v : e.vector) v += rng.normal(0.0, spread);
        e.input_id = std::to_string(c) + "_" + std::to_string(i);
        e.patient_id = e.input_id;
        out.push_back(std::move(e));
        labels.push_back(c);
      }
    return std::make_pair(out, labels);
  };
  const auto [pool, pool_labels] = clusters(40, 0.05, 1);
  const auto [test, test_labels] = clusters(12, 0.05, 2);

  for (int shots : {1, 2, 4, 8, 16}) {
    ProbeConfig cfg;
    cfg.support_per_class = shots;
    cfg.epochs = 30;
    const auto scores = few_shot_train(pool, pool_labels, test, test_labels, 2, cfg);
    check(scores.auroc_per_seed.size() == 5, "expected 5 per-seed records");
    for (double v : scores.auroc_per_seed)
      check(v == 1.0, "AUROC " + fmt(v) + " != 1.0 at shots " + std::to_string(shots));
    const auto summary = metrics::summarize(scores.auroc_per_seed);
    check(summary.ci95_high - summary.ci95_low == 0.0, "CI width nonzero");
  }

  // frozen-path guarantee across zero-shot, few-shot and retrieval
  (void)zero_shot_classify(test, pool, pool_labels, 2);
  (void)retrieve(test, pool);
  check(enc.fingerprint() == fp, "encoder parameters changed");
  return "AUROC 1.0 across shots {1,2,4,8,16} x 5 seeds, CI width 0, encoder frozen";
}

// 7. retrieval contract
std::string criterion7() {
  std::vector<Embedding> gallery, queries;
  for (int p = 0; p < 4; ++p) {
    Embedding q, g;
    q.vector.assign(8, 0.0);
    g.vector.assign(8, 0.0);
    q.vector[static_cast<std::size_t>(p)] = 1.0;
    g.vector[static_cast<std::size_t>(p)] = 0.99;
    g.vector[7] = 0.01;
    q.patient_id = g.patient_id = "p" + std::to_string(p);
    q.input_id = "q" + std::to_string(p);
    g.input_id = "g" + std::to_string(p);
    queries.push_back(q);
    gallery.push_back(g);
  }
  const RetrievalResult r = retrieve(queries, gallery);
  for (int k : {1, 5, 10})
    check(r.report.recall_at.at(k) == 1.0, "Recall@" + std::to_string(k) + " != 1");
  check(r.report.mean_recall == 1.0, "mean recall != 1");

  Rng rng(31);
  int galleries = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 12 + static_cast<int>(rng.below(24));
    std::vector<std::string> gp;
    for (int i = 0; i < n; ++i) gp.push_back("p" + std::to_string(rng.below(7)));
    std::vector<std::vector<int>> ranked(4);
    std::vector<std::string> qp;
    for (int q = 0; q < 4; ++q) {
      qp.push_back("p" + std::to_string(rng.below(7)));
      std::vector<int> ids(static_cast<std::size_t>(n));
      std::iota(ids.begin(), ids.end(), 0);
      rng.shuffle(ids);
      ranked[static_cast<std::size_t>(q)] = ids;
    }
    bool any = false;
    for (const auto& q : qp)
      for (const auto& g : gp)
        if (q == g) any = true;
    if (!any) continue;
    const auto rep = metrics::recall_at_k(ranked, qp, gp);
    check(rep.recall_at.at(1) <= rep.recall_at.at(5) + 1e-12 &&
              rep.recall_at.at(5) <= rep.recall_at.at(10) + 1e-12,
          "Recall@K not monotone");
    ++galleries;
  }
  return "perfect gallery exact, monotone over " + std::to_string(galleries) +
         " random galleries";
}

// 8. supervised probe schedule reproduction
std::string criterion8() {
  ProbeConfig cfg;  // default protocol: 50 epochs, 10 warmup, 5e-4 peak, 1e-6 floor
  check(std::abs(probe_lr(cfg, 5) - 2.5e-4) < 1e-9,
        "warmup epoch 5 gave " + fmt(probe_lr(cfg, 5)));
  check(std::abs(probe_lr(cfg, 50) - 1e-6) < 1e-9,
        "final epoch gave " + fmt(probe_lr(cfg, 50)));
  // pointwise reference: linear warmup then cosine annealing
  for (int e = 1; e <= 50; ++e) {
    const double expect =
        e <= 10 ? 5e-4 * e / 10.0
                : 1e-6 + (5e-4 - 1e-6) * 0.5 *
                             (1.0 + std::cos(3.14159265358979323846 * (e - 10) / 40.0));
    check(std::abs(probe_lr(cfg, e) - expect) < 1e-9,
          "epoch " + std::to_string(e) + " off the schedule");
  }
  return "lr(5)=2.5e-4, lr(50)=1e-6, pointwise to 1e-9";
}

// 9. smoothing and sampling algebra over randomized trials
std::string criterion9() {
  Rng rng(47);
  auto scalar_video = [](const std::vector<double>& xs) {
    AngioVideo v;
    for (double x : xs) {
      v.frames.push_back(Tensor({1, 1}, {x}));
      v.phase_tags.push_back(Phase::arterial);
    }
    return v;
  };
  int trials = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    // temporal_smooth linearity on random scalar videos
    const int n = 1 + static_cast<int>(rng.below(9));
    std::vector<double> a, b, mix;
    const double alpha = rng.uniform(-1.0, 2.0);
    for (int i = 0; i < n; ++i) {
      a.push_back(rng.uniform());
      b.push_back(rng.uniform());
      mix.push_back(alpha * a.back() + (1.0 - alpha) * b.back());
    }
    const AngioVideo sa = temporal_smooth(scalar_video(a));
    const AngioVideo sb = temporal_smooth(scalar_video(b));
    const AngioVideo sm = temporal_smooth(scalar_video(mix));
    for (int i = 0; i < n; ++i) {
      const double expect = alpha * sa.frames[static_cast<std::size_t>(i)].v[0] +
                            (1.0 - alpha) * sb.frames[static_cast<std::size_t>(i)].v[0];
      check(std::abs(sm.frames[static_cast<std::size_t>(i)].v[0] - expect) < 1e-12,
            "smoothing not linear");
    }
    // constant fixed point
    const AngioVideo sc = temporal_smooth(scalar_video(std::vector<double>(
        static_cast<std::size_t>(n), a[0])));
    for (const auto& f : sc.frames)
      check(std::abs(f.v[0] - a[0]) < 1e-12, "smoothing moved a constant video");

    // sample_phase_frames idempotence on random tagged videos
    AngioVideo v;
    for (int p = 0; p < 3; ++p) {
      const int count = 1 + static_cast<int>(rng.below(8));
      for (int i = 0; i < count; ++i) {
        v.frames.push_back(Tensor({1, 1}, {rng.uniform()}));
        v.phase_tags.push_back(static_cast<Phase>(p));
      }
    }
    const AngioVideo once = sample_phase_frames(v);
    const AngioVideo twice = sample_phase_frames(once);
    check(once.frame_count() == 12 && twice.frame_count() == 12, "sampled count != 12");
    for (int i = 0; i < 12; ++i)
      check(once.frames[static_cast<std::size_t>(i)].v ==
                twice.frames[static_cast<std::size_t>(i)].v,
            "phase sampling not idempotent");
    ++trials;
  }
  return std::to_string(trials) + " randomized trials";
}

int main() {
  run_criterion(1, "loss-gradient suite", criterion1);
  run_criterion(2, "metric oracle suite", criterion2);
  run_criterion(3, "mask recovery", criterion3);
  run_criterion(4, "end-to-end smoke training", criterion4);
  run_criterion(5, "directional transfer check", criterion5);
  run_criterion(6, "probe harness contract", criterion6);
  run_criterion(7, "retrieval contract", criterion7);
  run_criterion(8, "schedule reproduction", criterion8);
  run_criterion(9, "smoothing/sampling algebra", criterion9);

  int failures = 0;
  for (const auto& c : g_results)
    if (!c.passed) ++failures;
  std::printf("%d/%d criteria passed\n", static_cast<int>(g_results.size()) - failures,
              static_cast<int>(g_results.size()));
  return failures == 0 ? 0 : 1;
}
