#include <doctest.h>

#include <cmath>
#include <limits>

#include "angio/error.hpp"
#include "angio/metrics.hpp"
#include "helpers.hpp"

using namespace angio;
using namespace angio::metrics;
using testutil::random_unit_tensor;

namespace {

// brute-force pairwise AUROC oracle: wins + half-ties over all pos/neg pairs
double auroc_oracle(const std::vector<int>& labels, const std::vector<double>& scores) {
  double wins = 0.0, total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    for (std::size_t j = 0; j < labels.size(); ++j) {
      if (labels[i] != 1 || labels[j] != 0) continue;
      total += 1.0;
      if (scores[i] > scores[j]) wins += 1.0;
      if (scores[i] == scores[j]) wins += 0.5;
    }
  return wins / total;
}

AngioVideo video_from_seed(std::uint64_t seed, int frames = 4, int res = 16) {
  AngioVideo v;
  Rng rng(seed);
  for (int t = 0; t < frames; ++t) {
    Tensor f({res, res});
    for (auto& x : f.v) x = rng.uniform();
    v.frames.push_back(std::move(f));
    v.phase_tags.push_back(t < frames / 3 + 1 ? Phase::arterial
                           : t < 2 * frames / 3 + 1 ? Phase::venous
                                                    : Phase::late);
  }
  return v;
}

}  // namespace

TEST_CASE("psnr endpoints and arithmetic") {
  const Tensor a = random_unit_tensor({8, 8}, 1);
  CHECK(std::isinf(psnr(a, a)));

  // MSE = max^2 -> 0 dB
  Tensor zeros({4, 4});
  Tensor ones = Tensor::full({4, 4}, 1.0);
  CHECK(psnr(zeros, ones, 1.0) == doctest::Approx(0.0));

  // a all 0, b all 0.5 -> 10*log10(1/0.25)
  Tensor half = Tensor::full({4, 4}, 0.5);
  CHECK(psnr(zeros, half) == doctest::Approx(10.0 * std::log10(4.0)).epsilon(1e-9));
  CHECK(psnr(zeros, half) == doctest::Approx(6.0206).epsilon(1e-4));
}

TEST_CASE("ssim identity, constants oracle, and symmetry") {
  const Tensor a = random_unit_tensor({16, 16}, 2);
  CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));

  // constant images: covariance and variances vanish, luminance term remains
  const Tensor c3 = Tensor::full({16, 16}, 0.3);
  const Tensor c7 = Tensor::full({16, 16}, 0.7);
  const double c1 = 0.01 * 0.01;
  const double oracle = (2 * 0.3 * 0.7 + c1) / (0.3 * 0.3 + 0.7 * 0.7 + c1);
  CHECK(ssim(c3, c7) == doctest::Approx(oracle).epsilon(1e-9));
  CHECK(oracle == doctest::Approx(0.724).epsilon(1e-3));

  const Tensor b = random_unit_tensor({16, 16}, 3);
  CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-12));

  CHECK_THROWS_AS(ssim(Tensor({8, 8}), Tensor({8, 8})), Error);  // below window size
}

TEST_CASE("perceptual distance: identity, symmetry, noise monotonicity") {
  const Tensor a = random_unit_tensor({16, 16}, 4);
  CHECK(perceptual_distance(a, a) == doctest::Approx(0.0));

  const Tensor b = random_unit_tensor({16, 16}, 5);
  CHECK(perceptual_distance(a, b) == doctest::Approx(perceptual_distance(b, a)).epsilon(1e-12));

  // median distance over 20 trials grows with noise amplitude
  std::vector<double> amplitudes = {0.02, 0.08, 0.2};
  std::vector<double> medians;
  for (double amp : amplitudes) {
    std::vector<double> d;
    for (int trial = 0; trial < 20; ++trial) {
      Rng rng(1000 + static_cast<std::uint64_t>(trial));
      Tensor noisy = a;
      for (auto& v : noisy.v) v = std::clamp(v + rng.normal(0.0, amp), 0.0, 1.0);
      d.push_back(perceptual_distance(a, noisy));
    }
    std::sort(d.begin(), d.end());
    medians.push_back(d[10]);
  }
  CHECK(medians[0] < medians[1]);
  CHECK(medians[1] < medians[2]);
}

TEST_CASE("frechet distance analytic Gaussian cases") {
  // N(0,1) vs N(1,1): (0-1)^2 + 1 + 1 - 2 = 1
  Tensor mu0({1}, {0.0}), mu1({1}, {1.0});
  Tensor s1({1, 1}, {1.0});
  CHECK(frechet_distance(mu0, s1, mu1, s1) == doctest::Approx(1.0).epsilon(1e-9));

  // N(0,1) vs N(0,4): 0 + 1 + 4 - 2*2 = 1
  Tensor s4({1, 1}, {4.0});
  CHECK(frechet_distance(mu0, s1, mu0, s4) == doctest::Approx(1.0).epsilon(1e-9));

  // identical stats -> 0; symmetry
  Rng rng(6);
  Tensor mu({3}), sig({3, 3});
  for (auto& v : mu.v) v = rng.normal();
  Tensor a({3, 4});
  for (auto& v : a.v) v = rng.normal();
  // sigma = a a^T / 4 + I (PSD, well-conditioned)
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double s = i == j ? 1.0 : 0.0;
      for (int k = 0; k < 4; ++k)
        s += a.v[static_cast<std::size_t>(i * 4 + k)] * a.v[static_cast<std::size_t>(j * 4 + k)] / 4.0;
      sig.v[static_cast<std::size_t>(i * 3 + j)] = s;
    }
  CHECK(frechet_distance(mu, sig, mu, sig) == doctest::Approx(0.0).epsilon(1e-9));

  Tensor mu2 = mu;
  mu2.v[0] += 0.7;
  CHECK(frechet_distance(mu, sig, mu2, s1.numel() == 9 ? s1 : sig) ==
        doctest::Approx(frechet_distance(mu2, sig, mu, sig)).epsilon(1e-9));
}

TEST_CASE("fvd identity and permutation invariance") {
  std::vector<AngioVideo> xs;
  for (int i = 0; i < 4; ++i) xs.push_back(video_from_seed(100 + static_cast<std::uint64_t>(i)));
  const auto extractor = default_video_extractor();
  CHECK(fvd(xs, xs, extractor) <= 1e-6);

  std::vector<AngioVideo> ys;
  for (int i = 0; i < 4; ++i) ys.push_back(video_from_seed(200 + static_cast<std::uint64_t>(i)));
  const double base = fvd(xs, ys, extractor);
  std::vector<AngioVideo> xs_perm = {xs[2], xs[0], xs[3], xs[1]};
  std::vector<AngioVideo> ys_perm = {ys[3], ys[1], ys[0], ys[2]};
  CHECK(fvd(xs_perm, ys_perm, extractor) == doctest::Approx(base).epsilon(1e-9));
  CHECK(fvd(ys, xs, extractor) == doctest::Approx(base).epsilon(1e-6));
  CHECK(base > 0.0);

  std::vector<AngioVideo> one = {xs[0]};
  CHECK_THROWS_AS(fvd(one, ys, extractor), Error);
}

TEST_CASE("auroc exact values and rank-statistic equivalence") {
  CHECK(auroc({1, 1, 0, 0}, {0.9, 0.8, 0.2, 0.1}) == doctest::Approx(1.0));
  CHECK(auroc({1, 0, 1, 0}, {0.9, 0.8, 0.4, 0.1}) == doctest::Approx(0.75));

  // reversal maps to 1 - AUROC
  const std::vector<int> labels = {1, 0, 1, 0, 1, 0, 0};
  std::vector<double> scores = {0.9, 0.8, 0.7, 0.3, 0.5, 0.45, 0.2};
  std::vector<double> reversed;
  for (double s : scores) reversed.push_back(-s);
  CHECK(auroc(labels, reversed) == doctest::Approx(1.0 - auroc(labels, scores)).epsilon(1e-12));

  // equals the pairwise oracle on random sets up to 12 items, with ties
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 3 + static_cast<int>(rng.below(10));
    std::vector<int> ls;
    std::vector<double> ss;
    int pos = 0;
    for (int i = 0; i < n; ++i) {
      ls.push_back(static_cast<int>(rng.below(2)));
      pos += ls.back();
      ss.push_back(static_cast<double>(rng.below(5)) / 4.0);  // frequent ties
    }
    if (pos == 0 || pos == n) continue;
    CAPTURE(trial);
    CHECK(auroc(ls, ss) == doctest::Approx(auroc_oracle(ls, ss)).epsilon(1e-12));
  }

  CHECK_THROWS_AS(auroc({1, 1}, {0.5, 0.6}), Error);  // single class
}

TEST_CASE("aupr perfect ranking and envelope behavior") {
  CHECK(aupr({1, 1, 0, 0}, {0.9, 0.8, 0.2, 0.1}) == doctest::Approx(1.0));
  // all-positives ranked last: AP is small but positive
  const double low = aupr({0, 0, 1}, {0.9, 0.8, 0.1});
  CHECK(low > 0.0);
  CHECK(low < 0.5);
  // envelope never lets AP exceed 1
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<int> ls = {1, 0};
    std::vector<double> ss = {rng.uniform(), rng.uniform()};
    for (int i = 0; i < 8; ++i) {
      ls.push_back(static_cast<int>(rng.below(2)));
      ss.push_back(rng.uniform());
    }
    const double v = aupr(ls, ss);
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("macro metrics average one-vs-rest classes") {
  const std::vector<int> labels = {0, 0, 1, 1, 2, 2};
  std::vector<std::vector<double>> perfect;
  for (int l : labels) {
    std::vector<double> row(3, 0.1);
    row[static_cast<std::size_t>(l)] = 0.9;
    perfect.push_back(row);
  }
  CHECK(auroc_macro(labels, perfect, 3) == doctest::Approx(1.0));
  CHECK(aupr_macro(labels, perfect, 3) == doctest::Approx(1.0));
  CHECK_THROWS_AS(auroc_macro({0, 0, 1}, {{1, 0}, {1, 0}, {0, 1}}, 3), Error);
}

TEST_CASE("dice exact cases") {
  Tensor a({4, 4});
  for (int i = 0; i < 4; ++i) a.v[static_cast<std::size_t>(i)] = 1.0;
  CHECK(dice(a, a) == doctest::Approx(1.0));

  Tensor b({4, 4});
  for (int i = 4; i < 8; ++i) b.v[static_cast<std::size_t>(i)] = 1.0;
  CHECK(dice(a, b) == doctest::Approx(0.0));

  // |P|=4, |T|=4, overlap 2 -> 0.5
  Tensor c({4, 4});
  for (int i = 2; i < 6; ++i) c.v[static_cast<std::size_t>(i)] = 1.0;
  CHECK(dice(a, c) == doctest::Approx(0.5));

  CHECK(dice(Tensor({4, 4}), Tensor({4, 4})) == doctest::Approx(1.0));  // both empty
  Tensor soft({4, 4});
  soft.v[0] = 0.5;
  CHECK_THROWS_AS(dice(soft, a), Error);
}

TEST_CASE("recall@k on a fixed rank layout") {
  // 3 queries with the same-patient mate at ranks 1, 3, 20
  std::vector<std::string> gallery_patient(25, "other");
  std::vector<std::vector<int>> ranked(3);
  for (int q = 0; q < 3; ++q)
    for (int r = 0; r < 25; ++r) ranked[static_cast<std::size_t>(q)].push_back(r);
  gallery_patient[0] = "q0";   // rank 1 for query 0
  gallery_patient[2] = "q1";   // rank 3 for query 1
  gallery_patient[19] = "q2";  // rank 20 for query 2

  const auto rep = recall_at_k(ranked, {"q0", "q1", "q2"}, gallery_patient);
  CHECK(rep.recall_at.at(1) == doctest::Approx(1.0 / 3.0));
  CHECK(rep.recall_at.at(5) == doctest::Approx(2.0 / 3.0));
  CHECK(rep.recall_at.at(10) == doctest::Approx(2.0 / 3.0));
  CHECK(rep.mean_recall == doctest::Approx((1.0 / 3 + 2.0 / 3 + 2.0 / 3) / 3).epsilon(1e-9));
  CHECK(rep.evaluated_queries == 3);
  CHECK(rep.skipped_queries == 0);
}

TEST_CASE("recall@k monotone in K over random galleries; mateless queries skipped") {
  Rng rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    const int gallery_n = 12 + static_cast<int>(rng.below(20));
    std::vector<std::string> gallery_patient;
    for (int i = 0; i < gallery_n; ++i)
      gallery_patient.push_back("p" + std::to_string(rng.below(6)));
    std::vector<std::vector<int>> ranked(3);
    std::vector<std::string> query_patient;
    for (int q = 0; q < 3; ++q) {
      query_patient.push_back("p" + std::to_string(rng.below(6)));
      std::vector<int> ids(static_cast<std::size_t>(gallery_n));
      std::iota(ids.begin(), ids.end(), 0);
      rng.shuffle(ids);
      ranked[static_cast<std::size_t>(q)] = ids;
    }
    bool any_mate = false;
    for (int q = 0; q < 3; ++q)
      for (const auto& g : gallery_patient)
        if (g == query_patient[static_cast<std::size_t>(q)]) any_mate = true;
    if (!any_mate) continue;
    const auto rep = recall_at_k(ranked, query_patient, gallery_patient);
    CHECK(rep.recall_at.at(1) <= rep.recall_at.at(5) + 1e-12);
    CHECK(rep.recall_at.at(5) <= rep.recall_at.at(10) + 1e-12);
  }

  // a query with no mate is excluded and counted
  const auto rep = recall_at_k({{0, 1}, {0, 1}}, {"a", "zzz"}, {"a", "b"});
  CHECK(rep.evaluated_queries == 1);
  CHECK(rep.skipped_queries == 1);
}

TEST_CASE("summarize: CI arithmetic and degenerate t-test") {
  const StatSummary flat = summarize({0.5, 0.5, 0.5});
  CHECK(flat.mean == doctest::Approx(0.5));
  CHECK(flat.se == doctest::Approx(0.0));
  CHECK(flat.ci95_low == doctest::Approx(0.5));
  CHECK(flat.ci95_high == doctest::Approx(0.5));

  const StatSummary two = summarize({0.4, 0.6});
  CHECK(two.mean == doctest::Approx(0.5));
  CHECK(two.se == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(two.ci95_low == doctest::Approx(0.304).epsilon(1e-9));
  CHECK(two.ci95_high == doctest::Approx(0.696).epsilon(1e-9));

  const std::vector<double> runs = {0.7, 0.7, 0.7};
  const StatSummary degen = summarize(runs, &runs);
  CHECK(degen.p_degenerate);
  CHECK(std::isnan(*degen.p_value));

  CHECK_THROWS_AS(summarize({0.5}), Error);
}

TEST_CASE("paired t-test p-values are sane") {
  // clearly separated paired samples -> small p
  const std::vector<double> a = {0.9, 0.92, 0.88, 0.91, 0.9};
  const std::vector<double> b = {0.5, 0.52, 0.49, 0.51, 0.5};
  const StatSummary s = summarize(a, &b);
  REQUIRE(s.p_value.has_value());
  CHECK(*s.p_value < 0.001);

  // symmetric noise -> p far from 0
  const std::vector<double> c = {0.5, 0.6, 0.4, 0.55, 0.45};
  const std::vector<double> d = {0.6, 0.4, 0.55, 0.45, 0.52};
  const StatSummary s2 = summarize(c, &d);
  CHECK(*s2.p_value > 0.05);

  // two-sided student t sanity: t=0 -> p=1, |t| large -> p ~ 0
  CHECK(student_t_two_sided_p(0.0, 4) == doctest::Approx(1.0));
  CHECK(student_t_two_sided_p(50.0, 4) < 1e-5);
}

TEST_CASE("identity suite over random inputs") {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor a = random_unit_tensor({12, 12}, 5000 + static_cast<std::uint64_t>(trial));
    CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(std::isinf(psnr(a, a)));
    Tensor bin = a;
    for (auto& v : bin.v) v = v > 0.5 ? 1.0 : 0.0;
    CHECK(dice(bin, bin) == doctest::Approx(1.0));
  }
}

TEST_CASE("spearman rank correlation") {
  CHECK(spearman({1, 2, 3, 4}, {10, 20, 30, 40}) == doctest::Approx(1.0));
  CHECK(spearman({1, 2, 3, 4}, {9, 7, 5, 3}) == doctest::Approx(-1.0));
  // monotone but nonlinear is still 1
  CHECK(spearman({1, 2, 3, 4, 5}, {1, 8, 27, 64, 125}) == doctest::Approx(1.0));
}

TEST_CASE("evaluate_videos aggregates paired metrics") {
  std::vector<AngioVideo> real, fake;
  for (int i = 0; i < 3; ++i) {
    real.push_back(video_from_seed(300 + static_cast<std::uint64_t>(i), 4, 16));
    fake.push_back(real.back());
  }
  const auto rep = evaluate_videos(real, fake, default_video_extractor());
  CHECK(rep.ssim == doctest::Approx(1.0));
  CHECK(std::isinf(rep.psnr));
  CHECK(rep.perceptual == doctest::Approx(0.0));
  CHECK(rep.fvd <= 1e-6);
}
