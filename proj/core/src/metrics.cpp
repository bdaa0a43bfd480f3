#include "angio/metrics.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "angio/autodiff.hpp"
#include "angio/error.hpp"
#include "angio/image.hpp"
#include "angio/rng.hpp"

namespace angio::metrics {

double psnr(const Tensor& a, const Tensor& b, double max_value) {
  nn::check_same_shape(a, b, "psnr");
  require(max_value > 0.0, "metric", "psnr max_value must be positive");
  double mse = 0.0;
  for (std::size_t i = 0; i < a.v.size(); ++i) {
    const double d = a.v[i] - b.v[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.v.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(max_value * max_value / mse);
}

namespace {

std::vector<double> gaussian_kernel11() {
  std::vector<double> k(11);
  const double sigma = 1.5;
  double sum = 0.0;
  for (int i = 0; i < 11; ++i) {
    const double x = i - 5;
    k[static_cast<std::size_t>(i)] = std::exp(-x * x / (2.0 * sigma * sigma));
    sum += k[static_cast<std::size_t>(i)];
  }
  for (auto& v : k) v /= sum;
  return k;
}

// Separable "valid" Gaussian filter.
Tensor gauss_filter_valid(const Tensor& img, const std::vector<double>& k) {
  const int h = img.dim(0), w = img.dim(1);
  const int kw = static_cast<int>(k.size());
  const int oh = h - kw + 1, ow = w - kw + 1;
  Tensor tmp({h, ow});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int i = 0; i < kw; ++i)
        s += k[static_cast<std::size_t>(i)] * img.v[static_cast<std::size_t>(y) * w + x + i];
      tmp.v[static_cast<std::size_t>(y) * ow + x] = s;
    }
  Tensor out({oh, ow});
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int i = 0; i < kw; ++i)
        s += k[static_cast<std::size_t>(i)] * tmp.v[static_cast<std::size_t>(y + i) * ow + x];
      out.v[static_cast<std::size_t>(y) * ow + x] = s;
    }
  return out;
}

}  // namespace

double ssim(const Tensor& a, const Tensor& b, double dynamic_range) {
  nn::check_same_shape(a, b, "ssim");
  require(a.ndim() == 2, "ssim", "ssim expects grayscale {H,W} frames");
  require(a.dim(0) >= 11 && a.dim(1) >= 11, "ssim", "image smaller than the 11x11 window");
  const double c1 = (0.01 * dynamic_range) * (0.01 * dynamic_range);
  const double c2 = (0.03 * dynamic_range) * (0.03 * dynamic_range);
  static const std::vector<double> kernel = gaussian_kernel11();

  Tensor a2(a.shape), b2(a.shape), ab(a.shape);
  for (std::size_t i = 0; i < a.v.size(); ++i) {
    a2.v[i] = a.v[i] * a.v[i];
    b2.v[i] = b.v[i] * b.v[i];
    ab.v[i] = a.v[i] * b.v[i];
  }
  const Tensor mu_a = gauss_filter_valid(a, kernel);
  const Tensor mu_b = gauss_filter_valid(b, kernel);
  const Tensor m_a2 = gauss_filter_valid(a2, kernel);
  const Tensor m_b2 = gauss_filter_valid(b2, kernel);
  const Tensor m_ab = gauss_filter_valid(ab, kernel);

  double acc = 0.0;
  for (std::size_t i = 0; i < mu_a.v.size(); ++i) {
    const double ma = mu_a.v[i], mb = mu_b.v[i];
    const double va = m_a2.v[i] - ma * ma;
    const double vb = m_b2.v[i] - mb * mb;
    const double cov = m_ab.v[i] - ma * mb;
    acc += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
  }
  return acc / static_cast<double>(mu_a.v.size());
}

// ------------------------------------------------------- perceptual distance

namespace {

struct BackboneParams {
  std::vector<Tensor> weights;  // {O,C,3,3} per layer
  std::vector<Tensor> biases;
};

BackboneParams make_backbone(const PerceptualBackbone& cfg) {
  BackboneParams p;
  Rng rng(derive_seed(cfg.seed, fnv1a("perceptual-backbone")));
  int in = 1;
  int out = cfg.base_channels;
  for (int l = 0; l < cfg.layers; ++l) {
    p.weights.push_back(Tensor::randn({out, in, 3, 3}, rng, std::sqrt(2.0 / (in * 9))));
    p.biases.push_back(Tensor::zeros({out}));
    in = out;
    out *= 2;
  }
  return p;
}

// Per-location channel-unit-normalized feature maps of all layers.
std::vector<Tensor> backbone_features(const Tensor& img, const BackboneParams& p) {
  nn::Tape tape(false);
  nn::Var h = tape.constant(Tensor({1, img.dim(0), img.dim(1)}, img.v));
  std::vector<Tensor> feats;
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    h = nn::leaky_relu(nn::conv2d(h, tape.constant(p.weights[l]), tape.constant(p.biases[l]),
                                  1, 1),
                       0.2);
    Tensor f = tape.val(h);
    const int c = f.dim(0);
    const std::size_t hw = static_cast<std::size_t>(f.dim(1)) * f.dim(2);
    for (std::size_t i = 0; i < hw; ++i) {
      double nrm = 0.0;
      for (int ci = 0; ci < c; ++ci) nrm += f.v[ci * hw + i] * f.v[ci * hw + i];
      nrm = std::sqrt(nrm);
      if (nrm > 1e-12)
        for (int ci = 0; ci < c; ++ci) f.v[ci * hw + i] /= nrm;
    }
    feats.push_back(std::move(f));
    if (l + 1 < p.weights.size() && tape.val(h).dim(1) >= 2 && tape.val(h).dim(2) >= 2 &&
        tape.val(h).dim(1) % 2 == 0 && tape.val(h).dim(2) % 2 == 0)
      h = nn::avg_pool2x(h);
  }
  return feats;
}

}  // namespace

double perceptual_distance(const Tensor& a, const Tensor& b, const PerceptualBackbone& cfg) {
  nn::check_same_shape(a, b, "perceptual_distance");
  require(a.ndim() == 2, "metric", "perceptual_distance expects {H,W} frames");
  const BackboneParams params = make_backbone(cfg);
  const auto fa = backbone_features(a, params);
  const auto fb = backbone_features(b, params);
  require(fa.size() == fb.size(), "metric", "backbone output misaligned");
  double acc = 0.0;
  for (std::size_t l = 0; l < fa.size(); ++l) {
    require(fa[l].same_shape(fb[l]), "metric", "backbone output misaligned");
    double layer = 0.0;
    for (std::size_t i = 0; i < fa[l].v.size(); ++i) {
      const double d = fa[l].v[i] - fb[l].v[i];
      layer += d * d;
    }
    acc += layer / static_cast<double>(fa[l].v.size());
  }
  return acc / static_cast<double>(fa.size());
}

// ---------------------------------------------------------------- FVD

FeatureExtractorHandle default_video_extractor(std::uint64_t seed) {
  FeatureExtractorHandle h;
  h.name = "random-spatiotemporal-v1";
  h.seed = seed;
  constexpr int kWork = 32;   // frames resized to kWork x kWork
  constexpr int kDim = 16;    // output feature length
  h.dim = kDim;

  h.extract = [seed](const AngioVideo& video) {
    require(!video.frames.empty(), "metric", "extractor on empty video");
    // Three temporal summary channels: time mean, mean |temporal diff|,
    // last - first.
    Tensor mean_img({kWork, kWork}), diff_img({kWork, kWork}), span_img({kWork, kWork});
    Tensor prev;
    for (int t = 0; t < video.frame_count(); ++t) {
      Tensor f = resize_bilinear(video.frames[static_cast<std::size_t>(t)], kWork, kWork);
      for (std::size_t i = 0; i < f.v.size(); ++i) mean_img.v[i] += f.v[i];
      if (t > 0)
        for (std::size_t i = 0; i < f.v.size(); ++i)
          diff_img.v[i] += std::abs(f.v[i] - prev.v[i]);
      if (t == 0)
        for (std::size_t i = 0; i < f.v.size(); ++i) span_img.v[i] -= f.v[i];
      if (t == video.frame_count() - 1)
        for (std::size_t i = 0; i < f.v.size(); ++i) span_img.v[i] += f.v[i];
      prev = std::move(f);
    }
    const double n = video.frame_count();
    for (auto& v : mean_img.v) v /= n;
    if (video.frame_count() > 1)
      for (auto& v : diff_img.v) v /= (n - 1);

    // Fixed random conv stack per channel, global-average-pooled.
    Rng rng(derive_seed(seed, fnv1a("fvd-extractor")));
    const Tensor w1 = Tensor::randn({8, 1, 3, 3}, rng, std::sqrt(2.0 / 9.0));
    const Tensor b1 = Tensor::zeros({8});
    const Tensor w2 = Tensor::randn({8, 8, 3, 3}, rng, std::sqrt(2.0 / 72.0));
    const Tensor b2 = Tensor::zeros({8});
    const Tensor proj = Tensor::randn({kDim, 24}, rng, 1.0 / std::sqrt(24.0));

    std::vector<double> pooled;
    for (const Tensor* img : {&mean_img, &diff_img, &span_img}) {
      nn::Tape tape(false);
      nn::Var x = tape.constant(Tensor({1, kWork, kWork}, img->v));
      x = nn::leaky_relu(nn::conv2d(x, tape.constant(w1), tape.constant(b1), 1, 1), 0.2);
      x = nn::avg_pool2x(x);
      x = nn::leaky_relu(nn::conv2d(x, tape.constant(w2), tape.constant(b2), 1, 1), 0.2);
      const Tensor g = tape.val(nn::global_avg_pool(x));
      pooled.insert(pooled.end(), g.v.begin(), g.v.end());
    }
    std::vector<double> out(kDim, 0.0);
    for (int i = 0; i < kDim; ++i)
      for (int j = 0; j < 24; ++j)
        out[static_cast<std::size_t>(i)] +=
            proj.v[static_cast<std::size_t>(i) * 24 + j] * pooled[static_cast<std::size_t>(j)];
    return out;
  };
  return h;
}

GaussianStats fit_gaussian(const std::vector<std::vector<double>>& rows) {
  require(rows.size() >= 2, "metric", "need >= 2 feature rows to fit a Gaussian");
  const int d = static_cast<int>(rows[0].size());
  for (const auto& r : rows)
    require(static_cast<int>(r.size()) == d, "metric", "feature rows of unequal length");
  GaussianStats g;
  g.mu = Tensor({d});
  for (const auto& r : rows)
    for (int i = 0; i < d; ++i) g.mu.v[static_cast<std::size_t>(i)] += r[static_cast<std::size_t>(i)];
  for (auto& v : g.mu.v) v /= static_cast<double>(rows.size());
  g.sigma = Tensor({d, d});
  for (const auto& r : rows)
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j)
        g.sigma.v[static_cast<std::size_t>(i) * d + j] +=
            (r[static_cast<std::size_t>(i)] - g.mu.v[static_cast<std::size_t>(i)]) *
            (r[static_cast<std::size_t>(j)] - g.mu.v[static_cast<std::size_t>(j)]);
  for (auto& v : g.sigma.v) v /= static_cast<double>(rows.size() - 1);
  return g;
}

namespace {

// Trace of (S1 S2)^{1/2} through the symmetric form
// (S1^{1/2} S2 S1^{1/2})^{1/2}; returns false on solver failure.
bool trace_sqrt_product(const Eigen::MatrixXd& s1, const Eigen::MatrixXd& s2, double* out) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es1(s1);
  if (es1.info() != Eigen::Success) return false;
  Eigen::VectorXd ev = es1.eigenvalues();
  for (int i = 0; i < ev.size(); ++i) ev[i] = ev[i] > 0.0 ? std::sqrt(ev[i]) : 0.0;
  const Eigen::MatrixXd root1 =
      es1.eigenvectors() * ev.asDiagonal() * es1.eigenvectors().transpose();
  Eigen::MatrixXd inner = root1 * s2 * root1;
  inner = 0.5 * (inner + inner.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es2(inner);
  if (es2.info() != Eigen::Success) return false;
  double tr = 0.0;
  for (int i = 0; i < es2.eigenvalues().size(); ++i) {
    const double l = es2.eigenvalues()[i];
    tr += l > 0.0 ? std::sqrt(l) : 0.0;
  }
  *out = tr;
  return true;
}

}  // namespace

double frechet_distance(const Tensor& mu1, const Tensor& sigma1, const Tensor& mu2,
                        const Tensor& sigma2, double eps, bool* regularized) {
  require(mu1.ndim() == 1 && mu2.ndim() == 1 && mu1.dim(0) == mu2.dim(0), "metric",
          "frechet_distance mean dimension mismatch");
  const int d = mu1.dim(0);
  require(sigma1.ndim() == 2 && sigma1.dim(0) == d && sigma1.dim(1) == d, "metric",
          "sigma1 must be {D,D}");
  require(sigma2.ndim() == 2 && sigma2.dim(0) == d && sigma2.dim(1) == d, "metric",
          "sigma2 must be {D,D}");
  if (regularized) *regularized = false;

  using CMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                              Eigen::RowMajor>>;
  Eigen::MatrixXd s1 = CMap(sigma1.v.data(), d, d);
  Eigen::MatrixXd s2 = CMap(sigma2.v.data(), d, d);
  s1 = 0.5 * (s1 + s1.transpose());
  s2 = 0.5 * (s2 + s2.transpose());

  double mean_term = 0.0;
  for (int i = 0; i < d; ++i) {
    const double dm = mu1.v[static_cast<std::size_t>(i)] - mu2.v[static_cast<std::size_t>(i)];
    mean_term += dm * dm;
  }

  double tr_sqrt = 0.0;
  if (!trace_sqrt_product(s1, s2, &tr_sqrt)) {
    s1 += eps * Eigen::MatrixXd::Identity(d, d);
    s2 += eps * Eigen::MatrixXd::Identity(d, d);
    require(trace_sqrt_product(s1, s2, &tr_sqrt), "metric",
            "matrix square root failed even after regularization");
    if (regularized) *regularized = true;
  }
  const double val = mean_term + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
  // numerically tiny negatives are exact zeros
  return val < 0.0 && val > -1e-6 ? 0.0 : val;
}

double fvd(const std::vector<AngioVideo>& real, const std::vector<AngioVideo>& fake,
           const FeatureExtractorHandle& extractor) {
  require(real.size() >= 2 && fake.size() >= 2, "metric",
          "fvd needs at least 2 videos per set");
  std::vector<std::vector<double>> fr, ff;
  for (const auto& v : real) fr.push_back(extractor.extract(v));
  for (const auto& v : fake) ff.push_back(extractor.extract(v));
  const GaussianStats g1 = fit_gaussian(fr);
  const GaussianStats g2 = fit_gaussian(ff);
  return frechet_distance(g1.mu, g1.sigma, g2.mu, g2.sigma);
}

VideoQualityReport evaluate_videos(const std::vector<AngioVideo>& real,
                                   const std::vector<AngioVideo>& fake,
                                   const FeatureExtractorHandle& extractor,
                                   const PerceptualBackbone& backbone) {
  require(real.size() == fake.size() && !real.empty(), "metric",
          "evaluate_videos needs paired, nonempty sets");
  VideoQualityReport r;
  for (std::size_t i = 0; i < real.size(); ++i) {
    require(real[i].frame_count() == fake[i].frame_count(), "metric",
            "paired videos must have equal frame counts");
    double s = 0.0, p = 0.0, lp = 0.0;
    for (int t = 0; t < real[i].frame_count(); ++t) {
      const auto& a = real[i].frames[static_cast<std::size_t>(t)];
      const auto& b = fake[i].frames[static_cast<std::size_t>(t)];
      s += ssim(a, b);
      p += psnr(a, b);
      lp += perceptual_distance(a, b, backbone);
    }
    const double n = real[i].frame_count();
    r.ssim += s / n;
    r.psnr += p / n;
    r.perceptual += lp / n;
  }
  const double n = static_cast<double>(real.size());
  r.ssim /= n;
  r.psnr /= n;
  r.perceptual /= n;
  r.fvd = real.size() >= 2 ? fvd(real, fake, extractor)
                           : std::numeric_limits<double>::quiet_NaN();
  return r;
}

// --------------------------------------------------------- rank statistics

namespace {

void check_binary_labels(const std::vector<int>& labels) {
  int pos = 0, neg = 0;
  for (int l : labels) {
    require(l == 0 || l == 1, "metric", "labels must be 0/1");
    (l ? pos : neg)++;
  }
  require(pos > 0, "metric", "degenerate labels: class 1 has no examples");
  require(neg > 0, "metric", "degenerate labels: class 0 has no examples");
}

}  // namespace

double auroc(const std::vector<int>& labels, const std::vector<double>& scores) {
  require(labels.size() == scores.size() && !labels.empty(), "metric",
          "auroc needs aligned labels/scores");
  check_binary_labels(labels);
  const std::size_t n = labels.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // average ranks over ties
  std::vector<double> rank(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
    i = j + 1;
  }
  double rank_sum_pos = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t k = 0; k < n; ++k)
    if (labels[k] == 1) {
      rank_sum_pos += rank[k];
      ++n_pos;
    }
  const std::size_t n_neg = n - n_pos;
  const double u = rank_sum_pos - static_cast<double>(n_pos) * (n_pos + 1) / 2.0;
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double aupr(const std::vector<int>& labels, const std::vector<double>& scores) {
  require(labels.size() == scores.size() && !labels.empty(), "metric",
          "aupr needs aligned labels/scores");
  check_binary_labels(labels);
  const std::size_t n = labels.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double n_pos = 0;
  for (int l : labels) n_pos += l;

  // PR points at distinct thresholds (tied scores enter together).
  std::vector<double> recalls, precisions;
  double tp = 0, fp = 0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) (labels[order[k]] ? tp : fp)++;
    recalls.push_back(tp / n_pos);
    precisions.push_back(tp / (tp + fp));
    i = j + 1;
  }
  // precision envelope: best precision at recall >= r
  std::vector<double> envelope(precisions.size());
  double best = 0.0;
  for (std::size_t k = precisions.size(); k-- > 0;) {
    best = std::max(best, precisions[k]);
    envelope[k] = best;
  }
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t k = 0; k < recalls.size(); ++k) {
    ap += (recalls[k] - prev_recall) * envelope[k];
    prev_recall = recalls[k];
  }
  return ap;
}

namespace {

double macro_impl(const std::vector<int>& labels, const std::vector<std::vector<double>>& scores,
                  int num_classes,
                  double (*binary)(const std::vector<int>&, const std::vector<double>&)) {
  require(labels.size() == scores.size() && !labels.empty(), "metric",
          "macro metric needs aligned labels/scores");
  require(num_classes >= 2, "metric", "macro metric needs >= 2 classes");
  double acc = 0.0;
  for (int c = 0; c < num_classes; ++c) {
    std::vector<int> bin;
    std::vector<double> sc;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      bin.push_back(labels[i] == c ? 1 : 0);
      require(static_cast<int>(scores[i].size()) == num_classes, "metric",
              "per-class score rows must have num_classes entries");
      sc.push_back(scores[i][static_cast<std::size_t>(c)]);
    }
    bool has_pos = false, has_neg = false;
    for (int b : bin) (b ? has_pos : has_neg) = true;
    require(has_pos && has_neg, "metric",
            "macro metric: class " + std::to_string(c) + " lacks positives or negatives");
    acc += binary(bin, sc);
  }
  return acc / num_classes;
}

}  // namespace

double auroc_macro(const std::vector<int>& labels,
                   const std::vector<std::vector<double>>& scores, int num_classes) {
  return macro_impl(labels, scores, num_classes, auroc);
}

double aupr_macro(const std::vector<int>& labels,
                  const std::vector<std::vector<double>>& scores, int num_classes) {
  return macro_impl(labels, scores, num_classes, aupr);
}

double dice(const Tensor& pred, const Tensor& truth) {
  nn::check_same_shape(pred, truth, "dice");
  double inter = 0.0, p = 0.0, t = 0.0;
  for (std::size_t i = 0; i < pred.v.size(); ++i) {
    require(pred.v[i] == 0.0 || pred.v[i] == 1.0, "metric", "dice expects binary prediction");
    require(truth.v[i] == 0.0 || truth.v[i] == 1.0, "metric", "dice expects binary truth");
    p += pred.v[i];
    t += truth.v[i];
    if (pred.v[i] == 1.0 && truth.v[i] == 1.0) inter += 1.0;
  }
  if (p + t == 0.0) return 1.0;  // both empty: perfect agreement
  return 2.0 * inter / (p + t);
}

RetrievalReport recall_at_k(const std::vector<std::vector<int>>& ranked_ids,
                            const std::vector<std::string>& query_patient,
                            const std::vector<std::string>& gallery_patient,
                            const std::vector<int>& ks) {
  require(ranked_ids.size() == query_patient.size(), "metric",
          "one ranking per query required");
  RetrievalReport rep;
  for (int k : ks) rep.recall_at[k] = 0.0;

  for (std::size_t q = 0; q < ranked_ids.size(); ++q) {
    bool has_mate = false;
    for (int id : ranked_ids[q]) {
      require(id >= 0 && static_cast<std::size_t>(id) < gallery_patient.size(), "metric",
              "ranked id out of gallery range");
      if (gallery_patient[static_cast<std::size_t>(id)] == query_patient[q]) has_mate = true;
    }
    if (!has_mate) {
      rep.skipped_queries++;
      continue;
    }
    rep.evaluated_queries++;
    for (int k : ks) {
      const int depth = std::min<int>(k, static_cast<int>(ranked_ids[q].size()));
      bool hit = false;
      for (int r = 0; r < depth && !hit; ++r)
        hit = gallery_patient[static_cast<std::size_t>(ranked_ids[q][static_cast<std::size_t>(r)])] ==
              query_patient[q];
      if (hit) rep.recall_at[k] += 1.0;
    }
  }
  require(rep.evaluated_queries > 0, "metric", "no evaluable retrieval queries");
  double sum = 0.0;
  for (auto& [k, v] : rep.recall_at) {
    v /= rep.evaluated_queries;
    sum += v;
  }
  rep.mean_recall = sum / static_cast<double>(rep.recall_at.size());
  return rep;
}

// ------------------------------------------------------------- statistics

namespace {

// Regularized incomplete beta via the Lentz continued fraction.
double betacf(double a, double b, double x) {
  constexpr int kMaxIter = 200;
  constexpr double kEps = 3e-14;
  constexpr double kFpmin = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kFpmin) d = kFpmin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kFpmin) d = kFpmin;
    c = 1.0 + aa / c;
    if (std::abs(c) < kFpmin) c = kFpmin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kFpmin) d = kFpmin;
    c = 1.0 + aa / c;
    if (std::abs(c) < kFpmin) c = kFpmin;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return h;
}

double betai(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double bt = std::exp(std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                             a * std::log(x) + b * std::log(1.0 - x));
  if (x < (a + 1.0) / (a + b + 2.0)) return bt * betacf(a, b, x) / a;
  return 1.0 - bt * betacf(b, a, 1.0 - x) / b;
}

}  // namespace

double student_t_two_sided_p(double t, int df) {
  require(df >= 1, "metric", "t-test needs df >= 1");
  return betai(df / 2.0, 0.5, df / (df + t * t));
}

StatSummary summarize(const std::vector<double>& runs, const std::vector<double>* comparator) {
  require(runs.size() >= 2, "metric", "summarize needs at least 2 runs");
  StatSummary s;
  s.runs = static_cast<int>(runs.size());
  for (double r : runs) s.mean += r;
  s.mean /= s.runs;
  double var = 0.0;
  for (double r : runs) var += (r - s.mean) * (r - s.mean);
  var /= (s.runs - 1);
  s.se = std::sqrt(var) / std::sqrt(static_cast<double>(s.runs));
  s.ci95_low = s.mean - 1.96 * s.se;
  s.ci95_high = s.mean + 1.96 * s.se;

  if (comparator) {
    require(comparator->size() == runs.size(), "metric",
            "comparator must match run count for a paired t-test");
    std::vector<double> diff(runs.size());
    for (std::size_t i = 0; i < runs.size(); ++i) diff[i] = runs[i] - (*comparator)[i];
    double dm = 0.0;
    for (double d : diff) dm += d;
    dm /= static_cast<double>(diff.size());
    double dv = 0.0;
    for (double d : diff) dv += (d - dm) * (d - dm);
    dv /= static_cast<double>(diff.size() - 1);
    if (dv == 0.0) {
      s.p_degenerate = true;  // zero-variance difference: t undefined
      s.p_value = std::numeric_limits<double>::quiet_NaN();
    } else {
      const double t = dm / std::sqrt(dv / static_cast<double>(diff.size()));
      s.p_value = student_t_two_sided_p(t, static_cast<int>(diff.size()) - 1);
    }
  }
  return s;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  require(a.size() == b.size() && a.size() >= 2, "metric", "spearman needs paired samples");
  auto ranks = [](const std::vector<double>& x) {
    const std::size_t n = x.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t i, std::size_t j) { return x[i] < x[j]; });
    std::vector<double> r(n);
    std::size_t i = 0;
    while (i < n) {
      std::size_t j = i;
      while (j + 1 < n && x[order[j + 1]] == x[order[i]]) ++j;
      const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= static_cast<double>(ra.size());
  mb /= static_cast<double>(rb.size());
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    cov += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  require(va > 0.0 && vb > 0.0, "metric", "spearman undefined for constant input");
  return cov / std::sqrt(va * vb);
}

}  // namespace angio::metrics
