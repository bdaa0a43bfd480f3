#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "angio/data.hpp"

namespace angio::metrics {

using angio::Tensor;

// ---- frame / video quality ----

// 10*log10(max^2/MSE); identical frames report the +infinity sentinel.
double psnr(const Tensor& a, const Tensor& b, double max_value = 1.0);

// Single-scale SSIM, 11x11 Gaussian window sigma 1.5, C1=(0.01L)^2,
// C2=(0.03L)^2, mean over window positions.
double ssim(const Tensor& a, const Tensor& b, double dynamic_range = 1.0);

// LPIPS-style distance against a fixed-seed random convolutional backbone:
// unit-normalized feature maps compared by mean squared difference, averaged
// over layers and locations.
struct PerceptualBackbone {
  std::uint64_t seed = 29;
  int layers = 3;
  int base_channels = 8;
};
double perceptual_distance(const Tensor& a, const Tensor& b,
                           const PerceptualBackbone& backbone = {});

// Pluggable video -> fixed-length feature map for FVD.
struct FeatureExtractorHandle {
  std::string name;
  std::uint64_t seed = 0;
  int dim = 0;
  std::function<std::vector<double>(const AngioVideo&)> extract;
};

// Default desk-scale extractor: a fixed-seed random spatiotemporal
// convolutional stack (no pretrained weights). Absolute FVD values are
// extractor-relative.
FeatureExtractorHandle default_video_extractor(std::uint64_t seed = 17);

struct GaussianStats {
  Tensor mu;     // {D}
  Tensor sigma;  // {D,D}
};
GaussianStats fit_gaussian(const std::vector<std::vector<double>>& rows);

// ||mu1-mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}). A failed matrix square root
// is retried with eps*I regularization; `regularized` reports that.
double frechet_distance(const Tensor& mu1, const Tensor& sigma1, const Tensor& mu2,
                        const Tensor& sigma2, double eps = 1e-6,
                        bool* regularized = nullptr);

double fvd(const std::vector<AngioVideo>& real, const std::vector<AngioVideo>& fake,
           const FeatureExtractorHandle& extractor);

struct VideoQualityReport {
  double fvd = 0.0;
  double ssim = 0.0;
  double psnr = 0.0;
  double perceptual = 0.0;
};

// Paired per-video metrics (frame-averaged, then video-averaged) plus set
// level FVD.
VideoQualityReport evaluate_videos(const std::vector<AngioVideo>& real,
                                   const std::vector<AngioVideo>& fake,
                                   const FeatureExtractorHandle& extractor,
                                   const PerceptualBackbone& backbone = {});

// ---- classification / segmentation / retrieval ----

// Binary AUROC via the rank statistic with tie-averaged ranks.
double auroc(const std::vector<int>& labels, const std::vector<double>& scores);
// Binary AUPR via precision-envelope step integration.
double aupr(const std::vector<int>& labels, const std::vector<double>& scores);
// Macro averages over one-vs-rest classes; `scores[i]` holds per-class scores.
double auroc_macro(const std::vector<int>& labels,
                   const std::vector<std::vector<double>>& scores, int num_classes);
double aupr_macro(const std::vector<int>& labels,
                  const std::vector<std::vector<double>>& scores, int num_classes);

// 2|P∩T| / (|P|+|T|); both-empty counts as 1. Inputs must be binary.
double dice(const Tensor& pred, const Tensor& truth);

struct RetrievalReport {
  std::map<int, double> recall_at;  // K -> Recall@K
  double mean_recall = 0.0;
  int evaluated_queries = 0;
  int skipped_queries = 0;  // queries with no same-patient gallery item
};

// ranked_ids[q] lists gallery indices best-first with the query itself
// already excluded.
RetrievalReport recall_at_k(const std::vector<std::vector<int>>& ranked_ids,
                            const std::vector<std::string>& query_patient,
                            const std::vector<std::string>& gallery_patient,
                            const std::vector<int>& ks = {1, 5, 10});

// ---- statistics protocol ----

struct StatSummary {
  double mean = 0.0;
  double se = 0.0;
  double ci95_low = 0.0;
  double ci95_high = 0.0;
  int runs = 0;
  std::optional<double> p_value;  // two-sided paired t-test vs comparator
  bool p_degenerate = false;      // zero-variance difference
};

StatSummary summarize(const std::vector<double>& runs,
                      const std::vector<double>* comparator = nullptr);

// Two-sided p-value of Student's t with df degrees of freedom.
double student_t_two_sided_p(double t, int df);

// Spearman rank correlation (average ranks on ties).
double spearman(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace angio::metrics
