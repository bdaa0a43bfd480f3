#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "angio/metrics.hpp"
#include "angio/model.hpp"

namespace angio {

// Pluggable frozen-encoder contract. Trained checkpoints and random-init
// baselines (or any comparator) enter downstream tasks through this handle.
struct EncoderHandle {
  std::string id;
  int resolution = 0;
  GeneratorConfig config;
  std::shared_ptr<const nn::ParamStore> params;  // gen.* blobs only

  std::uint64_t fingerprint() const { return params->fingerprint(); }
};

EncoderHandle encoder_from_checkpoint(const Checkpoint& ckpt);
EncoderHandle random_encoder(const GeneratorConfig& cfg, std::uint64_t seed);

// Channel-promotes grayscale inputs and resizes to the encoder resolution.
Tensor to_encoder_input(const Tensor& image, int resolution);

struct Embedding {
  std::vector<double> vector;
  std::string encoder_id;
  std::string input_id;
  std::string patient_id;
};

struct ImageInput {
  Tensor image;  // {3,H,W} or {H,W}
  std::string input_id;
  std::string patient_id;
};

// Disk cache keyed by (encoder id, input content hash).
class EmbeddingCache {
 public:
  explicit EmbeddingCache(std::filesystem::path dir);
  std::optional<std::vector<double>> get(const std::string& encoder_id,
                                         std::uint64_t input_hash) const;
  void put(const std::string& encoder_id, std::uint64_t input_hash,
           const std::vector<double>& vec) const;

 private:
  std::filesystem::path dir_;
};

// Pooled encoder features, one per input, order preserved. Inputs must
// already match the encoder resolution.
std::vector<Embedding> extract_embeddings(const EncoderHandle& encoder,
                                          const std::vector<ImageInput>& inputs,
                                          EmbeddingCache* cache = nullptr);

// Training-free prototype scoring: per-class cosine similarity to centroids
// of a labeled reference pool. Returns one score row per test embedding.
std::vector<std::vector<double>> zero_shot_classify(const std::vector<Embedding>& test,
                                                    const std::vector<Embedding>& reference,
                                                    const std::vector<int>& reference_labels,
                                                    int num_classes);

// ---- probes ---------------------------------------------------------------

struct ProbeConfig {
  int support_per_class = 1;  // few-shot shots
  double train_ratio = 0.55, val_ratio = 0.15, test_ratio = 0.30;
  double label_smoothing = 0.1;
  int epochs = 50;
  int batch = 16;
  int warmup_epochs = 10;
  double lr_peak = 5e-4;
  double lr_floor = 1e-6;
  int hidden = 256;  // 0 => plain linear probe
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
};

// Linear-warmup then cosine-annealed learning rate, 1-based epochs.
double probe_lr(const ProbeConfig& cfg, int epoch);

struct TrainedProbe {
  nn::ParamStore params;
  int input_dim = 0;
  int hidden = 0;
  int num_classes = 0;
  // per-dimension standardization fitted on the training embeddings and
  // applied at scoring time
  Tensor feat_mean;
  Tensor feat_scale;
};

TrainedProbe train_probe(const std::vector<Embedding>& embeddings,
                         const std::vector<int>& labels, int num_classes,
                         const ProbeConfig& cfg, std::uint64_t seed);

std::vector<std::vector<double>> probe_scores(const TrainedProbe& probe,
                                              const std::vector<Embedding>& embeddings);

// Per-class support sampling without replacement; throws when a class has
// fewer examples than requested.
std::vector<std::size_t> sample_support(const std::vector<int>& labels, int num_classes,
                                        int per_class, std::uint64_t seed);

struct FewShotScores {
  std::vector<double> auroc_per_seed;
  std::vector<double> aupr_per_seed;
};

// Trains one probe per seed on freshly resampled support sets drawn from the
// pool; the encoder is untouched throughout.
FewShotScores few_shot_train(const std::vector<Embedding>& pool,
                             const std::vector<int>& pool_labels,
                             const std::vector<Embedding>& test,
                             const std::vector<int>& test_labels, int num_classes,
                             const ProbeConfig& cfg);

// ---- supervised soft-attention fusion --------------------------------------

struct FusedResult {
  double test_auroc = 0.0;
  double test_aupr = 0.0;
  int best_epoch = 0;
  std::vector<double> lr_trace;                 // per-epoch learning rates
  std::vector<std::array<double, 2>> gates;     // per test sample, sums to 1
};

// Both encoders stay frozen; a per-encoder projection, a softmax gate over
// the two projected vectors and an MLP head are trained on the 55/15/30
// patient split. The epoch with the best validation AUROC supplies the test
// weights.
FusedResult supervised_train_fused(const EncoderHandle& enc_a, const EncoderHandle& enc_b,
                                   const std::vector<ImageInput>& data,
                                   const std::vector<int>& labels, int num_classes,
                                   const ProbeConfig& cfg, std::uint64_t seed);

// Patient-level split indices (train, val, test) honoring the ratios.
std::array<std::vector<std::size_t>, 3> split_by_patient(const std::vector<ImageInput>& data,
                                                         double train_ratio, double val_ratio,
                                                         std::uint64_t seed);

// Same, stratified by label so every class reaches every bucket when its
// patient count allows.
std::array<std::vector<std::size_t>, 3> stratified_split_by_patient(
    const std::vector<ImageInput>& data, const std::vector<int>& labels, double train_ratio,
    double val_ratio, std::uint64_t seed);

// ---- segmentation -----------------------------------------------------------

struct SegmentationConfig {
  int shots = 1;      // 0 => frozen encoder, per-pixel linear decode only
  int epochs = 100;
  int resolution = 512;
  bool augment = true;  // brightness/contrast jitter, random crop, flips
  double lr = 1e-3;
  // discriminative fine-tuning: encoder parameters move at lr * this scale
  double encoder_lr_scale = 0.1;
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
};

struct SegSample {
  Tensor image;  // {3,H,W}
  Tensor mask;   // {H,W} binary
  std::string id;
};

struct SegResult {
  double auroc = 0.0;
  double dice = 0.0;
};

// Fine-tunes encoder + upsampling decoder end-to-end (shots >= 1 uses `shots`
// training images) or trains a linear readout on frozen features (shots = 0).
// The handle's own parameters are never mutated.
SegResult finetune_segmentation(const EncoderHandle& encoder, const SegmentationConfig& cfg,
                                const std::vector<SegSample>& train_pool,
                                const std::vector<SegSample>& test, std::uint64_t seed);

// ---- retrieval --------------------------------------------------------------

struct RetrievalResult {
  std::vector<std::vector<int>> rankings;  // per query, gallery indices best-first
  metrics::RetrievalReport report;
};

// Cosine-similarity ranking with stable tie-breaks; a gallery entry sharing
// the query's input_id is excluded from that query's candidates.
RetrievalResult retrieve(const std::vector<Embedding>& queries,
                         const std::vector<Embedding>& gallery,
                         const std::vector<int>& ks = {1, 5, 10});

}  // namespace angio
