#include "angio/downstream.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

#include "angio/error.hpp"
#include "angio/image.hpp"
#include "angio/rng.hpp"

namespace angio {

using nn::GradMap;
using nn::ParamStore;
using nn::Tape;
using nn::Var;

EncoderHandle encoder_from_checkpoint(const Checkpoint& ckpt) {
  auto params = std::make_shared<ParamStore>();
  for (const auto& [name, tensor] : ckpt.params.t)
    if (name.rfind("gen.", 0) == 0) params->create(name, tensor);
  require(!params->t.empty(), "encoder", "checkpoint holds no generator parameters");
  EncoderHandle h;
  h.config = ckpt.gen;
  h.resolution = ckpt.gen.resolution;
  h.params = std::move(params);
  h.id = "ckpt:" + std::to_string(h.params->fingerprint());
  return h;
}

EncoderHandle random_encoder(const GeneratorConfig& cfg, std::uint64_t seed) {
  auto params = std::make_shared<ParamStore>();
  Generator gen(cfg);
  gen.init_params(*params, seed);
  EncoderHandle h;
  h.config = cfg;
  h.resolution = cfg.resolution;
  h.params = std::move(params);
  h.id = "random:" + std::to_string(seed) + ":" + std::to_string(h.params->fingerprint());
  return h;
}

Tensor to_encoder_input(const Tensor& image, int resolution) {
  Tensor rgb;
  if (image.ndim() == 2) {
    rgb = Tensor({3, image.dim(0), image.dim(1)});
    for (int c = 0; c < 3; ++c)
      std::copy(image.v.begin(), image.v.end(), rgb.v.begin() + c * image.numel());
  } else {
    require(image.ndim() == 3 && image.dim(0) == 3, "shape",
            "encoder input must be {H,W} or {3,H,W}");
    rgb = image;
  }
  return resize_bilinear(rgb, resolution, resolution);
}

EmbeddingCache::EmbeddingCache(std::filesystem::path dir) : dir_(std::move(dir)) {
  std::filesystem::create_directories(dir_);
}

namespace {

std::filesystem::path cache_file(const std::filesystem::path& dir, const std::string& encoder_id,
                                 std::uint64_t input_hash) {
  return dir / (std::to_string(fnv1a(encoder_id)) + "_" + std::to_string(input_hash) + ".emb");
}

}  // namespace

std::optional<std::vector<double>> EmbeddingCache::get(const std::string& encoder_id,
                                                       std::uint64_t input_hash) const {
  const auto file = cache_file(dir_, encoder_id, input_hash);
  std::ifstream in(file, std::ios::binary);
  if (!in.good()) return std::nullopt;
  std::uint64_t n = 0;
  in.read(reinterpret_cast<char*>(&n), sizeof n);
  std::vector<double> v(n);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (!in.good()) return std::nullopt;
  return v;
}

void EmbeddingCache::put(const std::string& encoder_id, std::uint64_t input_hash,
                         const std::vector<double>& vec) const {
  const auto file = cache_file(dir_, encoder_id, input_hash);
  std::ofstream out(file, std::ios::binary);
  require(out.good(), "io", "cannot write embedding cache entry: " + file.string());
  const std::uint64_t n = vec.size();
  out.write(reinterpret_cast<const char*>(&n), sizeof n);
  out.write(reinterpret_cast<const char*>(vec.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
}

std::vector<Embedding> extract_embeddings(const EncoderHandle& encoder,
                                          const std::vector<ImageInput>& inputs,
                                          EmbeddingCache* cache) {
  Generator gen(encoder.config);
  std::vector<Embedding> out;
  out.reserve(inputs.size());
  for (const auto& in : inputs) {
    require(in.image.ndim() == 3 && in.image.dim(0) == 3, "shape",
            "embedding input must be {3,H,W}; use to_encoder_input first");
    require(in.image.dim(1) == encoder.resolution && in.image.dim(2) == encoder.resolution,
            "resolution",
            "input resolution " + in.image.shape_str() + " does not match encoder " +
                std::to_string(encoder.resolution));
    Embedding e;
    e.encoder_id = encoder.id;
    e.input_id = in.input_id;
    e.patient_id = in.patient_id;
    const std::uint64_t input_hash =
        fnv1a(in.image.v.data(), in.image.v.size() * sizeof(double));
    if (cache) {
      if (auto hit = cache->get(encoder.id, input_hash)) {
        e.vector = std::move(*hit);
        out.push_back(std::move(e));
        continue;
      }
    }
    e.vector = gen.encode(*encoder.params, in.image).pooled.v;
    if (cache) cache->put(encoder.id, input_hash, e.vector);
    out.push_back(std::move(e));
  }
  return out;
}

namespace {

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  require(a.size() == b.size(), "shape", "cosine: dimension mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(na) * std::sqrt(nb);
  return denom > 1e-300 ? dot / denom : 0.0;
}

}  // namespace

std::vector<std::vector<double>> zero_shot_classify(const std::vector<Embedding>& test,
                                                    const std::vector<Embedding>& reference,
                                                    const std::vector<int>& reference_labels,
                                                    int num_classes) {
  require(reference.size() == reference_labels.size() && !reference.empty(), "zeroshot",
          "reference pool and labels must align");
  require(num_classes >= 2, "zeroshot", "need at least 2 classes");
  const std::size_t dim = reference[0].vector.size();
  std::vector<std::vector<double>> centroids(static_cast<std::size_t>(num_classes),
                                             std::vector<double>(dim, 0.0));
  std::vector<int> counts(static_cast<std::size_t>(num_classes), 0);
  for (std::size_t i = 0; i < reference.size(); ++i) {
    const int c = reference_labels[i];
    require(c >= 0 && c < num_classes, "zeroshot", "reference label out of range");
    for (std::size_t d = 0; d < dim; ++d) centroids[static_cast<std::size_t>(c)][d] += reference[i].vector[d];
    counts[static_cast<std::size_t>(c)]++;
  }
  for (int c = 0; c < num_classes; ++c) {
    require(counts[static_cast<std::size_t>(c)] > 0, "zeroshot",
            "class " + std::to_string(c) + " has zero reference examples");
    for (auto& v : centroids[static_cast<std::size_t>(c)]) v /= counts[static_cast<std::size_t>(c)];
  }
  std::vector<std::vector<double>> scores;
  scores.reserve(test.size());
  for (const auto& e : test) {
    std::vector<double> row(static_cast<std::size_t>(num_classes));
    for (int c = 0; c < num_classes; ++c)
      row[static_cast<std::size_t>(c)] = cosine(e.vector, centroids[static_cast<std::size_t>(c)]);
    scores.push_back(std::move(row));
  }
  return scores;
}

// -------------------------------------------------------------------- probes

double probe_lr(const ProbeConfig& cfg, int epoch) {
  require(epoch >= 1 && epoch <= cfg.epochs, "probe", "epoch out of schedule range");
  require(cfg.warmup_epochs < cfg.epochs, "probe", "warmup must end before the last epoch");
  if (epoch <= cfg.warmup_epochs)
    return cfg.lr_peak * static_cast<double>(epoch) / cfg.warmup_epochs;
  const double t = static_cast<double>(epoch - cfg.warmup_epochs) /
                   static_cast<double>(cfg.epochs - cfg.warmup_epochs);
  return cfg.lr_floor + (cfg.lr_peak - cfg.lr_floor) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

namespace {

Tensor smoothed_targets(const std::vector<int>& labels, const std::vector<std::size_t>& idx,
                        int num_classes, double eps) {
  Tensor t({static_cast<int>(idx.size()), num_classes});
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (int c = 0; c < num_classes; ++c)
      t.v[i * static_cast<std::size_t>(num_classes) + static_cast<std::size_t>(c)] =
          (labels[idx[i]] == c ? 1.0 - eps : 0.0) + eps / num_classes;
  return t;
}

Tensor embedding_rows(const std::vector<Embedding>& embs, const std::vector<std::size_t>& idx) {
  require(!idx.empty(), "probe", "empty embedding batch");
  const int dim = static_cast<int>(embs[idx[0]].vector.size());
  Tensor x({static_cast<int>(idx.size()), dim});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    require(static_cast<int>(embs[idx[i]].vector.size()) == dim, "probe",
            "embedding dimension mismatch");
    std::copy(embs[idx[i]].vector.begin(), embs[idx[i]].vector.end(),
              x.v.begin() + static_cast<std::int64_t>(i) * dim);
  }
  return x;
}

// Mean-center and rescale by one global factor (the RMS deviation over all
// dimensions). Per-dimension unit variance would amplify pure-noise axes on
// tiny support sets, so relative dimension scales are kept.
void fit_standardizer(const Tensor& rows, Tensor& mean, Tensor& scale) {
  const int n = rows.dim(0), d = rows.dim(1);
  mean = Tensor({d});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j)
      mean.v[static_cast<std::size_t>(j)] += rows.v[static_cast<std::size_t>(i) * d + j];
  for (auto& v : mean.v) v /= n;
  double var = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) {
      const double c = rows.v[static_cast<std::size_t>(i) * d + j] - mean.v[static_cast<std::size_t>(j)];
      var += c * c;
    }
  const double rms = std::sqrt(var / (static_cast<double>(n) * d));
  scale = Tensor::full({d}, 1.0 / std::max(rms, 1e-8));
}

void standardize_rows(Tensor& rows, const Tensor& mean, const Tensor& scale) {
  const int n = rows.dim(0), d = rows.dim(1);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j)
      rows.v[static_cast<std::size_t>(i) * d + j] =
          (rows.v[static_cast<std::size_t>(i) * d + j] - mean.v[static_cast<std::size_t>(j)]) *
          scale.v[static_cast<std::size_t>(j)];
}

Var probe_logits(Tape& tape, const ParamStore& ps, Var x, int hidden, bool trainable) {
  if (hidden > 0) {
    Var h = nn::leaky_relu(
        nn::add_bias_rows(nn::matmul_nt(x, tape.param(ps, "probe.w1", trainable)),
                          tape.param(ps, "probe.b1", trainable)),
        0.01);
    return nn::add_bias_rows(nn::matmul_nt(h, tape.param(ps, "probe.w2", trainable)),
                             tape.param(ps, "probe.b2", trainable));
  }
  return nn::add_bias_rows(nn::matmul_nt(x, tape.param(ps, "probe.w", trainable)),
                           tape.param(ps, "probe.b", trainable));
}

}  // namespace

TrainedProbe train_probe(const std::vector<Embedding>& embeddings,
                         const std::vector<int>& labels, int num_classes,
                         const ProbeConfig& cfg, std::uint64_t seed) {
  require(embeddings.size() == labels.size() && !embeddings.empty(), "probe",
          "embeddings/labels must align");
  TrainedProbe probe;
  probe.input_dim = static_cast<int>(embeddings[0].vector.size());
  probe.hidden = cfg.hidden;
  probe.num_classes = num_classes;
  {
    std::vector<std::size_t> all(embeddings.size());
    std::iota(all.begin(), all.end(), 0);
    fit_standardizer(embedding_rows(embeddings, all), probe.feat_mean, probe.feat_scale);
  }

  Rng init_rng(derive_seed(seed, fnv1a("probe-init")));
  if (cfg.hidden > 0) {
    probe.params.create("probe.w1",
                        Tensor::randn({cfg.hidden, probe.input_dim}, init_rng,
                                      std::sqrt(2.0 / probe.input_dim)));
    probe.params.create("probe.b1", Tensor::zeros({cfg.hidden}));
    probe.params.create("probe.w2", Tensor::randn({num_classes, cfg.hidden}, init_rng,
                                                  std::sqrt(2.0 / cfg.hidden)));
    probe.params.create("probe.b2", Tensor::zeros({num_classes}));
  } else {
    probe.params.create("probe.w", Tensor::randn({num_classes, probe.input_dim}, init_rng,
                                                 std::sqrt(1.0 / probe.input_dim)));
    probe.params.create("probe.b", Tensor::zeros({num_classes}));
  }

  // plain Adam with the warmup+cosine schedule
  std::map<std::string, std::pair<Tensor, Tensor>> moments;
  long tstep = 0;
  auto adam_step = [&](const GradMap& grads, double lr) {
    ++tstep;
    const double bc1 = 1.0 - std::pow(0.9, static_cast<double>(tstep));
    const double bc2 = 1.0 - std::pow(0.999, static_cast<double>(tstep));
    for (const auto& [name, g] : grads) {
      Tensor& p = probe.params.get(name);
      auto it = moments.find(name);
      if (it == moments.end())
        it = moments.emplace(name, std::make_pair(Tensor::zeros(p.shape), Tensor::zeros(p.shape)))
                 .first;
      for (std::size_t i = 0; i < p.v.size(); ++i) {
        auto& m = it->second.first.v[i];
        auto& v = it->second.second.v[i];
        m = 0.9 * m + 0.1 * g.v[i];
        v = 0.999 * v + 0.001 * g.v[i] * g.v[i];
        p.v[i] -= lr * (m / bc1) / (std::sqrt(v / bc2) + 1e-8);
      }
    }
  };

  std::vector<std::size_t> order(embeddings.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(seed, fnv1a("probe-epoch"), static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order);
    const double lr = probe_lr(cfg, epoch);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch)) {
      std::vector<std::size_t> batch(
          order.begin() + static_cast<std::int64_t>(start),
          order.begin() + static_cast<std::int64_t>(std::min(order.size(),
                                                             start + static_cast<std::size_t>(cfg.batch))));
      Tape tape;
      Tensor rows = embedding_rows(embeddings, batch);
      standardize_rows(rows, probe.feat_mean, probe.feat_scale);
      Var x = tape.constant(std::move(rows));
      Var logits = probe_logits(tape, probe.params, x, cfg.hidden, true);
      Var loss = nn::softmax_cross_entropy(
          logits,
          tape.constant(smoothed_targets(labels, batch, num_classes, cfg.label_smoothing)));
      tape.backward(loss);
      GradMap grads;
      tape.accumulate_param_grads(grads);
      adam_step(grads, lr);
    }
  }
  return probe;
}

std::vector<std::vector<double>> probe_scores(const TrainedProbe& probe,
                                              const std::vector<Embedding>& embeddings) {
  std::vector<std::size_t> all(embeddings.size());
  std::iota(all.begin(), all.end(), 0);
  Tape tape(false);
  Tensor srows = embedding_rows(embeddings, all);
  standardize_rows(srows, probe.feat_mean, probe.feat_scale);
  Var x = tape.constant(std::move(srows));
  Var logits = probe_logits(tape, probe.params, x, probe.hidden, false);
  const Tensor& lv = tape.val(logits);
  std::vector<std::vector<double>> rows;
  rows.reserve(embeddings.size());
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    // softmax per row for calibrated class scores
    const double* l = lv.v.data() + i * static_cast<std::size_t>(probe.num_classes);
    double mx = l[0];
    for (int c = 1; c < probe.num_classes; ++c) mx = std::max(mx, l[c]);
    double z = 0.0;
    std::vector<double> row(static_cast<std::size_t>(probe.num_classes));
    for (int c = 0; c < probe.num_classes; ++c) {
      row[static_cast<std::size_t>(c)] = std::exp(l[c] - mx);
      z += row[static_cast<std::size_t>(c)];
    }
    for (auto& v : row) v /= z;
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<std::size_t> sample_support(const std::vector<int>& labels, int num_classes,
                                        int per_class, std::uint64_t seed) {
  require(per_class >= 1, "fewshot", "support size must be >= 1");
  std::vector<std::size_t> out;
  for (int c = 0; c < num_classes; ++c) {
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == c) pool.push_back(i);
    require(static_cast<int>(pool.size()) >= per_class, "fewshot",
            "class " + std::to_string(c) + " has " + std::to_string(pool.size()) +
                " examples, need " + std::to_string(per_class));
    Rng rng(derive_seed(seed, fnv1a("support"), static_cast<std::uint64_t>(c)));
    rng.shuffle(pool);
    out.insert(out.end(), pool.begin(), pool.begin() + per_class);
  }
  std::sort(out.begin(), out.end());
  return out;
}

namespace {

double score_auroc(const std::vector<int>& labels, const std::vector<std::vector<double>>& rows,
                   int num_classes) {
  if (num_classes == 2) {
    std::vector<double> s;
    s.reserve(rows.size());
    for (const auto& r : rows) s.push_back(r[1]);
    return metrics::auroc(labels, s);
  }
  return metrics::auroc_macro(labels, rows, num_classes);
}

double score_aupr(const std::vector<int>& labels, const std::vector<std::vector<double>>& rows,
                  int num_classes) {
  if (num_classes == 2) {
    std::vector<double> s;
    s.reserve(rows.size());
    for (const auto& r : rows) s.push_back(r[1]);
    return metrics::aupr(labels, s);
  }
  return metrics::aupr_macro(labels, rows, num_classes);
}

}  // namespace

FewShotScores few_shot_train(const std::vector<Embedding>& pool,
                             const std::vector<int>& pool_labels,
                             const std::vector<Embedding>& test,
                             const std::vector<int>& test_labels, int num_classes,
                             const ProbeConfig& cfg) {
  require(pool.size() == pool_labels.size(), "fewshot", "pool labels misaligned");
  require(test.size() == test_labels.size(), "fewshot", "test labels misaligned");
  FewShotScores out;
  for (std::uint64_t seed : cfg.seeds) {
    const auto support = sample_support(pool_labels, num_classes, cfg.support_per_class, seed);
    std::vector<Embedding> se;
    std::vector<int> sl;
    for (std::size_t i : support) {
      se.push_back(pool[i]);
      sl.push_back(pool_labels[i]);
    }
    const TrainedProbe probe = train_probe(se, sl, num_classes, cfg, seed);
    const auto rows = probe_scores(probe, test);
    out.auroc_per_seed.push_back(score_auroc(test_labels, rows, num_classes));
    out.aupr_per_seed.push_back(score_aupr(test_labels, rows, num_classes));
  }
  return out;
}

// ------------------------------------------- supervised soft-attention fusion

std::array<std::vector<std::size_t>, 3> split_by_patient(const std::vector<ImageInput>& data,
                                                         double train_ratio, double val_ratio,
                                                         std::uint64_t seed) {
  std::vector<std::string> patients;
  std::map<std::string, std::vector<std::size_t>> by_patient;
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto [it, inserted] = by_patient.emplace(data[i].patient_id, std::vector<std::size_t>{});
    if (inserted) patients.push_back(data[i].patient_id);
    it->second.push_back(i);
  }
  Rng rng(derive_seed(seed, fnv1a("patient-split")));
  rng.shuffle(patients);
  const std::size_t n = patients.size();
  const std::size_t n_train = static_cast<std::size_t>(std::lround(train_ratio * n));
  const std::size_t n_val = static_cast<std::size_t>(std::lround(val_ratio * n));
  std::array<std::vector<std::size_t>, 3> out;
  for (std::size_t p = 0; p < n; ++p) {
    const int bucket = p < n_train ? 0 : (p < n_train + n_val ? 1 : 2);
    for (std::size_t i : by_patient[patients[p]]) out[static_cast<std::size_t>(bucket)].push_back(i);
  }
  for (auto& v : out) std::sort(v.begin(), v.end());
  return out;
}

std::array<std::vector<std::size_t>, 3> stratified_split_by_patient(
    const std::vector<ImageInput>& data, const std::vector<int>& labels, double train_ratio,
    double val_ratio, std::uint64_t seed) {
  require(data.size() == labels.size(), "split", "labels must align with data");
  std::set<int> classes(labels.begin(), labels.end());
  std::array<std::vector<std::size_t>, 3> out;
  for (int c : classes) {
    std::vector<ImageInput> sub;
    std::vector<std::size_t> back;
    for (std::size_t i = 0; i < data.size(); ++i)
      if (labels[i] == c) {
        sub.push_back(data[i]);
        back.push_back(i);
      }
    const auto s = split_by_patient(sub, train_ratio, val_ratio,
                                    derive_seed(seed, static_cast<std::uint64_t>(c)));
    for (int b = 0; b < 3; ++b)
      for (std::size_t i : s[static_cast<std::size_t>(b)])
        out[static_cast<std::size_t>(b)].push_back(back[i]);
  }
  for (auto& v : out) std::sort(v.begin(), v.end());
  return out;
}

namespace {

struct FusionNet {
  ParamStore params;
  int proj_dim = 128;
  int hidden = 0;
  int num_classes = 0;

  void init(int dim_a, int dim_b, int classes, int hidden_width, std::uint64_t seed) {
    Rng rng(derive_seed(seed, fnv1a("fusion-init")));
    hidden = hidden_width;
    num_classes = classes;
    params.create("fuse.pa", Tensor::randn({proj_dim, dim_a}, rng, std::sqrt(1.0 / dim_a)));
    params.create("fuse.pa_b", Tensor::zeros({proj_dim}));
    params.create("fuse.pb", Tensor::randn({proj_dim, dim_b}, rng, std::sqrt(1.0 / dim_b)));
    params.create("fuse.pb_b", Tensor::zeros({proj_dim}));
    params.create("fuse.ga", Tensor::randn({1, proj_dim}, rng, std::sqrt(1.0 / proj_dim)));
    params.create("fuse.ga_b", Tensor::zeros({1}));
    params.create("fuse.gb", Tensor::randn({1, proj_dim}, rng, std::sqrt(1.0 / proj_dim)));
    params.create("fuse.gb_b", Tensor::zeros({1}));
    params.create("fuse.w1", Tensor::randn({hidden, proj_dim}, rng, std::sqrt(2.0 / proj_dim)));
    params.create("fuse.b1", Tensor::zeros({hidden}));
    params.create("fuse.w2", Tensor::randn({classes, hidden}, rng, std::sqrt(2.0 / hidden)));
    params.create("fuse.b2", Tensor::zeros({classes}));
  }

  struct Out {
    Var logits;   // {1,C}
    Var gate_a;   // {1}
  };

  Out forward(Tape& tape, const std::vector<double>& ea, const std::vector<double>& eb,
              bool trainable) const {
    Var xa = tape.constant(Tensor({1, static_cast<int>(ea.size())}, ea));
    Var xb = tape.constant(Tensor({1, static_cast<int>(eb.size())}, eb));
    Var pa = nn::add_bias_rows(nn::matmul_nt(xa, tape.param(params, "fuse.pa", trainable)),
                               tape.param(params, "fuse.pa_b", trainable));
    Var pb = nn::add_bias_rows(nn::matmul_nt(xb, tape.param(params, "fuse.pb", trainable)),
                               tape.param(params, "fuse.pb_b", trainable));
    Var sa = nn::add_bias_rows(
        nn::matmul_nt(nn::vtanh(pa), tape.param(params, "fuse.ga", trainable)),
        tape.param(params, "fuse.ga_b", trainable));
    Var sb = nn::add_bias_rows(
        nn::matmul_nt(nn::vtanh(pb), tape.param(params, "fuse.gb", trainable)),
        tape.param(params, "fuse.gb_b", trainable));
    // two-way softmax: sigmoid of the score difference
    Var gate_a = nn::sigmoid(nn::sub(sa, sb));
    Var gate_b = nn::sadd(nn::smul(gate_a, -1.0), 1.0);
    Var fused = nn::add(nn::scale_by(pa, gate_a), nn::scale_by(pb, gate_b));
    Var h = nn::leaky_relu(
        nn::add_bias_rows(nn::matmul_nt(fused, tape.param(params, "fuse.w1", trainable)),
                          tape.param(params, "fuse.b1", trainable)),
        0.01);
    Var logits = nn::add_bias_rows(nn::matmul_nt(h, tape.param(params, "fuse.w2", trainable)),
                                   tape.param(params, "fuse.b2", trainable));
    return {logits, gate_a};
  }
};

}  // namespace

FusedResult supervised_train_fused(const EncoderHandle& enc_a, const EncoderHandle& enc_b,
                                   const std::vector<ImageInput>& data,
                                   const std::vector<int>& labels, int num_classes,
                                   const ProbeConfig& cfg, std::uint64_t seed) {
  require(data.size() == labels.size() && !data.empty(), "fusion", "data/labels misaligned");
  const auto splits = split_by_patient(data, cfg.train_ratio, cfg.val_ratio, seed);
  const auto& train_idx = splits[0];
  const auto& val_idx = splits[1];
  const auto& test_idx = splits[2];
  require(!train_idx.empty(), "fusion", "train split is empty");
  require(!val_idx.empty(), "fusion", "validation split is empty");
  require(!test_idx.empty(), "fusion", "test split is empty");

  auto embed_all = [&](const EncoderHandle& enc) {
    std::vector<ImageInput> prepped;
    prepped.reserve(data.size());
    for (const auto& d : data)
      prepped.push_back({to_encoder_input(d.image, enc.resolution), d.input_id, d.patient_id});
    return extract_embeddings(enc, prepped);
  };
  auto emb_a = embed_all(enc_a);
  auto emb_b = embed_all(enc_b);
  // standardize each encoder's features with train-split statistics
  for (auto* embs : {&emb_a, &emb_b}) {
    Tensor mean, scale;
    fit_standardizer(embedding_rows(*embs, train_idx), mean, scale);
    for (auto& e : *embs)
      for (std::size_t j = 0; j < e.vector.size(); ++j)
        e.vector[j] = (e.vector[j] - mean.v[j]) * scale.v[j];
  }

  FusionNet net;
  net.init(static_cast<int>(emb_a[0].vector.size()), static_cast<int>(emb_b[0].vector.size()),
           num_classes, cfg.hidden > 0 ? cfg.hidden : 64, seed);

  std::map<std::string, std::pair<Tensor, Tensor>> moments;
  long tstep = 0;
  auto adam_step = [&](const GradMap& grads, double lr) {
    ++tstep;
    const double bc1 = 1.0 - std::pow(0.9, static_cast<double>(tstep));
    const double bc2 = 1.0 - std::pow(0.999, static_cast<double>(tstep));
    for (const auto& [name, g] : grads) {
      Tensor& p = net.params.get(name);
      auto it = moments.find(name);
      if (it == moments.end())
        it = moments.emplace(name, std::make_pair(Tensor::zeros(p.shape), Tensor::zeros(p.shape)))
                 .first;
      for (std::size_t i = 0; i < p.v.size(); ++i) {
        auto& m = it->second.first.v[i];
        auto& v = it->second.second.v[i];
        m = 0.9 * m + 0.1 * g.v[i];
        v = 0.999 * v + 0.001 * g.v[i] * g.v[i];
        p.v[i] -= lr * (m / bc1) / (std::sqrt(v / bc2) + 1e-8);
      }
    }
  };

  auto eval_rows = [&](const std::vector<std::size_t>& idx) {
    std::vector<std::vector<double>> rows;
    std::vector<std::array<double, 2>> gates;
    for (std::size_t i : idx) {
      Tape tape(false);
      auto out = net.forward(tape, emb_a[i].vector, emb_b[i].vector, false);
      const Tensor& lv = tape.val(out.logits);
      double mx = lv.v[0];
      for (double v : lv.v) mx = std::max(mx, v);
      double z = 0.0;
      std::vector<double> row(lv.v.size());
      for (std::size_t c = 0; c < lv.v.size(); ++c) {
        row[c] = std::exp(lv.v[c] - mx);
        z += row[c];
      }
      for (auto& v : row) v /= z;
      rows.push_back(std::move(row));
      const double ga = tape.val(out.gate_a).v[0];
      gates.push_back({ga, 1.0 - ga});
    }
    return std::make_pair(rows, gates);
  };
  auto labels_of = [&](const std::vector<std::size_t>& idx) {
    std::vector<int> out;
    for (std::size_t i : idx) out.push_back(labels[i]);
    return out;
  };

  FusedResult result;
  double best_val = -1.0;
  ParamStore best_params = net.params;

  std::vector<std::size_t> order = train_idx;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = probe_lr(cfg, epoch);
    result.lr_trace.push_back(lr);
    Rng rng(derive_seed(seed, fnv1a("fusion-epoch"), static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
      GradMap grads;
      for (std::size_t k = start; k < stop; ++k) {
        const std::size_t i = order[k];
        Tape tape;
        auto out = net.forward(tape, emb_a[i].vector, emb_b[i].vector, true);
        Tensor target({1, num_classes});
        for (int c = 0; c < num_classes; ++c)
          target.v[static_cast<std::size_t>(c)] =
              (labels[i] == c ? 1.0 - cfg.label_smoothing : 0.0) +
              cfg.label_smoothing / num_classes;
        Var loss = nn::softmax_cross_entropy(out.logits, tape.constant(std::move(target)));
        tape.backward(nn::smul(loss, 1.0 / static_cast<double>(stop - start)));
        tape.accumulate_param_grads(grads);
      }
      adam_step(grads, lr);
    }
    // keep the weights with the best validation AUROC
    const auto [val_rows, val_gates] = eval_rows(val_idx);
    const double val_auroc = score_auroc(labels_of(val_idx), val_rows, num_classes);
    if (val_auroc > best_val) {
      best_val = val_auroc;
      best_params = net.params;
      result.best_epoch = epoch;
    }
  }

  net.params = best_params;
  const auto [test_rows, test_gates] = eval_rows(test_idx);
  result.test_auroc = score_auroc(labels_of(test_idx), test_rows, num_classes);
  result.test_aupr = score_aupr(labels_of(test_idx), test_rows, num_classes);
  result.gates = test_gates;
  return result;
}

// --------------------------------------------------------------- segmentation

namespace {

SegSample augment_sample(const SegSample& s, Rng& rng) {
  SegSample out = s;
  const int h = s.mask.dim(0), w = s.mask.dim(1);
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  // flips
  const bool hflip = rng.uniform() < 0.5;
  const bool vflip = rng.uniform() < 0.5;
  auto flip = [&](Tensor& t, int channels) {
    Tensor src = t;
    for (int c = 0; c < channels; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const int sy = vflip ? h - 1 - y : y;
          const int sx = hflip ? w - 1 - x : x;
          t.v[c * hw + static_cast<std::size_t>(y) * w + x] =
              src.v[c * hw + static_cast<std::size_t>(sy) * w + sx];
        }
  };
  flip(out.image, 3);
  flip(out.mask, 1);
  // brightness/contrast jitter on the image only
  const double contrast = 0.85 + 0.3 * rng.uniform();
  const double brightness = -0.08 + 0.16 * rng.uniform();
  for (auto& v : out.image.v)
    v = std::clamp((v - 0.5) * contrast + 0.5 + brightness, 0.0, 1.0);
  // random crop back to full size
  if (rng.uniform() < 0.5) {
    const int crop = static_cast<int>(0.8 * h);
    const int oy = rng.uniform_int(0, h - crop);
    const int ox = rng.uniform_int(0, w - crop);
    Tensor ci({3, crop, crop}), cm({crop, crop});
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < crop; ++y)
        for (int x = 0; x < crop; ++x)
          ci.v[(static_cast<std::size_t>(c) * crop + y) * crop + x] =
              out.image.v[c * hw + static_cast<std::size_t>(oy + y) * w + ox + x];
    for (int y = 0; y < crop; ++y)
      for (int x = 0; x < crop; ++x)
        cm.v[static_cast<std::size_t>(y) * crop + x] =
            out.mask.v[static_cast<std::size_t>(oy + y) * w + ox + x];
    out.image = resize_bilinear(ci, h, w);
    out.mask = resize_bilinear(cm, h, w);
    for (auto& v : out.mask.v) v = v >= 0.5 ? 1.0 : 0.0;
  }
  return out;
}

struct SegNet {
  Generator gen;
  ParamStore params;  // encoder copy + seg.* decoder
  bool linear_only = false;
  int stages = 0;

  explicit SegNet(const EncoderHandle& enc, bool linear, std::uint64_t seed)
      : gen(enc.config), linear_only(linear), stages(enc.config.downsample_stages) {
    for (const auto& [name, tensor] : enc.params->t) params.create(name, tensor);
    // decoder init is task-constant: per-seed runs resample data, not heads
    (void)seed;
    Rng rng(derive_seed(fnv1a("seg-head"), fnv1a("seg-init")));
    const int b = enc.config.base_channels;
    if (linear_only) {
      int total = 0;
      for (int i = 0; i <= stages; ++i) total += b << i;
      params.create("seg.linear.w", Tensor::randn({1, total, 1, 1}, rng, std::sqrt(1.0 / total)));
      params.create("seg.linear.b", Tensor::zeros({1}));
    } else {
      for (int i = 0; i < stages; ++i) {
        // upsampled deeper features, concatenated with the encoder skip at
        // this resolution; the full-resolution stem stage is NOT skipped in,
        // so segmentation quality rides on learned representations rather
        // than raw image detail
        const int deep = b << (stages - i);
        const int skip = b << (stages - 1 - i);
        const int in_ch = i + 1 < stages ? deep + skip : deep;
        params.create("seg.dec.up" + std::to_string(i) + ".w",
                      Tensor::randn({skip, in_ch, 3, 3}, rng,
                                    std::sqrt(2.0 / (in_ch * 9.0))));
        params.create("seg.dec.up" + std::to_string(i) + ".b", Tensor::zeros({skip}));
      }
      params.create("seg.head.w", Tensor::randn({1, b, 3, 3}, rng, std::sqrt(1.0 / (b * 9.0))));
      params.create("seg.head.b", Tensor::zeros({1}));
    }
  }

  Var logits(Tape& tape, const Tensor& image, bool train_encoder) const {
    const int res = gen.config().resolution;
    std::vector<Tensor> window(static_cast<std::size_t>(gen.config().window_size),
                               Tensor({res, res}));
    Var stack = gen.build_stack(tape, image, window);
    // deepest grid is the residual-trunk output: the cross-modal features
    auto stage_vars =
        gen.encoder_stages(tape, params, stack, train_encoder && !linear_only, true);
    if (linear_only) {
      // per-pixel linear readout over all stages nearest-upsampled to full res
      std::vector<Var> ups;
      for (std::size_t i = 0; i < stage_vars.size(); ++i) {
        Var f = stage_vars[i];
        for (std::size_t k = 0; k < i; ++k) f = nn::upsample_nearest2x(f);
        ups.push_back(f);
      }
      Var feats = nn::concat_channels(ups);
      return nn::conv2d(feats, tape.param(params, "seg.linear.w", true),
                        tape.param(params, "seg.linear.b", true), 1, 0);
    }
    Var d = stage_vars.back();
    for (int i = 0; i < stages; ++i) {
      Var up = nn::upsample_nearest2x(d);
      Var cat = i + 1 < stages
                    ? nn::concat_channels(
                          {up, stage_vars[static_cast<std::size_t>(stages - 1 - i)]})
                    : up;
      d = nn::relu(nn::instance_norm(
          nn::conv2d(cat, tape.param(params, "seg.dec.up" + std::to_string(i) + ".w", true),
                     tape.param(params, "seg.dec.up" + std::to_string(i) + ".b", true), 1, 1)));
    }
    return nn::conv2d(d, tape.param(params, "seg.head.w", true),
                      tape.param(params, "seg.head.b", true), 1, 1);
  }
};

}  // namespace

SegResult finetune_segmentation(const EncoderHandle& encoder, const SegmentationConfig& cfg,
                                const std::vector<SegSample>& train_pool,
                                const std::vector<SegSample>& test, std::uint64_t seed) {
  require(!test.empty(), "segmentation", "test set is empty");
  require(cfg.shots >= 0, "segmentation", "shots must be >= 0");
  const int res = encoder.config.resolution;
  for (const auto& s : train_pool) {
    require(s.image.ndim() == 3 && s.image.dim(1) == res && s.image.dim(2) == res, "shape",
            "segmentation image resolution mismatch");
    nn::check_same_shape(s.mask, Tensor({res, res}), "segmentation mask");
  }

  // shots=0 keeps the encoder frozen and fits only the linear readout on a
  // single labeled pair; shots>=1 fine-tunes encoder + decoder end-to-end.
  const int use_shots = std::max(1, cfg.shots);
  require(static_cast<int>(train_pool.size()) >= use_shots, "segmentation",
          "not enough labeled pairs for the requested shots");
  std::vector<std::size_t> pool_idx(train_pool.size());
  std::iota(pool_idx.begin(), pool_idx.end(), 0);
  Rng pick_rng(derive_seed(seed, fnv1a("seg-support")));
  pick_rng.shuffle(pool_idx);
  pool_idx.resize(static_cast<std::size_t>(use_shots));

  SegNet net(encoder, cfg.shots == 0, seed);

  std::map<std::string, std::pair<Tensor, Tensor>> moments;
  long tstep = 0;
  auto adam_step = [&](const GradMap& grads, double lr, double encoder_scale) {
    ++tstep;
    const double bc1 = 1.0 - std::pow(0.9, static_cast<double>(tstep));
    const double bc2 = 1.0 - std::pow(0.999, static_cast<double>(tstep));
    for (const auto& [name, g] : grads) {
      Tensor& p = net.params.get(name);
      // discriminative rates: the pretrained trunk adapts slower than the
      // freshly initialized decoder
      const double eff_lr = name.rfind("gen.", 0) == 0 ? lr * encoder_scale : lr;
      auto it = moments.find(name);
      if (it == moments.end())
        it = moments.emplace(name, std::make_pair(Tensor::zeros(p.shape), Tensor::zeros(p.shape)))
                 .first;
      for (std::size_t i = 0; i < p.v.size(); ++i) {
        auto& m = it->second.first.v[i];
        auto& v = it->second.second.v[i];
        m = 0.9 * m + 0.1 * g.v[i];
        v = 0.999 * v + 0.001 * g.v[i] * g.v[i];
        p.v[i] -= eff_lr * (m / bc1) / (std::sqrt(v / bc2) + 1e-8);
      }
    }
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t k = 0; k < pool_idx.size(); ++k) {
      const SegSample& base = train_pool[pool_idx[k]];
      Rng aug_rng(derive_seed(fnv1a("seg-head"), fnv1a("seg-aug"),
                              static_cast<std::uint64_t>(epoch),
                              static_cast<std::uint64_t>(k)));
      const SegSample s = cfg.augment ? augment_sample(base, aug_rng) : base;
      Tape tape;
      Var logits = net.logits(tape, s.image, true);
      Var target = tape.constant(Tensor({1, res, res}, s.mask.v));
      Var loss = nn::bce_with_logits(logits, target);
      tape.backward(loss);
      GradMap grads;
      tape.accumulate_param_grads(grads);
      adam_step(grads, cfg.lr, cfg.encoder_lr_scale);
    }
  }

  // evaluate: pooled pixel AUROC plus mean Dice at 0.5
  std::vector<int> pix_labels;
  std::vector<double> pix_scores;
  double dice_sum = 0.0;
  for (const auto& s : test) {
    Tape tape(false);
    Var logits = net.logits(tape, s.image, false);
    const Tensor& lv = tape.val(logits);
    Tensor pred({res, res});
    for (std::size_t i = 0; i < pred.v.size(); ++i) {
      const double p = 1.0 / (1.0 + std::exp(-lv.v[i]));
      pix_scores.push_back(p);
      pix_labels.push_back(s.mask.v[i] >= 0.5 ? 1 : 0);
      pred.v[i] = p >= 0.5 ? 1.0 : 0.0;
    }
    Tensor truth = s.mask;
    for (auto& v : truth.v) v = v >= 0.5 ? 1.0 : 0.0;
    dice_sum += metrics::dice(pred, truth);
  }
  SegResult r;
  r.auroc = metrics::auroc(pix_labels, pix_scores);
  r.dice = dice_sum / static_cast<double>(test.size());
  return r;
}

// ------------------------------------------------------------------ retrieval

RetrievalResult retrieve(const std::vector<Embedding>& queries,
                         const std::vector<Embedding>& gallery, const std::vector<int>& ks) {
  require(!gallery.empty(), "retrieval", "empty gallery");
  RetrievalResult out;
  std::vector<std::string> query_patient, gallery_patient;
  for (const auto& g : gallery) gallery_patient.push_back(g.patient_id);
  for (const auto& q : queries) {
    query_patient.push_back(q.patient_id);
    std::vector<std::pair<double, int>> scored;
    for (std::size_t j = 0; j < gallery.size(); ++j) {
      if (gallery[j].input_id == q.input_id) continue;  // query never ranks itself
      scored.emplace_back(cosine(q.vector, gallery[j].vector), static_cast<int>(j));
    }
    std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
      return a.first > b.first;  // stable: ties keep gallery order
    });
    std::vector<int> ranking;
    ranking.reserve(scored.size());
    for (const auto& [s, j] : scored) ranking.push_back(j);
    out.rankings.push_back(std::move(ranking));
  }
  out.report = metrics::recall_at_k(out.rankings, query_patient, gallery_patient, ks);
  return out;
}

}  // namespace angio
