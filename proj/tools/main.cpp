// angiogen: fundus-to-angiography video generation pipeline.
//
// Subcommands cover the full workflow: phantom data synthesis, GAN training,
// free-running generation, video-quality evaluation, and the downstream
// transfer grid. Every run writes its resolved configuration into the output
// directory; config values layer as file < ANGIOGEN_* environment < flags.

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <future>
#include <iostream>
#include <optional>
#include <sstream>

#include <nlohmann/json.hpp>

#include "angio/config.hpp"
#include "angio/data.hpp"
#include "angio/downstream.hpp"
#include "angio/error.hpp"
#include "angio/image.hpp"
#include "angio/mask.hpp"
#include "angio/metrics.hpp"
#include "angio/model.hpp"
#include "angio/training.hpp"

using namespace angio;
using nlohmann::json;

namespace {

struct CommonFlags {
  std::optional<std::string> config_file;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
};

RunConfig resolve_config(const CommonFlags& flags) {
  std::optional<std::filesystem::path> file;
  if (flags.config_file) file = *flags.config_file;
  RunConfig cfg = load_run_config(file, config_env_snapshot());
  if (flags.seed) cfg.seed = *flags.seed;
  if (flags.out) cfg.out_dir = *flags.out;
  cfg.gen.resolution = cfg.resolution;
  cfg.phantom.resolution = cfg.resolution;
  cfg.train.resolution = cfg.resolution;
  cfg.train.seed = cfg.seed;
  cfg.train.mask_policy = cfg.mask_policy;
  return cfg;
}

void require_empty_or_force(const std::filesystem::path& dir, bool force) {
  if (force || !std::filesystem::exists(dir)) return;
  if (std::filesystem::is_directory(dir) && std::filesystem::is_empty(dir)) return;
  throw Error("out_dir_exists",
              "output directory exists and is not empty (use --force): " + dir.string());
}

std::vector<std::string> parse_split_spec(const std::string& spec, int count) {
  // "train:4,val:2,test:2" -> per-sample split names
  std::vector<std::string> out;
  std::stringstream ss(spec);
  std::string part;
  while (std::getline(ss, part, ',')) {
    const auto colon = part.find(':');
    require(colon != std::string::npos, "bad_config", "bad --splits entry: " + part);
    const std::string name = part.substr(0, colon);
    const int n = std::stoi(part.substr(colon + 1));
    for (int i = 0; i < n; ++i) out.push_back(name);
  }
  require(static_cast<int>(out.size()) == count, "bad_config",
          "--splits must cover exactly --n samples (got " + std::to_string(out.size()) +
              " of " + std::to_string(count) + ")");
  return out;
}

// ------------------------------------------------------------------ phantom

int cmd_phantom(const CommonFlags& flags, int count, const std::string& splits, bool force,
                bool balanced) {
  RunConfig cfg = resolve_config(flags);
  require(count > 0, "empty_dataset", "empty dataset: --n must be positive");
  const std::filesystem::path out = cfg.out_dir;
  require_empty_or_force(out, force);
  std::filesystem::create_directories(out);

  PhantomSpec spec = cfg.phantom;
  spec.seed = cfg.seed;
  std::vector<std::string> split_names;
  if (!splits.empty()) split_names = parse_split_spec(splits, count);
  write_phantom_dataset(out, count, spec, split_names, balanced);
  write_resolved_config(out, cfg);
  std::cout << "wrote " << count << " phantom pairs under " << out.string() << "\n";
  return 0;
}

// -------------------------------------------------------------------- train

int cmd_train(const CommonFlags& flags, const std::string& resume) {
  RunConfig cfg = resolve_config(flags);
  require(cfg.manifest.has_value(), "bad_config", "missing config key: data.manifest");
  const DatasetManifest manifest = load_manifest(*cfg.manifest);

  const std::filesystem::path out = cfg.out_dir;
  std::filesystem::create_directories(out);
  write_resolved_config(out, cfg);
  std::cout << "generator encoder parameters: "
            << Generator::encoder_parameter_count(cfg.gen) << " (total "
            << Generator::total_parameter_count(cfg.gen) << ")\n";

  if (!resume.empty()) {
    Trainer tr = Trainer::from_checkpoint(load_checkpoint(resume), cfg.train);
    tr.fit(manifest, out);
  } else {
    Trainer tr(cfg.gen, cfg.disc, cfg.train);
    tr.init();
    tr.fit(manifest, out);
  }
  std::cout << "training complete; checkpoints and metrics under " << out.string() << "\n";
  return 0;
}

// ----------------------------------------------------------------- generate

int cmd_generate(const CommonFlags& flags, const std::string& checkpoint,
                 const std::string& source_path, bool smooth, int frames) {
  RunConfig cfg = resolve_config(flags);
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  Generator gen(ckpt.gen);
  nn::ParamStore params;
  for (const auto& [name, tensor] : ckpt.params.t)
    if (name.rfind("gen.", 0) == 0) params.create(name, tensor);

  Tensor source = pnm::read_color(source_path);
  source = resize_bilinear(source, ckpt.gen.resolution, ckpt.gen.resolution);

  auto [video, attentions] = gen.rollout(params, source, frames);
  if (smooth) video = temporal_smooth(video);

  const std::filesystem::path out = cfg.out_dir;
  std::filesystem::create_directories(out);
  PairedSample sample;
  sample.patient_id = "generated";
  sample.source.pixels = source;
  sample.target = video;
  save_sample(out / "video", sample, "generated");
  for (std::size_t i = 0; i < attentions.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "attention_%03zu.pgm", i);
    pnm::write_gray(out / "video" / name, attentions[i].map, 8);
  }
  write_resolved_config(out, cfg);
  std::cout << "wrote " << video.frame_count() << " frames under "
            << (out / "video").string() << "\n";
  return 0;
}

// ----------------------------------------------------------------- evaluate

json quality_json(const metrics::VideoQualityReport& q) {
  json j;
  j["fvd"] = std::isfinite(q.fvd) ? json(q.fvd) : json();
  j["ssim"] = q.ssim;
  j["psnr"] = std::isinf(q.psnr) ? json("inf") : json(q.psnr);
  j["perceptual"] = q.perceptual;
  return j;
}

int cmd_evaluate(const CommonFlags& flags, const std::string& checkpoint,
                 const std::string& manifest_path, const std::string& split, bool smooth,
                 bool identity, bool export_masks) {
  RunConfig cfg = resolve_config(flags);
  const DatasetManifest manifest = load_manifest(manifest_path);
  const auto records = manifest.split(split);
  require(!records.empty(), "empty_split", "split has no samples: " + split);

  std::optional<Checkpoint> ckpt;
  if (!identity) {
    require(!checkpoint.empty(), "bad_config", "evaluate needs --checkpoint (or --identity)");
    ckpt = load_checkpoint(checkpoint);
  }
  const int resolution = ckpt ? ckpt->gen.resolution : cfg.resolution;

  std::vector<AngioVideo> real, fake;
  std::vector<std::string> ids;
  std::optional<Generator> gen;
  nn::ParamStore params;
  if (ckpt) {
    gen.emplace(ckpt->gen);
    for (const auto& [name, tensor] : ckpt->params.t)
      if (name.rfind("gen.", 0) == 0) params.create(name, tensor);
  }

  const std::filesystem::path out = cfg.out_dir;
  std::filesystem::create_directories(out);

  for (const ManifestRecord* rec : records) {
    PairedSample s = load_sample(manifest, *rec, resolution);
    if (s.target.frame_count() != 12) s.target = sample_phase_frames(s.target);
    if (export_masks) {
      const KnowledgeMask m = compute_mask(s.target, cfg.mask_policy);
      std::filesystem::create_directories(out / "masks");
      pnm::write_bitmap(out / "masks" / (rec->patient_id + ".pbm"), m.map);
    }
    AngioVideo generated;
    if (gen) {
      auto [video, atts] = gen->rollout(params, s.source.pixels, 12);
      generated = smooth ? temporal_smooth(video) : video;
    } else {
      generated = s.target;  // identity mode: the metrics path checks itself
    }
    real.push_back(std::move(s.target));
    fake.push_back(std::move(generated));
    ids.push_back(rec->patient_id);
  }

  const auto extractor = metrics::default_video_extractor();
  json report;
  report["split"] = split;
  report["per_video"] = json::array();
  for (std::size_t i = 0; i < real.size(); ++i) {
    double s = 0.0, p = 0.0, lp = 0.0;
    for (int t = 0; t < real[i].frame_count(); ++t) {
      s += metrics::ssim(real[i].frames[static_cast<std::size_t>(t)],
                         fake[i].frames[static_cast<std::size_t>(t)]);
      p += metrics::psnr(real[i].frames[static_cast<std::size_t>(t)],
                         fake[i].frames[static_cast<std::size_t>(t)]);
      lp += metrics::perceptual_distance(real[i].frames[static_cast<std::size_t>(t)],
                                         fake[i].frames[static_cast<std::size_t>(t)]);
    }
    const double n = real[i].frame_count();
    json row;
    row["id"] = ids[i];
    row["ssim"] = s / n;
    row["psnr"] = std::isinf(p / n) ? json("inf") : json(p / n);
    row["perceptual"] = lp / n;
    report["per_video"].push_back(row);
  }
  metrics::VideoQualityReport agg;
  if (real.size() >= 2) {
    agg = metrics::evaluate_videos(real, fake, extractor);
  } else {
    agg.ssim = report["per_video"][0]["ssim"].get<double>();
    agg.psnr = report["per_video"][0]["psnr"].is_string()
                   ? std::numeric_limits<double>::infinity()
                   : report["per_video"][0]["psnr"].get<double>();
    agg.perceptual = report["per_video"][0]["perceptual"].get<double>();
    agg.fvd = std::numeric_limits<double>::quiet_NaN();
  }
  report["aggregate"] = quality_json(agg);

  std::ofstream(out / "evaluation.json") << report.dump(2) << "\n";
  std::ofstream table(out / "results.csv");
  table << "metric,split,seed,value\n";
  table << "fvd," << split << "," << cfg.seed << ","
        << (std::isfinite(agg.fvd) ? std::to_string(agg.fvd) : "nan") << "\n";
  table << "ssim," << split << "," << cfg.seed << "," << agg.ssim << "\n";
  table << "psnr," << split << "," << cfg.seed << ","
        << (std::isinf(agg.psnr) ? "inf" : std::to_string(agg.psnr)) << "\n";
  table << "perceptual," << split << "," << cfg.seed << "," << agg.perceptual << "\n";
  write_resolved_config(out, cfg);

  std::cout << report["aggregate"].dump() << "\n";
  return 0;
}

// --------------------------------------------------------------- downstream

struct GridRow {
  std::string task;
  std::string mode = "few_shot";
  std::vector<int> shots = {1};
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  std::string manifest;
  std::string encoder;
  std::string encoder_b;  // supervised fusion comparator
  int line_no = 0;
};

GridRow parse_grid_row(const json& j, int line_no) {
  static const std::set<std::string> known = {"task", "mode", "shots", "seeds",
                                              "manifest", "encoder", "encoder_b"};
  for (auto it = j.begin(); it != j.end(); ++it)
    require(known.count(it.key()) != 0, "bad_grid",
            "grid line " + std::to_string(line_no) + ": unknown key '" + it.key() + "'");
  GridRow row;
  row.line_no = line_no;
  try {
    row.task = j.at("task").get<std::string>();
    row.manifest = j.at("manifest").get<std::string>();
    row.encoder = j.at("encoder").get<std::string>();
    if (j.contains("mode")) row.mode = j.at("mode").get<std::string>();
    if (j.contains("shots")) row.shots = j.at("shots").get<std::vector<int>>();
    if (j.contains("seeds")) row.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (j.contains("encoder_b")) row.encoder_b = j.at("encoder_b").get<std::string>();
  } catch (const json::exception& e) {
    throw Error("bad_grid", "grid line " + std::to_string(line_no) + ": " + e.what());
  }
  require(row.task == "classify_lesion" || row.task == "segment_vessel" ||
              row.task == "retrieve_crossmodal",
          "bad_grid", "grid line " + std::to_string(line_no) + ": unknown task " + row.task);
  return row;
}

EncoderHandle make_encoder(const std::string& spec, const RunConfig& cfg) {
  if (spec.rfind("ckpt:", 0) == 0)
    return encoder_from_checkpoint(load_checkpoint(spec.substr(5)));
  if (spec.rfind("random:", 0) == 0) {
    GeneratorConfig g = cfg.gen;
    g.resolution = cfg.resolution;
    return random_encoder(g, std::stoull(spec.substr(7)));
  }
  throw Error("bad_grid", "encoder spec must be ckpt:<path> or random:<seed>: " + spec);
}

struct ResultRow {
  std::string task, mode;
  int shots = 0;
  std::uint64_t seed = 0;
  std::string metric;
  double value = 0.0;
};

// Shared per-task data preparation: samples, labels, vessel masks.
struct TaskData {
  std::vector<ImageInput> inputs;      // CF sources
  std::vector<int> lesion_labels;      // 1 when the phantom carries lesions
  std::vector<SegSample> seg_samples;  // CF + vessel truth
  std::vector<ImageInput> ffa_inputs;  // venous-peak FFA frames (retrieval gallery)
};

TaskData load_task_data(const std::string& manifest_path, int resolution) {
  const DatasetManifest manifest = load_manifest(manifest_path);
  TaskData d;
  for (const auto& rec : manifest.records) {
    PairedSample s = load_sample(manifest, rec, resolution);
    if (s.target.frame_count() != 12) s.target = sample_phase_frames(s.target);
    d.inputs.push_back({s.source.pixels, rec.source_path, rec.patient_id});
    d.lesion_labels.push_back(s.lesion_truth && s.lesion_truth->sum() > 0.0 ? 1 : 0);
    d.seg_samples.push_back({s.source.pixels, derive_vessel_mask(s), rec.patient_id});
    // venous-peak frame, channel-promoted, same patient id
    const Tensor& venous = s.target.frames[5];
    d.ffa_inputs.push_back(
        {to_encoder_input(venous, resolution), rec.source_path + "#ffa", rec.patient_id});
  }
  return d;
}

std::vector<ResultRow> run_cell(const GridRow& row, const RunConfig& cfg,
                                const std::filesystem::path& cache_dir) {
  const EncoderHandle enc = make_encoder(row.encoder, cfg);
  const std::uint64_t fp_before = enc.fingerprint();
  const TaskData data = load_task_data(row.manifest, enc.resolution);
  // embeddings cached per cell, keyed by (encoder id, input hash)
  EmbeddingCache cache(cache_dir);
  std::vector<ResultRow> rows;

  auto split_pools = [&](std::uint64_t seed) {
    // reference/train pool = train+val patients, evaluation pool = test
    const auto s = split_by_patient(data.inputs, cfg.probe.train_ratio, cfg.probe.val_ratio,
                                    seed);
    std::vector<std::size_t> pool = s[0];
    pool.insert(pool.end(), s[1].begin(), s[1].end());
    std::sort(pool.begin(), pool.end());
    return std::make_pair(pool, s[2]);
  };

  if (row.task == "classify_lesion") {
    for (std::uint64_t seed : row.seeds) {
      // stratified so both classes reach the reference and test pools
      const auto s = stratified_split_by_patient(data.inputs, data.lesion_labels,
                                                 cfg.probe.train_ratio, cfg.probe.val_ratio,
                                                 seed);
      std::vector<std::size_t> pool_idx = s[0];
      pool_idx.insert(pool_idx.end(), s[1].begin(), s[1].end());
      std::sort(pool_idx.begin(), pool_idx.end());
      const std::vector<std::size_t>& test_idx = s[2];
      require(!pool_idx.empty() && !test_idx.empty(), "bad_grid",
              "classification split degenerated; add samples");
      auto select = [&](const std::vector<std::size_t>& idx) {
        std::vector<ImageInput> ins;
        std::vector<int> ls;
        for (std::size_t i : idx) {
          ins.push_back(data.inputs[i]);
          ls.push_back(data.lesion_labels[i]);
        }
        return std::make_pair(ins, ls);
      };
      const auto [pool_inputs, pool_labels] = select(pool_idx);
      const auto [test_inputs, test_labels] = select(test_idx);
      const auto pool_emb = extract_embeddings(enc, pool_inputs, &cache);
      const auto test_emb = extract_embeddings(enc, test_inputs, &cache);

      if (row.mode == "zero_shot") {
        const auto scores = zero_shot_classify(test_emb, pool_emb, pool_labels, 2);
        std::vector<double> s1;
        for (const auto& r : scores) s1.push_back(r[1]);
        rows.push_back({row.task, row.mode, 0, seed, "auroc",
                        metrics::auroc(test_labels, s1)});
        rows.push_back({row.task, row.mode, 0, seed, "aupr", metrics::aupr(test_labels, s1)});
      } else if (row.mode == "few_shot") {
        for (int shot : row.shots) {
          ProbeConfig pc = cfg.probe;
          pc.support_per_class = shot;
          pc.seeds = {seed};
          const auto scores =
              few_shot_train(pool_emb, pool_labels, test_emb, test_labels, 2, pc);
          rows.push_back({row.task, row.mode, shot, seed, "auroc", scores.auroc_per_seed[0]});
          rows.push_back({row.task, row.mode, shot, seed, "aupr", scores.aupr_per_seed[0]});
        }
      } else if (row.mode == "supervised") {
        require(!row.encoder_b.empty(), "bad_grid",
                "supervised mode needs encoder_b for the fusion head");
        const EncoderHandle enc_b = make_encoder(row.encoder_b, cfg);
        const FusedResult r = supervised_train_fused(enc, enc_b, data.inputs,
                                                     data.lesion_labels, 2, cfg.probe, seed);
        rows.push_back({row.task, row.mode, 0, seed, "auroc", r.test_auroc});
        rows.push_back({row.task, row.mode, 0, seed, "aupr", r.test_aupr});
      } else {
        throw Error("bad_grid", "unknown classification mode: " + row.mode);
      }
    }
  } else if (row.task == "segment_vessel") {
    for (int shot : row.shots) {
      for (std::uint64_t seed : row.seeds) {
        const auto [pool_idx, test_idx] = split_pools(seed);
        std::vector<SegSample> pool, test;
        for (std::size_t i : pool_idx) pool.push_back(data.seg_samples[i]);
        for (std::size_t i : test_idx) test.push_back(data.seg_samples[i]);
        SegmentationConfig sc = cfg.seg;
        sc.shots = shot;
        sc.resolution = enc.resolution;
        const SegResult r = finetune_segmentation(enc, sc, pool, test, seed);
        rows.push_back({row.task, "finetune", shot, seed, "auroc", r.auroc});
        rows.push_back({row.task, "finetune", shot, seed, "dice", r.dice});
      }
    }
  } else {  // retrieve_crossmodal
    for (std::uint64_t seed : row.seeds) {
      (void)seed;  // retrieval is training-free; seed names the run
      const auto queries = extract_embeddings(enc, data.inputs, &cache);
      const auto gallery = extract_embeddings(enc, data.ffa_inputs, &cache);
      const RetrievalResult r = retrieve(queries, gallery);
      rows.push_back({row.task, "zero_shot", 0, seed, "recall@1", r.report.recall_at.at(1)});
      rows.push_back({row.task, "zero_shot", 0, seed, "recall@5", r.report.recall_at.at(5)});
      rows.push_back({row.task, "zero_shot", 0, seed, "recall@10", r.report.recall_at.at(10)});
      rows.push_back({row.task, "zero_shot", 0, seed, "mean_recall", r.report.mean_recall});
    }
  }

  require(enc.fingerprint() == fp_before, "freeze",
          "encoder parameters changed during a frozen-path run");
  return rows;
}

int cmd_downstream(const CommonFlags& flags, const std::string& grid_path, int jobs) {
  RunConfig cfg = resolve_config(flags);
  std::ifstream in(grid_path);
  require(in.good(), "missing_file", "cannot open grid file: " + grid_path);

  std::vector<GridRow> grid;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw Error("bad_grid", "grid line " + std::to_string(line_no) + ": " + e.what());
    }
    grid.push_back(parse_grid_row(j, line_no));
  }
  require(!grid.empty(), "bad_grid", "grid file has no rows");

  // fan cells out to a bounded pool; results keep declaration order
  std::vector<std::vector<ResultRow>> cell_rows(grid.size());
  const int pool = std::max(1, jobs);
  std::size_t next = 0;
  while (next < grid.size()) {
    std::vector<std::pair<std::size_t, std::future<std::vector<ResultRow>>>> inflight;
    for (int k = 0; k < pool && next < grid.size(); ++k, ++next) {
      const GridRow& row = grid[next];
      const auto cache_dir = std::filesystem::path(cfg.out_dir) / "emb_cache" /
                             ("cell" + std::to_string(next));
      inflight.emplace_back(next, std::async(std::launch::async, [&row, &cfg, cache_dir] {
                              return run_cell(row, cfg, cache_dir);
                            }));
    }
    for (auto& [idx, fut] : inflight) cell_rows[idx] = fut.get();
  }

  const std::filesystem::path out = cfg.out_dir;
  std::filesystem::create_directories(out);
  std::ofstream table(out / "results.csv");
  table << "task,mode,shots,seed,metric,value\n";
  std::map<std::string, std::vector<double>> by_cell;
  for (const auto& rows : cell_rows)
    for (const auto& r : rows) {
      table << r.task << "," << r.mode << "," << r.shots << "," << r.seed << "," << r.metric
            << "," << r.value << "\n";
      by_cell[r.task + "," + r.mode + "," + std::to_string(r.shots) + "," + r.metric]
          .push_back(r.value);
    }

  std::ofstream summaries(out / "summaries.jsonl");
  for (const auto& [key, values] : by_cell) {
    json j;
    j["cell"] = key;
    j["runs"] = values.size();
    if (values.size() >= 2) {
      const auto s = metrics::summarize(values);
      j["mean"] = s.mean;
      j["ci95_low"] = s.ci95_low;
      j["ci95_high"] = s.ci95_high;
      j["se"] = s.se;
    } else {
      j["mean"] = values.empty() ? 0.0 : values[0];
    }
    summaries << j.dump() << "\n";
  }
  write_resolved_config(out, cfg);
  std::cout << "downstream grid complete: " << out.string() << "/results.csv\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fundus-to-angiography video generation pipeline"};
  app.require_subcommand(1);

  CommonFlags flags;
  app.add_option("--config", flags.config_file, "JSON config file")->expected(1);
  app.add_option("--seed", flags.seed, "override config seed");
  app.add_option("--out", flags.out, "override output directory");

  // phantom
  auto* phantom = app.add_subcommand("phantom", "synthesize a paired phantom dataset");
  int phantom_n = 4;
  std::string phantom_splits;
  bool phantom_force = false;
  phantom->add_option("--n", phantom_n, "number of paired samples");
  phantom->add_option("--splits", phantom_splits, "per-split counts, e.g. train:3,val:1");
  phantom->add_flag("--force", phantom_force, "overwrite a non-empty output directory");
  bool phantom_balanced = false;
  phantom->add_flag("--balanced", phantom_balanced,
                    "alternate lesioned / lesion-free samples (classification labels)");

  // train
  auto* train = app.add_subcommand("train", "teacher-forced GAN training");
  std::string resume;
  train->add_option("--resume", resume, "resume from a training checkpoint");

  // generate
  auto* generate = app.add_subcommand("generate", "free-running video generation");
  std::string gen_ckpt, gen_source;
  bool gen_smooth = false;
  int gen_frames = 12;
  generate->add_option("--checkpoint", gen_ckpt, "model checkpoint")->required();
  generate->add_option("--source", gen_source, "source fundus image (PPM)")->required();
  generate->add_flag("--smooth", gen_smooth, "apply triple-frame averaging");
  generate->add_option("--frames", gen_frames, "frames to generate");

  // evaluate
  auto* evaluate = app.add_subcommand("evaluate", "video-quality metrics over a split");
  std::string eval_ckpt, eval_manifest, eval_split = "test";
  bool eval_smooth = false, eval_identity = false, eval_masks = false;
  evaluate->add_option("--checkpoint", eval_ckpt, "model checkpoint");
  evaluate->add_option("--manifest", eval_manifest, "dataset manifest")->required();
  evaluate->add_option("--split", eval_split, "manifest split to evaluate");
  evaluate->add_flag("--smooth", eval_smooth, "apply triple-frame averaging");
  evaluate->add_flag("--identity", eval_identity,
                     "score ground truth against itself (metrics self-check)");
  evaluate->add_flag("--export-masks", eval_masks, "write knowledge masks as PBM");

  // downstream
  auto* downstream = app.add_subcommand("downstream", "transfer-task grid");
  std::string grid_path;
  int jobs = 1;
  downstream->add_option("--grid", grid_path, "JSONL grid file")->required();
  downstream->add_option("--jobs", jobs, "parallel grid cells");

  CLI11_PARSE(app, argc, argv);

  try {
    if (phantom->parsed())
      return cmd_phantom(flags, phantom_n, phantom_splits, phantom_force, phantom_balanced);
    if (train->parsed()) return cmd_train(flags, resume);
    if (generate->parsed())
      return cmd_generate(flags, gen_ckpt, gen_source, gen_smooth, gen_frames);
    if (evaluate->parsed())
      return cmd_evaluate(flags, eval_ckpt, eval_manifest, eval_split, eval_smooth,
                          eval_identity, eval_masks);
    if (downstream->parsed()) return cmd_downstream(flags, grid_path, jobs);
  } catch (const Error& e) {
    std::cerr << "[E:" << e.code() << "] " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "[E:internal] " << e.what() << "\n";
    return 1;
  }
  return 0;
}
