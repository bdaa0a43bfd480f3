#include "angio/config.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "angio/error.hpp"

extern char** environ;

namespace angio {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it)
    require(known.count(it.key()) != 0, "bad_config",
            "unknown key '" + (where.empty() ? it.key() : where + "." + it.key()) + "'");
}

template <typename T>
void take(const json& j, const char* key, T& out) {
  if (j.contains(key)) {
    try {
      out = j.at(key).get<T>();
    } catch (const json::exception& e) {
      throw Error("bad_config", std::string("bad value for '") + key + "': " + e.what());
    }
  }
}

void apply_json(RunConfig& cfg, const json& j) {
  reject_unknown(j, {"seed", "out", "data", "model", "discriminator", "train", "objectives",
                     "mask", "probe", "segmentation"},
                 "");
  take(j, "seed", cfg.seed);
  take(j, "out", cfg.out_dir);

  if (j.contains("data")) {
    const json& d = j.at("data");
    reject_unknown(d, {"manifest", "resolution", "phantom_count", "lesion_count", "leakage_mix",
                       "vessel_branching_depth", "noise_level"},
                   "data");
    if (d.contains("manifest")) cfg.manifest = d.at("manifest").get<std::string>();
    take(d, "resolution", cfg.resolution);
    take(d, "phantom_count", cfg.phantom_count);
    take(d, "lesion_count", cfg.phantom.lesion_count);
    take(d, "leakage_mix", cfg.phantom.leakage_mix);
    take(d, "vessel_branching_depth", cfg.phantom.vessel_branching_depth);
    take(d, "noise_level", cfg.phantom.noise_level);
  }
  if (j.contains("model")) {
    const json& m = j.at("model");
    reject_unknown(m, {"base_channels", "downsample_stages", "residual_blocks", "window_size",
                       "frame_count"},
                   "model");
    take(m, "base_channels", cfg.gen.base_channels);
    take(m, "downsample_stages", cfg.gen.downsample_stages);
    take(m, "residual_blocks", cfg.gen.residual_blocks);
    take(m, "window_size", cfg.gen.window_size);
    take(m, "frame_count", cfg.gen.frame_count);
  }
  if (j.contains("discriminator")) {
    const json& d = j.at("discriminator");
    reject_unknown(d, {"scales", "base_channels"}, "discriminator");
    take(d, "scales", cfg.disc.scales);
    take(d, "base_channels", cfg.disc.base_channels);
  }
  if (j.contains("train")) {
    const json& t = j.at("train");
    reject_unknown(t,
                   {"epochs", "batch_size", "generator_lr", "discriminator_lr", "beta1", "beta2",
                    "checkpoint_every", "smoothing", "lr_linear_decay",
                    "feature_matching_weight"},
                   "train");
    take(t, "epochs", cfg.train.epochs);
    take(t, "batch_size", cfg.train.batch_size);
    take(t, "generator_lr", cfg.train.generator_lr);
    take(t, "discriminator_lr", cfg.train.discriminator_lr);
    take(t, "beta1", cfg.train.beta1);
    take(t, "beta2", cfg.train.beta2);
    take(t, "checkpoint_every", cfg.train.checkpoint_every);
    take(t, "smoothing", cfg.train.smoothing);
    take(t, "lr_linear_decay", cfg.train.lr_linear_decay);
    take(t, "feature_matching_weight", cfg.train.feature_matching_weight);
  }
  if (j.contains("objectives")) {
    const json& o = j.at("objectives");
    reject_unknown(o,
                   {"lambda_mask", "lambda_att", "lambda_gan", "patches_per_image", "temperature",
                    "mask_weight_alpha", "l1_weight", "feature_layers"},
                   "objectives");
    take(o, "lambda_mask", cfg.train.weights.lambda_mask);
    take(o, "lambda_att", cfg.train.weights.lambda_att);
    take(o, "lambda_gan", cfg.train.weights.lambda_gan);
    take(o, "patches_per_image", cfg.train.patch.patches_per_image);
    take(o, "temperature", cfg.train.patch.temperature);
    take(o, "mask_weight_alpha", cfg.train.patch.mask_weight_alpha);
    take(o, "l1_weight", cfg.train.patch.l1_weight);
    take(o, "feature_layers", cfg.train.patch.feature_layers);
  }
  if (j.contains("mask")) {
    const json& m = j.at("mask");
    reject_unknown(m, {"mode", "fixed_value", "min_coverage", "open_radius"}, "mask");
    if (m.contains("mode")) {
      const auto mode = m.at("mode").get<std::string>();
      require(mode == "otsu" || mode == "fixed", "bad_config",
              "mask.mode must be 'otsu' or 'fixed'");
      cfg.mask_policy.mode =
          mode == "otsu" ? ThresholdPolicy::Mode::otsu : ThresholdPolicy::Mode::fixed;
    }
    take(m, "fixed_value", cfg.mask_policy.fixed_value);
    take(m, "min_coverage", cfg.mask_policy.min_coverage);
    take(m, "open_radius", cfg.mask_policy.morphological_open_radius);
  }
  if (j.contains("probe")) {
    const json& p = j.at("probe");
    reject_unknown(p,
                   {"epochs", "batch", "warmup_epochs", "lr_peak", "lr_floor", "label_smoothing",
                    "hidden", "seeds", "support_per_class"},
                   "probe");
    take(p, "epochs", cfg.probe.epochs);
    take(p, "batch", cfg.probe.batch);
    take(p, "warmup_epochs", cfg.probe.warmup_epochs);
    take(p, "lr_peak", cfg.probe.lr_peak);
    take(p, "lr_floor", cfg.probe.lr_floor);
    take(p, "label_smoothing", cfg.probe.label_smoothing);
    take(p, "hidden", cfg.probe.hidden);
    take(p, "seeds", cfg.probe.seeds);
    take(p, "support_per_class", cfg.probe.support_per_class);
  }
  if (j.contains("segmentation")) {
    const json& s = j.at("segmentation");
    reject_unknown(s, {"epochs", "resolution", "lr", "augment", "shots", "seeds"},
                   "segmentation");
    take(s, "epochs", cfg.seg.epochs);
    take(s, "resolution", cfg.seg.resolution);
    take(s, "lr", cfg.seg.lr);
    take(s, "augment", cfg.seg.augment);
    take(s, "shots", cfg.seg.shots);
    take(s, "seeds", cfg.seg.seeds);
  }
}

json env_value(const std::string& raw) {
  // numbers and booleans parse as JSON; anything else is a string
  try {
    return json::parse(raw);
  } catch (const json::exception&) {
    return json(raw);
  }
}

void apply_env(RunConfig& cfg, const std::map<std::string, std::string>& env) {
  json overlay = json::object();
  const std::string prefix = kEnvPrefix;
  for (const auto& [key, value] : env) {
    if (key.rfind(prefix, 0) != 0) continue;
    std::string path = key.substr(prefix.size());
    std::transform(path.begin(), path.end(), path.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    const auto cut = path.find('_');
    if (cut == std::string::npos) {
      overlay[path] = env_value(value);
    } else {
      overlay[path.substr(0, cut)][path.substr(cut + 1)] = env_value(value);
    }
  }
  if (!overlay.empty()) apply_json(cfg, overlay);
}

}  // namespace

RunConfig load_run_config(const std::optional<std::filesystem::path>& file,
                          const std::map<std::string, std::string>& env) {
  RunConfig cfg;
  cfg.gen.resolution = cfg.resolution;
  if (file) {
    std::ifstream in(*file);
    require(in.good(), "missing_file", "cannot open config: " + file->string());
    json j;
    try {
      in >> j;
    } catch (const json::exception& e) {
      throw Error("bad_config", std::string("config parse: ") + e.what());
    }
    apply_json(cfg, j);
  }
  apply_env(cfg, env);
  cfg.gen.resolution = cfg.resolution;
  cfg.phantom.resolution = cfg.resolution;
  cfg.train.resolution = cfg.resolution;
  cfg.train.mask_policy = cfg.mask_policy;
  return cfg;
}

std::string run_config_json(const RunConfig& cfg) {
  json j;
  j["seed"] = cfg.seed;
  j["out"] = cfg.out_dir;
  json d;
  if (cfg.manifest) d["manifest"] = *cfg.manifest;
  d["resolution"] = cfg.resolution;
  d["phantom_count"] = cfg.phantom_count;
  d["lesion_count"] = cfg.phantom.lesion_count;
  d["leakage_mix"] = cfg.phantom.leakage_mix;
  d["vessel_branching_depth"] = cfg.phantom.vessel_branching_depth;
  d["noise_level"] = cfg.phantom.noise_level;
  j["data"] = d;
  j["model"] = {{"base_channels", cfg.gen.base_channels},
                {"downsample_stages", cfg.gen.downsample_stages},
                {"residual_blocks", cfg.gen.residual_blocks},
                {"window_size", cfg.gen.window_size},
                {"frame_count", cfg.gen.frame_count}};
  j["discriminator"] = {{"scales", cfg.disc.scales}, {"base_channels", cfg.disc.base_channels}};
  j["train"] = {{"epochs", cfg.train.epochs},
                {"batch_size", cfg.train.batch_size},
                {"generator_lr", cfg.train.generator_lr},
                {"discriminator_lr", cfg.train.discriminator_lr},
                {"beta1", cfg.train.beta1},
                {"beta2", cfg.train.beta2},
                {"checkpoint_every", cfg.train.checkpoint_every},
                {"smoothing", cfg.train.smoothing},
                {"lr_linear_decay", cfg.train.lr_linear_decay},
                {"feature_matching_weight", cfg.train.feature_matching_weight}};
  j["objectives"] = {{"lambda_mask", cfg.train.weights.lambda_mask},
                     {"lambda_att", cfg.train.weights.lambda_att},
                     {"lambda_gan", cfg.train.weights.lambda_gan},
                     {"patches_per_image", cfg.train.patch.patches_per_image},
                     {"temperature", cfg.train.patch.temperature},
                     {"mask_weight_alpha", cfg.train.patch.mask_weight_alpha},
                     {"l1_weight", cfg.train.patch.l1_weight},
                     {"feature_layers", cfg.train.patch.feature_layers}};
  j["mask"] = {{"mode", cfg.mask_policy.mode == ThresholdPolicy::Mode::otsu ? "otsu" : "fixed"},
               {"fixed_value", cfg.mask_policy.fixed_value},
               {"min_coverage", cfg.mask_policy.min_coverage},
               {"open_radius", cfg.mask_policy.morphological_open_radius}};
  j["probe"] = {{"epochs", cfg.probe.epochs},
                {"batch", cfg.probe.batch},
                {"warmup_epochs", cfg.probe.warmup_epochs},
                {"lr_peak", cfg.probe.lr_peak},
                {"lr_floor", cfg.probe.lr_floor},
                {"label_smoothing", cfg.probe.label_smoothing},
                {"hidden", cfg.probe.hidden},
                {"seeds", cfg.probe.seeds},
                {"support_per_class", cfg.probe.support_per_class}};
  j["segmentation"] = {{"epochs", cfg.seg.epochs}, {"resolution", cfg.seg.resolution},
                       {"lr", cfg.seg.lr},         {"augment", cfg.seg.augment},
                       {"shots", cfg.seg.shots},   {"seeds", cfg.seg.seeds}};
  return j.dump(2);
}

void write_resolved_config(const std::filesystem::path& out_dir, const RunConfig& cfg) {
  std::filesystem::create_directories(out_dir);
  std::ofstream out(out_dir / "config.json");
  require(out.good(), "io", "cannot write resolved config under " + out_dir.string());
  out << run_config_json(cfg) << "\n";
}

std::map<std::string, std::string> config_env_snapshot() {
  std::map<std::string, std::string> env;
  for (char** e = environ; e && *e; ++e) {
    const std::string entry(*e);
    const auto eq = entry.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = entry.substr(0, eq);
    if (key.rfind(kEnvPrefix, 0) == 0) env[key] = entry.substr(eq + 1);
  }
  return env;
}

}  // namespace angio
