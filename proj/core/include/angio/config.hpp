#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>

#include "angio/data.hpp"
#include "angio/downstream.hpp"
#include "angio/mask.hpp"
#include "angio/model.hpp"
#include "angio/training.hpp"

namespace angio {

// Merged run settings. Every field defaults; layering is file < environment
// (ANGIOGEN_SECTION_KEY) < command-line flags. Unknown keys are rejected and
// the fully-resolved view is written into the output directory.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string out_dir = "out";

  std::optional<std::string> manifest;  // data.manifest
  int resolution = 64;                  // data.resolution
  int phantom_count = 8;                // data.phantom_count
  PhantomSpec phantom;

  GeneratorConfig gen;
  DiscriminatorConfig disc;
  TrainConfig train;
  ThresholdPolicy mask_policy;
  ProbeConfig probe;
  SegmentationConfig seg;
};

inline constexpr const char* kEnvPrefix = "ANGIOGEN_";

// Parses the JSON config file (when given), then overlays environment
// variables with the ANGIOGEN_ prefix. Flag-level overrides happen in the CLI.
RunConfig load_run_config(const std::optional<std::filesystem::path>& file,
                          const std::map<std::string, std::string>& env);

// Canonical JSON of the resolved config.
std::string run_config_json(const RunConfig& cfg);
void write_resolved_config(const std::filesystem::path& out_dir, const RunConfig& cfg);

// Environment snapshot filtered to the config prefix.
std::map<std::string, std::string> config_env_snapshot();

}  // namespace angio
