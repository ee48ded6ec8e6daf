#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "tridiff/diffusion/diffusion.hpp"
#include "tridiff/fitting/fitting.hpp"
#include "tridiff/refine/refine.hpp"
#include "tridiff/vae/vae.hpp"

namespace tridiff::cli {

struct DataConfig {
  std::string source = "two_class";  // "two_class" (red spheres, blue boxes) or "random"
  int objects = 4;
  int views = 10;
  int resolution = 32;
};

struct SampleConfig {
  std::string prompt = "a red sphere";
  int count = 1;
  int ddim_steps = 50;
  double guidance = 3.0;
  int render_views = 4;  // preview renders per sample
};

struct RefineStageConfig {
  refine::RefineConfig refine;
  /// Iso-level of the stage-1 density used to extract the input mesh.
  double density_threshold = 2.0;
  int stage1_grid = 32;
  /// Stage-1 renders used for texture initialization and as the score mean.
  int reference_views = 8;
  double sigma_d = 0.0;
  int codec_factor = 4;
};

/// Every stage's hyperparameters. Serialized as flat "dotted.key = value"
/// lines; strings are JSON-quoted so the text round-trips losslessly.
struct PipelineConfig {
  std::string profile = "desk";
  std::uint64_t seed = 0;
  DataConfig data;
  fit::FitConfig fit;
  vae::VaeConfig vae;
  diffusion::LdmConfig ldm;
  SampleConfig sample;
  RefineStageConfig refine;

  /// "desk" (default), "smoke" (seconds, for tests) or "full" (full-scale
  /// settings; valid but not meant to run on a desktop).
  static PipelineConfig from_profile(const std::string& name);
  static std::vector<std::string> profiles();

  std::string to_text() const;
  /// Starts from the profile named in the text (desk if absent) and applies
  /// every key. Unknown or duplicate keys throw ConfigError with the line.
  static PipelineConfig from_text(const std::string& text);
  static PipelineConfig load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static std::vector<std::string> keys();

  /// Keys under "<stage>." plus the seed, as text; the stage's cache key.
  std::string stage_text(const std::string& stage) const;

  void validate() const;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace tridiff::cli
