#pragma once

#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "tridiff/cli/artifacts.hpp"
#include "tridiff/cli/config.hpp"
#include "tridiff/refine/mesh.hpp"

namespace tridiff::cli {

/// Stage order of the full pipeline. Each name is also its config prefix.
const std::vector<std::string>& stage_names();
/// Direct inputs of a stage.
const std::vector<std::string>& stage_inputs(const std::string& stage);

/// Failure inside one stage; what() starts with "[stage]".
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& what)
      : std::runtime_error("[" + stage + "] " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct PlanEntry {
  std::string stage;
  std::string key;  // empty while an input is not yet built
  bool cached = false;
};

/// Runs stages on demand against an artifact store, reusing any stage whose
/// config and inputs are unchanged.
class Orchestrator {
 public:
  Orchestrator(PipelineConfig cfg, const std::filesystem::path& artifacts, std::ostream& log);

  /// Builds `stage` and everything it depends on.
  ArtifactRecord ensure(const std::string& stage);
  /// The stage's artifact if it and all its inputs are cached; never runs anything.
  std::optional<ArtifactRecord> cached(const std::string& stage) const;
  /// Stages needed for `target`, in execution order, with cache status.
  std::vector<PlanEntry> plan(const std::string& target) const;

  const PipelineConfig& config() const { return cfg_; }
  ArtifactStore& store() { return store_; }
  /// Stages executed and reused by this instance, in order.
  const std::vector<std::string>& executed() const { return executed_; }
  const std::vector<std::string>& reused() const { return reused_; }

 private:
  std::optional<std::string> key_for(const std::string& stage) const;
  nlohmann::json run_stage(const std::string& stage, const std::map<std::string, ArtifactRecord>& inputs,
                           const std::filesystem::path& out);

  PipelineConfig cfg_;
  ArtifactStore store_;
  std::ostream& log_;
  std::vector<std::string> executed_, reused_;
  std::map<std::string, ArtifactRecord> resolved_;
};

/// Evaluation report with the keys listed in `eval_report_keys()`.
nlohmann::json evaluate(Orchestrator& orch);
const std::vector<std::string>& eval_report_keys();
inline constexpr double kVaePsnrThreshold = 26.0;

/// Stage-1 surface: marching cubes of (threshold - density) on an n^3 grid
/// over the unit cube, with decoded vertex colors. The boundary shell counts
/// as empty so the surface is closed. Empty if nothing exceeds
/// the threshold. `max_density` receives the largest lattice density.
refine::Mesh density_mesh(const triplane::TriPlane& tp, const triplane::SharedDecoder& dec, int n, double threshold,
                          double* max_density = nullptr);

/// Flat-shaded render of a mesh's vertex colors over a white background.
num::Tensor render_vertex_colors(const refine::Mesh& mesh, const triplane::Camera& cam);

/// Evenly spaced orbit cameras at the given elevation.
std::vector<triplane::Camera> orbit_cameras(int n, double elevation_deg, int resolution);

}  // namespace tridiff::cli
