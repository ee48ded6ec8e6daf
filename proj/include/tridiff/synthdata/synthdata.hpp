#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "tridiff/numerics/rng.hpp"
#include "tridiff/triplane/camera.hpp"

namespace tridiff::synth {

enum class Kind { Sphere, Box, Torus, Compound };

std::string kind_name(Kind k);
Kind kind_from_name(const std::string& name);

/// One analytic shape. size: sphere radius in x; box half extents; torus
/// major radius in x and tube radius in y (ring in the xz-plane).
struct Primitive {
  Kind kind = Kind::Sphere;
  Vec3 center;
  Vec3 size;
  Vec3 albedo;
  std::string color;

  double sdf(const Vec3& p) const;
  double volume() const;
};

struct ProceduralObject {
  Kind kind = Kind::Sphere;
  std::vector<Primitive> parts;  // one part, or two for a compound
  std::uint64_t seed = 0;

  /// Union of the parts' distance functions; +inf for an empty object.
  double sdf(const Vec3& p) const;
  /// Albedo of the part closest to p.
  Vec3 albedo_at(const Vec3& p) const;
  /// Color name of the largest part.
  std::string dominant_color() const;
  /// Template caption, e.g. "a red torus" or "a red compound of a sphere and a box".
  std::string caption() const;
};

struct PaletteEntry {
  const char* name;
  Vec3 rgb;
};
const std::vector<PaletteEntry>& palette();
Vec3 palette_color(const std::string& name);

ProceduralObject make_primitive(Kind kind, const Vec3& size, const std::string& color, const Vec3& center = {});
/// Deterministic random object from a seed; always fits inside the unit cube.
ProceduralObject sample_object(std::uint64_t seed);

/// H x W x 3 image in [0, 1]: sphere-traced analytic surface, albedo under a
/// fixed overhead light plus ambient term, white background, 2 x 2
/// supersampling per pixel.
num::Tensor render_gt(const ProceduralObject& obj, const triplane::Camera& cam);

nlohmann::json object_to_json(const ProceduralObject& obj);
ProceduralObject object_from_json(const nlohmann::json& j);
nlohmann::json camera_to_json(const triplane::Camera& cam);
triplane::Camera camera_from_json(const nlohmann::json& j);

/// Camera on the radius-2.5, fov-49.1 orbit with elevation in [-30, 60] deg
/// and uniform azimuth.
triplane::Camera sample_camera(num::Rng& rng, int resolution);

struct View {
  std::string image;  // path relative to the manifest directory
  triplane::Camera camera;
};

struct ManifestEntry {
  std::string id;
  std::string caption;
  std::string split = "train";
  std::string quality = "high";
  int resolution = 32;
  ProceduralObject object;
  std::vector<View> views;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
};

struct BuildOptions {
  int n_objects = 8;
  int n_views = 10;
  int resolution = 32;
  std::uint64_t seed = 0;
  double val_fraction = 0.0;  // trailing objects assigned to the val split
  /// Explicit objects; when non-empty they replace seeded sampling and
  /// n_objects is ignored.
  std::vector<ProceduralObject> objects;
};

inline constexpr const char* kManifestFile = "manifest.jsonl";

/// Renders every view to <out_dir>/images/<id>_<view>.ppm and writes
/// <out_dir>/manifest.jsonl, one row per object.
DatasetManifest build_manifest(const BuildOptions& opts, const std::filesystem::path& out_dir);
DatasetManifest read_manifest(const std::filesystem::path& manifest_path);
nlohmann::json entry_to_json(const ManifestEntry& e);
ManifestEntry entry_from_json(const nlohmann::json& j);
/// Entries whose quality flag is "high".
DatasetManifest filter_quality(const DatasetManifest& m);

/// Two visually distinct classes: red spheres and blue boxes of varied size,
/// alternating, n_per_class each.
std::vector<ProceduralObject> two_class_objects(int n_per_class, std::uint64_t seed);

// Binary PPM (P6), 8-bit, for H x W x 3 tensors in [0, 1].
void write_ppm(const std::filesystem::path& path, const num::Tensor& image);
num::Tensor read_ppm(const std::filesystem::path& path);

}  // namespace tridiff::synth
