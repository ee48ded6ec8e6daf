#pragma once

#include <array>
#include <filesystem>

#include "tridiff/numerics/mlp.hpp"
#include "tridiff/numerics/tape.hpp"
#include "tridiff/numerics/vec3.hpp"

namespace tridiff::triplane {

inline constexpr float kValueBound = 5.0f;

enum PlaneIndex { kXY = 0, kYZ = 1, kXZ = 2 };

/// Three axis-aligned feature planes, each C x R x R. Channels [0, split)
/// feed the color decoder, [split, C) the density decoder.
struct TriPlane {
  std::array<num::Tensor, 3> planes;
  int split = 0;

  static TriPlane zeros(int channels, int resolution, int split);

  int channels() const { return static_cast<int>(planes[0].dim(0)); }
  int resolution() const { return static_cast<int>(planes[0].dim(1)); }
  /// Throws ShapeError if the planes disagree or the split is out of range.
  void validate() const;
  std::array<num::Tensor*, 3> params() { return {&planes[0], &planes[1], &planes[2]}; }
};

/// Plane coordinates of a point: xy -> (x, y), yz -> (y, z), xz -> (x, z).
std::array<std::array<double, 2>, 3> project_point(const Vec3& p);

TriPlane clamp_triplane(TriPlane tp, float bound = kValueBound);
void clamp_in_place(TriPlane& tp, float bound = kValueBound);

struct TriPlaneVars {
  std::array<num::Var, 3> planes;
  int split = 0;
};
TriPlaneVars bind(num::Tape& tape, const TriPlane& tp, bool trainable);

/// Sum over planes of mean squared horizontal plus mean squared vertical
/// neighbour differences.
num::Var tv_loss(const TriPlaneVars& tp);
/// Mean absolute value over every plane entry.
num::Var l1_loss(const TriPlaneVars& tp);
float tv_loss(const TriPlane& tp);
float l1_loss(const TriPlane& tp);

enum class DecoderKind {
  Disentangled,  // separate color and density MLPs on their own channels
  Single,        // one MLP on all channels emitting rgb and density
};

struct DecoderConfig {
  DecoderKind kind = DecoderKind::Disentangled;
  int hidden = 64;
  int layers = 3;
  /// Initial density output bias; negative starts the field near-empty.
  float density_bias = -3.0f;
};

struct SharedDecoder {
  DecoderKind kind = DecoderKind::Disentangled;
  int channels = 0;
  int split = 0;
  num::Mlp color;    // Single kind: the only MLP, 4 outputs
  num::Mlp density;  // unused for Single kind

  static SharedDecoder create(int channels, int split, const DecoderConfig& cfg, num::Rng& rng);
  std::vector<num::Tensor*> params();
};

struct DecoderVars {
  DecoderKind kind = DecoderKind::Disentangled;
  num::MlpVars color, density;
};
DecoderVars bind(num::Tape& tape, const SharedDecoder& dec, bool trainable);

struct FieldSample {
  num::Var rgb;    // N x 3, in [0, 1]
  num::Var sigma;  // N x 1, >= 0
};

/// Decodes points (xyz as N x 3, row-major) through bilinear plane lookups.
FieldSample decode_points(const TriPlaneVars& tp, const DecoderVars& dec, const std::vector<float>& xyz);

struct PointValue {
  std::array<float, 3> rgb;
  float sigma;
};
PointValue decode_point(const TriPlane& tp, const SharedDecoder& dec, const Vec3& xyz);
/// Batched decode_point over xyz (N x 3, row-major), chunked and run in
/// parallel. Same values as per-point calls.
std::vector<PointValue> decode_batch(const TriPlane& tp, const SharedDecoder& dec, const std::vector<float>& xyz);

// Three TTNS files (<path>.xy.ttns etc.) plus <path>.json with
// {channels, split, resolution}.
void save_triplane(const std::filesystem::path& path, const TriPlane& tp);
TriPlane load_triplane(const std::filesystem::path& path);
void save_decoder(const std::filesystem::path& path, const SharedDecoder& dec);
SharedDecoder load_decoder(const std::filesystem::path& path);

}  // namespace tridiff::triplane
