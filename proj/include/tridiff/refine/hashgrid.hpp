#pragma once

#include "tridiff/numerics/mlp.hpp"
#include "tridiff/numerics/rng.hpp"
#include "tridiff/numerics/vec3.hpp"

namespace tridiff::refine {

struct HashGridConfig {
  int levels = 8;
  int log2_table = 14;
  int features = 2;
  int base_resolution = 4;
  double growth = 1.5;
  int hidden = 32;
  Vec3 lo{-1, -1, -1};
  Vec3 hi{1, 1, 1};

  void validate() const;
  std::int64_t table_size() const { return std::int64_t{1} << log2_table; }
  int resolution(int level) const;
  int encoding_width() const { return levels * features; }
};

/// Multiresolution hashed feature tables decoded by a one-hidden-layer MLP
/// into sigmoid RGB.
struct HashGridTexture {
  HashGridConfig config;
  num::Tensor table;  // (levels * table_size) x features
  num::Mlp head;      // encoding_width -> hidden -> 3

  static HashGridTexture create(const HashGridConfig& cfg, num::Rng& rng);
  /// Table first, then the head's weights and biases.
  std::vector<num::Tensor*> params();
  std::vector<const num::Tensor*> params() const;
};

struct HashGridVars {
  num::Var table;
  num::MlpVars head;
};
HashGridVars bind(num::Tape& tape, const HashGridTexture& tex, bool trainable);

/// Per level, trilinear blend of the 8 corner features of the cell holding
/// each point; levels concatenate into N x (levels * features). Coarse levels
/// whose lattice fits the table index it densely; finer ones use the spatial
/// hash. Points are clamped into [lo, hi]. Differentiable wrt the table and
/// wrt xyz inside the box.
num::Var hash_encode(num::Var table, num::Var xyz, const HashGridConfig& cfg);
/// N x 3 points -> N x 3 RGB in [0, 1].
num::Var hash_lookup(const HashGridVars& vars, const HashGridConfig& cfg, num::Var xyz);
num::Tensor hash_lookup(const HashGridTexture& tex, const num::Tensor& xyz);

}  // namespace tridiff::refine
