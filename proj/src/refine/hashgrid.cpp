#include "tridiff/refine/hashgrid.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "tridiff/numerics/ops.hpp"

namespace tridiff::refine {

using num::Tensor;
using num::Var;

void HashGridConfig::validate() const {
  if (levels < 1 || features < 1 || base_resolution < 1 || hidden < 1) {
    throw std::invalid_argument("hash grid: levels, features, base resolution and hidden width must be positive");
  }
  if (log2_table < 4 || log2_table > 26) throw std::invalid_argument("hash grid: log2_table must be in [4, 26]");
  if (!(growth >= 1.0)) throw std::invalid_argument("hash grid: growth must be >= 1");
  if (!(hi.x > lo.x && hi.y > lo.y && hi.z > lo.z)) throw std::invalid_argument("hash grid: empty bounding box");
}

int HashGridConfig::resolution(int level) const {
  return static_cast<int>(std::floor(base_resolution * std::pow(growth, level)));
}

HashGridTexture HashGridTexture::create(const HashGridConfig& cfg, num::Rng& rng) {
  cfg.validate();
  HashGridTexture tex;
  tex.config = cfg;
  tex.table = rng.uniform_tensor({cfg.levels * cfg.table_size(), cfg.features}, -1e-4f, 1e-4f);
  tex.head = num::Mlp::create({cfg.encoding_width(), cfg.hidden, 3}, rng);
  return tex;
}

std::vector<Tensor*> HashGridTexture::params() {
  std::vector<Tensor*> out{&table};
  for (Tensor* p : head.params()) out.push_back(p);
  return out;
}

std::vector<const Tensor*> HashGridTexture::params() const {
  auto mut = const_cast<HashGridTexture*>(this)->params();
  return {mut.begin(), mut.end()};
}

HashGridVars bind(num::Tape& tape, const HashGridTexture& tex, bool trainable) {
  return {trainable ? tape.param(tex.table) : tape.constant(tex.table), num::bind(tape, tex.head, trainable)};
}

namespace {

struct Cell {
  std::int64_t rows[8];
  double frac[3];
  double scale[3];  // d(cell coordinate)/d(xyz); zero when clamped
};

Cell locate(const HashGridConfig& cfg, int level, const float* p) {
  const int res = cfg.resolution(level);
  const std::int64_t t = cfg.table_size();
  const bool dense = std::int64_t{res + 1} * (res + 1) * (res + 1) <= t;
  Cell c;
  std::int64_t base[3];
  for (int a = 0; a < 3; ++a) {
    const double span = cfg.hi[a] - cfg.lo[a];
    const double u = (p[a] - cfg.lo[a]) / span;
    const bool inside = u >= 0.0 && u <= 1.0;
    const double x = std::clamp(u, 0.0, 1.0) * res;
    base[a] = std::min<std::int64_t>(static_cast<std::int64_t>(std::floor(x)), res - 1);
    c.frac[a] = x - static_cast<double>(base[a]);
    c.scale[a] = inside ? res / span : 0.0;
  }
  for (int k = 0; k < 8; ++k) {
    const std::uint64_t i = static_cast<std::uint64_t>(base[0] + (k & 1));
    const std::uint64_t j = static_cast<std::uint64_t>(base[1] + ((k >> 1) & 1));
    const std::uint64_t l = static_cast<std::uint64_t>(base[2] + ((k >> 2) & 1));
    std::uint64_t idx;
    if (dense) {
      idx = i + j * (res + 1) + l * (res + 1) * (res + 1);
    } else {
      idx = (i ^ (j * 2654435761ull) ^ (l * 805459861ull)) & static_cast<std::uint64_t>(t - 1);
    }
    c.rows[k] = level * t + static_cast<std::int64_t>(idx);
  }
  return c;
}

// Trilinear weight of corner k and its partial derivatives along each axis.
void corner_weight(const Cell& c, int k, double& w, double dw[3]) {
  double f[3], df[3];
  for (int a = 0; a < 3; ++a) {
    const bool hi = (k >> a) & 1;
    f[a] = hi ? c.frac[a] : 1.0 - c.frac[a];
    df[a] = hi ? 1.0 : -1.0;
  }
  w = f[0] * f[1] * f[2];
  dw[0] = df[0] * f[1] * f[2];
  dw[1] = f[0] * df[1] * f[2];
  dw[2] = f[0] * f[1] * df[2];
}

}  // namespace

Var hash_encode(Var table, Var xyz, const HashGridConfig& cfg) {
  cfg.validate();
  const std::int64_t t = cfg.table_size(), nf = cfg.features, nl = cfg.levels;
  if (table.shape() != num::Shape{nl * t, nf}) throw num::ShapeError("hash_encode: table must be (levels*T) x F");
  if (xyz.value().rank() != 2 || xyz.value().dim(1) != 3) throw num::ShapeError("hash_encode: xyz must be N x 3");
  const std::int64_t n = xyz.value().dim(0);
  Tensor out({n, nl * nf});
  const float* tab = table.value().ptr();
  const float* pts = xyz.value().ptr();
#pragma omp parallel for schedule(static)
  for (std::int64_t p = 0; p < n; ++p) {
    for (int l = 0; l < nl; ++l) {
      const Cell c = locate(cfg, l, pts + 3 * p);
      float* dst = out.ptr() + p * nl * nf + l * nf;
      for (int k = 0; k < 8; ++k) {
        double w, dw[3];
        corner_weight(c, k, w, dw);
        for (std::int64_t f = 0; f < nf; ++f) dst[f] += static_cast<float>(w * tab[c.rows[k] * nf + f]);
      }
    }
  }
  const auto it = table.id(), ix = xyz.id();
  return table.tape().record(
      std::move(out), {table, xyz},
      [it, ix, cfg, n, nl, nf](num::Tape& tape, std::uint32_t, const Tensor& g) {
        const bool want_t = tape.requires_grad(it), want_x = tape.requires_grad(ix);
        const float* tab = tape.value(it).ptr();
        const float* pts = tape.value(ix).ptr();
        std::span<float> gt, gx;
        if (want_t) gt = tape.grad_buffer(it);
        if (want_x) gx = tape.grad_buffer(ix);
        for (std::int64_t p = 0; p < n; ++p) {
          for (int l = 0; l < nl; ++l) {
            const Cell c = locate(cfg, l, pts + 3 * p);
            const float* go = g.ptr() + p * nl * nf + l * nf;
            for (int k = 0; k < 8; ++k) {
              double w, dw[3];
              corner_weight(c, k, w, dw);
              double feat_dot = 0;
              for (std::int64_t f = 0; f < nf; ++f) {
                if (want_t) gt[c.rows[k] * nf + f] += static_cast<float>(w * go[f]);
                feat_dot += static_cast<double>(go[f]) * tab[c.rows[k] * nf + f];
              }
              if (want_x) {
                for (int a = 0; a < 3; ++a) gx[3 * p + a] += static_cast<float>(feat_dot * dw[a] * c.scale[a]);
              }
            }
          }
        }
      },
      "hash_encode");
}

Var hash_lookup(const HashGridVars& vars, const HashGridConfig& cfg, Var xyz) {
  return num::sigmoid(num::forward(vars.head, hash_encode(vars.table, xyz, cfg)));
}

Tensor hash_lookup(const HashGridTexture& tex, const Tensor& xyz) {
  num::Tape tape;
  return hash_lookup(bind(tape, tex, false), tex.config, tape.constant(xyz)).value();
}

}  // namespace tridiff::refine
