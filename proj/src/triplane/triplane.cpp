#include "tridiff/triplane/triplane.hpp"

#include <algorithm>
#include <fstream>
#include <json.hpp>

#include "tridiff/numerics/io.hpp"
#include "tridiff/numerics/ops.hpp"

namespace tridiff::triplane {

using num::Tensor;
using num::Var;

TriPlane TriPlane::zeros(int channels, int resolution, int split) {
  TriPlane tp;
  for (auto& p : tp.planes) p = Tensor({channels, resolution, resolution});
  tp.split = split;
  tp.validate();
  return tp;
}

void TriPlane::validate() const {
  const auto& s = planes[0].shape();
  if (s.size() != 3) throw num::ShapeError("tri-plane planes must be C x R x R");
  for (const auto& p : planes) {
    if (p.shape() != s) throw num::ShapeError("tri-plane planes disagree in shape");
  }
  if (split < 1 || split >= s[0]) throw num::ShapeError("tri-plane channel split out of range");
}

std::array<std::array<double, 2>, 3> project_point(const Vec3& p) {
  return {{{p.x, p.y}, {p.y, p.z}, {p.x, p.z}}};
}

void clamp_in_place(TriPlane& tp, float bound) {
  for (auto& p : tp.planes) {
    for (float& v : p.data()) v = std::clamp(v, -bound, bound);
  }
}

TriPlane clamp_triplane(TriPlane tp, float bound) {
  clamp_in_place(tp, bound);
  return tp;
}

TriPlaneVars bind(num::Tape& tape, const TriPlane& tp, bool trainable) {
  TriPlaneVars v;
  for (int i = 0; i < 3; ++i) v.planes[i] = trainable ? tape.param(tp.planes[i]) : tape.constant(tp.planes[i]);
  v.split = tp.split;
  return v;
}

Var tv_loss(const TriPlaneVars& tp) {
  Var total;
  for (const Var& p : tp.planes) {
    const auto h = p.shape()[1], w = p.shape()[2];
    const Var dx = num::sub(num::slice(p, 2, 1, w), num::slice(p, 2, 0, w - 1));
    const Var dy = num::sub(num::slice(p, 1, 1, h), num::slice(p, 1, 0, h - 1));
    const Var term = num::add(num::mean(num::square(dx)), num::mean(num::square(dy)));
    total = total.valid() ? num::add(total, term) : term;
  }
  return total;
}

Var l1_loss(const TriPlaneVars& tp) {
  Var total;
  std::size_t count = 0;
  for (const Var& p : tp.planes) {
    const Var s = num::sum(num::abs(p));
    total = total.valid() ? num::add(total, s) : s;
    count += p.numel();
  }
  return num::mul(total, 1.0f / static_cast<float>(count));
}

float tv_loss(const TriPlane& tp) {
  num::Tape tape;
  return tv_loss(bind(tape, tp, false)).value().item();
}

float l1_loss(const TriPlane& tp) {
  num::Tape tape;
  return l1_loss(bind(tape, tp, false)).value().item();
}

SharedDecoder SharedDecoder::create(int channels, int split, const DecoderConfig& cfg, num::Rng& rng) {
  if (split < 1 || split >= channels) throw std::invalid_argument("decoder channel split out of range");
  if (cfg.layers < 1 || cfg.hidden < 1) throw std::invalid_argument("decoder needs at least one hidden layer");
  SharedDecoder d;
  d.kind = cfg.kind;
  d.channels = channels;
  d.split = split;
  auto widths = [&](int in, int out) {
    std::vector<int> w{in};
    for (int i = 0; i < cfg.layers; ++i) w.push_back(cfg.hidden);
    w.push_back(out);
    return w;
  };
  if (cfg.kind == DecoderKind::Disentangled) {
    d.color = num::Mlp::create(widths(3 * split, 3), rng);
    d.density = num::Mlp::create(widths(3 * (channels - split), 1), rng);
    d.density.biases.back()[0] = cfg.density_bias;
  } else {
    d.color = num::Mlp::create(widths(3 * channels, 4), rng);
    d.color.biases.back()[3] = cfg.density_bias;
  }
  return d;
}

std::vector<Tensor*> SharedDecoder::params() {
  auto p = color.params();
  if (kind == DecoderKind::Disentangled) {
    for (Tensor* t : density.params()) p.push_back(t);
  }
  return p;
}

DecoderVars bind(num::Tape& tape, const SharedDecoder& dec, bool trainable) {
  DecoderVars v;
  v.kind = dec.kind;
  v.color = num::bind(tape, dec.color, trainable);
  if (dec.kind == DecoderKind::Disentangled) v.density = num::bind(tape, dec.density, trainable);
  return v;
}

FieldSample decode_points(const TriPlaneVars& tp, const DecoderVars& dec, const std::vector<float>& xyz) {
  num::Tape& tape = tp.planes[0].tape();
  const std::int64_t n = static_cast<std::int64_t>(xyz.size() / 3);
  const std::int64_t channels = tp.planes[0].shape()[0];
  static constexpr int kAxes[3][2] = {{0, 1}, {1, 2}, {0, 2}};
  std::vector<Var> color_parts, density_parts, all_parts;
  for (int p = 0; p < 3; ++p) {
    Tensor uv({n, 2});
    for (std::int64_t i = 0; i < n; ++i) {
      uv[static_cast<std::size_t>(2 * i)] = xyz[static_cast<std::size_t>(3 * i + kAxes[p][0])];
      uv[static_cast<std::size_t>(2 * i + 1)] = xyz[static_cast<std::size_t>(3 * i + kAxes[p][1])];
    }
    const Var feat = num::grid_sample_2d(tp.planes[p], tape.constant(std::move(uv)));
    if (dec.kind == DecoderKind::Disentangled) {
      color_parts.push_back(num::slice(feat, 1, 0, tp.split));
      density_parts.push_back(num::slice(feat, 1, tp.split, channels));
    } else {
      all_parts.push_back(feat);
    }
  }
  FieldSample out;
  if (dec.kind == DecoderKind::Disentangled) {
    out.rgb = num::sigmoid(num::forward(dec.color, num::concat(color_parts, 1)));
    out.sigma = num::softplus(num::forward(dec.density, num::concat(density_parts, 1)));
  } else {
    const Var raw = num::forward(dec.color, num::concat(all_parts, 1));
    out.rgb = num::sigmoid(num::slice(raw, 1, 0, 3));
    out.sigma = num::softplus(num::slice(raw, 1, 3, 4));
  }
  return out;
}

PointValue decode_point(const TriPlane& tp, const SharedDecoder& dec, const Vec3& xyz) {
  num::Tape tape;
  const auto f = decode_points(bind(tape, tp, false), bind(tape, dec, false),
                               {static_cast<float>(xyz.x), static_cast<float>(xyz.y), static_cast<float>(xyz.z)});
  const Tensor& rgb = f.rgb.value();
  return {{rgb[0], rgb[1], rgb[2]}, f.sigma.value()[0]};
}

std::vector<PointValue> decode_batch(const TriPlane& tp, const SharedDecoder& dec, const std::vector<float>& xyz) {
  if (xyz.size() % 3 != 0) throw num::ShapeError("decode_batch: xyz must hold N x 3 floats");
  constexpr std::size_t kChunk = 4096;
  const std::size_t n = xyz.size() / 3;
  const std::size_t chunks = (n + kChunk - 1) / kChunk;
  std::vector<PointValue> out(n);
#pragma omp parallel for schedule(dynamic)
  for (std::size_t c = 0; c < chunks; ++c) {
    const std::size_t b = c * kChunk, e = std::min(n, b + kChunk);
    num::Tape tape;
    const auto f = decode_points(bind(tape, tp, false), bind(tape, dec, false),
                                 std::vector<float>(xyz.begin() + 3 * b, xyz.begin() + 3 * e));
    const Tensor& rgb = f.rgb.value();
    const Tensor& sigma = f.sigma.value();
    for (std::size_t i = b; i < e; ++i) {
      const std::size_t k = i - b;
      out[i] = {{rgb[3 * k], rgb[3 * k + 1], rgb[3 * k + 2]}, sigma[k]};
    }
  }
  return out;
}

namespace {

constexpr const char* kPlaneSuffix[3] = {".xy.ttns", ".yz.ttns", ".xz.ttns"};

std::filesystem::path with_suffix(const std::filesystem::path& p, const char* suffix) {
  return std::filesystem::path(p.string() + suffix);
}

}  // namespace

void save_triplane(const std::filesystem::path& path, const TriPlane& tp) {
  tp.validate();
  for (int i = 0; i < 3; ++i) num::save_tensor(with_suffix(path, kPlaneSuffix[i]), tp.planes[i]);
  std::ofstream meta(with_suffix(path, ".json"));
  meta << nlohmann::json{{"channels", tp.channels()}, {"split", tp.split}, {"resolution", tp.resolution()}}.dump(2)
       << '\n';
  if (!meta) throw std::runtime_error("cannot write tri-plane sidecar for " + path.string());
}

TriPlane load_triplane(const std::filesystem::path& path) {
  std::ifstream meta(with_suffix(path, ".json"));
  if (!meta) throw std::runtime_error("missing tri-plane sidecar for " + path.string());
  const auto j = nlohmann::json::parse(meta);
  TriPlane tp;
  for (int i = 0; i < 3; ++i) tp.planes[i] = num::load_tensor(with_suffix(path, kPlaneSuffix[i]));
  tp.split = j.at("split").get<int>();
  tp.validate();
  if (tp.channels() != j.at("channels").get<int>() || tp.resolution() != j.at("resolution").get<int>()) {
    throw std::runtime_error("tri-plane sidecar disagrees with stored planes");
  }
  return tp;
}

void save_decoder(const std::filesystem::path& path, const SharedDecoder& dec) {
  num::TensorBundle b;
  auto put = [&](const std::string& prefix, const num::Mlp& m) {
    for (std::size_t i = 0; i < m.weights.size(); ++i) {
      b[prefix + ".w" + std::to_string(i)] = m.weights[i];
      b[prefix + ".b" + std::to_string(i)] = m.biases[i];
    }
  };
  put("color", dec.color);
  if (dec.kind == DecoderKind::Disentangled) put("density", dec.density);
  Tensor meta({3}, std::vector<float>{dec.kind == DecoderKind::Disentangled ? 0.0f : 1.0f,
                                      static_cast<float>(dec.channels), static_cast<float>(dec.split)});
  b["meta"] = meta;
  num::save_bundle(path, b);
}

SharedDecoder load_decoder(const std::filesystem::path& path) {
  auto b = num::load_bundle(path);
  SharedDecoder d;
  const Tensor& meta = b.at("meta");
  d.kind = meta[0] == 0.0f ? DecoderKind::Disentangled : DecoderKind::Single;
  d.channels = static_cast<int>(meta[1]);
  d.split = static_cast<int>(meta[2]);
  auto take = [&](const std::string& prefix, num::Mlp& m) {
    for (int i = 0; b.count(prefix + ".w" + std::to_string(i)); ++i) {
      m.weights.push_back(b.at(prefix + ".w" + std::to_string(i)));
      m.biases.push_back(b.at(prefix + ".b" + std::to_string(i)));
    }
  };
  take("color", d.color);
  if (d.kind == DecoderKind::Disentangled) take("density", d.density);
  return d;
}

}  // namespace tridiff::triplane
