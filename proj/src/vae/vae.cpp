#include "tridiff/vae/vae.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "tridiff/numerics/adam.hpp"
#include "tridiff/numerics/io.hpp"
#include "tridiff/numerics/ops.hpp"

namespace tridiff::vae {

using num::Shape;
using num::Tensor;
using num::Var;
using triplane::TriPlane;

// ---------------------------------------------------------------------------
// Rollout.

RolledPlane rollout(const TriPlane& tp) {
  tp.validate();
  const std::int64_t c = tp.channels(), r = tp.resolution();
  RolledPlane rp{Tensor({c, r, 3 * r}), tp.split};
  for (int k = 0; k < 3; ++k) {
    const Tensor& p = tp.planes[k];
    for (std::int64_t ch = 0; ch < c; ++ch) {
      for (std::int64_t y = 0; y < r; ++y) {
        const float* src = p.ptr() + (ch * r + y) * r;
        std::copy(src, src + r, rp.data.ptr() + (ch * r + y) * 3 * r + k * r);
      }
    }
  }
  return rp;
}

TriPlane unroll(const RolledPlane& rp) {
  const Tensor& d = rp.data;
  if (d.rank() != 3 || d.dim(2) % 3 != 0 || d.dim(2) / 3 != d.dim(1)) {
    throw num::ShapeError("unroll: expected C x R x 3R");
  }
  const std::int64_t c = d.dim(0), r = d.dim(1);
  TriPlane tp = TriPlane::zeros(static_cast<int>(c), static_cast<int>(r), rp.split);
  for (int k = 0; k < 3; ++k) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      for (std::int64_t y = 0; y < r; ++y) {
        const float* src = d.ptr() + (ch * r + y) * 3 * r + k * r;
        std::copy(src, src + r, tp.planes[k].ptr() + (ch * r + y) * r);
      }
    }
  }
  tp.validate();
  return tp;
}

triplane::TriPlaneVars unroll(Var rolled, int split) {
  const Shape& s = rolled.shape();
  if (s.size() != 3 || s[2] % 3 != 0) throw num::ShapeError("unroll: width must be divisible by 3");
  const std::int64_t r = s[2] / 3;
  triplane::TriPlaneVars tv;
  tv.split = split;
  for (int k = 0; k < 3; ++k) tv.planes[k] = num::slice(rolled, 2, k * r, (k + 1) * r);
  return tv;
}

// ---------------------------------------------------------------------------
// Model.

void VaeConfig::validate() const {
  if (in_channels < 1 || latent_channels < 1) throw std::invalid_argument("vae channel counts must be positive");
  if (stage_channels.empty()) throw std::invalid_argument("vae needs at least one downsampling stage");
  for (int c : stage_channels) {
    if (c < 1) throw std::invalid_argument("vae stage width must be positive");
  }
  if (kl_weight < 0 || tv_weight < 0) throw std::invalid_argument("vae loss weights must be non-negative");
  if (steps < 0) throw std::invalid_argument("vae steps must be non-negative");
}

Shape VaeConfig::latent_shape(const Shape& rolled) const {
  if (rolled.size() != 3 || rolled[0] != in_channels) throw num::ShapeError("latent_shape: expected in_channels x H x W");
  const std::int64_t f = std::int64_t{1} << stage_channels.size();
  if (rolled[1] % f != 0 || rolled[2] % f != 0) {
    throw num::ShapeError("latent_shape: spatial size must be divisible by " + std::to_string(f));
  }
  return {latent_channels, rolled[1] / f, rolled[2] / f};
}

namespace {

ConvLayer make_layer(int in, int out, int stride, bool upsample, float gain, num::Rng& rng) {
  const float bound = gain * std::sqrt(6.0f / static_cast<float>(9 * in));
  return {rng.uniform_tensor({out, in, 3, 3}, -bound, bound), Tensor({out}), stride, upsample};
}

Var apply(const ConvLayer& layer, Var w, Var b, Var x) {
  if (layer.upsample) x = num::upsample_nearest2d(x, 2);
  return num::conv2d(x, w, b, layer.stride, 1);
}

}  // namespace

Vae Vae::create(const VaeConfig& cfg, num::Rng& rng) {
  cfg.validate();
  Vae v;
  v.config = cfg;
  const auto& st = cfg.stage_channels;
  const float out_gain = 0.5f;
  v.encoder.push_back(make_layer(cfg.in_channels, st[0], 1, false, 1.0f, rng));
  int prev = st[0];
  for (int c : st) {
    v.encoder.push_back(make_layer(prev, c, 2, false, 1.0f, rng));
    v.encoder.push_back(make_layer(c, c, 1, false, 1.0f, rng));
    prev = c;
  }
  v.encoder.push_back(make_layer(prev, 2 * cfg.latent_channels, 1, false, out_gain, rng));

  v.decoder.push_back(make_layer(cfg.latent_channels, st.back(), 1, false, 1.0f, rng));
  for (std::size_t i = st.size(); i-- > 0;) {
    const int next = i > 0 ? st[i - 1] : st[0];
    v.decoder.push_back(make_layer(st[i], next, 1, true, 1.0f, rng));
    // No extra conv at full resolution; it would be the costliest layer.
    if (i > 0) v.decoder.push_back(make_layer(next, next, 1, false, 1.0f, rng));
  }
  v.decoder.push_back(make_layer(st[0], cfg.in_channels, 1, false, out_gain, rng));
  return v;
}

std::vector<Tensor*> Vae::params() {
  std::vector<Tensor*> out;
  for (auto* layers : {&encoder, &decoder}) {
    for (auto& l : *layers) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
  }
  return out;
}

std::vector<const Tensor*> Vae::params() const {
  std::vector<const Tensor*> out;
  for (auto* p : const_cast<Vae*>(this)->params()) out.push_back(p);
  return out;
}

VaeVars bind(num::Tape& tape, const Vae& vae, bool trainable) {
  auto put = [&](const Tensor& t) { return trainable ? tape.param(t) : tape.constant(t); };
  VaeVars v;
  for (const auto& l : vae.encoder) {
    v.encoder_w.push_back(put(l.weight));
    v.encoder_b.push_back(put(l.bias));
  }
  for (const auto& l : vae.decoder) {
    v.decoder_w.push_back(put(l.weight));
    v.decoder_b.push_back(put(l.bias));
  }
  return v;
}

Encoded encode(const Vae& vae, const VaeVars& vars, Var rolled, num::Rng* rng) {
  vae.config.latent_shape(rolled.shape());
  Var h = rolled;
  const std::size_t n = vae.encoder.size();
  for (std::size_t i = 0; i < n; ++i) {
    h = apply(vae.encoder[i], vars.encoder_w[i], vars.encoder_b[i], h);
    if (i + 1 < n) h = num::silu(h);
  }
  const std::int64_t lc = vae.config.latent_channels;
  Encoded e;
  e.mu = num::slice(h, 0, 0, lc);
  e.logvar = num::clamp(num::slice(h, 0, lc, 2 * lc), kLogvarMin, kLogvarMax);
  if (rng) {
    Tensor eps = rng->normal_tensor(e.mu.shape());
    e.z = num::add(e.mu, num::mul(num::exp(num::mul(e.logvar, 0.5f)), rolled.tape().constant(std::move(eps))));
  } else {
    e.z = e.mu;
  }
  return e;
}

Var decode(const Vae& vae, const VaeVars& vars, Var z) {
  if (z.shape().size() != 3 || z.shape()[0] != vae.config.latent_channels) {
    throw num::ShapeError("decode: expected latent_channels x h x w");
  }
  Var h = z;
  const std::size_t n = vae.decoder.size();
  for (std::size_t i = 0; i < n; ++i) {
    h = apply(vae.decoder[i], vars.decoder_w[i], vars.decoder_b[i], h);
    if (i + 1 < n) h = num::silu(h);
  }
  return h;
}

Tensor encode(const Vae& vae, const RolledPlane& rp) {
  num::Tape tape;
  const auto vars = bind(tape, vae, false);
  return encode(vae, vars, tape.constant(rp.data), nullptr).mu.value();
}

RolledPlane decode(const Vae& vae, const Tensor& latent, int split) {
  num::Tape tape;
  const auto vars = bind(tape, vae, false);
  return {decode(vae, vars, tape.constant(latent)).value(), split};
}

TriPlane reconstruct(const Vae& vae, const TriPlane& tp) {
  return triplane::clamp_triplane(unroll(decode(vae, encode(vae, rollout(tp)), tp.split)));
}

// ---------------------------------------------------------------------------
// Loss and training.

Var kl_divergence(Var mu, Var logvar) {
  // 0.5 * (mu^2 + e^logvar - 1 - logvar), averaged.
  Var t = num::sub(num::add(num::square(mu), num::exp(logvar)), num::add(logvar, 1.0f));
  return num::mul(num::mean(t), 0.5f);
}

Var vae_loss(Var x, Var x_hat, Var mu, Var logvar, int split, float kl_weight, float tv_weight) {
  if (x.shape() != x_hat.shape() || mu.shape() != logvar.shape()) throw num::ShapeError("vae_loss: shapes differ");
  Var loss = num::mse(x_hat, x);
  if (kl_weight > 0) loss = num::add(loss, num::mul(kl_divergence(mu, logvar), kl_weight));
  if (tv_weight > 0) loss = num::add(loss, num::mul(triplane::tv_loss(unroll(x_hat, split)), tv_weight));
  return loss;
}

TrainResult train_vae(const std::vector<TriPlane>& data, const VaeConfig& cfg, const ProgressFn& progress) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("train_vae: empty dataset");
  std::vector<RolledPlane> rolled;
  for (const auto& tp : data) rolled.push_back(rollout(tp));
  for (const auto& r : rolled) {
    if (r.data.shape() != rolled[0].data.shape()) throw num::ShapeError("train_vae: tri-planes differ in shape");
  }
  cfg.latent_shape(rolled[0].data.shape());

  num::Rng rng(cfg.seed);
  TrainResult out{Vae::create(cfg, rng), {}};
  auto params = out.vae.params();
  num::Adam opt({cfg.lr});
  for (auto* p : params) opt.add(p);

  std::vector<std::size_t> order(rolled.size());
  std::iota(order.begin(), order.end(), 0);
  for (int step = 0; step < cfg.steps; ++step) {
    const std::size_t pos = static_cast<std::size_t>(step) % order.size();
    if (pos == 0) {
      for (std::size_t i = order.size(); i > 1; --i) {
        std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(i)))]);
      }
    }
    const RolledPlane& rp = rolled[order[pos]];
    num::Tape tape;
    const VaeVars vars = bind(tape, out.vae, true);
    const Var x = tape.constant(rp.data);
    const Encoded e = encode(out.vae, vars, x, &rng);
    const Var x_hat = decode(out.vae, vars, e.z);
    const Var loss = vae_loss(x, x_hat, e.mu, e.logvar, rp.split, cfg.kl_weight, cfg.tv_weight);
    tape.backward(loss);
    std::vector<const Tensor*> grads;
    for (std::size_t i = 0; i < vars.encoder_w.size(); ++i) {
      grads.push_back(&tape.grad(vars.encoder_w[i]));
      grads.push_back(&tape.grad(vars.encoder_b[i]));
    }
    for (std::size_t i = 0; i < vars.decoder_w.size(); ++i) {
      grads.push_back(&tape.grad(vars.decoder_w[i]));
      grads.push_back(&tape.grad(vars.decoder_b[i]));
    }
    // Cosine decay to zero over the run.
    opt.config().lr = 0.5f * cfg.lr * (1.0f + std::cos(static_cast<float>(M_PI) * step / std::max(1, cfg.steps)));
    opt.step(grads);
    const float value = loss.value().item();
    out.losses.push_back(value);
    if (progress) progress(step, value);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Latent statistics.

LatentStats compute_latent_stats(const std::vector<Tensor>& latents) {
  if (latents.size() < 2) throw std::invalid_argument("latent stats need at least 2 latents");
  const Shape& shape = latents[0].shape();
  if (shape.size() != 3) throw num::ShapeError("latent stats: expected C x h x w latents");
  const std::int64_t c = shape[0], hw = shape[1] * shape[2];
  std::vector<double> sum(static_cast<std::size_t>(c), 0.0), sq(static_cast<std::size_t>(c), 0.0);
  for (const auto& l : latents) {
    if (l.shape() != shape) throw num::ShapeError("latent stats: latents differ in shape");
    for (std::int64_t ch = 0; ch < c; ++ch) {
      for (std::int64_t i = 0; i < hw; ++i) sum[ch] += l[static_cast<std::size_t>(ch * hw + i)];
    }
  }
  const double n = static_cast<double>(latents.size()) * static_cast<double>(hw);
  for (auto& s : sum) s /= n;
  for (const auto& l : latents) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      for (std::int64_t i = 0; i < hw; ++i) {
        const double d = l[static_cast<std::size_t>(ch * hw + i)] - sum[ch];
        sq[ch] += d * d;
      }
    }
  }
  LatentStats st;
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const double sd = std::sqrt(sq[ch] / n);
    if (!(sd > kStdFloor)) {
      throw num::NumericError("latent channel " + std::to_string(ch) + " is degenerate (std " + std::to_string(sd) + ")");
    }
    st.mean.push_back(static_cast<float>(sum[ch]));
    st.std.push_back(static_cast<float>(sd));
  }
  return st;
}

namespace {

template <typename F>
Tensor per_channel(const Tensor& l, const LatentStats& st, F f) {
  if (l.rank() != 3 || static_cast<std::size_t>(l.dim(0)) != st.mean.size() || st.mean.size() != st.std.size()) {
    throw num::ShapeError("latent and stats disagree on channel count");
  }
  Tensor out(l.shape());
  const std::int64_t hw = l.dim(1) * l.dim(2);
  for (std::int64_t ch = 0; ch < l.dim(0); ++ch) {
    for (std::int64_t i = 0; i < hw; ++i) {
      const auto k = static_cast<std::size_t>(ch * hw + i);
      out[k] = f(static_cast<double>(l[k]), st.mean[ch], st.std[ch]);
    }
  }
  return out;
}

}  // namespace

Tensor normalize(const Tensor& latent, const LatentStats& stats) {
  return per_channel(latent, stats, [](double v, double m, double s) { return static_cast<float>((v - m) / s); });
}

Tensor denormalize(const Tensor& latent, const LatentStats& stats) {
  return per_channel(latent, stats, [](double v, double m, double s) { return static_cast<float>(v * s + m); });
}

// ---------------------------------------------------------------------------
// Persistence.

namespace {

std::filesystem::path meta_path(const std::filesystem::path& p) { return p.string() + ".meta.json"; }

nlohmann::json read_json(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  return nlohmann::json::parse(in);
}

void write_json(const std::filesystem::path& p, const nlohmann::json& j) {
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << j.dump(2) << '\n';
}

}  // namespace

void save_vae(const std::filesystem::path& path, const Vae& vae) {
  num::TensorBundle b;
  for (std::size_t i = 0; i < vae.encoder.size(); ++i) {
    b["enc." + std::to_string(i) + ".w"] = vae.encoder[i].weight;
    b["enc." + std::to_string(i) + ".b"] = vae.encoder[i].bias;
  }
  for (std::size_t i = 0; i < vae.decoder.size(); ++i) {
    b["dec." + std::to_string(i) + ".w"] = vae.decoder[i].weight;
    b["dec." + std::to_string(i) + ".b"] = vae.decoder[i].bias;
  }
  num::save_bundle(path, b);
  const auto& c = vae.config;
  write_json(meta_path(path), {{"in_channels", c.in_channels},
                               {"latent_channels", c.latent_channels},
                               {"stage_channels", c.stage_channels},
                               {"kl_weight", c.kl_weight},
                               {"tv_weight", c.tv_weight}});
}

Vae load_vae(const std::filesystem::path& path) {
  const auto j = read_json(meta_path(path));
  VaeConfig cfg;
  cfg.in_channels = j.at("in_channels").get<int>();
  cfg.latent_channels = j.at("latent_channels").get<int>();
  cfg.stage_channels = j.at("stage_channels").get<std::vector<int>>();
  cfg.kl_weight = j.at("kl_weight").get<float>();
  cfg.tv_weight = j.at("tv_weight").get<float>();
  num::Rng rng(0);
  Vae v = Vae::create(cfg, rng);
  const auto b = num::load_bundle(path);
  auto take = [&](const std::string& key, Tensor& dst) {
    const auto it = b.find(key);
    if (it == b.end()) throw std::runtime_error("vae checkpoint is missing " + key);
    if (it->second.shape() != dst.shape()) throw num::ShapeError("vae checkpoint tensor " + key + " has the wrong shape");
    dst = it->second;
  };
  for (std::size_t i = 0; i < v.encoder.size(); ++i) {
    take("enc." + std::to_string(i) + ".w", v.encoder[i].weight);
    take("enc." + std::to_string(i) + ".b", v.encoder[i].bias);
  }
  for (std::size_t i = 0; i < v.decoder.size(); ++i) {
    take("dec." + std::to_string(i) + ".w", v.decoder[i].weight);
    take("dec." + std::to_string(i) + ".b", v.decoder[i].bias);
  }
  return v;
}

void save_latent_stats(const std::filesystem::path& path, const LatentStats& stats, const std::string& checkpoint_sha) {
  write_json(path, {{"version", 1}, {"checkpoint_sha256", checkpoint_sha}, {"mean", stats.mean}, {"std", stats.std}});
}

LatentStats load_latent_stats(const std::filesystem::path& path, std::string* checkpoint_sha) {
  const auto j = read_json(path);
  LatentStats st{j.at("mean").get<std::vector<float>>(), j.at("std").get<std::vector<float>>()};
  if (st.mean.size() != st.std.size()) throw std::runtime_error("latent stats: mean/std length mismatch");
  for (float s : st.std) {
    if (!(s > kStdFloor)) throw num::NumericError("latent stats: std below floor");
  }
  if (checkpoint_sha) *checkpoint_sha = j.at("checkpoint_sha256").get<std::string>();
  return st;
}

}  // namespace tridiff::vae
