#include "tridiff/diffusion/diffusion.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "tridiff/numerics/adam.hpp"
#include "tridiff/numerics/ops.hpp"

namespace tridiff::diffusion {

using num::Shape;
using num::Tensor;
using num::Var;
using VarMap = std::map<std::string, Var>;

// ---------------------------------------------------------------------------
// Caption embedding.

bool CondEmbedding::is_null() const {
  for (float v : vec) {
    if (v != 0.0f) return false;
  }
  return true;
}

namespace {

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  return h;
}

// Articles and connectives carry no class information and would otherwise
// dominate short template captions.
bool is_function_word(std::uint64_t h) {
  static const std::uint64_t kWords[] = {fnv1a("a"), fnv1a("an"), fnv1a("the"), fnv1a("of"), fnv1a("and")};
  return std::find(std::begin(kWords), std::end(kWords), h) != std::end(kWords);
}

}  // namespace

CondEmbedding embed_caption(std::string_view text) {
  std::vector<double> acc(kEmbeddingWidth, 0.0);
  bool any = false;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && !std::isalnum(static_cast<unsigned char>(text[i]))) ++i;
    std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
    bool tok = false;
    while (i < text.size() && std::isalnum(static_cast<unsigned char>(text[i]))) {
      h ^= static_cast<unsigned char>(std::tolower(static_cast<unsigned char>(text[i])));
      h *= 1099511628211ULL;
      tok = true;
      ++i;
    }
    if (!tok) continue;
    if (is_function_word(h)) continue;
    any = true;
    acc[h % kEmbeddingWidth] += ((h >> 40) & 1) ? 1.0 : -1.0;
  }
  CondEmbedding e = CondEmbedding::null();
  if (!any) return e;
  double norm = 0.0;
  for (double v : acc) norm += v * v;
  norm = std::sqrt(norm);
  if (norm == 0.0) return e;  // every token cancelled out
  for (int k = 0; k < kEmbeddingWidth; ++k) e.vec[k] = static_cast<float>(acc[k] / norm);
  return e;
}

double cosine_similarity(const CondEmbedding& a, const CondEmbedding& b) {
  if (a.vec.size() != b.vec.size()) throw num::ShapeError("cosine_similarity: widths differ");
  double d = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.vec.size(); ++i) {
    d += static_cast<double>(a.vec[i]) * b.vec[i];
    na += static_cast<double>(a.vec[i]) * a.vec[i];
    nb += static_cast<double>(b.vec[i]) * b.vec[i];
  }
  return (na == 0 || nb == 0) ? 0.0 : d / std::sqrt(na * nb);
}

// ---------------------------------------------------------------------------
// Denoiser.

void DenoiserConfig::validate() const {
  if (latent_channels < 1 || base_channels < 1 || embed_dim < 1) throw std::invalid_argument("denoiser widths must be positive");
  if (time_dim < 2 || time_dim % 2 != 0) throw std::invalid_argument("denoiser time_dim must be even");
  if (T < 2) throw std::invalid_argument("denoiser T must be >= 2");
}

namespace {

Tensor conv_weight(int out, int in, float gain, num::Rng& rng) {
  const float bound = gain * std::sqrt(6.0f / static_cast<float>(9 * in));
  return rng.uniform_tensor({out, in, 3, 3}, -bound, bound);
}

Tensor dense_weight(int in, int out, num::Rng& rng) {
  const float bound = std::sqrt(6.0f / static_cast<float>(in));
  return rng.uniform_tensor({in, out}, -bound, bound);
}

void add_res_block(num::TensorBundle& p, const std::string& name, int c, int e, num::Rng& rng) {
  p[name + ".c1.w"] = conv_weight(c, c, 1.0f, rng);
  p[name + ".c1.b"] = Tensor({c});
  p[name + ".emb.w"] = dense_weight(e, c, rng);
  p[name + ".emb.b"] = Tensor({c});
  p[name + ".c2.w"] = conv_weight(c, c, 0.5f, rng);
  p[name + ".c2.b"] = Tensor({c});
}

Tensor sinusoidal_table(int T, int dim) {
  Tensor tab({T + 1, dim});
  const int half = dim / 2;
  for (int t = 0; t <= T; ++t) {
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / half);
      tab[static_cast<std::size_t>(t * dim + i)] = static_cast<float>(std::sin(t * freq));
      tab[static_cast<std::size_t>(t * dim + half + i)] = static_cast<float>(std::cos(t * freq));
    }
  }
  return tab;
}

const Var& at(const VarMap& v, const std::string& name) {
  const auto it = v.find(name);
  if (it == v.end()) throw std::logic_error("denoiser parameter missing: " + name);
  return it->second;
}

// Row and column ramps in [-1, 1]. Convolutions alone are translation
// equivariant, so without them a near-noise input cannot be mapped to a
// latent whose layout depends on position (such as the rolled-out planes).
constexpr int kCoordChannels = 2;

Tensor coord_channels(std::int64_t h, std::int64_t w) {
  Tensor c({kCoordChannels, h, w});
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      c[static_cast<std::size_t>(y * w + x)] = h > 1 ? static_cast<float>(2.0 * y / (h - 1) - 1.0) : 0.0f;
      c[static_cast<std::size_t>(h * w + y * w + x)] = w > 1 ? static_cast<float>(2.0 * x / (w - 1) - 1.0) : 0.0f;
    }
  }
  return c;
}

Var conv(const VarMap& v, const std::string& name, Var x, int stride = 1) {
  return num::conv2d(x, at(v, name + ".w"), at(v, name + ".b"), stride, 1);
}

Var res_block(const VarMap& v, const std::string& name, Var x, Var emb) {
  Var h = conv(v, name + ".c1", num::silu(x));
  const auto c = static_cast<std::int64_t>(h.shape()[0]);
  Var bias = num::reshape(num::linear(num::silu(emb), at(v, name + ".emb.w"), at(v, name + ".emb.b")), {c});
  h = num::add_channel_bias(h, bias);
  h = conv(v, name + ".c2", num::silu(h));
  return num::add(x, h);
}

}  // namespace

Denoiser Denoiser::create(const DenoiserConfig& cfg, num::Rng& rng) {
  cfg.validate();
  Denoiser d;
  d.cfg_ = cfg;
  const int c0 = cfg.base_channels, c1 = 2 * cfg.base_channels, e = cfg.embed_dim, l = cfg.latent_channels;
  auto& p = d.params_;
  p["temb.w1"] = dense_weight(cfg.time_dim, e, rng);
  p["temb.b1"] = Tensor({e});
  p["temb.w2"] = dense_weight(e, e, rng);
  p["temb.b2"] = Tensor({e});
  p["cond.w"] = dense_weight(kEmbeddingWidth, e, rng);
  p["cond.b"] = Tensor({e});
  p["in.w"] = conv_weight(c0, l + kCoordChannels, 1.0f, rng);
  p["in.b"] = Tensor({c0});
  add_res_block(p, "r1", c0, e, rng);
  p["down.w"] = conv_weight(c1, c0, 1.0f, rng);
  p["down.b"] = Tensor({c1});
  add_res_block(p, "r2", c1, e, rng);
  add_res_block(p, "mid", c1, e, rng);
  p["up.w"] = conv_weight(c0, c1, 1.0f, rng);
  p["up.b"] = Tensor({c0});
  p["merge.w"] = conv_weight(c0, 2 * c0, 1.0f, rng);
  p["merge.b"] = Tensor({c0});
  add_res_block(p, "r3", c0, e, rng);
  // Zero output layer: an untrained model predicts zero noise.
  p["out.w"] = Tensor({l, c0, 3, 3});
  p["out.b"] = Tensor({l});
  d.time_table_ = sinusoidal_table(cfg.T, cfg.time_dim);
  return d;
}

VarMap Denoiser::bind(num::Tape& tape, bool trainable) const {
  VarMap v;
  for (const auto& [name, t] : params_) v.emplace(name, trainable ? tape.param(t) : tape.constant(t));
  return v;
}

Var Denoiser::forward(const VarMap& v, Var x, int t, const CondEmbedding& e) const {
  const Shape& s = x.shape();
  if (s.size() != 3 || s[0] != cfg_.latent_channels || s[1] % 2 != 0 || s[2] % 2 != 0) {
    throw num::ShapeError("denoiser: expected latent_channels x h x w with even h and w");
  }
  if (t < 0 || t > cfg_.T) throw std::out_of_range("denoiser: timestep out of range");
  if (e.vec.size() != static_cast<std::size_t>(kEmbeddingWidth)) throw num::ShapeError("denoiser: embedding width");
  num::Tape& tape = x.tape();
  const auto td = cfg_.time_dim;
  Tensor row({1, td});
  std::copy_n(time_table_.ptr() + static_cast<std::ptrdiff_t>(t) * td, td, row.ptr());
  Var emb = num::linear(tape.constant(std::move(row)), at(v, "temb.w1"), at(v, "temb.b1"));
  emb = num::linear(num::silu(emb), at(v, "temb.w2"), at(v, "temb.b2"));
  const Var cond = num::linear(tape.constant(Tensor({1, kEmbeddingWidth}, e.vec)), at(v, "cond.w"), at(v, "cond.b"));
  emb = num::add(emb, cond);

  const std::vector<Var> inputs{x, tape.constant(coord_channels(s[1], s[2]))};
  const Var h0 = conv(v, "in", num::concat(inputs, 0));
  const Var h1 = res_block(v, "r1", h0, emb);
  Var h2 = conv(v, "down", num::silu(h1), 2);
  h2 = res_block(v, "r2", h2, emb);
  h2 = res_block(v, "mid", h2, emb);
  const Var u = conv(v, "up", num::upsample_nearest2d(num::silu(h2), 2));
  const std::vector<Var> parts{u, h1};
  Var m = conv(v, "merge", num::concat(parts, 0));
  m = res_block(v, "r3", m, emb);
  return conv(v, "out", num::silu(m));
}

Tensor Denoiser::predict(const Tensor& x_t, int t, const CondEmbedding& e) const {
  num::Tape tape;
  const VarMap v = bind(tape, false);
  return forward(v, tape.constant(x_t), t, e).value();
}

void Denoiser::save(const std::filesystem::path& path) const {
  num::save_bundle(path, params_);
  nlohmann::json j{{"latent_channels", cfg_.latent_channels}, {"base_channels", cfg_.base_channels},
                   {"time_dim", cfg_.time_dim},               {"embed_dim", cfg_.embed_dim},
                   {"T", cfg_.T}};
  std::ofstream out(path.string() + ".meta.json");
  if (!out) throw std::runtime_error("cannot write denoiser metadata next to " + path.string());
  out << j.dump(2) << '\n';
}

Denoiser Denoiser::load(const std::filesystem::path& path) {
  std::ifstream in(path.string() + ".meta.json");
  if (!in) throw std::runtime_error("missing denoiser metadata for " + path.string());
  const auto j = nlohmann::json::parse(in);
  DenoiserConfig cfg;
  cfg.latent_channels = j.at("latent_channels").get<int>();
  cfg.base_channels = j.at("base_channels").get<int>();
  cfg.time_dim = j.at("time_dim").get<int>();
  cfg.embed_dim = j.at("embed_dim").get<int>();
  cfg.T = j.at("T").get<int>();
  num::Rng rng(0);
  Denoiser d = create(cfg, rng);
  auto loaded = num::load_bundle(path);
  for (auto& [name, t] : d.params_) {
    const auto it = loaded.find(name);
    if (it == loaded.end()) throw std::runtime_error("denoiser checkpoint is missing " + name);
    if (it->second.shape() != t.shape()) throw num::ShapeError("denoiser checkpoint tensor " + name + " has the wrong shape");
    t = std::move(it->second);
  }
  return d;
}

// ---------------------------------------------------------------------------
// Training.

void LdmConfig::validate() const {
  denoiser.validate();
  if (!(cfg_dropout >= 0.0f && cfg_dropout <= 1.0f)) throw std::invalid_argument("cfg_dropout must lie in [0, 1]");
  if (steps < 0 || batch < 1) throw std::invalid_argument("ldm needs steps >= 0 and batch >= 1");
  if (!(ema_decay >= 0.0f && ema_decay < 1.0f)) throw std::invalid_argument("ema_decay must lie in [0, 1)");
}

LdmResult finetune_ldm(Denoiser start, const std::vector<Tensor>& latents, const std::vector<std::string>& captions,
                       const LdmConfig& cfg, const ProgressFn& progress) {
  cfg.validate();
  if (latents.empty() || latents.size() != captions.size()) {
    throw std::invalid_argument("train_ldm needs one caption per latent and at least one latent");
  }
  for (const auto& l : latents) {
    if (l.shape() != latents[0].shape()) throw num::ShapeError("train_ldm: latents differ in shape");
  }
  const NoiseSchedule sched = cfg.schedule();
  std::vector<CondEmbedding> embs;
  for (const auto& c : captions) embs.push_back(embed_caption(c));
  const CondEmbedding null = CondEmbedding::null();

  num::Rng rng(cfg.seed);
  LdmResult out{std::move(start), {}};
  auto& params = out.denoiser.params();
  num::Adam opt({cfg.lr});
  for (auto& [name, t] : params) opt.add(&t);
  num::TensorBundle ema;
  if (cfg.ema_decay > 0.0f) {
    for (const auto& [name, t] : params) ema.emplace(name, t);
  }

  for (int step = 0; step < cfg.steps; ++step) {
    num::Tape tape;
    const VarMap vars = out.denoiser.bind(tape, true);
    Var total;
    for (int b = 0; b < cfg.batch; ++b) {
      const auto i = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(latents.size())));
      const int t = 1 + static_cast<int>(rng.uniform_int(sched.T));
      Tensor eps = rng.normal_tensor(latents[i].shape());
      const bool drop = rng.uniform() < cfg.cfg_dropout;
      const Var x_t = tape.constant(q_sample(latents[i], t, eps, sched));
      const Var pred = out.denoiser.forward(vars, x_t, t, drop ? null : embs[i]);
      const Var l = num::mse(pred, tape.constant(std::move(eps)));
      total = total.valid() ? num::add(total, l) : l;
    }
    const Var loss = num::mul(total, 1.0f / static_cast<float>(cfg.batch));
    const float value = loss.value().item();
    if (!std::isfinite(value)) throw num::NumericError("ldm training diverged at step " + std::to_string(step));
    tape.backward(loss);
    std::vector<const Tensor*> grads;
    for (const auto& [name, var] : vars) grads.push_back(&tape.grad(var));
    opt.config().lr = 0.5f * cfg.lr * (1.0f + std::cos(static_cast<float>(M_PI) * step / std::max(1, cfg.steps)));
    opt.step(grads);
    if (!ema.empty()) {
      // Warmup keeps the average from clinging to the initial weights on short runs.
      const float d = std::min(cfg.ema_decay, (1.0f + step) / (10.0f + step));
      for (auto& [name, avg] : ema) {
        const Tensor& w = params.at(name);
        const auto a = avg.data();
        const auto x = w.data();
        for (std::size_t k = 0; k < avg.numel(); ++k) a[k] = d * a[k] + (1.0f - d) * x[k];
      }
    }
    out.losses.push_back(value);
    if (progress) progress(step, value);
  }
  for (auto& [name, avg] : ema) params.at(name) = std::move(avg);
  return out;
}

LdmResult train_ldm(const std::vector<Tensor>& latents, const std::vector<std::string>& captions, const LdmConfig& cfg,
                    const ProgressFn& progress) {
  cfg.validate();
  num::Rng rng(cfg.seed ^ 0x5eedULL);
  return finetune_ldm(Denoiser::create(cfg.denoiser, rng), latents, captions, cfg, progress);
}

// ---------------------------------------------------------------------------
// Sampling.

Tensor guided_epsilon(const EpsilonPredictor& model, const Tensor& x_t, int t, const CondEmbedding& e,
                      double guidance) {
  Tensor cond = model.predict(x_t, t, e);
  if (guidance == 1.0) return cond;
  return cfg_epsilon(cond, model.predict(x_t, t, CondEmbedding::null()), guidance);
}

Tensor ddpm_sample(const EpsilonPredictor& model, const CondEmbedding& e, const NoiseSchedule& s, const Shape& shape,
                   double guidance, std::uint64_t seed) {
  num::Rng rng(seed);
  Tensor x = rng.normal_tensor(shape);
  const Tensor zero(shape);
  for (int t = s.T; t >= 1; --t) {
    const Tensor eps = guided_epsilon(model, x, t, e, guidance);
    x = ddpm_step(x, t, eps, s, t > 1 ? rng.normal_tensor(shape) : zero);
  }
  return x;
}

Tensor ddim_sample(const EpsilonPredictor& model, const CondEmbedding& e, const NoiseSchedule& s, const Shape& shape,
                   int n_steps, double guidance, std::uint64_t seed) {
  const std::vector<int> ts = ddim_timesteps(s.T, n_steps);
  num::Rng rng(seed);
  Tensor x = rng.normal_tensor(shape);
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const int prev = i + 1 < ts.size() ? ts[i + 1] : 0;
    x = ddim_step(x, ts[i], prev, guided_epsilon(model, x, ts[i], e, guidance), s);
  }
  return x;
}

}  // namespace tridiff::diffusion
