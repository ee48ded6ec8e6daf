#include "tridiff/cli/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

namespace tridiff::cli {

namespace {

template <typename T>
std::string format_value(const T& v) {
  if constexpr (std::is_same_v<T, bool>) {
    return v ? "true" : "false";
  } else if constexpr (std::is_same_v<T, std::string>) {
    return nlohmann::json(v).dump();
  } else if constexpr (std::is_floating_point_v<T>) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
  } else if constexpr (std::is_same_v<T, std::vector<int>>) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
  } else if constexpr (std::is_same_v<T, triplane::DecoderKind>) {
    return v == triplane::DecoderKind::Disentangled ? "disentangled" : "single";
  } else {
    return std::to_string(v);
  }
}

template <typename T>
T parse_number(const std::string& s) {
  T v{};
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw ConfigError("not a number: '" + s + "'");
  return v;
}

template <typename T>
T parse_value(const std::string& s) {
  if constexpr (std::is_same_v<T, bool>) {
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw ConfigError("not a boolean: '" + s + "'");
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!s.empty() && s.front() == '"') {
      try {
        return nlohmann::json::parse(s).get<std::string>();
      } catch (const nlohmann::json::exception&) {
        throw ConfigError("bad quoted string: " + s);
      }
    }
    return s;
  } else if constexpr (std::is_same_v<T, std::vector<int>>) {
    std::vector<int> out;
    std::stringstream ss(s);
    for (std::string item; std::getline(ss, item, ',');) out.push_back(parse_number<int>(item));
    return out;
  } else if constexpr (std::is_same_v<T, triplane::DecoderKind>) {
    if (s == "disentangled") return triplane::DecoderKind::Disentangled;
    if (s == "single") return triplane::DecoderKind::Single;
    throw ConfigError("decoder kind must be 'disentangled' or 'single', got '" + s + "'");
  } else {
    return parse_number<T>(s);
  }
}

struct Field {
  std::function<std::string(const PipelineConfig&)> get;
  std::function<void(PipelineConfig&, const std::string&)> set;
};

// Ordered registry of every serialized key.
class Registry {
 public:
  Registry() {
    add("profile", [](auto& c) -> auto& { return c.profile; });
    add("seed", [](auto& c) -> auto& { return c.seed; });

    add("data.source", [](auto& c) -> auto& { return c.data.source; });
    add("data.objects", [](auto& c) -> auto& { return c.data.objects; });
    add("data.views", [](auto& c) -> auto& { return c.data.views; });
    add("data.resolution", [](auto& c) -> auto& { return c.data.resolution; });

    add("fit.channels", [](auto& c) -> auto& { return c.fit.channels; });
    add("fit.split", [](auto& c) -> auto& { return c.fit.split; });
    add("fit.resolution", [](auto& c) -> auto& { return c.fit.resolution; });
    add("fit.joint_steps", [](auto& c) -> auto& { return c.fit.joint_steps; });
    add("fit.object_steps", [](auto& c) -> auto& { return c.fit.object_steps; });
    add("fit.rays_per_batch", [](auto& c) -> auto& { return c.fit.rays_per_batch; });
    add("fit.samples", [](auto& c) -> auto& { return c.fit.samples; });
    add("fit.lr_planes", [](auto& c) -> auto& { return c.fit.lr_planes; });
    add("fit.lr_decoder", [](auto& c) -> auto& { return c.fit.lr_decoder; });
    add("fit.lambda_tv", [](auto& c) -> auto& { return c.fit.lambda_tv; });
    add("fit.lambda_l1", [](auto& c) -> auto& { return c.fit.lambda_l1; });
    add("fit.decoder.kind", [](auto& c) -> auto& { return c.fit.decoder.kind; });
    add("fit.decoder.hidden", [](auto& c) -> auto& { return c.fit.decoder.hidden; });
    add("fit.decoder.layers", [](auto& c) -> auto& { return c.fit.decoder.layers; });
    add("fit.decoder.density_bias", [](auto& c) -> auto& { return c.fit.decoder.density_bias; });

    add("vae.latent_channels", [](auto& c) -> auto& { return c.vae.latent_channels; });
    add("vae.stage_channels", [](auto& c) -> auto& { return c.vae.stage_channels; });
    add("vae.kl_weight", [](auto& c) -> auto& { return c.vae.kl_weight; });
    add("vae.tv_weight", [](auto& c) -> auto& { return c.vae.tv_weight; });
    add("vae.lr", [](auto& c) -> auto& { return c.vae.lr; });
    add("vae.steps", [](auto& c) -> auto& { return c.vae.steps; });

    add("ldm.base_channels", [](auto& c) -> auto& { return c.ldm.denoiser.base_channels; });
    add("ldm.time_dim", [](auto& c) -> auto& { return c.ldm.denoiser.time_dim; });
    add("ldm.embed_dim", [](auto& c) -> auto& { return c.ldm.denoiser.embed_dim; });
    add("ldm.T", [](auto& c) -> auto& { return c.ldm.denoiser.T; });
    add("ldm.beta_start", [](auto& c) -> auto& { return c.ldm.beta_start; });
    add("ldm.beta_end", [](auto& c) -> auto& { return c.ldm.beta_end; });
    add("ldm.shift", [](auto& c) -> auto& { return c.ldm.shift; });
    add("ldm.cfg_dropout", [](auto& c) -> auto& { return c.ldm.cfg_dropout; });
    add("ldm.lr", [](auto& c) -> auto& { return c.ldm.lr; });
    add("ldm.steps", [](auto& c) -> auto& { return c.ldm.steps; });
    add("ldm.batch", [](auto& c) -> auto& { return c.ldm.batch; });
    add("ldm.ema_decay", [](auto& c) -> auto& { return c.ldm.ema_decay; });

    add("sample.prompt", [](auto& c) -> auto& { return c.sample.prompt; });
    add("sample.count", [](auto& c) -> auto& { return c.sample.count; });
    add("sample.ddim_steps", [](auto& c) -> auto& { return c.sample.ddim_steps; });
    add("sample.guidance", [](auto& c) -> auto& { return c.sample.guidance; });
    add("sample.render_views", [](auto& c) -> auto& { return c.sample.render_views; });

    add("refine.density_threshold", [](auto& c) -> auto& { return c.refine.density_threshold; });
    add("refine.stage1_grid", [](auto& c) -> auto& { return c.refine.stage1_grid; });
    add("refine.reference_views", [](auto& c) -> auto& { return c.refine.reference_views; });
    add("refine.sigma_d", [](auto& c) -> auto& { return c.refine.sigma_d; });
    add("refine.codec_factor", [](auto& c) -> auto& { return c.refine.codec_factor; });
    add("refine.sdf_resolution", [](auto& c) -> auto& { return c.refine.refine.sdf_resolution; });
    add("refine.max_faces", [](auto& c) -> auto& { return c.refine.refine.max_faces; });
    add("refine.distill_iters", [](auto& c) -> auto& { return c.refine.refine.distill_iters; });
    add("refine.latent_iters", [](auto& c) -> auto& { return c.refine.refine.latent_iters; });
    add("refine.pixel_iters", [](auto& c) -> auto& { return c.refine.refine.pixel_iters; });
    add("refine.skip_latent", [](auto& c) -> auto& { return c.refine.refine.skip_latent; });
    add("refine.render_resolution", [](auto& c) -> auto& { return c.refine.refine.sds.resolution; });
    add("refine.guidance", [](auto& c) -> auto& { return c.refine.refine.sds.guidance; });
    add("refine.t_min", [](auto& c) -> auto& { return c.refine.refine.sds.t_min; });
    add("refine.t_max", [](auto& c) -> auto& { return c.refine.refine.sds.t_max; });
    add("refine.optimize_geometry", [](auto& c) -> auto& { return c.refine.refine.sds.optimize_geometry; });
    add("refine.lr_texture", [](auto& c) -> auto& { return c.refine.refine.sds.lr.texture; });
    add("refine.lr_mlp", [](auto& c) -> auto& { return c.refine.refine.sds.lr.mlp; });
    add("refine.lr_geometry", [](auto& c) -> auto& { return c.refine.refine.sds.lr.geometry; });
    add("refine.texture.levels", [](auto& c) -> auto& { return c.refine.refine.texture.levels; });
    add("refine.texture.log2_table", [](auto& c) -> auto& { return c.refine.refine.texture.log2_table; });
    add("refine.texture.features", [](auto& c) -> auto& { return c.refine.refine.texture.features; });
    add("refine.texture.base_resolution", [](auto& c) -> auto& { return c.refine.refine.texture.base_resolution; });
    add("refine.texture.growth", [](auto& c) -> auto& { return c.refine.refine.texture.growth; });
    add("refine.texture.hidden", [](auto& c) -> auto& { return c.refine.refine.texture.hidden; });
    add("refine.smooth_iterations", [](auto& c) -> auto& { return c.refine.refine.smoothing.iterations; });
    add("refine.positive_suffix", [](auto& c) -> auto& { return c.refine.refine.positive_suffix; });
    add("refine.negative_prompt", [](auto& c) -> auto& { return c.refine.refine.negative_prompt; });
  }

  const std::vector<std::string>& order() const { return order_; }
  const Field& at(const std::string& key) const {
    const auto it = fields_.find(key);
    if (it == fields_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

 private:
  template <typename Access>
  void add(const std::string& key, Access access) {
    using T = std::remove_cvref_t<decltype(access(std::declval<PipelineConfig&>()))>;
    order_.push_back(key);
    fields_[key] = Field{
        [access](const PipelineConfig& c) { return format_value<T>(access(const_cast<PipelineConfig&>(c))); },
        [access, key](PipelineConfig& c, const std::string& v) {
          try {
            access(c) = parse_value<T>(v);
          } catch (const ConfigError& e) {
            throw ConfigError(key + ": " + e.what());
          }
        }};
  }

  std::vector<std::string> order_;
  std::map<std::string, Field> fields_;
};

const Registry& registry() {
  static const Registry r;
  return r;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

PipelineConfig desk() {
  PipelineConfig c;
  c.profile = "desk";
  c.fit.joint_steps = 500;
  c.fit.object_steps = 200;
  c.vae.steps = 500;
  c.refine.refine.distill_iters = 200;
  c.refine.refine.latent_iters = 200;
  c.refine.refine.pixel_iters = 100;
  c.refine.refine.sds.resolution = 64;
  return c;
}

PipelineConfig smoke() {
  PipelineConfig c;
  c.profile = "smoke";
  c.data.objects = 2;
  c.data.views = 4;
  c.fit.channels = 8;
  c.fit.split = 4;
  c.fit.resolution = 32;
  c.fit.joint_steps = 30;
  c.fit.object_steps = 10;
  c.fit.rays_per_batch = 64;
  c.fit.samples = 16;
  c.fit.decoder.hidden = 16;
  c.vae.latent_channels = 4;
  c.vae.stage_channels = {8, 8};
  c.vae.steps = 10;
  c.ldm.denoiser.base_channels = 8;
  c.ldm.denoiser.time_dim = 16;
  c.ldm.denoiser.embed_dim = 16;
  c.ldm.steps = 10;
  c.ldm.batch = 2;
  c.sample.ddim_steps = 5;
  c.sample.render_views = 2;
  c.refine.stage1_grid = 24;
  c.refine.reference_views = 4;
  c.refine.refine.sdf_resolution = 32;
  c.refine.refine.max_faces = 500;
  c.refine.refine.distill_iters = 10;
  c.refine.refine.latent_iters = 4;
  c.refine.refine.pixel_iters = 4;
  c.refine.refine.sds.resolution = 32;
  c.refine.refine.texture.levels = 4;
  c.refine.refine.texture.log2_table = 10;
  c.refine.refine.texture.hidden = 16;
  return c;
}

PipelineConfig full() {
  PipelineConfig c;
  c.profile = "full";
  c.data.objects = 64;
  c.data.source = "random";
  c.data.resolution = 512;
  c.fit.channels = 32;
  c.fit.split = 16;
  c.fit.resolution = 256;
  c.fit.samples = 128;
  c.fit.rays_per_batch = 4096;
  c.vae.stage_channels = {64, 128, 256};
  c.sample.ddim_steps = 200;
  c.sample.guidance = 7.5;
  c.refine.stage1_grid = 128;
  c.refine.refine = refine::RefineConfig::full();
  return c;
}

// Fields that must agree across stages follow their upstream owner.
void derive(PipelineConfig& c) {
  c.vae.in_channels = c.fit.channels;
  c.ldm.denoiser.latent_channels = c.vae.latent_channels;
}

}  // namespace

std::vector<std::string> PipelineConfig::profiles() { return {"desk", "smoke", "full"}; }

PipelineConfig PipelineConfig::from_profile(const std::string& name) {
  PipelineConfig c;
  if (name == "desk") c = desk();
  else if (name == "smoke") c = smoke();
  else if (name == "full") c = full();
  else throw ConfigError("unknown profile '" + name + "' (expected desk, smoke or full)");
  derive(c);
  return c;
}

std::vector<std::string> PipelineConfig::keys() { return registry().order(); }

std::string PipelineConfig::get(const std::string& key) const { return registry().at(key).get(*this); }

void PipelineConfig::set(const std::string& key, const std::string& value) {
  if (key == "profile") {
    // Switching profile resets to that profile's defaults.
    *this = from_profile(parse_value<std::string>(value));
    return;
  }
  registry().at(key).set(*this, value);
  derive(*this);
}

std::string PipelineConfig::to_text() const {
  std::string out;
  for (const auto& k : keys()) out += k + " = " + get(k) + "\n";
  return out;
}

PipelineConfig PipelineConfig::from_text(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> entries;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  std::string profile = "desk";
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(t.substr(0, eq)), value = trim(t.substr(eq + 1));
    if (!seen.insert(key).second) throw ConfigError("line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    try {
      registry().at(key);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
    if (key == "profile") profile = parse_value<std::string>(value);
    else entries.emplace_back(key, value);
  }
  PipelineConfig c = from_profile(profile);
  for (const auto& [k, v] : entries) c.set(k, v);
  return c;
}

PipelineConfig PipelineConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return from_text(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void PipelineConfig::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  out << to_text();
  if (!out) throw ConfigError("cannot write config " + path.string());
}

std::string PipelineConfig::stage_text(const std::string& stage) const {
  const std::string prefix = stage + ".";
  std::string out = "seed = " + get("seed") + "\n";
  for (const auto& k : keys()) {
    if (k.rfind(prefix, 0) == 0) out += k + " = " + get(k) + "\n";
  }
  return out;
}

void PipelineConfig::validate() const {
  if (data.source != "two_class" && data.source != "random") {
    throw ConfigError("data.source must be 'two_class' or 'random'");
  }
  if (data.objects < 1) throw ConfigError("data.objects must be >= 1");
  if (data.source == "two_class" && data.objects % 2 != 0) throw ConfigError("data.objects must be even for two_class");
  if (data.views < 2) throw ConfigError("data.views must be >= 2");
  if (data.resolution < 32) throw ConfigError("data.resolution must be >= 32");
  if (sample.count < 1 || sample.ddim_steps < 1 || sample.render_views < 1) {
    throw ConfigError("sample.count, sample.ddim_steps and sample.render_views must be >= 1");
  }
  if (refine.reference_views < 4) throw ConfigError("refine.reference_views must be >= 4");
  if (refine.stage1_grid < 8) throw ConfigError("refine.stage1_grid must be >= 8");
  if (refine.sigma_d < 0) throw ConfigError("refine.sigma_d must be >= 0");
  if (refine.codec_factor < 1 || refine.refine.sds.resolution % refine.codec_factor != 0) {
    throw ConfigError("refine.render_resolution must be divisible by refine.codec_factor");
  }
  if (vae.in_channels != fit.channels || ldm.denoiser.latent_channels != vae.latent_channels) {
    throw ConfigError("derived channel counts out of sync");
  }
  try {
    fit.validate();
    vae.validate();
    ldm.validate();
    refine.refine.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
}

}  // namespace tridiff::cli
