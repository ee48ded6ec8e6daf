#include "tridiff/synthdata/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "tridiff/numerics/rng.hpp"

namespace tridiff::synth {

using num::Tensor;
using triplane::Camera;

std::string kind_name(Kind k) {
  switch (k) {
    case Kind::Sphere: return "sphere";
    case Kind::Box: return "box";
    case Kind::Torus: return "torus";
    case Kind::Compound: return "compound";
  }
  return "unknown";
}

Kind kind_from_name(const std::string& name) {
  if (name == "sphere") return Kind::Sphere;
  if (name == "box") return Kind::Box;
  if (name == "torus") return Kind::Torus;
  if (name == "compound") return Kind::Compound;
  throw std::invalid_argument("unknown primitive kind '" + name + "'");
}

double Primitive::sdf(const Vec3& world) const {
  const Vec3 p = world - center;
  switch (kind) {
    case Kind::Sphere: return norm(p) - size.x;
    case Kind::Box: {
      const Vec3 q{std::abs(p.x) - size.x, std::abs(p.y) - size.y, std::abs(p.z) - size.z};
      const Vec3 outside{std::max(q.x, 0.0), std::max(q.y, 0.0), std::max(q.z, 0.0)};
      return norm(outside) + std::min(std::max({q.x, q.y, q.z}), 0.0);
    }
    case Kind::Torus: {
      const double ring = std::hypot(p.x, p.z) - size.x;
      return std::hypot(ring, p.y) - size.y;
    }
    case Kind::Compound: break;
  }
  throw std::logic_error("compound is not a primitive");
}

double Primitive::volume() const {
  constexpr double pi = std::numbers::pi;
  switch (kind) {
    case Kind::Sphere: return 4.0 / 3.0 * pi * std::pow(size.x, 3);
    case Kind::Box: return 8.0 * size.x * size.y * size.z;
    case Kind::Torus: return 2.0 * pi * pi * size.x * size.y * size.y;
    case Kind::Compound: break;
  }
  return 0.0;
}

double ProceduralObject::sdf(const Vec3& p) const {
  double d = std::numeric_limits<double>::infinity();
  for (const auto& part : parts) d = std::min(d, part.sdf(p));
  return d;
}

Vec3 ProceduralObject::albedo_at(const Vec3& p) const {
  const Primitive* best = nullptr;
  double bd = std::numeric_limits<double>::infinity();
  for (const auto& part : parts) {
    const double d = part.sdf(p);
    if (d < bd) {
      bd = d;
      best = &part;
    }
  }
  return best ? best->albedo : Vec3{1, 1, 1};
}

std::string ProceduralObject::dominant_color() const {
  const Primitive* best = nullptr;
  for (const auto& part : parts) {
    if (!best || part.volume() > best->volume()) best = &part;
  }
  return best ? best->color : "";
}

namespace {
std::string with_article(const std::string& word) {
  const bool vowel = !word.empty() && std::string("aeiou").find(word[0]) != std::string::npos;
  return (vowel ? "an " : "a ") + word;
}
}  // namespace

std::string ProceduralObject::caption() const {
  if (parts.empty()) return "";
  if (kind == Kind::Compound && parts.size() == 2) {
    auto article = [](Kind k) { return std::string("a ") + kind_name(k); };
    return with_article(dominant_color()) + " compound of " + article(parts[0].kind) + " and " + article(parts[1].kind);
  }
  return with_article(dominant_color()) + " " + kind_name(kind);
}

const std::vector<PaletteEntry>& palette() {
  static const std::vector<PaletteEntry> p = {
      {"red", {0.85, 0.12, 0.10}},    {"green", {0.15, 0.70, 0.20}}, {"blue", {0.12, 0.25, 0.85}},
      {"yellow", {0.92, 0.82, 0.12}}, {"orange", {0.95, 0.50, 0.10}}, {"purple", {0.55, 0.20, 0.70}},
      {"cyan", {0.10, 0.75, 0.80}},   {"pink", {0.95, 0.45, 0.65}},  {"gray", {0.45, 0.45, 0.45}},
  };
  return p;
}

Vec3 palette_color(const std::string& name) {
  for (const auto& e : palette()) {
    if (name == e.name) return e.rgb;
  }
  throw std::invalid_argument("unknown palette color '" + name + "'");
}

ProceduralObject make_primitive(Kind kind, const Vec3& size, const std::string& color, const Vec3& center) {
  if (kind == Kind::Compound) throw std::invalid_argument("make_primitive: compound needs two parts");
  ProceduralObject o;
  o.kind = kind;
  o.parts.push_back({kind, center, size, palette_color(color), color});
  return o;
}

namespace {

Primitive random_primitive(num::Rng& rng, Kind kind, double scale, const Vec3& center) {
  Primitive p;
  p.kind = kind;
  p.center = center;
  switch (kind) {
    case Kind::Sphere: p.size = {scale * rng.uniform(0.3, 0.6), 0, 0}; break;
    case Kind::Box:
      p.size = {scale * rng.uniform(0.25, 0.5), scale * rng.uniform(0.25, 0.5), scale * rng.uniform(0.25, 0.5)};
      break;
    case Kind::Torus: p.size = {scale * rng.uniform(0.35, 0.55), scale * rng.uniform(0.1, 0.2), 0}; break;
    case Kind::Compound: break;
  }
  const auto& pal = palette();
  const auto& c = pal[static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(pal.size())))];
  p.albedo = c.rgb;
  p.color = c.name;
  return p;
}

}  // namespace

ProceduralObject sample_object(std::uint64_t seed) {
  num::Rng rng(seed * 0x9E3779B97F4A7C15ULL + 17);
  ProceduralObject o;
  o.seed = seed;
  o.kind = static_cast<Kind>(rng.uniform_int(4));
  if (o.kind == Kind::Compound) {
    const Kind a = static_cast<Kind>(rng.uniform_int(3)), b = static_cast<Kind>(rng.uniform_int(3));
    o.parts.push_back(random_primitive(rng, a, 0.6, {-0.3, 0, 0}));
    o.parts.push_back(random_primitive(rng, b, 0.5, {0.35, 0.05, 0}));
  } else {
    o.parts.push_back(random_primitive(rng, o.kind, 1.0, {}));
  }
  return o;
}

namespace {

constexpr int kMaxMarch = 256;
constexpr double kHitEps = 1e-4;
const Vec3 kLight{0.0, 1.0, 0.0};

Vec3 shade_ray(const ProceduralObject& obj, const triplane::Ray& ray) {
  const Vec3 white{1, 1, 1};
  double t0, t1;
  if (obj.parts.empty() || !triplane::intersect_unit_cube(ray, t0, t1)) return white;
  double t = t0;
  for (int i = 0; i < kMaxMarch && t <= t1; ++i) {
    const Vec3 p = ray.origin + t * ray.dir;
    const double d = obj.sdf(p);
    if (d < kHitEps) {
      const double e = 1e-5;
      const Vec3 n = normalize(Vec3{obj.sdf(p + Vec3{e, 0, 0}) - obj.sdf(p - Vec3{e, 0, 0}),
                                    obj.sdf(p + Vec3{0, e, 0}) - obj.sdf(p - Vec3{0, e, 0}),
                                    obj.sdf(p + Vec3{0, 0, e}) - obj.sdf(p - Vec3{0, 0, e})});
      const double light = 0.6 + 0.4 * std::max(0.0, dot(n, kLight));
      return obj.albedo_at(p) * light;
    }
    t += d;
  }
  return white;
}

}  // namespace

Tensor render_gt(const ProceduralObject& obj, const Camera& cam) {
  cam.validate();
  Tensor img({cam.height, cam.width, 3});
  static constexpr double kSub[2] = {0.25, 0.75};
#pragma omp parallel for schedule(dynamic, 4)
  for (int r = 0; r < cam.height; ++r) {
    for (int c = 0; c < cam.width; ++c) {
      Vec3 acc;
      for (double sy : kSub) {
        for (double sx : kSub) acc += shade_ray(obj, cam.ray_through(c + sx, r + sy));
      }
      acc = acc / 4.0;
      float* px = img.ptr() + (static_cast<std::size_t>(r) * cam.width + c) * 3;
      px[0] = static_cast<float>(acc.x);
      px[1] = static_cast<float>(acc.y);
      px[2] = static_cast<float>(acc.z);
    }
  }
  return img;
}

namespace {

nlohmann::json vec_json(const Vec3& v) { return nlohmann::json::array({v.x, v.y, v.z}); }
Vec3 json_vec(const nlohmann::json& j) { return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()}; }

}  // namespace

nlohmann::json object_to_json(const ProceduralObject& obj) {
  nlohmann::json parts = nlohmann::json::array();
  for (const auto& p : obj.parts) {
    parts.push_back({{"kind", kind_name(p.kind)},
                     {"center", vec_json(p.center)},
                     {"size", vec_json(p.size)},
                     {"albedo", vec_json(p.albedo)},
                     {"color", p.color}});
  }
  return {{"kind", kind_name(obj.kind)}, {"seed", obj.seed}, {"parts", parts}};
}

ProceduralObject object_from_json(const nlohmann::json& j) {
  ProceduralObject o;
  o.kind = kind_from_name(j.at("kind").get<std::string>());
  o.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& pj : j.at("parts")) {
    Primitive p;
    p.kind = kind_from_name(pj.at("kind").get<std::string>());
    p.center = json_vec(pj.at("center"));
    p.size = json_vec(pj.at("size"));
    p.albedo = json_vec(pj.at("albedo"));
    p.color = pj.at("color").get<std::string>();
    o.parts.push_back(p);
  }
  return o;
}

nlohmann::json camera_to_json(const Camera& cam) {
  return {{"radius", cam.radius},   {"azimuth", cam.azimuth_deg}, {"elevation", cam.elevation_deg},
          {"fov", cam.fov_deg},     {"width", cam.width},         {"height", cam.height}};
}

Camera camera_from_json(const nlohmann::json& j) {
  Camera c;
  c.radius = j.at("radius").get<double>();
  c.azimuth_deg = j.at("azimuth").get<double>();
  c.elevation_deg = j.at("elevation").get<double>();
  c.fov_deg = j.at("fov").get<double>();
  c.width = j.at("width").get<int>();
  c.height = j.at("height").get<int>();
  c.validate();
  return c;
}

Camera sample_camera(num::Rng& rng, int resolution) {
  Camera c;
  c.radius = 2.5;
  c.fov_deg = 49.1;
  c.azimuth_deg = rng.uniform(0.0, 360.0);
  c.elevation_deg = rng.uniform(-30.0, 60.0);
  c.width = c.height = resolution;
  return c;
}

nlohmann::json entry_to_json(const ManifestEntry& e) {
  nlohmann::json views = nlohmann::json::array();
  for (const auto& v : e.views) views.push_back({{"image", v.image}, {"camera", camera_to_json(v.camera)}});
  return {{"id", e.id},
          {"caption", e.caption},
          {"kind", kind_name(e.object.kind)},
          {"color", e.object.dominant_color()},
          {"split", e.split},
          {"quality", e.quality},
          {"resolution", e.resolution},
          {"object", object_to_json(e.object)},
          {"views", views}};
}

ManifestEntry entry_from_json(const nlohmann::json& j) {
  ManifestEntry e;
  e.id = j.at("id").get<std::string>();
  e.caption = j.at("caption").get<std::string>();
  e.split = j.at("split").get<std::string>();
  e.quality = j.value("quality", "high");
  e.resolution = j.at("resolution").get<int>();
  e.object = object_from_json(j.at("object"));
  for (const auto& v : j.at("views")) e.views.push_back({v.at("image").get<std::string>(), camera_from_json(v.at("camera"))});
  return e;
}

DatasetManifest build_manifest(const BuildOptions& opts, const std::filesystem::path& out_dir) {
  if (opts.n_views < 2) throw std::invalid_argument("a manifest needs at least 2 views per object");
  if (opts.resolution < 32) throw std::invalid_argument("render resolution must be at least 32");
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "images", ec);
  if (ec) throw std::runtime_error("cannot create dataset directory " + out_dir.string() + ": " + ec.message());
  std::vector<ProceduralObject> objects = opts.objects;
  if (objects.empty()) {
    for (int i = 0; i < opts.n_objects; ++i) objects.push_back(sample_object(opts.seed * 100003 + i));
  }
  const int n = static_cast<int>(objects.size());
  const int n_train = n - static_cast<int>(std::floor(opts.val_fraction * n));
  DatasetManifest m;
  num::Rng cam_rng(opts.seed ^ 0xC0FFEEULL);
  for (int i = 0; i < n; ++i) {
    ManifestEntry e;
    char id[32];
    std::snprintf(id, sizeof id, "obj_%04d", i);
    e.id = id;
    e.object = objects[static_cast<std::size_t>(i)];
    e.caption = e.object.caption();
    e.split = i < n_train ? "train" : "val";
    e.resolution = opts.resolution;
    for (int v = 0; v < opts.n_views; ++v) {
      const Camera cam = sample_camera(cam_rng, opts.resolution);
      char name[64];
      std::snprintf(name, sizeof name, "images/%s_%02d.ppm", id, v);
      write_ppm(out_dir / name, render_gt(e.object, cam));
      e.views.push_back({name, cam});
    }
    m.entries.push_back(std::move(e));
  }
  std::ofstream out(out_dir / kManifestFile);
  if (!out) throw std::runtime_error("cannot write manifest in " + out_dir.string());
  for (const auto& e : m.entries) out << entry_to_json(e).dump() << '\n';
  if (!out) throw std::runtime_error("manifest write failed in " + out_dir.string());
  return m;
}

DatasetManifest read_manifest(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("cannot open manifest " + manifest_path.string());
  DatasetManifest m;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    m.entries.push_back(entry_from_json(nlohmann::json::parse(line)));
  }
  return m;
}

DatasetManifest filter_quality(const DatasetManifest& m) {
  DatasetManifest out;
  for (const auto& e : m.entries) {
    if (e.quality == "high") out.entries.push_back(e);
  }
  return out;
}

std::vector<ProceduralObject> two_class_objects(int n_per_class, std::uint64_t seed) {
  num::Rng rng(seed + 7);
  std::vector<ProceduralObject> out;
  for (int i = 0; i < n_per_class; ++i) {
    auto s = make_primitive(Kind::Sphere, {rng.uniform(0.35, 0.6), 0, 0}, "red");
    s.seed = seed * 1000 + 2 * static_cast<std::uint64_t>(i);
    out.push_back(s);
    auto b = make_primitive(Kind::Box, {rng.uniform(0.25, 0.45), rng.uniform(0.25, 0.45), rng.uniform(0.25, 0.45)},
                            "blue");
    b.seed = s.seed + 1;
    out.push_back(b);
  }
  return out;
}

void write_ppm(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(2) != 3) throw num::ShapeError("write_ppm expects H x W x 3");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "P6\n" << image.dim(1) << ' ' << image.dim(0) << "\n255\n";
  std::string bytes(image.numel(), '\0');
  for (std::size_t i = 0; i < image.numel(); ++i) {
    bytes[i] = static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(image[i], 0.0f, 1.0f) * 255.0f)));
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

Tensor read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string magic;
  int w = 0, h = 0, maxv = 0;
  in >> magic >> w >> h >> maxv;
  in.get();
  if (magic != "P6" || w < 1 || h < 1 || maxv != 255) throw std::runtime_error("unsupported PPM " + path.string());
  std::string bytes(static_cast<std::size_t>(w) * h * 3, '\0');
  if (!in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()))) throw std::runtime_error("truncated PPM");
  Tensor img({h, w, 3});
  for (std::size_t i = 0; i < bytes.size(); ++i) img[i] = static_cast<unsigned char>(bytes[i]) / 255.0f;
  return img;
}

}  // namespace tridiff::synth
