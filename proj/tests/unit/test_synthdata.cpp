#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "tridiff/synthdata/synthdata.hpp"

using namespace tridiff;
using namespace tridiff::synth;
using num::Tensor;
using triplane::Camera;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::filesystem::path temp_dir(const std::string& name) {
  const auto d = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(d);
  return d;
}

}  // namespace

TEST_CASE("sample_object is deterministic and covers several kinds") {
  CHECK(object_to_json(sample_object(42)) == object_to_json(sample_object(42)));
  std::set<Kind> kinds;
  for (std::uint64_t s = 0; s < 100; ++s) {
    const auto o = sample_object(s);
    kinds.insert(o.kind);
    // Inside the unit cube: every cube corner and face center lies outside the shape.
    for (double x : {-1.0, 0.0, 1.0})
      for (double y : {-1.0, 0.0, 1.0})
        for (double z : {-1.0, 1.0}) CHECK(o.sdf({x, y, z}) > 0.0);
    CHECK(o.sdf({1, 0, 0}) > 0.0);
    CHECK(o.sdf({-1, 0, 0}) > 0.0);
  }
  CHECK(kinds.size() >= 3);
}

TEST_CASE("analytic SDF") {
  const auto s = make_primitive(Kind::Sphere, {0.3, 0, 0}, "red");
  CHECK(s.sdf({0, 0, 0}) == doctest::Approx(-0.3));
  const auto b = make_primitive(Kind::Box, {0.2, 0.3, 0.4}, "blue");
  CHECK(b.sdf({0.5, 0, 0}) == doctest::Approx(0.3));
  CHECK(b.sdf({0, 0, 0}) == doctest::Approx(-0.2));
  const auto t = make_primitive(Kind::Torus, {0.5, 0.1, 0}, "green");
  CHECK(t.sdf({0.5, 0, 0}) == doctest::Approx(-0.1));
  CHECK(t.sdf({0, 0, 0}) == doctest::Approx(0.4));
}

TEST_CASE("captions name the kind and dominant color") {
  CHECK(make_primitive(Kind::Torus, {0.4, 0.1, 0}, "red").caption() == "a red torus");
  CHECK(make_primitive(Kind::Box, {0.3, 0.3, 0.3}, "orange").caption() == "an orange box");
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto o = sample_object(s);
    const std::string cap = o.caption();
    CHECK(cap.find(kind_name(o.kind)) != std::string::npos);
    CHECK(cap.find(o.dominant_color()) != std::string::npos);
  }
}

TEST_CASE("render_gt") {
  Camera cam;
  cam.width = cam.height = 64;
  SUBCASE("empty object renders white") {
    const Tensor img = render_gt(ProceduralObject{}, cam);
    for (float v : img.data()) CHECK(v == 1.0f);
  }
  SUBCASE("centered sphere projects to the predicted disk") {
    const double r = 0.5;
    const Tensor img = render_gt(make_primitive(Kind::Sphere, {r, 0, 0}, "red"), cam);
    const double predicted = cam.focal() * std::tan(std::asin(r / cam.radius));
    int covered = 0;
    for (int c = 0; c < 64; ++c) covered += img[(32 * 64 + c) * 3 + 2] < 0.55f ? 1 : 0;
    CHECK(std::abs(covered / 2.0 - predicted) <= 1.0);
  }
  SUBCASE("opposite azimuths mirror a z-symmetric object") {
    ProceduralObject o;
    o.kind = Kind::Compound;
    o.parts = {make_primitive(Kind::Sphere, {0.3, 0, 0}, "red", {-0.3, 0, 0}).parts[0],
               make_primitive(Kind::Box, {0.2, 0.3, 0.25}, "blue", {0.35, 0.05, 0}).parts[0]};
    Camera a = cam, b = cam;
    a.elevation_deg = b.elevation_deg = 15;
    a.azimuth_deg = 0;
    b.azimuth_deg = 180;
    const Tensor ia = render_gt(o, a), ib = render_gt(o, b);
    double se = 0;
    for (int r = 0; r < 64; ++r)
      for (int c = 0; c < 64; ++c)
        for (int k = 0; k < 3; ++k) {
          const double d = ia[(r * 64 + c) * 3 + k] - ib[(r * 64 + (63 - c)) * 3 + k];
          se += d * d;
        }
    const double psnr = 10 * std::log10(1.0 / std::max(se / (64 * 64 * 3), 1e-10));
    CHECK(psnr > 40.0);
  }
}

TEST_CASE("build_manifest") {
  SUBCASE("one object, ten views") {
    const auto dir = temp_dir("tridiff_manifest_1");
    const auto m = build_manifest({1, 10, 32, 3, 0.0, {}}, dir);
    CHECK(m.entries.size() == 1);
    int images = 0;
    for (const auto& f : std::filesystem::directory_iterator(dir / "images")) images += f.is_regular_file();
    CHECK(images == 10);
    std::ifstream in(dir / kManifestFile);
    std::string line;
    int rows = 0;
    while (std::getline(in, line)) rows += !line.empty();
    CHECK(rows == 1);
    std::filesystem::remove_all(dir);
  }
  SUBCASE("zero objects") {
    const auto dir = temp_dir("tridiff_manifest_0");
    const auto m = build_manifest({0, 10, 32, 3, 0.0, {}}, dir);
    CHECK(m.entries.empty());
    CHECK(slurp(dir / kManifestFile).empty());
    std::filesystem::remove_all(dir);
  }
  SUBCASE("deterministic and re-renderable") {
    const auto d1 = temp_dir("tridiff_manifest_a"), d2 = temp_dir("tridiff_manifest_b");
    build_manifest({3, 4, 32, 11, 0.34, {}}, d1);
    build_manifest({3, 4, 32, 11, 0.34, {}}, d2);
    CHECK(slurp(d1 / kManifestFile) == slurp(d2 / kManifestFile));
    const auto m = read_manifest(d1 / kManifestFile);
    REQUIRE(m.entries.size() == 3);
    CHECK(m.entries[2].split == "val");
    for (const auto& e : m.entries) {
      for (const auto& v : e.views) {
        const Tensor again = render_gt(e.object, v.camera);
        const std::string tmp = (d2 / "again.ppm").string();
        write_ppm(tmp, again);
        CHECK(slurp(tmp) == slurp(d1 / v.image));
      }
    }
    CHECK(filter_quality(m).entries.size() == 3);
    std::filesystem::remove_all(d1);
    std::filesystem::remove_all(d2);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(build_manifest({1, 1, 32, 0, 0.0, {}}, temp_dir("tridiff_manifest_x")), std::invalid_argument);
    CHECK_THROWS(build_manifest({1, 2, 32, 0, 0.0, {}}, "/proc/tridiff_cannot_write"));
  }
}

TEST_CASE("two-class set") {
  const auto objs = two_class_objects(4, 1);
  REQUIRE(objs.size() == 8);
  int red = 0, blue = 0;
  for (const auto& o : objs) {
    red += o.caption() == "a red sphere";
    blue += o.caption() == "a blue box";
  }
  CHECK(red == 4);
  CHECK(blue == 4);
}

TEST_CASE("PPM round trip") {
  const auto dir = temp_dir("tridiff_ppm");
  std::filesystem::create_directories(dir);
  Tensor img({2, 3, 3});
  for (std::size_t i = 0; i < img.numel(); ++i) img[i] = static_cast<float>(i) / 17.0f;
  write_ppm(dir / "a.ppm", img);
  const Tensor back = read_ppm(dir / "a.ppm");
  CHECK(back.shape() == img.shape());
  for (std::size_t i = 0; i < img.numel(); ++i) CHECK(std::abs(back[i] - img[i]) <= 0.5f / 255.0f + 1e-6f);
  std::filesystem::remove_all(dir);
}
