#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "tridiff/numerics/hash.hpp"
#include "tridiff/numerics/ops.hpp"
#include "tridiff/vae/vae.hpp"

using namespace tridiff;
using namespace tridiff::vae;
using num::Tensor;
using triplane::TriPlane;

namespace {

TriPlane random_triplane(int c, int r, int split, std::uint64_t seed) {
  num::Rng rng(seed);
  TriPlane tp = TriPlane::zeros(c, r, split);
  for (auto& p : tp.planes) p = rng.uniform_tensor(p.shape(), -2.0f, 2.0f);
  return tp;
}

bool same_bits(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::memcmp(a.ptr(), b.ptr(), a.numel() * sizeof(float)) == 0;
}

VaeConfig tiny_config() {
  VaeConfig cfg;
  cfg.in_channels = 4;
  cfg.latent_channels = 2;
  cfg.stage_channels = {8, 8};
  return cfg;
}

}  // namespace

TEST_CASE("rollout") {
  const TriPlane tp = random_triplane(16, 64, 8, 1);
  const RolledPlane rp = rollout(tp);
  CHECK(rp.data.shape() == num::Shape{16, 64, 192});
  const TriPlane back = unroll(rp);
  CHECK(back.split == 8);
  for (int k = 0; k < 3; ++k) CHECK(same_bits(back.planes[k], tp.planes[k]));

  // yz sits in the middle third.
  CHECK(rp.data[static_cast<std::size_t>((3 * 64 + 5) * 192 + 64 + 7)] == tp.planes[1][(3 * 64 + 5) * 64 + 7]);

  CHECK_THROWS_AS(unroll(RolledPlane{Tensor({4, 8, 25}), 1}), num::ShapeError);
  CHECK_THROWS_AS(unroll(RolledPlane{Tensor({4, 8, 27}), 1}), num::ShapeError);

  // The differentiable split agrees with the plain one.
  num::Tape tape;
  const auto tv = unroll(tape.constant(rp.data), rp.split);
  for (int k = 0; k < 3; ++k) CHECK(same_bits(tv.planes[k].value(), tp.planes[k]));
}

TEST_CASE("latent shapes and compression") {
  const VaeConfig desk;
  CHECK(desk.latent_shape({16, 64, 192}) == num::Shape{8, 16, 48});

  VaeConfig full;
  full.in_channels = 32;
  full.stage_channels = {64, 128, 256};
  const num::Shape in{32, 256, 3 * 256};
  const num::Shape lat = full.latent_shape(in);
  CHECK(lat == num::Shape{8, 32, 96});
  const std::int64_t in_n = in[0] * in[1] * in[2], lat_n = lat[0] * lat[1] * lat[2];
  CHECK(in_n == 256 * 256 * 32 * 3);
  CHECK(lat_n == 32 * 32 * 8 * 3);
  CHECK(in_n / lat_n == 256);
  CHECK(in_n % lat_n == 0);

  CHECK_THROWS_AS(desk.latent_shape({16, 62, 186}), num::ShapeError);
  CHECK_THROWS_AS(desk.latent_shape({8, 64, 192}), num::ShapeError);
}

TEST_CASE("encode and decode at init") {
  num::Rng rng(2);
  const Vae v = Vae::create(VaeConfig{}, rng);
  const RolledPlane rp = rollout(random_triplane(16, 64, 8, 3));
  const Tensor z = encode(v, rp);
  CHECK(z.shape() == num::Shape{8, 16, 48});
  CHECK(z.all_finite());
  CHECK(same_bits(z, encode(v, rp)));  // inference uses mu only
  const RolledPlane out = decode(v, z, rp.split);
  CHECK(out.data.shape() == rp.data.shape());
  CHECK(out.data.all_finite());

  // Training-mode encoding is stochastic around mu.
  num::Tape tape;
  const auto vars = bind(tape, v, false);
  num::Rng noise(4);
  const Encoded e = encode(v, vars, tape.constant(rp.data), &noise);
  CHECK(same_bits(e.mu.value(), z));
  CHECK_FALSE(same_bits(e.z.value(), z));
  for (std::size_t i = 0; i < e.logvar.numel(); ++i) {
    REQUIRE(e.logvar.value()[i] >= kLogvarMin);
    REQUIRE(e.logvar.value()[i] <= kLogvarMax);
  }
}

TEST_CASE("vae_loss") {
  const VaeConfig defaults;
  CHECK(defaults.kl_weight == 1e-5f);
  CHECK(defaults.tv_weight == 2e-3f);

  num::Tape tape;
  Tensor x({2, 4, 12}, 0.7f);  // constant planes
  const auto xv = tape.constant(x);
  const auto zero = tape.constant(Tensor({2, 2, 6}));
  CHECK(vae_loss(xv, xv, zero, zero, 1, 1e-5f, 2e-3f).value().item() == 0.0f);

  SUBCASE("KL against the closed form") {
    num::Rng rng(5);
    Tensor mu = rng.normal_tensor({2, 3, 3});
    Tensor lv = rng.uniform_tensor({2, 3, 3}, -2.0f, 2.0f);
    double expect = 0.0;
    for (std::size_t i = 0; i < mu.numel(); ++i) {
      expect += 0.5 * (mu[i] * mu[i] + std::exp(static_cast<double>(lv[i])) - 1.0 - lv[i]);
    }
    expect /= static_cast<double>(mu.numel());
    const float kl = kl_divergence(tape.constant(mu), tape.constant(lv)).value().item();
    CHECK(kl == doctest::Approx(expect).epsilon(1e-5));
    CHECK(kl > 0.0f);
  }

  SUBCASE("KL is zero only at the prior") {
    CHECK(kl_divergence(zero, zero).value().item() == 0.0f);
    Tensor mu({2, 2, 6});
    mu[3] = 1e-2f;
    CHECK(kl_divergence(tape.constant(mu), zero).value().item() > 0.0f);
    Tensor lv({2, 2, 6});
    lv[0] = -1e-2f;
    CHECK(kl_divergence(zero, tape.constant(lv)).value().item() > 0.0f);
  }

  SUBCASE("terms combine with their weights") {
    num::Rng rng(6);
    const Tensor xh = rng.normal_tensor({2, 4, 12});
    const Tensor mu = rng.normal_tensor({2, 2, 6});
    const Tensor lv = rng.normal_tensor({2, 2, 6});
    double rec = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) rec += (xh[i] - x[i]) * (xh[i] - x[i]);
    rec /= static_cast<double>(x.numel());
    const auto xhv = tape.constant(xh);
    const double kl = kl_divergence(tape.constant(mu), tape.constant(lv)).value().item();
    const double tv = triplane::tv_loss(unroll(RolledPlane{xh, 1}));
    const float total = vae_loss(xv, xhv, tape.constant(mu), tape.constant(lv), 1, 1e-5f, 2e-3f).value().item();
    CHECK(total == doctest::Approx(rec + 1e-5 * kl + 2e-3 * tv).epsilon(1e-5));
  }
}

TEST_CASE("latent statistics") {
  num::Rng rng(7);
  std::vector<Tensor> set;
  for (int i = 0; i < 6; ++i) {
    Tensor l = rng.normal_tensor({8, 4, 12});
    for (std::size_t k = 0; k < l.numel(); ++k) l[k] = 3.0f * l[k] + 1.5f + static_cast<float>(k / 48);
    set.push_back(l);
  }
  const LatentStats st = compute_latent_stats(set);
  REQUIRE(st.mean.size() == 8u);

  std::vector<Tensor> normed;
  for (const auto& l : set) normed.push_back(normalize(l, st));
  for (int ch = 0; ch < 8; ++ch) {
    double s = 0, sq = 0;
    std::size_t n = 0;
    for (const auto& l : normed) {
      for (int i = 0; i < 48; ++i) {
        const double v = l[static_cast<std::size_t>(ch * 48 + i)];
        s += v;
        sq += v * v;
        ++n;
      }
    }
    const double mean = s / n;
    CHECK(std::abs(mean) < 1e-6);
    CHECK(std::abs(std::sqrt(sq / n - mean * mean) - 1.0) < 1e-3);
  }
  for (std::size_t i = 0; i < set.size(); ++i) {
    const Tensor back = denormalize(normed[i], st);
    for (std::size_t k = 0; k < back.numel(); ++k) REQUIRE(std::abs(back[k] - set[i][k]) <= 1e-6f * (1 + std::abs(set[i][k])));
  }

  SUBCASE("a latent and its negation") {
    const Tensor l = set[0];
    Tensor neg = l;
    for (std::size_t k = 0; k < neg.numel(); ++k) neg[k] = -neg[k];
    const LatentStats pm = compute_latent_stats({l, neg});
    for (int ch = 0; ch < 8; ++ch) {
      double sq = 0;
      for (int i = 0; i < 48; ++i) sq += static_cast<double>(l[ch * 48 + i]) * l[ch * 48 + i];
      CHECK(std::abs(pm.mean[ch]) < 1e-6f);
      CHECK(pm.std[ch] == doctest::Approx(std::sqrt(sq / 48)).epsilon(1e-6));
    }
  }

  CHECK_THROWS_AS(compute_latent_stats({set[0]}), std::invalid_argument);
  Tensor flat({8, 4, 12}, 2.0f);
  CHECK_THROWS_AS(compute_latent_stats({flat, flat}), num::NumericError);
  CHECK_THROWS_AS(normalize(Tensor({4, 4, 12}), st), num::ShapeError);
}

TEST_CASE("training reduces the loss and persists") {
  // Smooth planes, like fitted ones; white noise would be incompressible.
  std::vector<TriPlane> data;
  for (int s = 0; s < 2; ++s) {
    TriPlane tp = TriPlane::zeros(4, 16, 2);
    for (int k = 0; k < 3; ++k) {
      for (int c = 0; c < 4; ++c) {
        for (int y = 0; y < 16; ++y) {
          for (int x = 0; x < 16; ++x) {
            tp.planes[k][(c * 16 + y) * 16 + x] =
                0.5f * std::sin(0.3f * (c + 1) * x + 0.2f * k * y + static_cast<float>(s)) * std::cos(0.25f * y);
          }
        }
      }
    }
    data.push_back(tp);
  }
  VaeConfig cfg = tiny_config();
  cfg.steps = 400;
  cfg.lr = 5e-3f;
  cfg.latent_channels = 4;
  int calls = 0;
  const TrainResult r = train_vae(data, cfg, [&](int, float) { ++calls; });
  CHECK(calls == 400);
  double head = 0, tail = 0;
  for (int i = 0; i < 10; ++i) {
    head += r.losses[i];
    tail += r.losses[r.losses.size() - 1 - i];
  }
  CHECK(tail < 0.5 * head);

  const auto dir = std::filesystem::temp_directory_path() / "tridiff_vae_test";
  std::filesystem::create_directories(dir);
  save_vae(dir / "vae.ttns", r.vae);
  const Vae back = load_vae(dir / "vae.ttns");
  const auto a = r.vae.params();
  const auto b = back.params();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(same_bits(*a[i], *b[i]));
  CHECK(back.config.stage_channels == cfg.stage_channels);

  std::vector<Tensor> lat;
  for (const auto& tp : data) lat.push_back(encode(back, rollout(tp)));
  const LatentStats st = compute_latent_stats(lat);
  const std::string sha = num::sha256_file(dir / "vae.ttns");
  save_latent_stats(dir / "stats.json", st, sha);
  std::string got;
  const LatentStats st2 = load_latent_stats(dir / "stats.json", &got);
  CHECK(got == sha);
  CHECK(st2.mean == st.mean);
  CHECK(st2.std == st.std);
  std::filesystem::remove_all(dir);

  CHECK_THROWS_AS(train_vae({}, cfg), std::invalid_argument);
}

TEST_CASE("sha256 digests") {
  CHECK(num::sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(num::sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}
