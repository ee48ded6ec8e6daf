#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include "gradcheck.hpp"
#include "tridiff/numerics/adam.hpp"
#include "tridiff/numerics/io.hpp"
#include "tridiff/numerics/kernels.hpp"
#include "tridiff/numerics/ops.hpp"

using namespace tridiff;
using num::Shape;
using num::Tape;
using num::Tensor;
using num::Var;
using testing::gradcheck;

namespace {

constexpr int kInstances = 20;
constexpr double kTol = 1e-3;

// Runs the oracle on kInstances random draws of the given input shapes.
void check_op(const testing::GraphBuilder& build, const std::vector<Shape>& shapes, float lo = -1.0f,
              float hi = 1.0f) {
  num::Rng rng(1234);
  for (int n = 0; n < kInstances; ++n) {
    std::vector<Tensor> in;
    for (const auto& s : shapes) in.push_back(rng.uniform_tensor(s, lo, hi));
    const double err = gradcheck(build, in, static_cast<std::uint64_t>(n) + 1);
    CHECK_MESSAGE(err < kTol, "instance " << n << " rel err " << err);
  }
}

}  // namespace

#define CHECK_OP(...)            \
  do {                           \
    INFO("line " << __LINE__); \
    check_op(__VA_ARGS__);       \
  } while (0)

TEST_CASE("elementwise identities") {
  Tape tape;
  const Tensor x({3}, std::vector<float>{1.5f, -2.0f, 4.0f});
  Var xv = tape.constant(x);
  CHECK(num::add(tape.constant(Tensor({3})), xv).value() == x);
  CHECK(num::mul(xv, 1.0f).value() == x);
  CHECK_THROWS_AS(num::add(xv, tape.constant(Tensor({2}))), num::ShapeError);
  CHECK_THROWS_AS(num::log(tape.constant(Tensor({1}, 0.0f))), num::NumericError);
  CHECK_THROWS_AS(num::div(xv, tape.constant(Tensor({3}, 0.0f))), num::NumericError);
}

TEST_CASE("gradient of sum(x*x) at [1,2] is [2,4]") {
  Tape tape;
  Var x = tape.param(Tensor({2}, std::vector<float>{1, 2}));
  tape.backward(num::sum(num::mul(x, x)));
  CHECK(tape.grad(x)[0] == doctest::Approx(2.0f));
  CHECK(tape.grad(x)[1] == doctest::Approx(4.0f));
  const double err = gradcheck(
      [](Tape&, std::span<const Var> v) { return num::sum(num::mul(v[0], v[0])); },
      {Tensor({2}, std::vector<float>{1, 2})}, 7);
  CHECK(err < 1e-4);
}

TEST_CASE("tape invariants") {
  Tape tape;
  Var a = tape.param(Tensor({2}, 1.0f));
  Var unused = tape.param(Tensor({2}, 3.0f));
  Var b = num::exp(a);
  Var c = num::mul(b, 2.0f);
  Var d = num::sum(c);
  (void)num::square(unused);
  tape.backward(d);
  // Visiting order is exactly reverse recording order over contributing nodes.
  const auto& trace = tape.backward_trace();
  REQUIRE(trace.size() == 3);
  CHECK(trace[0] == d.id());
  CHECK(trace[1] == c.id());
  CHECK(trace[2] == b.id());
  for (float g : tape.grad(unused).data()) CHECK(g == 0.0f);
  CHECK_THROWS_AS(tape.backward(d), std::logic_error);
  CHECK_THROWS_AS(num::exp(a), std::logic_error);
}

TEST_CASE("elementwise gradients") {
  using V = std::span<const Var>;
  CHECK_OP([](Tape&, V v) { return num::add(v[0], v[1]); }, {{3, 4}, {3, 4}});
  CHECK_OP([](Tape&, V v) { return num::sub(v[0], v[1]); }, {{3, 4}, {1}});
  CHECK_OP([](Tape&, V v) { return num::mul(v[0], v[1]); }, {{3, 4}, {3, 4}});
  CHECK_OP([](Tape&, V v) { return num::mul(v[1], v[0]); }, {{5}, {1}});
  CHECK_OP([](Tape&, V v) { return num::div(v[0], v[1]); }, {{6}, {6}}, 0.5f, 2.0f);
  CHECK_OP([](Tape&, V v) { return num::exp(v[0]); }, {{7}});
  CHECK_OP([](Tape&, V v) { return num::log(v[0]); }, {{7}}, 0.5f, 3.0f);
  CHECK_OP([](Tape&, V v) { return num::square(v[0]); }, {{7}});
  CHECK_OP([](Tape&, V v) { return num::abs(v[0]); }, {{7}}, 0.1f, 1.0f);
  CHECK_OP([](Tape&, V v) { return num::sigmoid(v[0]); }, {{7}}, -4.0f, 4.0f);
  CHECK_OP([](Tape&, V v) { return num::softplus(v[0]); }, {{7}}, -4.0f, 4.0f);
  CHECK_OP([](Tape&, V v) { return num::relu(v[0]); }, {{7}}, 0.1f, 1.0f);
  CHECK_OP([](Tape&, V v) { return num::silu(v[0]); }, {{7}}, -3.0f, 3.0f);
  CHECK_OP([](Tape&, V v) { return num::tanh(v[0]); }, {{7}}, -2.0f, 2.0f);
  CHECK_OP([](Tape&, V v) { return num::clamp(v[0], -2.0f, 2.0f); }, {{7}});
  CHECK_OP([](Tape&, V v) { return num::mean(v[0]); }, {{4, 3}});
  CHECK_OP([](Tape&, V v) { return num::mse(v[0], v[1]); }, {{4, 3}, {4, 3}});
}

TEST_CASE("matmul") {
  Tape tape;
  Tensor eye({3, 3});
  for (int i = 0; i < 3; ++i) eye[static_cast<std::size_t>(i * 4)] = 1.0f;
  num::Rng rng(3);
  const Tensor x = rng.uniform_tensor({3, 2}, -1, 1);
  CHECK(num::matmul(tape.constant(eye), tape.constant(x)).value() == x);
  const Var p = num::matmul(tape.constant(Tensor({1, 1}, 2.0f)), tape.constant(Tensor({1, 1}, 3.0f)));
  CHECK(p.value()[0] == 6.0f);
  CHECK_THROWS_AS(num::matmul(tape.constant(Tensor({2, 3})), tape.constant(Tensor({2, 3}))), num::ShapeError);
  CHECK_OP([](Tape&, std::span<const Var> v) { return num::matmul(v[0], v[1]); }, {{4, 5}, {5, 3}});
  CHECK_OP([](Tape&, std::span<const Var> v) { return num::linear(v[0], v[1], v[2]); }, {{3, 4}, {4, 2}, {2}});
}

TEST_CASE("conv2d") {
  Tape tape;
  num::Rng rng(5);
  const Tensor x = rng.uniform_tensor({2, 5, 5}, -1, 1);
  Tensor id({2, 2, 1, 1});
  id[0] = 1.0f;
  id[3] = 1.0f;
  CHECK(num::conv2d(tape.constant(x), tape.constant(id), Var(), 1, 0).value() == x);
  const Var s = num::conv2d(tape.constant(Tensor({1, 3, 3}, 1.0f)), tape.constant(Tensor({1, 1, 3, 3}, 1.0f)),
                            Var(), 1, 0);
  CHECK(s.shape() == Shape{1, 1, 1});
  CHECK(s.value()[0] == 9.0f);
  CHECK_THROWS_AS(num::conv2d(tape.constant(x), tape.constant(id), Var(), 0, 0), std::invalid_argument);
  CHECK_THROWS_AS(num::conv2d(tape.constant(x), tape.constant(id), Var(), 1, -1), std::invalid_argument);
  CHECK_THROWS(num::conv2d(tape.constant(x), tape.constant(Tensor({1, 2, 7, 7})), Var(), 1, 0));
  CHECK_OP([](Tape&, std::span<const Var> v) { return num::conv2d(v[0], v[1], v[2], 1, 1); },
           {{2, 8, 8}, {3, 2, 3, 3}, {3}});
  CHECK_OP([](Tape&, std::span<const Var> v) { return num::conv2d(v[0], v[1], Var(), 2, 1); },
           {{2, 8, 8}, {2, 2, 3, 3}});
}

TEST_CASE("conv_transpose2d is the adjoint of conv2d") {
  num::Rng rng(9);
  const Tensor x = rng.uniform_tensor({3, 5, 5}, -1, 1);
  const Tensor w = rng.uniform_tensor({4, 3, 3, 3}, -1, 1);
  Tape tape;
  const Tensor y = num::conv2d(tape.constant(x), tape.constant(w), Var(), 2, 1).value();
  const Tensor r = rng.uniform_tensor(y.shape(), -1, 1);
  // <conv(x), r> == <x, conv^T(r)> with the same weights.
  const Tensor xt = num::conv_transpose2d(tape.constant(r), tape.constant(w), Var(), 2, 1).value();
  REQUIRE(xt.shape() == Shape{3, 5, 5});
  double lhs = 0, rhs = 0;
  for (std::size_t i = 0; i < y.numel(); ++i) lhs += static_cast<double>(y[i]) * r[i];
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 5; ++i)
      for (int j = 0; j < 5; ++j) rhs += static_cast<double>(x[(c * 5 + i) * 5 + j]) * xt[(c * 5 + i) * 5 + j];
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-5));
  CHECK_OP([](Tape&, std::span<const Var> v) { return num::conv_transpose2d(v[0], v[1], v[2], 2, 0); },
           {{3, 4, 4}, {3, 2, 2, 2}, {2}});
}

TEST_CASE("pooling, channel bias and shape ops") {
  using V = std::span<const Var>;
  CHECK_OP([](Tape&, V v) { return num::avg_pool2d(v[0], 2); }, {{2, 4, 6}});
  CHECK_OP([](Tape&, V v) { return num::upsample_nearest2d(v[0], 2); }, {{2, 3, 3}});
  CHECK_OP([](Tape&, V v) { return num::add_channel_bias(v[0], v[1]); }, {{3, 2, 2}, {3}});
  CHECK_OP([](Tape&, V v) { return num::reshape(v[0], {6, 2}); }, {{3, 4}});
  CHECK_OP([](Tape&, V v) { return num::concat(std::vector<Var>{v[0], v[1]}, 1); }, {{2, 3, 2}, {2, 1, 2}});
  CHECK_OP([](Tape&, V v) { return num::slice(v[0], 2, 1, 3); }, {{2, 3, 4}});
  CHECK_OP([](Tape&, V v) { return num::gather_rows(v[0], {2, 0, 2}); }, {{3, 4}});
  Tape tape;
  num::Rng rng(2);
  const Tensor a = rng.uniform_tensor({2, 3, 4}, -1, 1), b = rng.uniform_tensor({2, 5, 4}, -1, 1);
  const Var cat = num::concat(std::vector<Var>{tape.constant(a), tape.constant(b)}, 1);
  CHECK(num::slice(cat, 1, 0, 3).value() == a);
  CHECK(num::slice(cat, 1, 3, 8).value() == b);
}

TEST_CASE("grid_sample_2d") {
  Tape tape;
  const Var plane = tape.constant(Tensor({2, 4, 5}, 0.7f));
  num::Rng rng(1);
  const Var uv = tape.constant(rng.uniform_tensor({6, 2}, -1.5f, 1.5f));
  for (float v : num::grid_sample_2d(plane, uv).value().data()) CHECK(v == doctest::Approx(0.7f));

  // Texel (row 2, col 3) of a 5 x 7 plane sits at u = -1 + 2*3/6, v = -1 + 2*2/4.
  const Tensor p = rng.uniform_tensor({3, 5, 7}, -1, 1);
  const Var at = num::grid_sample_2d(tape.constant(p), tape.constant(Tensor({1, 2}, std::vector<float>{0.0f, 0.0f})));
  for (int c = 0; c < 3; ++c) CHECK(at.value()[static_cast<std::size_t>(c)] == p[(c * 5 + 2) * 7 + 3]);

  // Bilinear interpolation has kinks on texel lines; draw coordinates whose
  // fractional pixel position stays clear of them by far more than h.
  for (int n = 0; n < 20; ++n) {
    const Tensor pl = rng.uniform_tensor({3, 6, 5}, -1, 1);
    Tensor q({12, 2});
    for (int i = 0; i < 12; ++i) {
      const double px = static_cast<double>(rng.uniform_int(4)) + rng.uniform(0.05, 0.95);
      const double py = static_cast<double>(rng.uniform_int(5)) + rng.uniform(0.05, 0.95);
      q[static_cast<std::size_t>(2 * i)] = static_cast<float>(px / 2.0 - 1.0);
      q[static_cast<std::size_t>(2 * i + 1)] = static_cast<float>(py / 2.5 - 1.0);
    }
    const double err = gradcheck([](Tape&, std::span<const Var> v) { return num::grid_sample_2d(v[0], v[1]); },
                                 {pl, q}, static_cast<std::uint64_t>(n) + 1);
    CHECK_MESSAGE(err < kTol, "instance " << n << " rel err " << err);
  }
}

TEST_CASE("serial and parallel kernels agree") {
  using namespace num::kernels;
  num::Rng rng(11);
  for (auto ta : {Trans::No, Trans::Yes}) {
    for (auto tb : {Trans::No, Trans::Yes}) {
      const std::int64_t m = 13, n = 600, k = 21;
      const Tensor a = rng.uniform_tensor({m * k}, -1, 1), b = rng.uniform_tensor({k * n}, -1, 1);
      Tensor c1({m * n}, 0.5f), c2({m * n}, 0.5f);
      serial::gemm(ta, tb, m, n, k, a.ptr(), b.ptr(), c1.ptr(), true);
      parallel::gemm(ta, tb, m, n, k, a.ptr(), b.ptr(), c2.ptr(), true);
      for (std::size_t i = 0; i < c1.numel(); ++i) CHECK(c1[i] == doctest::Approx(c2[i]).epsilon(1e-5));
    }
  }
  const ConvGeom g{3, 9, 11, 3, 2, 1};
  const Tensor img = rng.uniform_tensor({3 * 9 * 11}, -1, 1);
  std::vector<float> s(static_cast<std::size_t>(g.col_rows() * g.col_cols())), p(s.size());
  serial::im2col(img.ptr(), g, s.data());
  parallel::im2col(img.ptr(), g, p.data());
  CHECK(s == p);
  Tensor back_s({3 * 9 * 11}), back_p({3 * 9 * 11});
  serial::col2im(s.data(), g, back_s.ptr());
  parallel::col2im(p.data(), g, back_p.ptr());
  CHECK(back_s == back_p);
  const Tensor plane = rng.uniform_tensor({4 * 8 * 8}, -1, 1), uv = rng.uniform_tensor({50 * 2}, -1.2f, 1.2f);
  Tensor o1({50 * 4}), o2({50 * 4});
  serial::grid_sample(plane.ptr(), 4, 8, 8, uv.ptr(), 50, o1.ptr());
  parallel::grid_sample(plane.ptr(), 4, 8, 8, uv.ptr(), 50, o2.ptr());
  for (std::size_t i = 0; i < o1.numel(); ++i) CHECK(o1[i] == doctest::Approx(o2[i]).epsilon(1e-6));
}

TEST_CASE("adam") {
  num::AdamConfig cfg{0.1f, 0.9f, 0.999f, 1e-8f};
  SUBCASE("zero gradient leaves parameters unchanged and decays moments") {
    num::AdamState st;
    std::vector<float> x{1.0f, -2.0f};
    num::adam_step(x, std::vector<float>{1.0f, 1.0f}, st, cfg);
    const auto m_before = st.m;
    const auto x_before = x;
    num::adam_step(x, std::vector<float>{0.0f, 0.0f}, st, cfg);
    CHECK(st.m[0] == doctest::Approx(0.9f * m_before[0]));
    // With m decayed but nonzero the update is nonzero; a fresh state shows
    // the pure zero-gradient case.
    num::AdamState fresh;
    std::vector<float> y = x_before;
    num::adam_step(y, std::vector<float>{0.0f, 0.0f}, fresh, cfg);
    CHECK(y == x_before);
  }
  SUBCASE("descent on x^2") {
    num::AdamState st;
    std::vector<float> x{1.0f};
    num::adam_step(x, std::vector<float>{2.0f * x[0]}, st, cfg);
    CHECK(x[0] < 1.0f);
  }
  SUBCASE("converges on a convex quadratic") {
    // f(x) = sum_i a_i (x_i - b_i)^2, minimum at b.
    const std::vector<float> a{1.0f, 3.0f, 0.5f}, b{0.3f, -1.0f, 2.0f};
    std::vector<float> x{0.0f, 0.0f, 0.0f}, g(3);
    num::AdamState st;
    num::AdamConfig c2{0.1f, 0.9f, 0.999f, 1e-8f};
    for (int it = 0; it < 200; ++it) {
      for (int i = 0; i < 3; ++i) g[i] = 2 * a[i] * (x[i] - b[i]);
      c2.lr = 0.05f * (1.0f + std::cos(3.14159265f * static_cast<float>(it) / 200.0f));
      num::adam_step(x, g, st, c2);
    }
    double gn = 0;
    for (int i = 0; i < 3; ++i) gn += std::pow(2 * a[i] * (x[i] - b[i]), 2);
    CHECK(std::sqrt(gn) < 1e-3);
  }
  SUBCASE("non-finite gradient is rejected") {
    num::AdamState st;
    std::vector<float> x{1.0f};
    CHECK_THROWS_AS(num::adam_step(x, std::vector<float>{NAN}, st, cfg), num::NumericError);
    CHECK(x[0] == 1.0f);
  }
}

TEST_CASE("TTNS round trip") {
  num::Rng rng(4);
  const Tensor t = rng.uniform_tensor({2, 3, 4}, -5, 5);
  std::stringstream ss;
  num::write_tensor(ss, t);
  const std::string bytes = ss.str();
  CHECK(bytes.substr(0, 4) == "TTNS");
  CHECK(bytes.size() == 4 + 4 + 4 + 3 * 8 + 24 * 4);
  CHECK(num::read_tensor(ss) == t);

  const auto dir = std::filesystem::temp_directory_path() / "tridiff_io_test";
  std::filesystem::create_directories(dir);
  num::TensorBundle bundle{{"w", t}, {"b", rng.uniform_tensor({5}, 0, 1)}};
  num::save_bundle(dir / "ck.ttns", bundle);
  const auto loaded = num::load_bundle(dir / "ck.ttns");
  CHECK(loaded.at("w") == t);
  CHECK(loaded.at("b") == bundle.at("b"));
  std::filesystem::remove_all(dir);
}
