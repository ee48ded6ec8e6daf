// Serial reference kernels against their OpenMP counterparts at the sizes the
// desk-scale VAE and tri-plane decoder actually hit.
#include <benchmark/benchmark.h>

#include <vector>

#include "tridiff/numerics/kernels.hpp"
#include "tridiff/numerics/rng.hpp"

using namespace tridiff::num;
using namespace tridiff::num::kernels;

namespace {

std::vector<float> random_buffer(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.uniform(-1, 1));
  return v;
}

template <bool Parallel>
void BM_gemm(benchmark::State& state) {
  const std::int64_t m = state.range(0), n = state.range(1), k = state.range(2);
  const auto a = random_buffer(static_cast<std::size_t>(m * k), 1);
  const auto b = random_buffer(static_cast<std::size_t>(k * n), 2);
  std::vector<float> c(static_cast<std::size_t>(m * n));
  for (auto _ : state) {
    if constexpr (Parallel) {
      parallel::gemm(Trans::No, Trans::No, m, n, k, a.data(), b.data(), c.data(), false);
    } else {
      serial::gemm(Trans::No, Trans::No, m, n, k, a.data(), b.data(), c.data(), false);
    }
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * m * n * k);
}

template <bool Parallel>
void BM_im2col(benchmark::State& state) {
  const ConvGeom g{state.range(0), 32, 96, 3, 1, 1};
  const auto img = random_buffer(static_cast<std::size_t>(g.channels * g.height * g.width), 3);
  std::vector<float> cols(static_cast<std::size_t>(g.col_rows() * g.col_cols()));
  for (auto _ : state) {
    if constexpr (Parallel) {
      parallel::im2col(img.data(), g, cols.data());
    } else {
      serial::im2col(img.data(), g, cols.data());
    }
    benchmark::DoNotOptimize(cols.data());
  }
}

template <bool Parallel>
void BM_grid_sample(benchmark::State& state) {
  const std::int64_t n = state.range(0), ch = 8, res = 64;
  const auto plane = random_buffer(static_cast<std::size_t>(ch * res * res), 4);
  const auto uv = random_buffer(static_cast<std::size_t>(2 * n), 5);
  std::vector<float> out(static_cast<std::size_t>(n * ch));
  for (auto _ : state) {
    if constexpr (Parallel) {
      parallel::grid_sample(plane.data(), ch, res, res, uv.data(), n, out.data());
    } else {
      serial::grid_sample(plane.data(), ch, res, res, uv.data(), n, out.data());
    }
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(state.iterations() * n);
}

}  // namespace

BENCHMARK(BM_gemm<false>)->Args({64, 1536, 576})->Args({256, 64, 64});
BENCHMARK(BM_gemm<true>)->Args({64, 1536, 576})->Args({256, 64, 64});
BENCHMARK(BM_im2col<false>)->Arg(16)->Arg(64);
BENCHMARK(BM_im2col<true>)->Arg(16)->Arg(64);
BENCHMARK(BM_grid_sample<false>)->Arg(8192);
BENCHMARK(BM_grid_sample<true>)->Arg(8192);

BENCHMARK_MAIN();
