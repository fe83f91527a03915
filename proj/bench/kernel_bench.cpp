// Parallel kernels against their serial references.
#include <benchmark/benchmark.h>

#include <random>

#include "epiguide/evalkit.hpp"
#include "epiguide/geometry.hpp"
#include "epiguide/guides.hpp"
#include "epiguide/kernels.hpp"

using namespace epiguide;

namespace {

Matrix random_matrix(int r, int c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  Matrix m(r, c);
  for (double& v : m.values()) v = nd(rng);
  return m;
}

// Token count of the default model: 2 * 49 + 2.
constexpr int kTokens = 100;

void BM_matmul(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const Matrix a = random_matrix(n, 64, 1), b = random_matrix(64, n, 2);
  Matrix out;
  for (auto _ : state) {
    kernels::matmul(a, b, out);
    benchmark::DoNotOptimize(out.data());
  }
}

void BM_matmul_serial(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const Matrix a = random_matrix(n, 64, 1), b = random_matrix(64, n, 2);
  Matrix out;
  for (auto _ : state) {
    kernels::serial::matmul(a, b, out);
    benchmark::DoNotOptimize(out.data());
  }
}

FundamentalMatrix bench_f() {
  const Mat3 k = (Mat3() << 300, 0, 112, 0, 300, 112, 0, 0, 1).finished();
  const auto v1 = CameraView::look_at({3, 0.5, 0}, Vec3::Zero(), Vec3::UnitY(), k, 224, 224);
  const auto v2 = CameraView::look_at({0.9, 0.4, 2.8}, Vec3::Zero(), Vec3::UnitY(), k, 224, 224);
  return relative_fundamental(v1, v2);
}

void BM_rasterize(benchmark::State& state) {
  const GridSpec g(static_cast<int>(state.range(0)), 224, 224);
  const auto f = bench_f();
  for (auto _ : state) benchmark::DoNotOptimize(rasterize_guide(f, g, g).g12.data());
}

void BM_rasterize_serial(benchmark::State& state) {
  const GridSpec g(static_cast<int>(state.range(0)), 224, 224);
  const auto f = bench_f();
  for (auto _ : state) benchmark::DoNotOptimize(rasterize_guide_serial(f, g, g).g12.data());
}

RetrievalIndex bench_index(int n) {
  RetrievalIndex index;
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  for (int i = 0; i < n; ++i) {
    IndexEntry e;
    e.image_id = i;
    e.instance_id = i / 5;
    e.global.resize(32);
    for (double& v : e.global) v = nd(rng);
    index.add(std::move(e));
  }
  return index;
}

void BM_rank_all(benchmark::State& state) {
  const auto index = bench_index(static_cast<int>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(rank_all(index, index.ids()).data());
}

void BM_rank_all_serial(benchmark::State& state) {
  const auto index = bench_index(static_cast<int>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(rank_all_serial(index, index.ids()).data());
}

}  // namespace

BENCHMARK(BM_matmul)->Arg(kTokens)->Arg(4 * kTokens);
BENCHMARK(BM_matmul_serial)->Arg(kTokens)->Arg(4 * kTokens);
BENCHMARK(BM_rasterize)->Arg(7)->Arg(14);
BENCHMARK(BM_rasterize_serial)->Arg(7)->Arg(14);
BENCHMARK(BM_rank_all)->Arg(500)->Arg(2000);
BENCHMARK(BM_rank_all_serial)->Arg(500)->Arg(2000);

BENCHMARK_MAIN();
