// Serial reference vs OpenMP kernels on shapes typical for the model
// (token-by-width activations, attention score blocks).
#include <benchmark/benchmark.h>

#include "mstar/kernels.hpp"
#include "mstar/mat.hpp"

using namespace mstar;

namespace {

Mat make(int r, int c, uint64_t seed) {
  Rng rng(seed);
  return randn(r, c, 1.0, rng);
}

void BM_matmul_ref(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  Mat A = make(n, n, 1), B = make(n, n, 2), C;
  for (auto _ : state) {
    kernels::matmul_ref(A, B, C);
    benchmark::DoNotOptimize(C.a.data());
  }
  state.SetItemsProcessed(state.iterations() * 2L * n * n * n);
}

void BM_matmul_omp(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  Mat A = make(n, n, 1), B = make(n, n, 2), C;
  for (auto _ : state) {
    kernels::matmul(A, B, C);
    benchmark::DoNotOptimize(C.a.data());
  }
  state.SetItemsProcessed(state.iterations() * 2L * n * n * n);
}

void BM_matmul_nt_ref(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  Mat A = make(n, 64, 1), B = make(n, 64, 2), C;
  for (auto _ : state) {
    kernels::matmul_nt_ref(A, B, C);
    benchmark::DoNotOptimize(C.a.data());
  }
}

void BM_matmul_nt_omp(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  Mat A = make(n, 64, 1), B = make(n, 64, 2), C;
  for (auto _ : state) {
    kernels::matmul_nt(A, B, C);
    benchmark::DoNotOptimize(C.a.data());
  }
}

void BM_softmax_ref(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  Mat X0 = make(n, n, 3);
  for (auto _ : state) {
    Mat X = X0;
    kernels::softmax_rows_ref(X);
    benchmark::DoNotOptimize(X.a.data());
  }
}

void BM_softmax_omp(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  Mat X0 = make(n, n, 3);
  for (auto _ : state) {
    Mat X = X0;
    kernels::softmax_rows(X);
    benchmark::DoNotOptimize(X.a.data());
  }
}

}  // namespace

BENCHMARK(BM_matmul_ref)->Arg(64)->Arg(144)->Arg(256);
BENCHMARK(BM_matmul_omp)->Arg(64)->Arg(144)->Arg(256);
BENCHMARK(BM_matmul_nt_ref)->Arg(144)->Arg(512);
BENCHMARK(BM_matmul_nt_omp)->Arg(144)->Arg(512);
BENCHMARK(BM_softmax_ref)->Arg(144)->Arg(512);
BENCHMARK(BM_softmax_omp)->Arg(144)->Arg(512);

BENCHMARK_MAIN();
