// Parallel kernels against their serial references at training-size shapes.
//   rmc_bench --benchmark_filter=gemm

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "rmc/kernels.hpp"

namespace k = rmc::kernels;

namespace {

std::vector<double> random_vector(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

// rows = tokens in a batch of 64 sequences of length 12, model width 64
constexpr std::size_t kRows = 768, kDim = 64, kFfn = 128;

template <bool Parallel>
void BM_gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_vector(kRows * kDim, 1), b = random_vector(kDim * n, 2);
  std::vector<double> c(kRows * n);
  for (auto _ : state) {
    if constexpr (Parallel)
      k::gemm(kRows, n, kDim, a, b, c, false);
    else
      k::reference::gemm(kRows, n, kDim, a, b, c, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * kRows * n * kDim));
}
BENCHMARK(BM_gemm<true>)->Name("gemm/parallel")->Arg(kDim)->Arg(3 * kDim)->Arg(kFfn);
BENCHMARK(BM_gemm<false>)->Name("gemm/reference")->Arg(kDim)->Arg(3 * kDim)->Arg(kFfn);

template <bool Parallel>
void BM_softmax(benchmark::State& state) {
  const std::size_t rows = kRows * 4, cols = 12;
  const auto x = random_vector(rows * cols, 3);
  std::vector<double> y(x.size());
  for (auto _ : state) {
    if constexpr (Parallel)
      k::softmax_rows(rows, cols, x, y);
    else
      k::reference::softmax_rows(rows, cols, x, y);
    benchmark::DoNotOptimize(y.data());
  }
}
BENCHMARK(BM_softmax<true>)->Name("softmax_rows/parallel");
BENCHMARK(BM_softmax<false>)->Name("softmax_rows/reference");

template <bool Parallel>
void BM_layer_norm(benchmark::State& state) {
  const auto x = random_vector(kRows * kDim, 4), gain = random_vector(kDim, 5), bias = random_vector(kDim, 6);
  std::vector<double> y(x.size()), mean(kRows), rstd(kRows);
  for (auto _ : state) {
    if constexpr (Parallel)
      k::layer_norm(kRows, kDim, x, gain, bias, 1e-5, y, mean, rstd);
    else
      k::reference::layer_norm(kRows, kDim, x, gain, bias, 1e-5, y, mean, rstd);
    benchmark::DoNotOptimize(y.data());
  }
}
BENCHMARK(BM_layer_norm<true>)->Name("layer_norm/parallel");
BENCHMARK(BM_layer_norm<false>)->Name("layer_norm/reference");

template <bool Parallel>
void BM_gelu(benchmark::State& state) {
  const auto x = random_vector(kRows * kFfn, 7);
  std::vector<double> y(x.size());
  for (auto _ : state) {
    if constexpr (Parallel)
      k::gelu(x, y);
    else
      k::reference::gelu(x, y);
    benchmark::DoNotOptimize(y.data());
  }
}
BENCHMARK(BM_gelu<true>)->Name("gelu/parallel");
BENCHMARK(BM_gelu<false>)->Name("gelu/reference");

k::AttentionLayout layout() {
  k::AttentionLayout l;
  l.num_heads = 4;
  l.model_dim = kDim;
  for (std::size_t s = 0; s < 64; ++s) l.segments.push_back({s * 12, 12});
  return l;
}

template <bool Parallel>
void BM_attention(benchmark::State& state) {
  const auto l = layout();
  const auto q = random_vector(kRows * kDim, 8), kk = random_vector(kRows * kDim, 9),
             v = random_vector(kRows * kDim, 10);
  const std::vector<double> mask(l.num_heads, 1.0);
  std::vector<double> probs(l.prob_size()), out(kRows * kDim);
  for (auto _ : state) {
    if constexpr (Parallel)
      k::attention(l, q, kk, v, mask, 0, probs, out);
    else
      k::reference::attention(l, q, kk, v, mask, 0, probs, out);
    benchmark::DoNotOptimize(out.data());
  }
}
BENCHMARK(BM_attention<true>)->Name("attention/parallel");
BENCHMARK(BM_attention<false>)->Name("attention/reference");

template <bool Parallel>
void BM_attention_backward(benchmark::State& state) {
  const auto l = layout();
  const auto q = random_vector(kRows * kDim, 8), kk = random_vector(kRows * kDim, 9),
             v = random_vector(kRows * kDim, 10), dout = random_vector(kRows * kDim, 11);
  const std::vector<double> mask(l.num_heads, 1.0);
  std::vector<double> probs(l.prob_size()), out(kRows * kDim);
  k::reference::attention(l, q, kk, v, mask, 0, probs, out);
  std::vector<double> dq(q.size()), dk(q.size()), dv(q.size()), dmask(l.segments.size() * l.num_heads);
  for (auto _ : state) {
    if constexpr (Parallel)
      k::attention_backward(l, q, kk, v, mask, 0, probs, dout, dq, dk, dv, dmask);
    else
      k::reference::attention_backward(l, q, kk, v, mask, 0, probs, dout, dq, dk, dv, dmask);
    benchmark::DoNotOptimize(dq.data());
  }
}
BENCHMARK(BM_attention_backward<true>)->Name("attention_backward/parallel");
BENCHMARK(BM_attention_backward<false>)->Name("attention_backward/reference");

}  // namespace

BENCHMARK_MAIN();
