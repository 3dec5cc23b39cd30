#include <benchmark/benchmark.h>

#include <random>

#include "dtr/metrics.hpp"

namespace {

std::vector<dtr::metrics::Tokens> random_corpus(std::size_t n, std::size_t len, int types) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> pick(0, types - 1);
  std::vector<dtr::metrics::Tokens> out(n);
  for (auto& s : out) {
    for (std::size_t i = 0; i < len; ++i) s.push_back("w" + std::to_string(pick(rng)));
  }
  return out;
}

void BM_ScoreCorpus(benchmark::State& state) {
  const auto hyps = random_corpus(static_cast<std::size_t>(state.range(0)), 20, 500);
  const auto refs = random_corpus(static_cast<std::size_t>(state.range(0)), 20, 500);
  for (auto _ : state) benchmark::DoNotOptimize(dtr::metrics::score_corpus(hyps, refs));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ScoreCorpus)->Arg(100)->Arg(1000);

void BM_RougeL(benchmark::State& state) {
  const auto c = random_corpus(2, static_cast<std::size_t>(state.range(0)), 50);
  for (auto _ : state) benchmark::DoNotOptimize(dtr::metrics::rouge_l(c[0], c[1]));
}
BENCHMARK(BM_RougeL)->Arg(16)->Arg(64);

}  // namespace
