#include <benchmark/benchmark.h>

#include "dtr/seq2seq.hpp"
#include "dtr/special_tokens.hpp"

namespace {

dtr::nn::ModelConfig bench_config(int hidden) {
  dtr::nn::ModelConfig c;
  c.layers = 2;
  c.hidden = hidden;
  c.heads = 4;
  c.ff_dim = 2 * hidden;
  c.dropout = 0.1;
  c.max_len = 32;
  c.vocab_size = 200;
  return c;
}

std::vector<int> tokens(int n, int offset) {
  std::vector<int> t;
  for (int i = 0; i < n; ++i) t.push_back(dtr::kNumSpecial + (i * 7 + offset) % 150);
  return t;
}

// One forward/backward pass plus an Adam update on a single pair.
void BM_TrainStep(benchmark::State& state) {
  const int len = static_cast<int>(state.range(1));
  dtr::nn::Seq2SeqModel model(bench_config(static_cast<int>(state.range(0))), 1);
  dtr::nn::Adam adam(1e-3);
  dtr::nn::Rng rng(2);
  const auto src = tokens(len, 0), tgt = tokens(len, 3);
  for (auto _ : state) {
    model.params().zero_grad();
    dtr::nn::Graph g;
    const auto loss = model.loss(g, src, tgt, &rng);
    g.backward(loss);
    adam.step(model.params());
  }
  state.SetItemsProcessed(state.iterations() * len);
}
BENCHMARK(BM_TrainStep)->Args({32, 12})->Args({64, 12})->Args({64, 24});

void BM_BeamDecode(benchmark::State& state) {
  dtr::nn::Seq2SeqModel model(bench_config(64), 1);
  const auto src = tokens(12, 0);
  for (auto _ : state) benchmark::DoNotOptimize(dtr::nn::beam_decode(model, src, static_cast<int>(state.range(0)), 16));
}
BENCHMARK(BM_BeamDecode)->Arg(1)->Arg(5);

}  // namespace
