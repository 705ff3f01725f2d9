#include <benchmark/benchmark.h>

#include "miai/refiner.hpp"
#include "miai/trainer.hpp"

using namespace miai;

namespace {

Tensor random_tensor(std::size_t r, std::size_t c, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor t({r, c});
  for (auto& v : t.values()) v = n(rng);
  return t;
}

ModelConfig bench_model(std::size_t hidden) {
  ModelConfig cfg;
  cfg.modalities = {{"a", 16, Likelihood::kGaussian, 1.0, 0}, {"b", 16, Likelihood::kBernoulli, 1.0, 0}};
  cfg.latent_dim = 8;
  cfg.hidden = hidden;
  cfg.refiner_hidden = hidden;
  return model_for_family(cfg, Family::kProposed);
}

Batch bench_batch(std::size_t rows, Rng& rng) {
  Batch b;
  b.x.push_back(random_tensor(rows, 16, rng));
  Tensor bits({rows, 16});
  std::bernoulli_distribution coin(0.5);
  for (auto& v : bits.values()) v = coin(rng) ? 1.0 : 0.0;
  b.x.push_back(std::move(bits));
  return b;
}

}  // namespace

// Forward + backward of one [n, n] x [n, n] product.
static void BM_MatmulForwardBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const auto a = random_tensor(n, n, rng), b = random_tensor(n, n, rng);
  for (auto _ : state) {
    Graph g;
    auto va = g.variable(a, "a");
    auto vb = g.variable(b, "b");
    auto grads = g.backward(g.sum(g.matmul(va, vb)));
    benchmark::DoNotOptimize(grads);
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_MatmulForwardBackward)->Arg(32)->Arg(64)->Arg(128);

static void BM_RefineStep(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  const auto cfg = bench_model(64);
  Rng rng(2);
  const auto params = init_params(cfg, rng);
  const auto x = random_tensor(rows, 16, rng);
  const RefinementState s{random_tensor(rows, 8, rng), random_tensor(rows, 8, rng), 0};
  const auto gm = random_tensor(rows, 8, rng), gs = random_tensor(rows, 8, rng);
  for (auto _ : state) {
    auto next = refine_step(params, cfg, 0, x, s, gm, gs);
    benchmark::DoNotOptimize(next);
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(rows));
}
BENCHMARK(BM_RefineStep)->Arg(1)->Arg(64)->Arg(256);

// Multimodal ELBO of the PoE posterior, forward and backward over all parameters.
static void BM_ElboGradient(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  const auto cfg = bench_model(64);
  Rng rng(3);
  const auto params = init_params(cfg, rng);
  const auto batch = bench_batch(rows, rng);
  const auto noise = random_tensor(rows, 8, rng);
  for (auto _ : state) {
    Graph g;
    ParamVars pv(g, params, [](const std::string&) { return true; });
    auto x = bind_batch(g, batch);
    auto q = poe_posterior(pv, cfg, x, 0b11);
    auto loss = g.mean(elbo(pv, cfg, x, q, 0b11, g.constant(noise)).total);
    auto grads = pv.collect(g.backward(loss));
    benchmark::DoNotOptimize(grads);
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(rows));
}
BENCHMARK(BM_ElboGradient)->Arg(64)->Arg(256);

// Unrolled refinement loss for T steps, forward and backward.
static void BM_RefinementLossGradient(benchmark::State& state) {
  const int steps = static_cast<int>(state.range(0));
  const auto cfg = bench_model(64);
  Rng rng(4);
  const auto params = init_params(cfg, rng);
  const auto batch = bench_batch(64, rng);
  for (auto _ : state) {
    Graph g;
    ParamVars pv(g, params, [](const std::string& n) { return !param_names::is_lambda(n); });
    auto x = bind_batch(g, batch);
    Rng noise(5);
    auto grads = pv.collect(g.backward(refinement_training_loss(pv, cfg, x, steps, noise)));
    benchmark::DoNotOptimize(grads);
  }
}
BENCHMARK(BM_RefinementLossGradient)->Arg(1)->Arg(4)->Arg(8);
BENCHMARK_MAIN();
