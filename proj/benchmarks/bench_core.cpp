#include <benchmark/benchmark.h>

#include <random>

#include "srlvae/attacks.hpp"
#include "srlvae/metrics.hpp"
#include "srlvae/nn.hpp"
#include "srlvae/trainer.hpp"
#include "srlvae/vae.hpp"

using namespace srlvae;

namespace {

Tensor uniform(const Shape& s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor t(s);
  for (auto& v : t.storage()) v = u(rng);
  return t;
}

ImageBatch batch(int n, int side) {
  ImageBatch b;
  b.pixels = uniform({n, 3, side, side}, 1);
  for (int i = 0; i < n; ++i) b.ids.push_back(std::to_string(i));
  return b;
}

VaeConfig bench_config() {
  VaeConfig c;
  c.channels = {16, 32, 64};
  return c;
}

}  // namespace

static void BM_ConvForward(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0));
  nn::ConvNet net;
  net.conv(c, c, 3, 1, 1);
  std::vector<double> params(net.param_count());
  net.init_params(params, 0);
  const nn::Activation x = nn::to_activation(uniform({20, c, 32, 32}, 2));
  for (auto _ : state) benchmark::DoNotOptimize(net.forward(params, x, nullptr));
  state.SetItemsProcessed(state.iterations() * 20);
}
BENCHMARK(BM_ConvForward)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

static void BM_ConvBackward(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0));
  nn::ConvNet net;
  net.conv(c, c, 3, 1, 1).silu();
  std::vector<double> params(net.param_count()), grads(net.param_count());
  net.init_params(params, 0);
  nn::ConvNet::Trace trace;
  const nn::Activation y = net.forward(params, nn::to_activation(uniform({20, c, 32, 32}, 2)), &trace);
  for (auto _ : state) benchmark::DoNotOptimize(net.backward(params, trace, y, grads, true));
  state.SetItemsProcessed(state.iterations() * 20);
}
BENCHMARK(BM_ConvBackward)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

static void BM_EncodeDecode(benchmark::State& state) {
  const VaeModel model(bench_config());
  const Tensor x = uniform({20, 3, 32, 32}, 3);
  for (auto _ : state) benchmark::DoNotOptimize(model.decode(model.encode(x).mu()));
  state.SetItemsProcessed(state.iterations() * 20);
}
BENCHMARK(BM_EncodeDecode)->Unit(benchmark::kMillisecond);

static void BM_PgdReconstruction(benchmark::State& state) {
  const VaeModel model(bench_config());
  const PerceptualExtractor ext = PerceptualExtractor::seeded(3);
  const ImageBatch x = batch(20, 32);
  AttackBudget budget;
  budget.iterations = static_cast<int>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(pgd_reconstruction_attack(model, ext, x, budget, 1.0));
}
BENCHMARK(BM_PgdReconstruction)->Arg(1)->Arg(10)->Unit(benchmark::kMillisecond);

static void BM_FinetuneStep(benchmark::State& state) {
  VaeModel model(bench_config());
  model.snapshot_reference();
  const PerceptualExtractor ext = PerceptualExtractor::seeded(3);
  const ImageBatch x = batch(20, 32);
  TrainConfig cfg;
  cfg.attack.iterations = static_cast<int>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(srl_total_loss(model, ext, x, cfg, 0));
}
BENCHMARK(BM_FinetuneStep)->Arg(0)->Arg(10)->Unit(benchmark::kMillisecond);

static void BM_Ssim(benchmark::State& state) {
  const Tensor a = uniform({64, 3, 32, 32}, 4);
  const Tensor b = uniform({64, 3, 32, 32}, 5);
  for (auto _ : state) benchmark::DoNotOptimize(ssim(a, b));
  state.SetItemsProcessed(state.iterations() * 64);
}
BENCHMARK(BM_Ssim)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
