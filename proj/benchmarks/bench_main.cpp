#include <benchmark/benchmark.h>

#include "angio/data.hpp"
#include "angio/mask.hpp"
#include "angio/metrics.hpp"
#include "angio/model.hpp"
#include "angio/rng.hpp"

using namespace angio;

namespace {

Tensor random_image(int c, int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t(c > 1 ? std::vector<int>{c, h, w} : std::vector<int>{h, w});
  for (auto& v : t.v) v = rng.uniform();
  return t;
}

void BM_PhantomGenerate(benchmark::State& state) {
  PhantomSpec spec;
  spec.resolution = static_cast<int>(state.range(0));
  std::uint64_t seed = 0;
  for (auto _ : state) {
    spec.seed = seed++;
    benchmark::DoNotOptimize(generate_phantom(spec));
  }
}
BENCHMARK(BM_PhantomGenerate)->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);

void BM_GeneratorForward(benchmark::State& state) {
  GeneratorConfig cfg;
  cfg.resolution = static_cast<int>(state.range(0));
  cfg.base_channels = 16;
  cfg.downsample_stages = 3;
  cfg.residual_blocks = 2;
  Generator gen(cfg);
  nn::ParamStore ps;
  gen.init_params(ps, 1);
  const Tensor src = random_image(3, cfg.resolution, cfg.resolution, 2);
  std::vector<Tensor> window(3, Tensor({cfg.resolution, cfg.resolution}));
  for (auto _ : state)
    benchmark::DoNotOptimize(gen.generate_next_frame(ps, src, window));
}
BENCHMARK(BM_GeneratorForward)->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);

void BM_ComputeMask(benchmark::State& state) {
  const int res = static_cast<int>(state.range(0));
  PhantomSpec spec;
  spec.resolution = res;
  spec.seed = 3;
  const PairedSample s = generate_phantom(spec);
  for (auto _ : state) benchmark::DoNotOptimize(compute_mask(s.target));
}
BENCHMARK(BM_ComputeMask)->Arg(64)->Arg(256)->Unit(benchmark::kMicrosecond);

void BM_Ssim(benchmark::State& state) {
  const int res = static_cast<int>(state.range(0));
  const Tensor a = random_image(1, res, res, 4);
  const Tensor b = random_image(1, res, res, 5);
  for (auto _ : state) benchmark::DoNotOptimize(metrics::ssim(a, b));
}
BENCHMARK(BM_Ssim)->Arg(64)->Arg(256)->Unit(benchmark::kMicrosecond);

void BM_FvdExtractor(benchmark::State& state) {
  PhantomSpec spec;
  spec.resolution = 64;
  spec.seed = 6;
  const PairedSample s = generate_phantom(spec);
  const auto extractor = metrics::default_video_extractor();
  for (auto _ : state) benchmark::DoNotOptimize(extractor.extract(s.target));
}
BENCHMARK(BM_FvdExtractor)->Unit(benchmark::kMillisecond);

void BM_Rollout12(benchmark::State& state) {
  GeneratorConfig cfg;
  cfg.resolution = 64;
  cfg.base_channels = 16;
  cfg.downsample_stages = 3;
  cfg.residual_blocks = 2;
  Generator gen(cfg);
  nn::ParamStore ps;
  gen.init_params(ps, 7);
  const Tensor src = random_image(3, 64, 64, 8);
  for (auto _ : state) benchmark::DoNotOptimize(gen.rollout(ps, src, 12));
}
BENCHMARK(BM_Rollout12)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
