#include <benchmark/benchmark.h>

#include <random>

#include "sptn/circuit.hpp"
#include "sptn/data.hpp"
#include "sptn/train.hpp"

namespace {

sptn::ArchSpec gsptn(int children, int layers, sptn::Sharing sharing) {
  sptn::ArchSpec s;
  s.family = sptn::Family::gsptn;
  s.children = children;
  s.layers = layers;
  s.sharing = sharing;
  s.init_seed = 3;
  return s;
}

void BM_LogpdfGsptn(benchmark::State& state) {
  const auto c = sptn::build_circuit(gsptn(static_cast<int>(state.range(0)), 2, sptn::Sharing::none), 2);
  const sptn::Matrix x = sptn::make_flower(100, 1).features;
  for (auto _ : state) benchmark::DoNotOptimize(sptn::logpdf(c, x));
  state.SetItemsProcessed(state.iterations() * 100);
}

void BM_LogpdfAndGradGsptn(benchmark::State& state) {
  const auto c = sptn::build_circuit(gsptn(static_cast<int>(state.range(0)), 2, sptn::Sharing::none), 2);
  const sptn::Matrix x = sptn::make_flower(100, 1).features;
  for (auto _ : state) benchmark::DoNotOptimize(sptn::logpdf_and_grad(c, x));
  state.SetItemsProcessed(state.iterations() * 100);
}

void BM_LogpdfAndGradGmm(benchmark::State& state) {
  sptn::ArchSpec s;
  s.children = static_cast<int>(state.range(0));
  const auto c = sptn::build_circuit(s, 2);
  const sptn::Matrix x = sptn::make_flower(100, 1).features;
  for (auto _ : state) benchmark::DoNotOptimize(sptn::logpdf_and_grad(c, x));
  state.SetItemsProcessed(state.iterations() * 100);
}

}  // namespace

BENCHMARK(BM_LogpdfGsptn)->Arg(2)->Arg(4)->Arg(8)->Arg(16);
BENCHMARK(BM_LogpdfAndGradGsptn)->Arg(2)->Arg(4)->Arg(8)->Arg(16);
BENCHMARK(BM_LogpdfAndGradGmm)->Arg(8)->Arg(64)->Arg(512);
