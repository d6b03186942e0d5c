#include <benchmark/benchmark.h>

#include <random>

#include "sptn/unitary.hpp"

namespace {

sptn::Matrix random_batch(int d, int n, std::mt19937_64& rng) {
  std::normal_distribution<double> z;
  sptn::Matrix x(d, n);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = z(rng);
  return x;
}

void BM_GivensApply(benchmark::State& state) {
  const int d = static_cast<int>(state.range(0));
  std::mt19937_64 rng(1);
  std::normal_distribution<double> z;
  sptn::Vector theta(static_cast<Eigen::Index>(sptn::givens_angle_count(d)));
  for (Eigen::Index i = 0; i < theta.size(); ++i) theta[i] = z(rng);
  const sptn::GivensParam p(d, theta);
  const sptn::Matrix x = random_batch(d, 256, rng);
  for (auto _ : state) benchmark::DoNotOptimize(sptn::givens_apply(p, x));
  state.SetItemsProcessed(state.iterations() * 256);
}

void BM_HouseholderApply(benchmark::State& state) {
  const int d = static_cast<int>(state.range(0));
  std::mt19937_64 rng(1);
  const sptn::HouseholderParam p(d, random_batch(d, d, rng));
  const sptn::Matrix x = random_batch(d, 256, rng);
  for (auto _ : state) benchmark::DoNotOptimize(sptn::householder_apply(p, x));
  state.SetItemsProcessed(state.iterations() * 256);
}

void BM_GivensMaterialize(benchmark::State& state) {
  const int d = static_cast<int>(state.range(0));
  const sptn::GivensParam p(d);
  for (auto _ : state) benchmark::DoNotOptimize(sptn::givens_materialize(p));
}

}  // namespace

BENCHMARK(BM_GivensApply)->RangeMultiplier(2)->Range(2, 64);
BENCHMARK(BM_HouseholderApply)->RangeMultiplier(2)->Range(2, 64);
BENCHMARK(BM_GivensMaterialize)->RangeMultiplier(2)->Range(2, 64);
