#include <benchmark/benchmark.h>

#include "gnlab/data.hpp"
#include "gnlab/gauss_newton.hpp"
#include "gnlab/models.hpp"
#include "gnlab/optimizers.hpp"
#include "gnlab/tape.hpp"

using namespace gnlab;

namespace {

Tensor gaussian(Shape shape, std::uint64_t seed) {
    Tensor t(std::move(shape));
    NormalStream normal(seed);
    for (double& v : t.data()) v = normal.next();
    return t;
}

struct TinySetup {
    static ModelConfig config() {
        ModelConfig c = ModelConfig::preset("tiny");
        c.context_length = 32;
        return c;
    }
    Model model;
    Batch batch;
    explicit TinySetup(std::size_t seqs) : model(build_model(config(), 0)) {
        const MarkovSource src(0);
        batch = batch_at(src, 0, seqs, 32);
    }
};

void BM_Matmul(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const Tensor a = gaussian({n, n}, 1), b = gaussian({n, n}, 2);
    for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(64)->Arg(128)->Arg(256);

void BM_NewtonSchulz(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const Tensor m = gaussian({n, n}, 3);
    for (auto _ : state) benchmark::DoNotOptimize(newton_schulz(m, 5));
}
BENCHMARK(BM_NewtonSchulz)->Arg(64)->Arg(128)->Arg(256);

void BM_Forward(benchmark::State& state) {
    const TinySetup s(static_cast<std::size_t>(state.range(0)));
    for (auto _ : state) benchmark::DoNotOptimize(ad::forward(*s.model.graph, s.model.params, s.batch));
}
BENCHMARK(BM_Forward)->Arg(4)->Arg(32);

void BM_Jvp(benchmark::State& state) {
    const TinySetup s(static_cast<std::size_t>(state.range(0)));
    const ad::Tape tape = ad::forward(*s.model.graph, s.model.params, s.batch);
    const ParamTree d = s.model.params;
    for (auto _ : state) benchmark::DoNotOptimize(tape.jvp(d));
}
BENCHMARK(BM_Jvp)->Arg(4)->Arg(32);

void BM_Vjp(benchmark::State& state) {
    const TinySetup s(static_cast<std::size_t>(state.range(0)));
    const ad::Tape tape = ad::forward(*s.model.graph, s.model.params, s.batch);
    const Tensor u = gaussian(tape.output_value().shape(), 4);
    for (auto _ : state) benchmark::DoNotOptimize(tape.vjp(u));
}
BENCHMARK(BM_Vjp)->Arg(4)->Arg(32);

void BM_GnQuadratic(benchmark::State& state) {
    const TinySetup s(static_cast<std::size_t>(state.range(0)));
    const gn::LinearizedPoint lp(*s.model.graph, s.model.config.loss, s.model.params, s.batch);
    ParamTree delta = s.model.params;
    delta *= 1e-3;
    for (auto _ : state) benchmark::DoNotOptimize(gn::gn_quadratic_value_and_grad(lp, delta));
}
BENCHMARK(BM_GnQuadratic)->Arg(4)->Arg(32);

}  // namespace

BENCHMARK_MAIN();
