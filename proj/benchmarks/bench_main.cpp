#include <benchmark/benchmark.h>

#include <random>

#include "csilab/baseline.hpp"
#include "csilab/channel.hpp"
#include "csilab/givens.hpp"
#include "csilab/pipeline.hpp"
#include "csilab/refine.hpp"
#include "csilab/vqcodec.hpp"

using namespace csilab;
using ad::Matrix;

namespace {

Matrix random_matrix(int rows, int cols, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
    return m;
}

vq::CodecModel default_model() {
    std::mt19937_64 rng(1);
    vq::CodecModel m{vq::CodecGeometry{}};
    m.init(rng);
    m.add_type2(rng);
    m.add_parallel_codebooks(rng);
    return m;
}

const channel::CfrSequence& sequence() {
    static const channel::CfrSequence seq = [] {
        channel::ChannelConfig cfg;
        cfg.paths = 2;
        cfg.delay_spread = 20e-9;
        return channel::generate_cfr_sequence(cfg, 3);
    }();
    return seq;
}

}  // namespace

static void BM_GenerateSequence(benchmark::State& state) {
    channel::ChannelConfig cfg;
    std::uint64_t seed = 0;
    for (auto _ : state) benchmark::DoNotOptimize(channel::generate_cfr_sequence(cfg, ++seed));
}
BENCHMARK(BM_GenerateSequence);

static void BM_SnapshotTargets(benchmark::State& state) {
    const auto& seq = sequence();
    for (auto _ : state) benchmark::DoNotOptimize(channel::snapshot_targets(seq, 0, 2));
}
BENCHMARK(BM_SnapshotTargets);

static void BM_GivensRoundTrip(benchmark::State& state) {
    const int n_t = static_cast<int>(state.range(0));
    const givens::GivensConfig cfg(n_t, 2, 64);
    std::mt19937_64 rng(2);
    std::vector<CMatrix> targets;
    for (int k = 0; k < 64; ++k) {
        Eigen::HouseholderQR<CMatrix> qr(CMatrix::Random(n_t, n_t));
        targets.push_back(CMatrix(qr.householderQ()).leftCols(2));
    }
    for (auto _ : state)
        benchmark::DoNotOptimize(givens::reconstruct_target(givens::extract_angles(targets, cfg), cfg));
    state.SetItemsProcessed(state.iterations() * 64);
}
BENCHMARK(BM_GivensRoundTrip)->Arg(4)->Arg(8);

static void BM_StandardCbr(benchmark::State& state) {
    const auto phi = pipeline::sequence_angles(sequence(), 2);
    const givens::GivensConfig cfg(4, 2, 16);
    const baseline::UniformGrid grid(7, 5);
    for (auto _ : state) benchmark::DoNotOptimize(pipeline::run_standard(phi, grid, cfg));
    state.SetItemsProcessed(state.iterations() * static_cast<long>(phi.size()));
}
BENCHMARK(BM_StandardCbr);

static void BM_VqQuantize(benchmark::State& state) {
    std::mt19937_64 rng(4);
    ad::ParameterSet ps;
    auto& t = ps.add("cb", {256, 16});
    t.value.values() = random_matrix(256, 16, rng);
    const vq::Codebook cb(t, 8);
    const Matrix z = random_matrix(static_cast<int>(state.range(0)), 128, rng);
    for (auto _ : state) benchmark::DoNotOptimize(vq::vq_quantize(cb, z));
    state.SetItemsProcessed(state.iterations() * state.range(0) * 8);
}
BENCHMARK(BM_VqQuantize)->Arg(1)->Arg(64);

static void BM_EncodeDecode(benchmark::State& state) {
    const auto m = default_model();
    std::mt19937_64 rng(5);
    const Matrix x = random_matrix(static_cast<int>(state.range(0)), m.geometry().input_size(), rng);
    for (auto _ : state) {
        const auto q = vq::vq_quantize(m.codebook(), m.encode(vq::Pair::TypeI, x));
        benchmark::DoNotOptimize(m.decode(vq::Pair::TypeI, q.zq));
    }
}
BENCHMARK(BM_EncodeDecode)->Arg(1)->Arg(64);

static void BM_Session(benchmark::State& state) {
    const auto m = default_model();
    const auto phi = pipeline::sequence_angles(sequence(), 2);
    const auto scheme = static_cast<pipeline::Scheme>(state.range(0));
    state.SetLabel(pipeline::to_string(scheme));
    for (auto _ : state) benchmark::DoNotOptimize(pipeline::run_session(scheme, phi, m, {}));
    state.SetItemsProcessed(state.iterations() * static_cast<long>(phi.size()));
}
BENCHMARK(BM_Session)
    ->Arg(static_cast<int>(pipeline::Scheme::Initial))
    ->Arg(static_cast<int>(pipeline::Scheme::AdNaive))
    ->Arg(static_cast<int>(pipeline::Scheme::AdParallel))
    ->Arg(static_cast<int>(pipeline::Scheme::AdUnified));

static void BM_InitialTrainStep(benchmark::State& state) {
    auto m = default_model();
    std::mt19937_64 rng(6);
    const Matrix x = random_matrix(64, m.geometry().input_size(), rng);
    ad::AdamState adam;
    for (auto _ : state) {
        m.params().zero_grad();
        ad::Graph g;
        g.backward(pipeline::initial_loss(g, m, x, 0.25, pipeline::Distortion::Angular));
        ad::adam_step(m.params(), adam);
    }
    state.SetItemsProcessed(state.iterations() * 64);
}
BENCHMARK(BM_InitialTrainStep);

static void BM_RefinerInfer(benchmark::State& state) {
    std::mt19937_64 rng(7);
    refine::RefinerModel r{refine::RefinerGeometry{}};
    r.init(rng);
    const Matrix w = random_matrix(static_cast<int>(state.range(0)), 3 * r.geometry().frame_size(), rng);
    for (auto _ : state) benchmark::DoNotOptimize(r.infer(w));
}
BENCHMARK(BM_RefinerInfer)->Arg(1)->Arg(64);
BENCHMARK_MAIN();
