#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include <Eigen/Eigenvalues>

#include "csilab/channel.hpp"
#include "test_support.hpp"

using namespace csilab;
using namespace csilab::channel;

TEST_CASE("shape contract") {
    ChannelConfig cfg;
    cfg.n_t = 4;
    cfg.n_r = 2;
    cfg.n_c = 16;
    cfg.t_len = 8;
    const auto seq = generate_cfr_sequence(cfg, 3);
    CHECK(seq.t_len() == 8);
    CHECK(seq.n_c() == 16);
    CHECK(seq.n_r() == 2);
    CHECK(seq.n_t() == 4);
    CHECK(seq.data().size() == 8u * 16 * 2 * 4);
    for (const auto& v : seq.data()) CHECK(std::isfinite(std::abs(v)));
}

TEST_CASE("invalid configs are rejected") {
    ChannelConfig cfg;
    cfg.n_s = 3;  // > n_r
    CHECK_THROWS(generate_cfr_sequence(cfg, 1));
    cfg = {};
    cfg.rho = 1.5;
    CHECK_THROWS(generate_cfr_sequence(cfg, 1));
    cfg = {};
    cfg.n_c = 0;
    CHECK_THROWS(generate_cfr_sequence(cfg, 1));
}

TEST_CASE("deterministic per seed") {
    ChannelConfig cfg;
    CHECK(generate_cfr_sequence(cfg, 11) == generate_cfr_sequence(cfg, 11));
    CHECK_FALSE(generate_cfr_sequence(cfg, 11) == generate_cfr_sequence(cfg, 12));
}

TEST_CASE("rho = 1 freezes the channel") {
    ChannelConfig cfg;
    cfg.rho = 1.0;
    const auto seq = generate_cfr_sequence(cfg, 5);
    for (int t = 1; t < seq.t_len(); ++t)
        for (int k = 0; k < seq.n_c(); ++k) CHECK(seq.matrix(t, k) == seq.matrix(0, k));
}

namespace {

double lag1_autocorrelation(const CfrSequence& seq) {
    std::complex<double> num = 0;
    double den = 0;
    const std::size_t per_t = seq.data().size() / seq.t_len();
    for (int t = 0; t + 1 < seq.t_len(); ++t)
        for (std::size_t i = 0; i < per_t; ++i) {
            const auto a = seq.data()[t * per_t + i];
            const auto b = seq.data()[(t + 1) * per_t + i];
            num += b * std::conj(a);
            den += std::norm(a);
        }
    return std::abs(num) / den;
}

}  // namespace

TEST_CASE("rho = 0 gives uncorrelated snapshots") {
    ChannelConfig cfg;
    cfg.rho = 0.0;
    cfg.t_len = 1000;
    cfg.n_c = 4;
    CHECK(lag1_autocorrelation(generate_cfr_sequence(cfg, 21)) < 0.1);
}

TEST_CASE("rho close to one keeps lag-1 correlation close to rho") {
    ChannelConfig cfg;
    cfg.rho = 0.99;
    cfg.t_len = 2000;
    cfg.n_c = 4;
    CHECK(lag1_autocorrelation(generate_cfr_sequence(cfg, 22)) == doctest::Approx(0.99).epsilon(0.02));
}

TEST_CASE("stationary variance") {
    ChannelConfig cfg;
    cfg.rho = 0.9;
    cfg.t_len = 600;
    cfg.n_c = 4;
    // Ensemble variance of entries at t=T/2 and t=T-1 over many sequences.
    double v_half = 0, v_end = 0;
    const int runs = 300;
    for (int s = 0; s < runs; ++s) {
        const auto seq = generate_cfr_sequence(cfg, 100 + s);
        for (int k = 0; k < cfg.n_c; ++k) {
            v_half += seq.matrix(cfg.t_len / 2, k).squaredNorm();
            v_end += seq.matrix(cfg.t_len - 1, k).squaredNorm();
        }
    }
    CHECK(std::abs(v_end - v_half) / v_half < 0.2);
}

TEST_CASE("beamforming target: identity channel") {
    const CMatrix v = beamforming_target(CMatrix::Identity(2, 2), 1);
    CHECK(std::abs(v(0, 0) - 1.0) < 1e-12);
    CHECK(std::abs(v(1, 0)) < 1e-12);
}

TEST_CASE("beamforming target against the eigendecomposition of H^H H") {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        const CMatrix h = testing::random_complex(2, 4, rng);
        const CMatrix v = beamforming_target(h, 2);
        Eigen::SelfAdjointEigenSolver<CMatrix> es(h.adjoint() * h);
        const Eigen::VectorXd ev = es.eigenvalues();  // ascending
        CHECK((h * v.col(0)).norm() == doctest::Approx(std::sqrt(ev(3))).epsilon(1e-9));
        CHECK((h * v.col(1)).norm() == doctest::Approx(std::sqrt(ev(2))).epsilon(1e-9));
        CHECK((v.adjoint() * v - CMatrix::Identity(2, 2)).norm() < 1e-9);
        for (int c = 0; c < 2; ++c) {
            int first = 0;
            while (std::abs(v(first, c)) < 1e-12) ++first;
            CHECK(std::abs(v(first, c).imag()) < 1e-12);
            CHECK(v(first, c).real() > 0);
        }
    }
}

TEST_CASE("beamforming target of a rank-one channel") {
    std::mt19937_64 rng(9);
    const CMatrix u = testing::random_complex(2, 1, rng);
    const CMatrix w = testing::random_complex(4, 1, rng);
    const CMatrix v = beamforming_target(u * w.adjoint(), 1);
    const double overlap = std::abs((w.adjoint() * v)(0, 0)) / w.norm();
    CHECK(overlap == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("non-finite channels are rejected") {
    CMatrix h = CMatrix::Identity(2, 2);
    h(0, 1) = Complex(std::nan(""), 0);
    CHECK_THROWS(beamforming_target(h, 1));
}

TEST_CASE("generated channels give orthonormal targets") {
    ChannelConfig cfg;
    const auto seq = generate_cfr_sequence(cfg, 8);
    for (int t = 0; t < cfg.t_len; ++t)
        for (const auto& v : snapshot_targets(seq, t, cfg.n_s))
            CHECK((v.adjoint() * v - CMatrix::Identity(cfg.n_s, cfg.n_s)).norm() < 1e-9);
}

TEST_CASE("dataset round trip") {
    ChannelConfig cfg;
    cfg.t_len = 4;
    std::vector<CfrSequence> seqs;
    for (int s = 0; s < 3; ++s) seqs.push_back(generate_cfr_sequence(cfg, 40 + s));
    const auto dir = std::filesystem::temp_directory_path() / "csilab_channel_test";
    std::filesystem::create_directories(dir);
    const auto path = dir / "d.cfrd";
    save_dataset(path, seqs);
    CHECK(std::filesystem::exists(sidecar_path(path)));
    const auto loaded = load_dataset(path);
    REQUIRE(loaded.size() == 3);
    for (int s = 0; s < 3; ++s) CHECK(loaded[s] == seqs[s]);
    CHECK(encode_dataset(loaded) == encode_dataset(seqs));
    CHECK(loaded[1].config().rho == cfg.rho);
    std::filesystem::remove_all(dir);
}

TEST_CASE("dataset decode errors") {
    ChannelConfig cfg;
    cfg.t_len = 2;
    auto bytes = encode_dataset({generate_cfr_sequence(cfg, 1)});

    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_WITH_AS(decode_dataset(bad_magic), "bad magic", FormatError);

    auto bad_version = bytes;
    bad_version[4] = 9;
    CHECK_THROWS_WITH_AS(decode_dataset(bad_version), "version mismatch", FormatError);

    auto truncated = bytes;
    truncated.resize(truncated.size() - 3);
    CHECK_THROWS_WITH_AS(decode_dataset(truncated), "truncated payload", FormatError);

    // Header claims more snapshots than the payload carries.
    auto inflated = bytes;
    inflated[12] = 3;  // T of the first sequence (u32 at offset 12)
    CHECK_THROWS_WITH_AS(decode_dataset(inflated), "truncated payload", FormatError);
}
