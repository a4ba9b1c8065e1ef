#include <doctest.h>

#include <cmath>
#include <numbers>

#include "csilab/baseline.hpp"
#include "test_support.hpp"

using namespace csilab;
using namespace csilab::baseline;
using std::numbers::pi;

namespace {

// Exhaustive nearest-level search, independent of the quantizer's closed form.
std::uint32_t brute_phi(double phi, int b) {
    std::uint32_t best = 0;
    double best_d = 1e9;
    for (std::uint32_t k = 0; k < (1u << b); ++k) {
        const double level = k * pi / std::pow(2.0, b - 1) + pi / std::pow(2.0, b);
        double d = std::fmod(std::abs(phi - level), 2 * pi);
        d = std::min(d, 2 * pi - d);
        if (d < best_d - 1e-12) {
            best_d = d;
            best = k;
        }
    }
    return best;
}

std::uint32_t brute_psi(double psi, int b) {
    std::uint32_t best = 0;
    double best_d = 1e9;
    for (std::uint32_t k = 0; k < (1u << b); ++k) {
        const double level = k * pi / std::pow(2.0, b + 1) + pi / std::pow(2.0, b + 2);
        const double d = std::abs(psi - level);
        if (d < best_d - 1e-12) {
            best_d = d;
            best = k;
        }
    }
    return best;
}

}  // namespace

TEST_CASE("grid arithmetic") {
    UniformGrid g(5, 3);
    CHECK(quantize_phi(0.0, g) == 0);
    CHECK(g.phi_level(0) == doctest::Approx(pi / 32));
    CHECK(std::abs(g.phi_level(quantize_phi(0.0, g)) - 0.0) == doctest::Approx(pi / 32));
    CHECK(quantize_psi(pi / 4, g) == brute_psi(pi / 4, 3));
    CHECK(quantize_psi(pi / 4, g) == 3);  // 7pi/32 and 9pi/32 tie; lower index wins
    CHECK_THROWS(UniformGrid(0, 3));
    CHECK_THROWS(UniformGrid(5, 17));
}

TEST_CASE("quantizer matches an exhaustive grid search") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> uphi(0, 2 * pi), upsi(0, pi / 2);
    for (int b_phi = 1; b_phi <= 9; ++b_phi)
        for (int b_psi = 1; b_psi <= 7; ++b_psi) {
            UniformGrid g(b_phi, b_psi);
            for (int i = 0; i < 200; ++i) {
                const double phi = uphi(rng), psi = upsi(rng);
                CHECK(quantize_phi(phi, g) == brute_phi(phi, b_phi));
                CHECK(quantize_psi(psi, g) == brute_psi(psi, b_psi));
                double dphi = std::abs(phi - g.phi_level(quantize_phi(phi, g)));
                dphi = std::min(dphi, 2 * pi - dphi);
                CHECK(dphi <= pi / std::pow(2.0, b_phi) + 1e-12);
                CHECK(std::abs(psi - g.psi_level(quantize_psi(psi, g))) <= pi / std::pow(2.0, b_psi + 2) + 1e-12);
            }
        }
}

TEST_CASE("grid levels are fixed points") {
    UniformGrid g(6, 4);
    for (std::uint32_t k = 0; k < 64; ++k) CHECK(quantize_phi(g.phi_level(k), g) == k);
    for (std::uint32_t k = 0; k < 16; ++k) CHECK(quantize_psi(g.psi_level(k), g) == k);
}

TEST_CASE("circular phi search wraps near 2pi") {
    UniformGrid g(3, 2);
    CHECK(quantize_phi(2 * pi - 1e-6, g) == 7);
    CHECK(quantize_phi(1e-6, g) == 0);
}

TEST_CASE("overhead constants") {
    CHECK(standard_overhead_bits(13, 64, {5, 3}) == 6656);
    CHECK(standard_overhead_bits(13, 64, {6, 4}) == 8320);
    CHECK(standard_overhead_bits(3, 30, {5, 3}) == 720);
    CHECK(standard_overhead_bits(3, 30, {6, 4}) == 900);
}

TEST_CASE("CBR packing round trip and lengths") {
    std::mt19937_64 rng(5);
    const std::pair<int, int> dims[] = {{8, 2}, {3, 3}, {4, 2}, {2, 1}};
    const int n_cs[] = {64, 30, 16, 7};
    for (int i = 0; i < 4; ++i) {
        givens::GivensConfig cfg(dims[i].first, dims[i].second, n_cs[i]);
        UniformGrid g(6, 4);
        UniformIndices idx;
        std::uniform_int_distribution<std::uint32_t> dphi(0, 63), dpsi(0, 15);
        idx.phi.resize(cfg.n_a(), cfg.n_c);
        idx.psi.resize(cfg.n_a(), cfg.n_c);
        for (int j = 0; j < idx.phi.size(); ++j) {
            idx.phi.data()[j] = dphi(rng);
            idx.psi.data()[j] = dpsi(rng);
        }
        const auto bits = pack_cbr(idx, g, cfg);
        CHECK(bits.bit_length == standard_overhead_bits(cfg.n_a(), cfg.n_c, g));
        CHECK(unpack_cbr(bits, cfg) == idx);
        const auto wire = bits.serialize();
        CHECK(wire.size() == 4 + (bits.bit_length + 7) / 8);
        const auto back = CbrBits::deserialize(wire, cfg, g);
        CHECK(unpack_cbr(back, cfg) == idx);
    }
    givens::GivensConfig cfg(8, 2, 64);
    CHECK(pack_cbr({Eigen::Matrix<std::uint32_t, -1, -1>::Zero(13, 64), Eigen::Matrix<std::uint32_t, -1, -1>::Zero(13, 64)},
                   {5, 3}, cfg)
              .bit_length == 6656);
}

TEST_CASE("CBR field order") {
    // n_t=3, n_s=2: column 0 has phi11 phi21 psi21 psi31, column 1 has phi22 psi32.
    givens::GivensConfig cfg(3, 2, 1);
    UniformGrid g(2, 1);
    UniformIndices idx;
    idx.phi.resize(3, 1);
    idx.psi.resize(3, 1);
    idx.phi << 1, 2, 3;
    idx.psi << 0, 1, 1;
    const auto bits = pack_cbr(idx, g, cfg);
    // 01 10 | 0 1 | 11 | 1  -> 0110 0111 1(000 0000)
    REQUIRE(bits.bit_length == 9);
    CHECK(bits.bytes[0] == 0b01100111);
    CHECK(bits.bytes[1] == 0b10000000);
}

TEST_CASE("CBR length mismatch is rejected") {
    givens::GivensConfig cfg(4, 2, 4);
    UniformGrid g(5, 3);
    CbrBits bits;
    bits.bytes.assign(2, 0);
    bits.bit_length = 16;
    bits.n_a = 5;
    bits.n_c = 4;
    bits.grid = g;
    CHECK_THROWS(unpack_cbr(bits, cfg));
    std::vector<std::uint8_t> wire{0xff, 0, 0, 0, 1};
    CHECK_THROWS(CbrBits::deserialize(wire, cfg, g));
}

TEST_CASE("dequantized angles give orthonormal targets") {
    std::mt19937_64 rng(8);
    givens::GivensConfig cfg(4, 2, 8);
    std::vector<CMatrix> targets;
    for (int k = 0; k < 8; ++k) targets.push_back(testing::random_orthonormal(4, 2, rng));
    const AngleSet a = givens::extract_angles(targets, cfg);
    const AngleSet q = dequantize_uniform(quantize_uniform(a, {5, 3}), {5, 3});
    for (const auto& v : givens::reconstruct_target(q, cfg))
        CHECK((v.adjoint() * v - CMatrix::Identity(2, 2)).norm() < 1e-9);
    CHECK(dequantize_uniform(quantize_uniform(q, {5, 3}), {5, 3}) == q);
}
