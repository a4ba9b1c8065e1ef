#include <doctest.h>

#include <cmath>
#include <numbers>

#include "csilab/givens.hpp"
#include "test_support.hpp"

using namespace csilab;
using namespace csilab::givens;
using std::numbers::pi;

TEST_CASE("angle pair counts") {
    CHECK(num_angle_pairs(8, 2) == 13);
    CHECK(num_angle_pairs(3, 3) == 3);
    CHECK(num_angle_pairs(1, 1) == 1);
    CHECK(num_angle_pairs(4, 2) == 5);
    CHECK(num_angle_pairs(2, 1) == 1);
    CHECK(num_angle_pairs(4, 4) == 6);
    CHECK_THROWS(num_angle_pairs(2, 3));
    CHECK_THROWS(num_angle_pairs(0, 0));
}

TEST_CASE("canonicalize") {
    SUBCASE("real nonnegative last row is a fixed point") {
        CMatrix v(2, 1);
        v << Complex(0.6, 0.0), Complex(0.8, 0.0);
        const auto c = canonicalize(v);
        CHECK((c.v - v).norm() == 0.0);
        CHECK(std::abs(c.phase_offsets(0) - 1.0) < 1e-15);
    }
    SUBCASE("last-row phase removed") {
        CMatrix v(2, 1);
        v << std::polar(std::sqrt(3.0) / 2, pi / 2), std::polar(0.5, pi / 6);
        const auto c = canonicalize(v);
        CHECK(std::abs(c.v(1, 0) - 0.5) < 1e-12);
        CHECK(std::abs(c.v(0, 0) - std::polar(std::sqrt(3.0) / 2, pi / 3)) < 1e-12);
        CHECK(std::abs(c.phase_offsets(0) - std::polar(1.0, pi / 6)) < 1e-12);
        // V = Vbar * conj(D~)
        CHECK((c.v - v * c.phase_offsets.conjugate().asDiagonal()).norm() < 1e-15);
    }
    SUBCASE("idempotent") {
        std::mt19937_64 rng(1);
        const CMatrix v = testing::random_orthonormal(4, 2, rng);
        const auto once = canonicalize(v);
        const auto twice = canonicalize(once.v);
        CHECK((twice.v - once.v).norm() < 1e-15);
    }
    SUBCASE("zero last-row entry keeps phase 1") {
        CMatrix v = CMatrix::Identity(3, 2);
        const auto c = canonicalize(v);
        CHECK(c.phase_offsets(0) == Complex(1.0, 0.0));
        CHECK(c.phase_offsets(1) == Complex(1.0, 0.0));
    }
}

TEST_CASE("D and G matrices") {
    CHECK((d_matrix(Eigen::VectorXd::Zero(3), 0, 4) - CMatrix::Identity(4, 4)).norm() == 0.0);
    CHECK((g_matrix(0.0, 2, 0, 4) - RMatrix::Identity(4, 4)).norm() == 0.0);
    const RMatrix g = g_matrix(0.7, 3, 1, 4);
    CHECK((g * g.transpose() - RMatrix::Identity(4, 4)).norm() < 1e-15);
    CHECK(g(1, 1) == doctest::Approx(std::cos(0.7)));
    CHECK(g(1, 3) == doctest::Approx(std::sin(0.7)));
    CHECK(g(3, 1) == doctest::Approx(-std::sin(0.7)));
    Eigen::VectorXd phi(2);
    phi << 0.3, 1.1;
    const CMatrix d = d_matrix(phi, 1, 4);
    CHECK(d(0, 0) == Complex(1.0, 0.0));
    CHECK(std::abs(d(1, 1) - std::polar(1.0, 0.3)) < 1e-15);
    CHECK(std::abs(d(2, 2) - std::polar(1.0, 1.1)) < 1e-15);
    CHECK(d(3, 3) == Complex(1.0, 0.0));
    CHECK_THROWS(g_matrix(0.1, 1, 1, 4));
    CHECK_THROWS(g_matrix(0.1, 4, 1, 4));
    CHECK_THROWS(d_matrix(phi, 3, 4));
}

TEST_CASE("analytic 2x1 example") {
    GivensConfig cfg(2, 1, 1);
    CMatrix v(2, 1);
    v << std::polar(std::sqrt(3.0) / 2, pi / 2), Complex(0.5, 0.0);
    const AngleSet a = extract_angles({v}, cfg);
    CHECK(a.phi(0, 0) == doctest::Approx(pi / 2).epsilon(1e-12));
    CHECK(a.psi(0, 0) == doctest::Approx(pi / 6).epsilon(1e-12));

    const auto back = reconstruct_target(a, cfg);
    CHECK((back[0] - v).norm() < 1e-12);
}

TEST_CASE("identity target gives zero angles") {
    GivensConfig cfg(4, 2, 3);
    std::vector<CMatrix> targets(3, CMatrix::Identity(4, 2));
    const AngleSet a = extract_angles(targets, cfg);
    CHECK(a.phi.cwiseAbs().maxCoeff() == 0.0);
    CHECK(a.psi.cwiseAbs().maxCoeff() == 0.0);
    for (const auto& v : reconstruct_target(AngleSet(cfg.n_a(), 3), cfg)) CHECK((v - CMatrix::Identity(4, 2)).norm() == 0.0);
}

TEST_CASE("round trip and ranges on random targets") {
    std::mt19937_64 rng(17);
    const std::pair<int, int> dims[] = {{2, 1}, {3, 3}, {4, 2}, {8, 2}, {4, 4}, {5, 1}};
    for (auto [n_t, n_s] : dims) {
        GivensConfig cfg(n_t, n_s, 8);
        std::vector<CMatrix> targets;
        for (int k = 0; k < 8; ++k) targets.push_back(testing::random_orthonormal(n_t, n_s, rng));
        const AngleSet a = extract_angles(targets, cfg);
        CHECK(a.phi.minCoeff() >= 0.0);
        CHECK(a.phi.maxCoeff() < 2 * pi);
        CHECK(a.psi.minCoeff() >= 0.0);
        CHECK(a.psi.maxCoeff() <= pi / 2);
        const auto back = reconstruct_target(a, cfg);
        for (int k = 0; k < 8; ++k) {
            const CMatrix ref = canonicalize(targets[k]).v;
            CHECK((back[k] - ref).norm() / targets[k].norm() < 1e-9);
        }
    }
}

TEST_CASE("reconstruction is orthonormal for arbitrary angles and 2pi periodic") {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(-10, 10);
    GivensConfig cfg(4, 2, 5);
    AngleSet a(cfg.n_a(), 5);
    for (int i = 0; i < a.phi.size(); ++i) {
        a.phi.data()[i] = u(rng);
        a.psi.data()[i] = u(rng);
    }
    AngleSet shifted = a;
    shifted.phi.array() += 2 * pi;
    const auto v = reconstruct_target(a, cfg);
    const auto w = reconstruct_target(shifted, cfg);
    for (int k = 0; k < 5; ++k) {
        CHECK((v[k].adjoint() * v[k] - CMatrix::Identity(2, 2)).norm() < 1e-9);
        CHECK(v[k].row(3).imag().cwiseAbs().maxCoeff() < 1e-15);
        CHECK((v[k] - w[k]).norm() < 1e-12);
    }
}

TEST_CASE("non-orthonormal input is rejected") {
    GivensConfig cfg(3, 2, 1);
    CMatrix v = CMatrix::Identity(3, 2);
    v(0, 0) = 2.0;
    CHECK_THROWS(extract_angles({v}, cfg));
}

TEST_CASE("shape mismatch is rejected") {
    GivensConfig cfg(4, 2, 2);
    CHECK_THROWS(reconstruct_target(AngleSet(3, 2), cfg));
    CHECK_THROWS(extract_angles({CMatrix::Identity(4, 2)}, cfg));
}
