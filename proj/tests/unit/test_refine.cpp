#include <doctest.h>

#include <cmath>
#include <random>

#include "csilab/pipeline.hpp"
#include "csilab/refine.hpp"

using namespace csilab;
using namespace csilab::refine;

namespace {

RefinerGeometry small_geometry(int window) {
    RefinerGeometry g;
    g.n_a = 3;
    g.n_c = 4;
    g.window = window;
    g.hidden = {6, 5};
    return g;
}

AngleSet random_angles(int n_a, int n_c, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> n(0.0, scale);
    AngleSet a;
    a.phi = RMatrix(n_a, n_c);
    a.psi = RMatrix(n_a, n_c);
    for (Eigen::Index i = 0; i < a.phi.size(); ++i) {
        a.phi.data()[i] = n(rng);
        a.psi.data()[i] = n(rng);
    }
    return a;
}

// Refiner with a nonzero output layer, so refined frames differ from raw ones.
RefinerModel active_refiner(int window, std::uint64_t seed) {
    RefinerModel m(small_geometry(window));
    std::mt19937_64 rng(seed);
    m.init(rng);
    std::normal_distribution<double> n(0.0, 0.1);
    for (auto& p : m.params())
        for (Eigen::Index i = 0; i < p->value.values().size(); ++i) p->value.values().data()[i] += n(rng);
    return m;
}

}  // namespace

TEST_CASE("window composition examples") {
    CHECK(window_slots(5, 3) == std::vector<WindowSlot>{{3, true}, {4, true}, {5, false}});
    CHECK(window_slots(4, 3) == std::vector<WindowSlot>{{2, false}, {3, true}, {4, false}});
    CHECK(window_slots(3, 3) == std::vector<WindowSlot>{{1, false}, {2, false}, {3, false}});
    CHECK_THROWS(window_slots(2, 3));
}

TEST_CASE("window composition follows the recursion for every T and t") {
    for (int T : {2, 3, 5}) {
        for (int t = T; t <= 3 * T; ++t) {
            CAPTURE(T);
            CAPTURE(t);
            const auto slots = window_slots(t, T);
            REQUIRE(slots.size() == static_cast<std::size_t>(T));
            for (int k = 0; k < T; ++k) {
                const int j = t - T + 1 + k;
                CHECK(slots[k].index == j);
                if (t >= 2 * T - 1) CHECK(slots[k].refined == (j < t));
                else CHECK(slots[k].refined == (j >= T && j < t));
            }
        }
    }
}

TEST_CASE("recursive inference uses the expected windows") {
    std::mt19937_64 rng(3);
    for (int T : {2, 3, 5}) {
        const auto m = active_refiner(T, 10 + T);
        AngleSequence hat;
        for (int t = 0; t < 3 * T + 2; ++t) hat.push_back(random_angles(3, 4, rng));
        const auto out = run_refined_sequence(m, hat);
        REQUIRE(out.size() == hat.size());
        for (int t = 0; t < T; ++t) CHECK(out[t] == hat[t]);
        for (int t = T; t < static_cast<int>(hat.size()); ++t) {
            std::vector<AngleSet> w;
            for (const auto& s : window_slots(t, T)) w.push_back(s.refined ? out[s.index] : hat[s.index]);
            CHECK(out[t] == refine::refine(m, w));
            CHECK_FALSE(out[t] == hat[t]);
        }
    }
}

TEST_CASE("fresh refiner is the identity") {
    std::mt19937_64 rng(4);
    RefinerModel m(small_geometry(3));
    m.init(rng);
    AngleSequence hat;
    for (int t = 0; t < 9; ++t) hat.push_back(random_angles(3, 4, rng));
    CHECK(run_refined_sequence(m, hat) == hat);
    CHECK(refine::refine(m, std::span<const AngleSet>(hat).subspan(2, 3)) == hat[4]);
}

TEST_CASE("refine rejects a short window") {
    std::mt19937_64 rng(5);
    RefinerModel m(small_geometry(3));
    m.init(rng);
    std::vector<AngleSet> w{random_angles(3, 4, rng), random_angles(3, 4, rng)};
    CHECK_THROWS(refine::refine(m, w));
    w.push_back(random_angles(2, 4, rng));
    CHECK_THROWS(refine::refine(m, w));
}

TEST_CASE("refinement loss gradient") {
    const auto m0 = active_refiner(3, 6);
    auto m = m0.clone();
    std::mt19937_64 rng(6);
    std::normal_distribution<double> n(0.0, 1.0);
    Matrix x(4, 3 * 24), y(4, 24);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = n(rng);
    for (Eigen::Index i = 0; i < y.size(); ++i) y.data()[i] = n(rng);
    auto build = [&](ad::Graph& g) { return refine_loss(g, m, x, y); };
    CHECK(ad::grad_check(build, m.params(), {.coords_per_param = 16}) < 1e-4);
}

TEST_CASE("refiner training improves correlated sequences") {
    // Noisy reconstructions of slowly drifting angles.
    std::mt19937_64 rng(7);
    std::normal_distribution<double> noise(0.0, 0.15);
    auto make = [&](int count, std::vector<AngleSequence>& hat, std::vector<AngleSequence>& truth) {
        for (int s = 0; s < count; ++s) {
            AngleSequence h, tr;
            AngleSet a = random_angles(3, 4, rng, 0.5);
            const AngleSet drift = random_angles(3, 4, rng, 0.02);
            for (int t = 0; t < 12; ++t) {
                a = a + drift;
                AngleSet noisy = a;
                for (Eigen::Index i = 0; i < a.phi.size(); ++i) {
                    noisy.phi.data()[i] += noise(rng);
                    noisy.psi.data()[i] += noise(rng);
                }
                tr.push_back(a);
                h.push_back(noisy);
            }
            hat.push_back(std::move(h));
            truth.push_back(std::move(tr));
        }
    };
    std::vector<AngleSequence> hat, truth, hat_test, truth_test;
    make(40, hat, truth);
    make(10, hat_test, truth_test);

    RefinerModel m(small_geometry(3));
    std::mt19937_64 init(8);
    m.init(init);
    RefinerTrainConfig cfg;
    cfg.pretrain_epochs = 30;
    cfg.recursive_epochs = 5;
    cfg.batch = 32;
    const auto h = train_refiner(m, hat, truth, cfg);
    CHECK(h.pretrain_loss.size() == 30);
    CHECK(h.recursive_loss.size() == 5);
    CHECK(h.pretrain_loss.back() < h.pretrain_loss.front());

    auto mean_distortion = [&](bool refined) {
        double sum = 0;
        int n = 0;
        for (std::size_t s = 0; s < hat_test.size(); ++s) {
            const auto out = refined ? run_refined_sequence(m, hat_test[s]) : hat_test[s];
            for (std::size_t t = 3; t < out.size(); ++t, ++n) sum += pipeline::angular_distortion(out[t], truth_test[s][t]);
        }
        return sum / n;
    };
    CHECK(mean_distortion(true) < mean_distortion(false));
}

TEST_CASE("constant windows stay nearly unchanged after training") {
    std::mt19937_64 rng(9);
    std::vector<AngleSequence> hat;
    for (int s = 0; s < 30; ++s) hat.push_back(AngleSequence(8, random_angles(3, 4, rng, 0.8)));
    RefinerModel m(small_geometry(3));
    m.init(rng);
    RefinerTrainConfig cfg;
    cfg.pretrain_epochs = 15;
    cfg.recursive_epochs = 2;
    cfg.batch = 16;
    train_refiner(m, hat, hat, cfg);
    const AngleSet a = random_angles(3, 4, rng, 0.8);
    const std::vector<AngleSet> w(3, a);
    const AngleSet out = refine::refine(m, w);
    const double mean = ((out.phi - a.phi).cwiseAbs().sum() + (out.psi - a.psi).cwiseAbs().sum()) / 24.0;
    CHECK(mean < 0.05);
}

TEST_CASE("clone and rebind share no storage") {
    const auto m = active_refiner(2, 11);
    auto c = m.clone();
    c.params().at("refiner.0.bias").value.values().setConstant(5.0);
    CHECK(m.params().find("refiner.0.bias")->value.values()(0, 0) != 5.0);
    CHECK_THROWS(train_refiner(c, {AngleSequence{}}, {}, {}));
}
