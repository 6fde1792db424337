#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "bsdelab/bsde.hpp"
#include "bsdelab/rbsde.hpp"

#include <cmath>
#include <vector>

using namespace bsdelab;

namespace {

AdaptedProcess random_adapted(const LatticeModel& model, RandomSource& rng, double scale) {
    AdaptedProcess xi = make_adapted(model);
    xi.layers[0][0] = rng.uniform(-scale, scale);
    for (int i = 0; i < model.steps(); ++i)
        for (std::size_t n = 0; n < model.node_count(i); ++n)
            for (int b = 0; b < model.branch_count(); ++b)
                xi.at(i + 1, model.child(i, n, b)) =
                    xi.at(i, n) + rng.uniform(-1.0, 1.0) * std::sqrt(model.dt());
    return xi;
}

AdaptedProcess deterministic_obstacle(const LatticeModel& model,
                                      const std::vector<double>& per_layer) {
    AdaptedProcess xi = make_adapted(model);
    for (int i = 0; i <= model.steps(); ++i)
        std::fill(xi.layers[static_cast<std::size_t>(i)].begin(),
                  xi.layers[static_cast<std::size_t>(i)].end(),
                  per_layer[static_cast<std::size_t>(i)]);
    return xi;
}

} // namespace

TEST_CASE("inactive reflection reproduces the plain solve") {
    const MarkSet marks({1.0}, {0.2});
    const LatticeModel model = build_default_lattice(1.0, 4, marks);
    const DriverSpec driver = make_affine_driver(model.grid(), marks, 0.3, -0.2, {0.5}, 0.1, 0.0);
    RandomSource rng(3);
    AdaptedProcess xi = random_adapted(model, rng, 0.5);
    AdaptedProcess low = xi;
    for (int i = 0; i < model.steps(); ++i)
        for (std::size_t n = 0; n < model.node_count(i); ++n) low.at(i, n) = -100.0;
    const auto reflected = solve_rbsde(model, driver, low);
    const auto plain = solve_bsde(model, driver, low.layers[4]);
    for (int i = 0; i <= 4; ++i)
        for (std::size_t n = 0; n < model.node_count(i); ++n) {
            CHECK(reflected.y.at(i, n) == doctest::Approx(plain.y.at(i, n)).epsilon(1e-14));
            if (i < 4) CHECK(reflected.push.at(i, n) == 0.0);
        }
}

TEST_CASE("nonincreasing deterministic obstacle is its own envelope") {
    const LatticeModel model = build_default_lattice(1.0, 4, MarkSet{});
    const DriverSpec zero = make_zero_driver(0);
    const AdaptedProcess xi = deterministic_obstacle(model, {5.0, 4.0, 3.0, 2.0, 1.0});
    const auto sol = solve_rbsde(model, zero, xi);
    for (int i = 0; i <= 4; ++i)
        for (std::size_t n = 0; n < model.node_count(i); ++n)
            CHECK(sol.y.at(i, n) == doctest::Approx(xi.at(i, n)).epsilon(1e-14));
}

TEST_CASE("increasing deterministic obstacle waits until the horizon") {
    const LatticeModel model = build_default_lattice(1.0, 4, MarkSet{});
    const DriverSpec zero = make_zero_driver(0);
    const AdaptedProcess xi = deterministic_obstacle(model, {1.0, 2.0, 3.0, 4.0, 5.0});
    const auto sol = solve_rbsde(model, zero, xi);
    for (int i = 0; i <= 4; ++i)
        for (std::size_t n = 0; n < model.node_count(i); ++n) {
            CHECK(sol.y.at(i, n) == doctest::Approx(5.0).epsilon(1e-14));
            if (i < 4) CHECK(sol.push.at(i, n) == 0.0);
        }
}

TEST_CASE("skorokhod conditions hold exactly on solver output") {
    const MarkSet marks({1.0}, {0.25});
    const LatticeModel model = build_default_lattice(1.0, 5, marks);
    RandomSource rng(17);
    for (int trial = 0; trial < 20; ++trial) {
        const DriverSpec driver =
            make_affine_driver(model.grid(), marks, rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4),
                               {rng.uniform(-0.5, 1.0)}, rng.uniform(-0.5, 0.5), 0.0);
        const AdaptedProcess xi = random_adapted(model, rng, 1.0);
        const auto sol = solve_rbsde(model, driver, xi);
        const auto report = skorokhod_report(model, sol, xi);
        CHECK(report.pass);
        CHECK(report.max_flat_off_violation <= 1e-12);
        CHECK(report.min_increment >= 0.0);
        CHECK(report.min_constraint_slack >= -1e-12);
        CHECK(sol.y.at(5, 0) == xi.at(5, 0));
        // Node equations with the push restored.
        BsdeSolution as_bsde;
        as_bsde.y = sol.y;
        as_bsde.z = sol.z;
        as_bsde.k = sol.k;
        CHECK(node_equation_residual(model, as_node_driver(driver), as_bsde, nullptr, &sol.push) <=
              1e-12);
    }
}

TEST_CASE("skorokhod report flags hand-broken solutions") {
    const LatticeModel model = build_default_lattice(1.0, 3, MarkSet{});
    const DriverSpec zero = make_zero_driver(0);
    RandomSource rng(29);
    const AdaptedProcess xi = random_adapted(model, rng, 1.0);
    auto sol = solve_rbsde(model, zero, xi);

    SUBCASE("push where Y > xi breaks flat-off") {
        auto broken = sol;
        std::size_t where = 0;
        bool found = false;
        for (std::size_t n = 0; n < model.node_count(1) && !found; ++n)
            if (broken.y.at(1, n) > xi.at(1, n) + 0.1) {
                where = n;
                found = true;
            }
        if (found) {
            broken.push.at(1, where) += 0.5;
            CHECK(!skorokhod_report(model, broken, xi).pass);
        }
    }

    SUBCASE("negative increments break monotonicity") {
        auto broken = sol;
        broken.push.at(0, 0) = -0.25;
        CHECK(skorokhod_report(model, broken, xi).min_increment < 0.0);
        CHECK(!skorokhod_report(model, broken, xi).pass);
    }
}

TEST_CASE("snell envelope agrees with reflected solve for reward drivers") {
    const MarkSet marks({1.0}, {0.2});
    const LatticeModel model = build_default_lattice(1.0, 4, marks);
    RandomSource rng(41);
    const AdaptedProcess xi = random_adapted(model, rng, 1.0);

    SUBCASE("constant reward accrues by waiting") {
        // f = 1, xi = 0 gives Y_i = T - t_i.
        const AdaptedProcess zero_obstacle = deterministic_obstacle(model, {0, 0, 0, 0, 0});
        PredictableProcess reward = make_predictable(model, 1.0);
        const auto sol = snell_envelope(model, reward, zero_obstacle);
        for (int i = 0; i <= 4; ++i)
            for (std::size_t n = 0; n < model.node_count(i); ++n)
                CHECK(sol.y.at(i, n) ==
                      doctest::Approx(1.0 - model.grid().time(i)).epsilon(1e-13));
    }

    SUBCASE("martingale obstacle stops immediately") {
        // Make the obstacle a martingale by backward expectations of xi_N.
        AdaptedProcess mart = make_adapted(model);
        mart.layers[4] = xi.layers[4];
        std::vector<double> child(static_cast<std::size_t>(model.branch_count()));
        for (int i = 3; i >= 0; --i)
            for (std::size_t n = 0; n < model.node_count(i); ++n) {
                for (int b = 0; b < model.branch_count(); ++b)
                    child[static_cast<std::size_t>(b)] = mart.at(i + 1, model.child(i, n, b));
                mart.at(i, n) = model.conditional_expectation(child);
            }
        PredictableProcess reward = make_predictable(model, 0.0);
        const auto sol = snell_envelope(model, reward, mart);
        for (int i = 0; i <= 4; ++i)
            for (std::size_t n = 0; n < model.node_count(i); ++n)
                CHECK(sol.y.at(i, n) == doctest::Approx(mart.at(i, n)).epsilon(1e-12));
    }

    SUBCASE("driver overload rejects z-dependent drivers") {
        const DriverSpec bad = make_affine_driver(model.grid(), marks, 0.0, 0.5, {0.0}, 0.0, 0.0);
        CHECK_THROWS_AS(snell_envelope(model, bad, xi), std::invalid_argument);
        const DriverSpec good = make_constant_driver(0.3);
        CHECK_NOTHROW(snell_envelope(model, good, xi));
    }
}

TEST_CASE("reflected comparison is pointwise for ordered data") {
    const MarkSet marks({1.0}, {0.2});
    const LatticeModel model = build_default_lattice(1.0, 4, marks);
    RandomSource rng(53);
    for (int trial = 0; trial < 15; ++trial) {
        const double a = rng.uniform(-0.4, 0.4), b = rng.uniform(-0.4, 0.4);
        const double gamma = rng.uniform(-0.4, 1.0);
        const double r = rng.uniform(-0.3, 0.3);
        const double gap = rng.uniform(0.0, 0.8);
        const DriverSpec f2 = make_affine_driver(model.grid(), marks, a, b, {gamma}, r, 0.0);
        const DriverSpec f1 = make_affine_driver(model.grid(), marks, a, b, {gamma}, r + gap, 0.0);
        AdaptedProcess xi2 = random_adapted(model, rng, 1.0);
        AdaptedProcess xi1 = xi2;
        for (auto& layer : xi1.layers)
            for (double& v : layer) v += rng.uniform(0.0, 0.5);
        const auto s1 = solve_rbsde(model, f1, xi1);
        const auto s2 = solve_rbsde(model, f2, xi2);
        for (int i = 0; i <= 4; ++i)
            for (std::size_t n = 0; n < model.node_count(i); ++n)
                CHECK(s1.y.at(i, n) >= s2.y.at(i, n));
    }
}

TEST_CASE("strict comparison contrapositive separates root values") {
    const MarkSet marks({1.0}, {0.2});
    const LatticeModel model = build_default_lattice(1.0, 4, marks);
    RandomSource rng(67);
    const double delta = 0.4;
    const DriverSpec f2 = make_affine_driver(model.grid(), marks, 0.2, 0.1, {0.5}, 0.0, 0.0);
    const DriverSpec f1 = make_affine_driver(model.grid(), marks, 0.2, 0.1, {0.5}, delta, 0.0);
    // Obstacle kept far below the solutions early, so the first hit is late and
    // the drivers differ strictly before it.
    AdaptedProcess xi = random_adapted(model, rng, 0.3);
    for (int i = 0; i < 4; ++i)
        for (std::size_t n = 0; n < model.node_count(i); ++n) xi.at(i, n) -= 50.0;
    const auto s1 = solve_rbsde(model, f1, xi);
    const auto s2 = solve_rbsde(model, f2, xi);
    CHECK(s1.y.at(0, 0) > s2.y.at(0, 0));
    // The gap carries at least one step of the delta separation.
    CHECK(s1.y.at(0, 0) - s2.y.at(0, 0) > delta * model.dt() * 0.5);
}

TEST_CASE("repeated solves are bit identical") {
    const MarkSet marks({1.0}, {0.3});
    const LatticeModel model = build_default_lattice(1.0, 5, marks);
    RandomSource rng(71);
    const DriverSpec driver = make_affine_driver(model.grid(), marks, 0.3, 0.2, {0.4}, 0.1, -0.2);
    const AdaptedProcess xi = random_adapted(model, rng, 1.0);
    const auto s1 = solve_rbsde(model, driver, xi);
    const auto s2 = solve_rbsde(model, driver, xi);
    for (int i = 0; i <= 5; ++i)
        for (std::size_t n = 0; n < model.node_count(i); ++n)
            CHECK(s1.y.at(i, n) == s2.y.at(i, n));
}
