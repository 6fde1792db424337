#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "bsdelab/rbsde.hpp"
#include "bsdelab/stopping.hpp"

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

AdaptedProcess martingale_obstacle(const LatticeModel& model, RandomSource& rng) {
    AdaptedProcess mart = make_adapted(model);
    const int N = model.steps();
    for (std::size_t n = 0; n < model.node_count(N); ++n)
        mart.at(N, n) = rng.uniform(-1.0, 1.0);
    std::vector<double> child(static_cast<std::size_t>(model.branch_count()));
    for (int i = N - 1; i >= 0; --i)
        for (std::size_t n = 0; n < model.node_count(i); ++n) {
            for (int b = 0; b < model.branch_count(); ++b)
                child[static_cast<std::size_t>(b)] = mart.at(i + 1, model.child(i, n, b));
            mart.at(i, n) = model.conditional_expectation(child);
        }
    return mart;
}

} // namespace

TEST_CASE("stop-now and stop-at-horizon rules evaluate as expected") {
    const MarkSet marks({1.0}, {0.2});
    const LatticeModel model = build_default_lattice(1.0, 3, marks);
    const DriverSpec zero = make_zero_driver(1);
    RandomSource rng(5);
    const AdaptedProcess xi = random_adapted(model, rng, 1.0);
    const NodeRef root{0, 0};

    const double now = evaluate_stopped(model, zero, xi, stop_immediately(model), root);
    CHECK(now == doctest::Approx(xi.at(0, 0)).epsilon(1e-14));

    // Never stop early: X_S = E_S[xi_N] for the zero driver.
    const double hold = evaluate_stopped(model, zero, xi, make_stop_region(model), root);
    double expect = 0.0;
    const auto probs = model.layer_probabilities(3);
    for (std::size_t n = 0; n < model.node_count(3); ++n) expect += probs[n] * xi.at(3, n);
    CHECK(hold == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("random rules match an independent path-sum oracle for f(t) drivers") {
    // For drivers independent of (y,z,k) the stopped value is
    // E_S[xi_tau + sum_{i in [S,tau)} f(t_i) dt], computable by direct path
    // enumeration without any solver.
    const MarkSet marks({1.0}, {0.25});
    const LatticeModel model = build_default_lattice(1.0, 4, marks);
    RandomSource rng(13);
    const double f0 = 0.4, f1 = -0.3;
    const DriverSpec driver(
        [f0, f1](double t, double, double, std::span<const double>) { return f0 + f1 * t; }, 0.0,
        DriverFlags{false, false, false, true});
    const AdaptedProcess xi = random_adapted(model, rng, 1.0);

    for (int trial = 0; trial < 10; ++trial) {
        StoppingRule rule = make_stop_region(model);
        for (int i = 0; i <= model.steps(); ++i)
            for (std::size_t n = 0; n < model.node_count(i); ++n)
                if (rng.uniform01() < 0.3) rule.stop[static_cast<std::size_t>(i)][n] = 1;

        // Path-walk oracle from the root.
        const int N = model.steps();
        double oracle = 0.0;
        std::vector<std::pair<std::size_t, double>> frontier{{0, 1.0}}; // node, prob
        std::vector<std::pair<std::size_t, double>> next;
        for (int i = 0; i <= N; ++i) {
            next.clear();
            for (const auto& [node, prob] : frontier) {
                if (rule.stops_at(i, node, N)) {
                    double reward = xi.at(i, node);
                    oracle += prob * reward;
                    continue;
                }
                for (int b = 0; b < model.branch_count(); ++b)
                    next.emplace_back(model.child(i, node, b),
                                      prob * model.branches()[static_cast<std::size_t>(b)].prob);
            }
            // Accrue the running reward for every path still alive.
            if (i <= N - 1) {
                double alive = 0.0;
                for (const auto& [node, prob] : next) alive += prob;
                oracle += alive * (f0 + f1 * model.grid().time(i)) * model.dt();
            }
            frontier.swap(next);
        }
        const double solved = evaluate_stopped(model, driver, xi, rule, NodeRef{0, 0});
        CHECK(solved == doctest::Approx(oracle).epsilon(1e-12));
    }
}

TEST_CASE("rule enumeration counts effective rules") {
    const LatticeModel binomial = build_default_lattice(1.0, 4, MarkSet{});
    // r(N)=1, r(d)=1+r(d+1)^B: binomial depth 4 gives 677 rules at the root.
    CHECK(count_stopping_rules(binomial, NodeRef{0, 0}, 1u << 20) == 677);
    std::uint64_t seen = 0;
    for_each_stopping_rule(binomial, NodeRef{0, 0}, EnumerationCaps{64, 1u << 20},
                           [&](const StoppingRule&) { ++seen; });
    CHECK(seen == 677);

    const MarkSet marks({1.0}, {0.2});
    const LatticeModel trinomial = build_default_lattice(1.0, 3, marks);
    CHECK(count_stopping_rules(trinomial, NodeRef{0, 0}, 1u << 20) == 730);
}

TEST_CASE("brute force matches the reflected value on seeded instances") {
    RandomSource rng(2024);
    for (int trial = 0; trial < 8; ++trial) {
        const int with_jump = trial % 2;
        const MarkSet marks = with_jump ? MarkSet({1.0}, {0.3}) : MarkSet{};
        const int steps = with_jump ? 3 : 4;
        const LatticeModel model = build_default_lattice(1.0, steps, marks);
        std::vector<double> gamma(with_jump ? 1 : 0, 0.5);
        const DriverSpec driver =
            make_affine_driver(model.grid(), marks, rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4),
                               gamma, rng.uniform(-0.3, 0.3), 0.0);
        const AdaptedProcess xi = random_adapted(model, rng, 1.0);
        const auto sol = solve_rbsde(model, driver, xi);
        const auto oracle = brute_force_value(model, driver, xi, NodeRef{0, 0});
        CHECK(sol.y.at(0, 0) == doctest::Approx(oracle.value).epsilon(1e-10));

        // The oracle's best rule is itself optimal under the criterion.
        const auto verdict = check_optimality_criterion(model, driver, xi, sol, oracle.best, NodeRef{0, 0});
        CHECK(verdict.optimal);
    }
}

TEST_CASE("characterization holds at every node of a seeded tree") {
    RandomSource rng(31);
    const MarkSet marks({1.0}, {0.3});
    const LatticeModel model = build_default_lattice(1.0, 3, marks);
    const DriverSpec driver = make_affine_driver(model.grid(), marks, 0.3, -0.2, {0.6}, 0.2, 0.0);
    const AdaptedProcess xi = random_adapted(model, rng, 1.0);
    const auto sol = solve_rbsde(model, driver, xi);
    for (int layer = 0; layer <= 3; ++layer)
        for (std::size_t n = 0; n < model.node_count(layer); ++n) {
            const auto oracle = brute_force_value(model, driver, xi, NodeRef{layer, n});
            CHECK(sol.y.at(layer, n) == doctest::Approx(oracle.value).epsilon(1e-10));
        }
}

TEST_CASE("optimal time attains the reflected value exactly") {
    RandomSource rng(333);
    const MarkSet marks({1.0}, {0.2});
    const LatticeModel model = build_default_lattice(1.0, 4, marks);
    const DriverSpec driver = make_affine_driver(model.grid(), marks, 0.2, 0.3, {0.4}, -0.1, 0.0);
    const AdaptedProcess xi = random_adapted(model, rng, 1.0);
    const auto sol = solve_rbsde(model, driver, xi);
    const NodeRef root{0, 0};
    const StoppingRule tau_star = optimal_time(model, sol, xi, root);
    const double attained = evaluate_stopped(model, driver, xi, tau_star, root);
    CHECK(attained == doctest::Approx(sol.y.at(0, 0)).epsilon(1e-10));
    CHECK(check_optimality_criterion(model, driver, xi, sol, tau_star, root).optimal);

    // Stop-at-horizon is suboptimal when early stopping is strictly better.
    AdaptedProcess spiked = xi;
    spiked.at(0, 0) += 10.0;
    const auto sol2 = solve_rbsde(model, driver, spiked);
    const auto verdict =
        check_optimality_criterion(model, driver, spiked, sol2, make_stop_region(model), root);
    CHECK(!verdict.optimal);
}

TEST_CASE("martingale obstacle makes immediate stopping optimal") {
    const MarkSet marks({1.0}, {0.2});
    const LatticeModel model = build_default_lattice(1.0, 4, marks);
    RandomSource rng(55);
    const AdaptedProcess mart = martingale_obstacle(model, rng);
    const DriverSpec zero = make_zero_driver(1);
    const auto sol = solve_rbsde(model, zero, mart);
    const NodeRef root{0, 0};
    const StoppingRule tau_star = optimal_time(model, sol, mart, root);
    const auto layers = effective_stop_layers(model, tau_star, root);
    for (int layer : layers) CHECK(layer == 0);
    // Any epsilon also stops immediately.
    const StoppingRule tau_eps = eps_optimal_time(model, sol, mart, root, 0.5);
    for (int layer : effective_stop_layers(model, tau_eps, root)) CHECK(layer == 0);
}

TEST_CASE("eps rules respect the certified bound and shrink with eps") {
    RandomSource rng(77);
    const MarkSet marks({1.0}, {0.25});
    const LatticeModel model = build_default_lattice(1.0, 4, marks);
    const DriverSpec driver = make_affine_driver(model.grid(), marks, 0.4, 0.3, {0.5}, 0.2, 0.0);
    const AdaptedProcess xi = random_adapted(model, rng, 1.0);
    const auto sol = solve_rbsde(model, driver, xi);
    const NodeRef root{0, 0};

    CHECK_THROWS_AS(eps_optimal_time(model, sol, xi, root, 0.0), std::invalid_argument);

    std::vector<int> previous;
    for (double eps : {0.5, 0.1, 0.01, 0.001}) {
        const auto report = eps_optimal_report(model, driver, xi, sol, root, eps);
        CHECK(report.gap >= -1e-10);
        CHECK(report.gap <= report.certified_bound + 1e-12);
        // The sharper discrete bound: gap <= eps.
        CHECK(report.gap <= eps + 1e-12);
        const auto layers = effective_stop_layers(model, report.rule, root);
        if (!previous.empty())
            for (std::size_t p = 0; p < layers.size(); ++p) CHECK(layers[p] >= previous[p]);
        previous = layers;
    }

    // eps larger than the whole gap stops at once.
    double widest = 0.0;
    for (int i = 0; i <= 4; ++i)
        for (std::size_t n = 0; n < model.node_count(i); ++n)
            widest = std::max(widest, sol.y.at(i, n) - xi.at(i, n));
    const auto big = eps_optimal_time(model, sol, xi, root, widest + 1.0);
    for (int layer : effective_stop_layers(model, big, root)) CHECK(layer == 0);
}

TEST_CASE("certified bound constant matches the closed form") {
    // C = 1, T = 1: beta = 3C^2 + 2C = 5, bound = eps * e^{2.5}.
    const LatticeModel model = build_default_lattice(1.0, 2, MarkSet{});
    const DriverSpec unit([](double, double y, double, std::span<const double>) { return -y; }, 1.0,
                          DriverFlags{true, false, false, true});
    AdaptedProcess xi = make_adapted(model, 0.0);
    const auto sol = solve_rbsde(model, unit, xi);
    const auto report = eps_optimal_report(model, unit, xi, sol, NodeRef{0, 0}, 0.01);
    CHECK(report.certified_bound == doctest::Approx(0.01 * std::exp(2.5)).epsilon(1e-14));
    CHECK(report.certified_bound == doctest::Approx(0.12182493960703473).epsilon(1e-13));
}

TEST_CASE("tau-star is the minimal optimal rule and the eps limit") {
    RandomSource rng(91);
    const MarkSet marks({1.0}, {0.3});
    const LatticeModel model = build_default_lattice(1.0, 3, marks);
    const DriverSpec driver = make_affine_driver(model.grid(), marks, 0.3, 0.2, {0.5}, 0.1, 0.0);
    const AdaptedProcess xi = random_adapted(model, rng, 1.0);
    const auto sol = solve_rbsde(model, driver, xi);
    const NodeRef root{0, 0};
    const StoppingRule tau_star = optimal_time(model, sol, xi, root);
    const auto star_layers = effective_stop_layers(model, tau_star, root);
    const double y_root = sol.y.at(0, 0);

    // Pathwise minimality among all oracle-optimal rules.
    for_each_stopping_rule(model, root, EnumerationCaps{64, 1u << 20}, [&](const StoppingRule& rule) {
        const double value = evaluate_stopped(model, driver, xi, rule, root);
        if (std::abs(value - y_root) <= 1e-10) {
            const auto layers = effective_stop_layers(model, rule, root);
            for (std::size_t p = 0; p < layers.size(); ++p) CHECK(star_layers[p] <= layers[p]);
        }
    });

    // tau^eps stabilizes to tau-star below the minimal positive gap.
    double min_gap = std::numeric_limits<double>::infinity();
    for (int i = 0; i <= 3; ++i)
        for (std::size_t n = 0; n < model.node_count(i); ++n) {
            const double gap = sol.y.at(i, n) - xi.at(i, n);
            if (gap > 1e-12) min_gap = std::min(min_gap, gap);
        }
    const auto tau_eps = eps_optimal_time(model, sol, xi, root, min_gap / 2.0);
    const auto eps_layers = effective_stop_layers(model, tau_eps, root);
    for (std::size_t p = 0; p < eps_layers.size(); ++p) CHECK(eps_layers[p] == star_layers[p]);
}

TEST_CASE("risk value function is the negated reflected value") {
    RandomSource rng(111);
    const MarkSet marks({1.0}, {0.2});
    const LatticeModel model = build_default_lattice(1.0, 3, marks);
    const DriverSpec driver = make_affine_driver(model.grid(), marks, 0.1, 0.2, {0.3}, 0.0, 0.0);
    const AdaptedProcess xi = random_adapted(model, rng, 1.0);
    const double v = risk_value_function(model, driver, xi, NodeRef{0, 0});
    const auto sol = solve_rbsde(model, driver, xi);
    CHECK(v == doctest::Approx(-sol.y.at(0, 0)).epsilon(1e-14));
    // Stopping now is feasible, so v(S) <= -xi_S.
    CHECK(v <= -xi.at(0, 0) + 1e-12);
    // Equals the negated oracle on small trees.
    const auto oracle = brute_force_value(model, driver, xi, NodeRef{0, 0});
    CHECK(v == doctest::Approx(-oracle.value).epsilon(1e-10));
}

TEST_CASE("characterization at the default node cap and cap enforcement") {
    RandomSource rng(404);
    // Depth-5 binomial subtree: 63 nodes, 458330 effective rules at the root.
    const LatticeModel deep = build_default_lattice(1.0, 5, MarkSet{});
    const DriverSpec driver = make_affine_driver(deep.grid(), MarkSet{}, 0.3, -0.2, {}, 0.1, 0.0);
    const AdaptedProcess xi = random_adapted(deep, rng, 1.0);
    const auto sol = solve_rbsde(deep, driver, xi);
    CHECK(count_stopping_rules(deep, NodeRef{0, 0}, 1u << 20) == 458330);
    const auto oracle = brute_force_value(deep, driver, xi, NodeRef{0, 0});
    CHECK(oracle.rules_enumerated == 458330);
    CHECK(sol.y.at(0, 0) == doctest::Approx(oracle.value).epsilon(1e-10));

    // A trinomial depth-4 subtree exceeds the 64-node default cap at the root
    // but stays enumerable one layer down.
    const MarkSet marks({1.0}, {0.25});
    const LatticeModel wide = build_default_lattice(1.0, 4, marks);
    const DriverSpec jumpy = make_affine_driver(wide.grid(), marks, 0.2, 0.1, {0.4}, 0.0, 0.0);
    const AdaptedProcess xi2 = random_adapted(wide, rng, 1.0);
    CHECK_THROWS_AS(brute_force_value(wide, jumpy, xi2, NodeRef{0, 0}), std::invalid_argument);
    const auto sol2 = solve_rbsde(wide, jumpy, xi2);
    for (std::size_t n = 0; n < wide.node_count(1); ++n) {
        const auto sub = brute_force_value(wide, jumpy, xi2, NodeRef{1, n});
        CHECK(sol2.y.at(1, n) == doctest::Approx(sub.value).epsilon(1e-10));
    }
}

TEST_CASE("rule-defined maturities negate the stopped value") {
    const MarkSet marks({1.0}, {0.2});
    const LatticeModel model = build_default_lattice(1.0, 3, marks);
    const DriverSpec driver = make_affine_driver(model.grid(), marks, 0.2, 0.1, {0.3}, 0.1, 0.0);
    RandomSource rng(71);
    const AdaptedProcess position = random_adapted(model, rng, 1.0);
    StoppingRule rule = make_stop_region(model);
    rule.stop[1][0] = 1;
    rule.stop[2][5] = 1;
    const double rho = risk_measure_stopped(model, driver, position, rule, NodeRef{0, 0});
    CHECK(rho == doctest::Approx(-evaluate_stopped(model, driver, position, rule, NodeRef{0, 0}))
                     .epsilon(1e-15));
}
