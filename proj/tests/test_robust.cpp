#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "bsdelab/robust.hpp"

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

AmbiguityFamily crossing_family(const LatticeModel& model, const MarkSet& marks, RandomSource& rng,
                                int members) {
    std::vector<DriverSpec> drivers;
    for (int a = 0; a < members; ++a)
        drivers.push_back(make_affine_driver(model.grid(), marks, rng.uniform(-0.3, 0.3),
                                             rng.uniform(-0.4, 0.4),
                                             marks.count() ? std::vector<double>{rng.uniform(-0.4, 0.8)}
                                                           : std::vector<double>{},
                                             rng.uniform(-0.3, 0.3), rng.uniform(-0.2, 0.2)));
    return make_family(std::move(drivers));
}

} // namespace

TEST_CASE("inf driver of a singleton family is its member") {
    const MarkSet marks({1.0}, {0.2});
    const LatticeModel model = build_default_lattice(1.0, 3, marks);
    const DriverSpec member = make_affine_driver(model.grid(), marks, 0.2, 0.3, {0.5}, 0.1, 0.0);
    const AmbiguityFamily family = make_family({member});
    const InfDriver inf = inf_driver(family);
    RandomSource rng(8);
    for (int trial = 0; trial < 50; ++trial) {
        const double t = rng.uniform(0.0, 1.0), y = rng.uniform(-2.0, 2.0), z = rng.uniform(-2.0, 2.0);
        const std::vector<double> k{rng.uniform(-2.0, 2.0)};
        CHECK(inf.driver(t, y, z, k) == member(t, y, z, k));
        CHECK(inf.argmin(t, y, z, k) == 0);
    }
}

TEST_CASE("inf driver is the pointwise min with lowest-index ties") {
    const MarkSet marks({1.0}, {0.2});
    const LatticeModel model = build_default_lattice(1.0, 4, marks);
    RandomSource rng(15);
    const AmbiguityFamily family = crossing_family(model, marks, rng, 3);
    const InfDriver inf = inf_driver(family);
    for (int trial = 0; trial < 100; ++trial) {
        const double t = rng.uniform(0.0, 1.0), y = rng.uniform(-2.0, 2.0), z = rng.uniform(-2.0, 2.0);
        const std::vector<double> k{rng.uniform(-2.0, 2.0)};
        double expect = family.members[0](t, y, z, k);
        for (std::size_t a = 1; a < family.members.size(); ++a)
            expect = std::min(expect, family.members[a](t, y, z, k));
        CHECK(inf.driver(t, y, z, k) == expect);
        const int chosen = inf.argmin(t, y, z, k);
        CHECK(family.members[static_cast<std::size_t>(chosen)](t, y, z, k) == expect);
        for (int a = 0; a < chosen; ++a)
            CHECK(family.members[static_cast<std::size_t>(a)](t, y, z, k) > expect);
    }
    // The composed monotonicity coefficient still verifies.
    const auto royer = check_royer(inf.driver, marks, model.grid(), 500, 99);
    CHECK(royer.status == RoyerReport::Status::Pass);
}

TEST_CASE("dominated families reduce the game to the dominant member") {
    const MarkSet marks({1.0}, {0.2});
    const LatticeModel model = build_default_lattice(1.0, 3, marks);
    RandomSource rng(23);
    const DriverSpec low = make_affine_driver(model.grid(), marks, 0.2, 0.3, {0.4}, -0.5, 0.0);
    const DriverSpec high = make_affine_driver(model.grid(), marks, 0.2, 0.3, {0.4}, 0.5, 0.0);
    const AmbiguityFamily family = make_family({high, low});
    const AdaptedProcess xi = random_adapted(model, rng, 1.0);

    const auto best = upper_value(model, family, xi, NodeRef{0, 0});
    CHECK(best.member == 1);
    const auto dominant = solve_rbsde(model, low, xi);
    CHECK(best.value == doctest::Approx(dominant.y.at(0, 0)).epsilon(1e-12));

    const GameSolution game = solve_game(model, family, xi);
    CHECK(game.y.y.at(0, 0) == doctest::Approx(dominant.y.at(0, 0)).epsilon(1e-12));
    CHECK(game.principle_residual <= 1e-10);
}

TEST_CASE("game values coincide with the inf-driver solution on seeded families") {
    RandomSource rng(2025);
    const GameCaps caps{{64, 1u << 20}, 1u << 21};
    for (int trial = 0; trial < 6; ++trial) {
        const bool with_jump = trial % 2 == 1;
        const MarkSet marks = with_jump ? MarkSet({1.0}, {0.3}) : MarkSet{};
        const int steps = with_jump ? 2 : 3;
        const LatticeModel model = build_default_lattice(1.0, steps, marks);
        const int members = 2 + trial % 2;
        const AmbiguityFamily family = crossing_family(model, marks, rng, members);
        const AdaptedProcess xi = random_adapted(model, rng, 1.0);

        const GameSolution game = solve_game(model, family, xi);
        CHECK(game.principle_residual <= 1e-10);

        const auto v_upper = upper_value_exact(model, family, xi, NodeRef{0, 0}, caps);
        REQUIRE(v_upper.has_value());
        CHECK(*v_upper == doctest::Approx(game.y.y.at(0, 0)).epsilon(1e-10));

        const auto v_lower = lower_value(model, family, xi, NodeRef{0, 0}, caps, ControlMode::FullPredictable);
        CHECK(!v_lower.sampled);
        CHECK(v_lower.value == doctest::Approx(game.y.y.at(0, 0)).epsilon(1e-10));

        // Minimax ordering against the constant-control upper value.
        const auto v_members = upper_value(model, family, xi, NodeRef{0, 0});
        CHECK(v_lower.value <= v_members.value + 1e-10);
    }
}

TEST_CASE("enlarging the family can only lower the game value") {
    const MarkSet marks({1.0}, {0.25});
    const LatticeModel model = build_default_lattice(1.0, 3, marks);
    RandomSource rng(47);
    const AmbiguityFamily small = crossing_family(model, marks, rng, 2);
    AmbiguityFamily large = small;
    large.members.push_back(make_affine_driver(model.grid(), marks, 0.1, -0.2, {0.3}, 0.0, 0.1));
    large.lipschitz = std::max(large.lipschitz, large.members.back().lipschitz());
    const AdaptedProcess xi = random_adapted(model, rng, 1.0);
    const GameSolution gs = solve_game(model, small, xi);
    const GameSolution gl = solve_game(model, large, xi);
    for (int i = 0; i <= 3; ++i)
        for (std::size_t n = 0; n < model.node_count(i); ++n)
            CHECK(gl.y.y.at(i, n) <= gs.y.y.at(i, n) + 1e-12);
}

TEST_CASE("find_saddle certifies the canonical pair") {
    RandomSource rng(61);
    const GameCaps caps{{64, 1u << 20}, 1u << 21};
    for (int trial = 0; trial < 4; ++trial) {
        const MarkSet marks = trial % 2 ? MarkSet({1.0}, {0.3}) : MarkSet{};
        const int steps = trial % 2 ? 2 : 3;
        const LatticeModel model = build_default_lattice(1.0, steps, marks);
        const AmbiguityFamily family = crossing_family(model, marks, rng, 2);
        const AdaptedProcess xi = random_adapted(model, rng, 1.0);
        const auto result = find_saddle(model, family, xi, NodeRef{0, 0}, caps);
        REQUIRE(result.saddle.has_value());
        CHECK(result.check.certified);
        CHECK(result.check.left_violation <= 1e-10);
        CHECK(result.check.right_violation <= 1e-10);
    }
}

TEST_CASE("broken saddles are rejected") {
    const LatticeModel model = build_default_lattice(1.0, 3, MarkSet{});
    RandomSource rng(71);
    const GameCaps caps{{64, 1u << 20}, 1u << 21};
    const AmbiguityFamily family = crossing_family(model, MarkSet{}, rng, 2);
    AdaptedProcess xi = random_adapted(model, rng, 1.0);
    // Early stopping strictly dominant at the root.
    xi.at(0, 0) += 10.0;
    const GameSolution game = solve_game(model, family, xi);

    // tau-hat = never stop early violates the left inequality.
    const auto bad_tau =
        check_saddle(model, family, xi, NodeRef{0, 0}, make_stop_region(model), game.alpha_bar, caps);
    CHECK(bad_tau.left_violation > 1e-10);
    CHECK(!bad_tau.certified);

    // A control that differs from the argmin before tau* violates the right
    // inequality when the members are strictly separated there.
    const DriverSpec low = make_affine_driver(model.grid(), MarkSet{}, 0.1, 0.2, {}, -0.4, 0.0);
    const DriverSpec high = make_affine_driver(model.grid(), MarkSet{}, 0.1, 0.2, {}, 0.4, 0.0);
    const AmbiguityFamily separated = make_family({low, high});
    AdaptedProcess flat = random_adapted(model, rng, 0.2);
    for (int i = 0; i < 3; ++i)
        for (std::size_t n = 0; n < model.node_count(i); ++n) flat.at(i, n) -= 25.0;
    const GameSolution sep_game = solve_game(model, separated, flat);
    const StoppingRule tau_star = optimal_time(model, sep_game.y, flat, NodeRef{0, 0});
    const auto bad_alpha =
        check_saddle(model, separated, flat, NodeRef{0, 0}, tau_star, constant_control(model, 1), caps);
    CHECK(bad_alpha.right_violation > 1e-10);
    CHECK(!bad_alpha.certified);
}

TEST_CASE("optimality criteria agree with ground truth") {
    const MarkSet marks({1.0}, {0.2});
    const LatticeModel model = build_default_lattice(1.0, 3, marks);
    RandomSource rng(83);
    const std::vector<double> eps_grid{0.1, 0.01, 0.001};

    SUBCASE("the extracted argmin control is optimal") {
        const AmbiguityFamily family = crossing_family(model, marks, rng, 2);
        const AdaptedProcess xi = random_adapted(model, rng, 1.0);
        const GameSolution game = solve_game(model, family, xi);
        const auto crit = check_rbsde_optimality_criteria(model, family, xi, NodeRef{0, 0},
                                                          game.alpha_bar, eps_grid);
        CHECK(crit.criterion_holds);
        CHECK(crit.eps_criterion_holds);
        CHECK(crit.ground_truth_optimal);
        CHECK(crit.agree);
    }

    SUBCASE("a strictly dominated control fails the criterion and the value") {
        const DriverSpec low = make_affine_driver(model.grid(), marks, 0.1, 0.2, {0.3}, -0.4, 0.0);
        const DriverSpec high = make_affine_driver(model.grid(), marks, 0.1, 0.2, {0.3}, 0.4, 0.0);
        const AmbiguityFamily family = make_family({low, high});
        AdaptedProcess xi = random_adapted(model, rng, 0.3);
        for (int i = 0; i < 3; ++i)
            for (std::size_t n = 0; n < model.node_count(i); ++n) xi.at(i, n) -= 25.0;
        const auto crit = check_rbsde_optimality_criteria(model, family, xi, NodeRef{0, 0},
                                                          constant_control(model, 1), eps_grid);
        CHECK(!crit.criterion_holds);
        CHECK(!crit.ground_truth_optimal);
        CHECK(crit.agree);
    }

    SUBCASE("singleton families are trivially optimal") {
        const AmbiguityFamily family = crossing_family(model, marks, rng, 1);
        const AdaptedProcess xi = random_adapted(model, rng, 1.0);
        const auto crit = check_rbsde_optimality_criteria(model, family, xi, NodeRef{0, 0},
                                                          constant_control(model, 0), eps_grid);
        CHECK(crit.criterion_holds);
        CHECK(crit.ground_truth_optimal);
        CHECK(crit.agree);
    }
}

TEST_CASE("grid refinement of a continuum family converges at the bound order") {
    // Family f^a = base + c |a - sigma(z)| over a in [0, 1]; the continuum inf
    // is the base driver, and a grid of mesh eta misses it by at most c eta / 2.
    const MarkSet marks({1.0}, {0.3});
    const LatticeModel model = build_default_lattice(1.0, 16, marks, NodeIndexing::Markov);
    const double a0 = 0.3, b0 = 0.2, g0 = 0.4, c = 0.8;
    auto sigma = [](double z) { return 1.0 / (1.0 + std::exp(-z)); };
    auto base = [a0, b0, g0](double t, double y, double z, std::span<const double> k) {
        return a0 * y + b0 * z + g0 * k[0] * 0.3 + 0.1 * t;
    };
    const double c_base = std::max({a0, b0, g0 * std::sqrt(0.3)});
    const double c_fam = std::max(c_base, b0 + c / 4.0);
    const DriverSpec cont(base, c_base, DriverFlags{true, true, true, true});

    AdaptedProcess xi = make_adapted(model);
    for (int i = 0; i <= 16; ++i)
        for (std::size_t n = 0; n < model.node_count(i); ++n)
            xi.at(i, n) = std::sin(model.brownian_position(i, n)) - 0.3 +
                          0.3 * std::tanh(0.5 * model.jump_counts(i, n)[0]);
    const auto y_cont = solve_rbsde(model, cont, xi);

    const double beta = 3.0 * c_fam * c_fam + 2.0 * c_fam;
    const double bound_constant = c * std::sqrt(std::exp(beta)) / (2.0 * c_fam);
    std::vector<double> gaps;
    for (int m : {2, 8, 32}) {
        std::vector<DriverSpec> members;
        for (int i = 0; i <= m; ++i) {
            const double a = double(i) / m;
            members.push_back(DriverSpec(
                [base, sigma, a, c](double t, double y, double z, std::span<const double> k) {
                    return base(t, y, z, k) + c * std::abs(a - sigma(z));
                },
                c_fam, DriverFlags{true, true, true, true}));
        }
        const InfDriver inf = inf_driver(make_family(std::move(members)));
        const auto y_grid = solve_rbsde(model, inf.driver, xi);
        const double gap = std::abs(y_grid.y.at(0, 0) - y_cont.y.at(0, 0));
        gaps.push_back(gap);
        // K eta bound with K from the gap estimate at eta = 1/C^2.
        CHECK(gap <= bound_constant / m);
        // The grid value can only sit above the continuum value.
        CHECK(y_grid.y.at(0, 0) >= y_cont.y.at(0, 0) - 1e-12);
    }
    // Order-one decay across two four-fold refinements, with slack.
    CHECK(gaps[2] <= gaps[0] / 8.0);
    CHECK(gaps[1] <= gaps[0]);
    CHECK(gaps[2] <= gaps[1]);
}
