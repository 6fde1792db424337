#include "bsdelab/robust.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>

namespace bsdelab {

namespace {

std::size_t ipow(std::size_t base, int exp) {
    std::size_t r = 1;
    for (int i = 0; i < exp; ++i) r *= base;
    return r;
}

void require_family(const AmbiguityFamily& family, const char* what) {
    if (family.members.empty())
        throw std::invalid_argument(std::string(what) + ": empty driver family");
}

// Forward marking of a rule on the subtree of S: 1 from the first hit on.
std::vector<std::vector<std::uint8_t>> mark_stopped(const LatticeModel& model,
                                                    const StoppingRule& rule, NodeRef s) {
    const int depth = model.steps() - s.layer;
    const int B = model.branch_count();
    std::vector<std::vector<std::uint8_t>> stopped(static_cast<std::size_t>(depth) + 1);
    std::size_t base = s.index;
    for (int d = 0; d <= depth; ++d) {
        const int layer = s.layer + d;
        const std::size_t width = ipow(static_cast<std::size_t>(B), d);
        stopped[static_cast<std::size_t>(d)].assign(width, 0);
        for (std::size_t m = 0; m < width; ++m) {
            const bool parent_stopped =
                d > 0 && stopped[static_cast<std::size_t>(d) - 1][m / static_cast<std::size_t>(B)] != 0;
            if (parent_stopped || rule.stops_at(layer, base + m, model.steps()))
                stopped[static_cast<std::size_t>(d)][m] = 1;
        }
        if (d < depth) base *= static_cast<std::size_t>(B);
    }
    return stopped;
}

// Subtree-local control table, depth-major, read by node drivers through the
// global node index.
struct SubtreeControls {
    NodeRef root;
    int branches = 2;
    std::vector<std::vector<int>> member; // [depth][local], depths 0..D-1

    int lookup(int layer, std::size_t global) const {
        const int d = layer - root.layer;
        const std::size_t base = root.index * ipow(static_cast<std::size_t>(branches), d);
        return member[static_cast<std::size_t>(d)][global - base];
    }
};

SubtreeControls make_subtree_controls(const LatticeModel& model, NodeRef s) {
    SubtreeControls ctrl;
    ctrl.root = s;
    ctrl.branches = model.branch_count();
    const int depth = model.steps() - s.layer;
    ctrl.member.resize(static_cast<std::size_t>(depth));
    for (int d = 0; d < depth; ++d)
        ctrl.member[static_cast<std::size_t>(d)].assign(
            ipow(static_cast<std::size_t>(model.branch_count()), d), 0);
    return ctrl;
}

NodeDriver subtree_control_driver(const AmbiguityFamily& family, const SubtreeControls& ctrl) {
    return [&family, &ctrl](int layer, std::size_t node, double t, double y, double z,
                            std::span<const double> k) {
        return family.members[static_cast<std::size_t>(ctrl.lookup(layer, node))](t, y, z, k);
    };
}

// Reflected value at S computed on the subtree only.
double subtree_rbsde_value(const LatticeModel& model, const NodeDriver& driver, double lipschitz,
                           const AdaptedProcess& obstacle, NodeRef s) {
    const int N = model.steps();
    const int depth = N - s.layer;
    const int B = model.branch_count();
    const double dt = model.dt();
    if (lipschitz * dt >= 1.0)
        throw std::invalid_argument("subtree_rbsde_value: C * dt >= 1; refine the grid");
    std::vector<double> values(ipow(static_cast<std::size_t>(B), depth));
    {
        const std::size_t base = s.index * values.size();
        for (std::size_t m = 0; m < values.size(); ++m) values[m] = obstacle.at(N, base + m);
    }
    std::vector<double> child(static_cast<std::size_t>(B));
    for (int d = depth - 1; d >= 0; --d) {
        const int layer = s.layer + d;
        const double t = model.grid().time(layer);
        const std::size_t width = ipow(static_cast<std::size_t>(B), d);
        const std::size_t base = s.index * width;
        std::vector<double> current(width);
        for (std::size_t m = 0; m < width; ++m) {
            for (int b = 0; b < B; ++b)
                child[static_cast<std::size_t>(b)] =
                    values[m * static_cast<std::size_t>(B) + static_cast<std::size_t>(b)];
            const MartingaleCoefficients mc = model.martingale_coefficients(child);
            double prev = mc.mean;
            for (int it = 0; it < 256; ++it) {
                const double next = mc.mean + driver(layer, base + m, t, prev, mc.z, mc.k) * dt;
                const double delta = std::abs(next - prev);
                prev = next;
                if (delta <= 1e-13) break;
                if (it == 255)
                    throw std::runtime_error("subtree_rbsde_value: Picard did not converge");
            }
            current[m] = std::max(obstacle.at(layer, base + m), prev);
        }
        values = std::move(current);
    }
    return values[0];
}

// Runs visit over every base-m assignment of the listed slots; returns false
// when the cap would be exceeded (and then visits nothing).
bool for_each_assignment(std::vector<int*> slots, int members, std::uint64_t cap,
                         const std::function<void()>& visit) {
    long double total = 1.0L;
    for (std::size_t i = 0; i < slots.size(); ++i) {
        total *= members;
        if (total > static_cast<long double>(cap)) return false;
    }
    for (int* slot : slots) *slot = 0;
    while (true) {
        visit();
        std::size_t pos = 0;
        while (pos < slots.size()) {
            if (++(*slots[pos]) < members) break;
            *slots[pos] = 0;
            ++pos;
        }
        if (pos == slots.size()) return true;
    }
}

} // namespace

ControlProcess constant_control(const LatticeModel& model, int member) {
    ControlProcess ctrl;
    ctrl.alpha.resize(static_cast<std::size_t>(model.steps()));
    for (int i = 0; i < model.steps(); ++i)
        ctrl.alpha[static_cast<std::size_t>(i)].assign(model.node_count(i), member);
    return ctrl;
}

NodeDriver family_control_driver(const AmbiguityFamily& family, const ControlProcess& control) {
    return [&family, &control](int layer, std::size_t node, double t, double y, double z,
                               std::span<const double> k) {
        return family.members.at(static_cast<std::size_t>(control.at(layer, node)))(t, y, z, k);
    };
}

ValueWithMember upper_value(const LatticeModel& model, const AmbiguityFamily& family,
                            const AdaptedProcess& obstacle, NodeRef s) {
    require_family(family, "upper_value");
    ValueWithMember best;
    best.value = std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < family.members.size(); ++a) {
        const auto sol = solve_rbsde(model, family.members[a], obstacle);
        const double value = sol.y.at(s.layer, s.index);
        if (value < best.value) {
            best.value = value;
            best.member = static_cast<int>(a);
        }
    }
    return best;
}

std::optional<double> upper_value_exact(const LatticeModel& model, const AmbiguityFamily& family,
                                        const AdaptedProcess& obstacle, NodeRef s,
                                        const GameCaps& caps) {
    require_family(family, "upper_value_exact");
    if (model.indexing() != NodeIndexing::Tree)
        throw std::invalid_argument("upper_value_exact: needs tree indexing");
    SubtreeControls ctrl = make_subtree_controls(model, s);
    std::vector<int*> slots;
    for (auto& level : ctrl.member)
        for (int& slot : level) slots.push_back(&slot);
    const NodeDriver driver = subtree_control_driver(family, ctrl);
    double best = std::numeric_limits<double>::infinity();
    const bool complete = for_each_assignment(
        std::move(slots), static_cast<int>(family.members.size()), caps.max_control_maps, [&]() {
            best = std::min(best,
                            subtree_rbsde_value(model, driver, family.lipschitz, obstacle, s));
        });
    if (!complete) return std::nullopt;
    return best;
}

LowerValueResult lower_value(const LatticeModel& model, const AmbiguityFamily& family,
                             const AdaptedProcess& obstacle, NodeRef s, const GameCaps& caps,
                             ControlMode mode) {
    require_family(family, "lower_value");
    LowerValueResult result;
    result.value = -std::numeric_limits<double>::infinity();
    const int members = static_cast<int>(family.members.size());

    SubtreeControls ctrl = make_subtree_controls(model, s);
    const NodeDriver map_driver = subtree_control_driver(family, ctrl);

    for_each_stopping_rule(model, s, caps.rules, [&](const StoppingRule& rule) {
        result.rules_enumerated += 1;
        double inner = std::numeric_limits<double>::infinity();
        bool exact = false;
        if (mode == ControlMode::FullPredictable) {
            const auto stopped = mark_stopped(model, rule, s);
            std::vector<int*> slots;
            for (int d = 0; d + 1 < static_cast<int>(stopped.size()); ++d)
                for (std::size_t m = 0; m < stopped[static_cast<std::size_t>(d)].size(); ++m)
                    if (stopped[static_cast<std::size_t>(d)][m] == 0)
                        slots.push_back(&ctrl.member[static_cast<std::size_t>(d)][m]);
            exact = for_each_assignment(std::move(slots), members, caps.max_control_maps, [&]() {
                inner = std::min(
                    inner,
                    solve_stopped(model, map_driver, family.lipschitz, obstacle, rule, s).value());
            });
        }
        if (!exact) {
            // Constant-per-step fallback: one member per layer of the subtree.
            result.sampled = true;
            std::vector<int> layer_member(ctrl.member.size(), 0);
            std::vector<int*> slots;
            for (int& m : layer_member) slots.push_back(&m);
            auto apply = [&]() {
                for (std::size_t d = 0; d < ctrl.member.size(); ++d)
                    std::fill(ctrl.member[d].begin(), ctrl.member[d].end(), layer_member[d]);
                inner = std::min(
                    inner,
                    solve_stopped(model, map_driver, family.lipschitz, obstacle, rule, s).value());
            };
            if (!for_each_assignment(std::move(slots), members, caps.max_control_maps, apply))
                for (int a = 0; a < members; ++a) {
                    const ControlProcess constant = constant_control(model, a);
                    inner = std::min(inner,
                                     solve_stopped(model, family_control_driver(family, constant),
                                                   family.lipschitz, obstacle, rule, s)
                                         .value());
                }
        }
        result.value = std::max(result.value, inner);
    });
    return result;
}

GameSolution solve_game(const LatticeModel& model, const AmbiguityFamily& family,
                        const AdaptedProcess& obstacle) {
    require_family(family, "solve_game");
    GameSolution game;
    game.inf = inf_driver(family);
    game.y = solve_rbsde(model, game.inf.driver, obstacle);

    const int N = model.steps();
    const int J = model.mark_count();
    game.alpha_bar.alpha.resize(static_cast<std::size_t>(N));
    std::vector<double> k_row(static_cast<std::size_t>(J));
    for (int i = 0; i < N; ++i) {
        const double t = model.grid().time(i);
        game.alpha_bar.alpha[static_cast<std::size_t>(i)].resize(model.node_count(i));
        for (std::size_t n = 0; n < model.node_count(i); ++n) {
            for (int j = 0; j < J; ++j)
                k_row[static_cast<std::size_t>(j)] = game.y.k_at(model, i, n, j);
            // The solver evaluates the generator at the pre-reflection value.
            const double y_tilde = game.y.y.at(i, n) - game.y.push.at(i, n);
            game.alpha_bar.alpha[static_cast<std::size_t>(i)][n] =
                game.inf.argmin(t, y_tilde, game.y.z.at(i, n), k_row);
        }
    }
    game.y_alpha_bar = solve_rbsde_node_driver(
        model, family_control_driver(family, game.alpha_bar), family.lipschitz, obstacle);
    game.principle_residual = 0.0;
    for (int i = 0; i <= N; ++i)
        for (std::size_t n = 0; n < model.node_count(i); ++n)
            game.principle_residual =
                std::max(game.principle_residual,
                         std::abs(game.y.y.at(i, n) - game.y_alpha_bar.y.at(i, n)));
    return game;
}

SaddleCheck check_saddle(const LatticeModel& model, const AmbiguityFamily& family,
                         const AdaptedProcess& obstacle, NodeRef s, const StoppingRule& tau_hat,
                         const ControlProcess& alpha_hat, const GameCaps& caps) {
    require_family(family, "check_saddle");
    SaddleCheck check;
    const NodeDriver hat_driver = family_control_driver(family, alpha_hat);
    const double center =
        solve_stopped(model, hat_driver, family.lipschitz, obstacle, tau_hat, s).value();

    // Left inequality: no stopping rule improves on tau_hat under alpha_hat.
    check.left_violation = -std::numeric_limits<double>::infinity();
    for_each_stopping_rule(model, s, caps.rules, [&](const StoppingRule& rule) {
        check.rules_enumerated += 1;
        const double value =
            solve_stopped(model, hat_driver, family.lipschitz, obstacle, rule, s).value();
        check.left_violation = std::max(check.left_violation, value - center);
    });

    // Right inequality: no control improves on alpha_hat at tau_hat.
    check.right_violation = -std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < family.members.size(); ++a) {
        const ControlProcess constant = constant_control(model, static_cast<int>(a));
        const double value = solve_stopped(model, family_control_driver(family, constant),
                                           family.lipschitz, obstacle, tau_hat, s)
                                 .value();
        check.right_violation = std::max(check.right_violation, center - value);
    }
    SubtreeControls ctrl = make_subtree_controls(model, s);
    const NodeDriver map_driver = subtree_control_driver(family, ctrl);
    const auto stopped = mark_stopped(model, tau_hat, s);
    std::vector<int*> slots;
    for (int d = 0; d + 1 < static_cast<int>(stopped.size()); ++d)
        for (std::size_t m = 0; m < stopped[static_cast<std::size_t>(d)].size(); ++m)
            if (stopped[static_cast<std::size_t>(d)][m] == 0)
                slots.push_back(&ctrl.member[static_cast<std::size_t>(d)][m]);
    const bool complete = for_each_assignment(
        std::move(slots), static_cast<int>(family.members.size()), caps.max_control_maps, [&]() {
            check.maps_enumerated += 1;
            const double value =
                solve_stopped(model, map_driver, family.lipschitz, obstacle, tau_hat, s).value();
            check.right_violation = std::max(check.right_violation, center - value);
        });
    check.sampled = !complete;
    check.certified = check.left_violation <= 1e-10 && check.right_violation <= 1e-10;
    return check;
}

SaddleResult find_saddle(const LatticeModel& model, const AmbiguityFamily& family,
                         const AdaptedProcess& obstacle, NodeRef s, const GameCaps& caps) {
    const GameSolution game = solve_game(model, family, obstacle);
    const StoppingRule tau_star = optimal_time(model, game.y, obstacle, s);
    SaddleResult result;
    result.check = check_saddle(model, family, obstacle, s, tau_star, game.alpha_bar, caps);
    if (result.check.certified && !result.check.sampled)
        result.saddle = std::make_pair(tau_star, game.alpha_bar);
    return result;
}

OptimalityCriteria check_rbsde_optimality_criteria(const LatticeModel& model,
                                                   const AmbiguityFamily& family,
                                                   const AdaptedProcess& obstacle, NodeRef s,
                                                   const ControlProcess& control,
                                                   std::span<const double> eps_grid) {
    require_family(family, "check_rbsde_optimality_criteria");
    const GameSolution game = solve_game(model, family, obstacle);
    const RbsdeSolution alpha_sol = solve_rbsde_node_driver(
        model, family_control_driver(family, control), family.lipschitz, obstacle);

    const int J = model.mark_count();
    std::vector<double> k_row(static_cast<std::size_t>(J));

    // Evaluates the two displayed conditions for a given hitting region.
    auto evaluate_conditions = [&](const StoppingRule& region, double slack, double* value_gap,
                                   double* driver_gap) {
        const auto stopped = mark_stopped(model, region, s);
        const int depth = model.steps() - s.layer;
        std::size_t base = s.index;
        double vg = 0.0, dg = 0.0;
        for (int d = 0; d <= depth; ++d) {
            const int layer = s.layer + d;
            const double t = model.grid().time(layer);
            for (std::size_t m = 0; m < stopped[static_cast<std::size_t>(d)].size(); ++m) {
                const bool visited =
                    d == 0 || stopped[static_cast<std::size_t>(d) - 1]
                                     [m / static_cast<std::size_t>(model.branch_count())] == 0;
                if (!visited) continue;
                const std::size_t global = base + m;
                if (stopped[static_cast<std::size_t>(d)][m] != 0) {
                    // First hit: Y^{alpha} within the slack of the obstacle.
                    vg = std::max(vg, alpha_sol.y.at(layer, global) -
                                          (obstacle.at(layer, global) + slack));
                } else {
                    for (int j = 0; j < J; ++j)
                        k_row[static_cast<std::size_t>(j)] = game.y.k_at(model, layer, global, j);
                    const double y_tilde =
                        game.y.y.at(layer, global) - game.y.push.at(layer, global);
                    const double z = game.y.z.at(layer, global);
                    const double f_inf = game.inf.driver(t, y_tilde, z, k_row);
                    const double f_alpha =
                        family.members[static_cast<std::size_t>(control.at(layer, global))](
                            t, y_tilde, z, k_row);
                    dg = std::max(dg, std::abs(f_inf - f_alpha));
                }
            }
            if (d < depth) base *= static_cast<std::size_t>(model.branch_count());
        }
        *value_gap = vg;
        *driver_gap = dg;
    };

    OptimalityCriteria out;
    const StoppingRule tau_star = optimal_time(model, game.y, obstacle, s);
    evaluate_conditions(tau_star, 0.0, &out.max_value_gap, &out.max_driver_gap);
    out.value_match = out.max_value_gap <= 1e-10;
    out.driver_match = out.max_driver_gap <= 1e-10;
    out.criterion_holds = out.value_match && out.driver_match;

    out.eps_criterion_holds = true;
    for (double eps : eps_grid) {
        const StoppingRule tau_eps = eps_optimal_time(model, game.y, obstacle, s, eps);
        double vg = 0.0, dg = 0.0;
        evaluate_conditions(tau_eps, eps, &vg, &dg);
        if (vg > 1e-10 || dg > 1e-10) out.eps_criterion_holds = false;
    }

    out.ground_truth_optimal =
        std::abs(game.y.y.at(s.layer, s.index) - alpha_sol.y.at(s.layer, s.index)) <= 1e-10;
    out.agree = out.criterion_holds == out.ground_truth_optimal;
    return out;
}

} // namespace bsdelab
