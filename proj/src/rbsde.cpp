#include "bsdelab/rbsde.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace bsdelab {

namespace {

RbsdeSolution reflect_solve(const LatticeModel& model, const NodeDriver& driver, double lipschitz,
                            const AdaptedProcess& obstacle) {
    const int N = model.steps();
    if (static_cast<int>(obstacle.layers.size()) != N + 1)
        throw std::invalid_argument("solve_rbsde: obstacle must cover layers 0..N");
    if (!obstacle.all_finite()) throw std::invalid_argument("solve_rbsde: non-finite obstacle");

    RbsdeSolution out;
    out.push = make_predictable(model);
    BackwardOptions options;
    options.lipschitz = lipschitz;
    options.obstacle = &obstacle;
    options.push_out = &out.push;
    BsdeSolution base =
        backward_solve(model, driver, obstacle.layers[static_cast<std::size_t>(N)], options);
    out.y = std::move(base.y);
    out.z = std::move(base.z);
    out.k = std::move(base.k);
    out.picard_iterations = std::move(base.picard_iterations);

    out.push_cumulative = make_adapted(model);
    for (int i = 0; i < N; ++i)
        for (std::size_t n = 0; n < model.node_count(i); ++n) {
            const double a_next = out.push_cumulative.at(i, n) + out.push.at(i, n);
            for (int b = 0; b < model.branch_count(); ++b) {
                // Markov children can have several parents; pathwise sums of the
                // push only make sense on the tree, where each child is unique.
                out.push_cumulative.at(i + 1, model.child(i, n, b)) = a_next;
            }
        }
    return out;
}

} // namespace

RbsdeSolution solve_rbsde(const LatticeModel& model, const DriverSpec& driver,
                          const AdaptedProcess& obstacle) {
    return reflect_solve(model, as_node_driver(driver), driver.lipschitz(), obstacle);
}

RbsdeSolution solve_rbsde_node_driver(const LatticeModel& model, const NodeDriver& driver,
                                      double lipschitz, const AdaptedProcess& obstacle) {
    return reflect_solve(model, driver, lipschitz, obstacle);
}

RbsdeSolution snell_envelope(const LatticeModel& model, const PredictableProcess& running_reward,
                             const AdaptedProcess& obstacle) {
    const int N = model.steps();
    if (static_cast<int>(running_reward.layers.size()) != N)
        throw std::invalid_argument("snell_envelope: reward must cover layers 0..N-1");
    NodeDriver driver = [&running_reward](int layer, std::size_t node, double, double, double,
                                          std::span<const double>) {
        return running_reward.at(layer, node);
    };
    RbsdeSolution sol = reflect_solve(model, driver, 0.0, obstacle);

    // Cross-check against the classical recursion Y_i = max(xi_i, E_i[Y_{i+1}] + f_i dt).
    const double dt = model.dt();
    std::vector<double> expected = obstacle.layers[static_cast<std::size_t>(N)];
    std::vector<double> child(static_cast<std::size_t>(model.branch_count()));
    for (int i = N - 1; i >= 0; --i) {
        std::vector<double> current(model.node_count(i));
        for (std::size_t n = 0; n < model.node_count(i); ++n) {
            for (int b = 0; b < model.branch_count(); ++b)
                child[static_cast<std::size_t>(b)] = expected[model.child(i, n, b)];
            current[n] = std::max(obstacle.at(i, n),
                                  model.conditional_expectation(child) + running_reward.at(i, n) * dt);
            if (std::abs(current[n] - sol.y.at(i, n)) > 1e-12)
                throw std::runtime_error("snell_envelope: reflected solve disagrees with the "
                                         "classical recursion");
        }
        expected = std::move(current);
    }
    return sol;
}

RbsdeSolution snell_envelope(const LatticeModel& model, const DriverSpec& reward_driver,
                             const AdaptedProcess& obstacle) {
    const auto& flags = reward_driver.flags();
    if (flags.depends_on_y || flags.depends_on_z || flags.depends_on_k)
        throw std::invalid_argument("snell_envelope: driver must not depend on (y, z, k)");
    PredictableProcess reward = make_predictable(model);
    const std::vector<double> no_jumps(static_cast<std::size_t>(model.mark_count()), 0.0);
    for (int i = 0; i < model.steps(); ++i) {
        const double value = reward_driver(model.grid().time(i), 0.0, 0.0, no_jumps);
        std::fill(reward.layers[static_cast<std::size_t>(i)].begin(),
                  reward.layers[static_cast<std::size_t>(i)].end(), value);
    }
    return snell_envelope(model, reward, obstacle);
}

SkorokhodReport skorokhod_report(const LatticeModel& model, const RbsdeSolution& sol,
                                 const AdaptedProcess& obstacle) {
    SkorokhodReport report;
    report.min_increment = 0.0;
    report.min_constraint_slack = 0.0;
    for (int i = 0; i <= model.steps(); ++i)
        for (std::size_t n = 0; n < model.node_count(i); ++n) {
            const double slack = sol.y.at(i, n) - obstacle.at(i, n);
            report.min_constraint_slack = std::min(report.min_constraint_slack, slack);
            if (i < model.steps()) {
                const double da = sol.push.at(i, n);
                report.min_increment = std::min(report.min_increment, da);
                report.max_flat_off_violation =
                    std::max(report.max_flat_off_violation, std::abs(slack * da));
            }
        }
    report.pass = report.max_flat_off_violation <= 1e-12 && report.min_increment >= -1e-12 &&
                  report.min_constraint_slack >= -1e-12;
    return report;
}

} // namespace bsdelab
