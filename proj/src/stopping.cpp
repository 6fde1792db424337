#include "bsdelab/stopping.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace bsdelab {

namespace {

std::size_t ipow(std::size_t base, int exp) {
    std::size_t r = 1;
    for (int i = 0; i < exp; ++i) r *= base;
    return r;
}

void require_tree(const LatticeModel& model, const char* what) {
    if (model.indexing() != NodeIndexing::Tree)
        throw std::invalid_argument(std::string(what) + ": needs tree indexing (exact filtration)");
}

void require_node(const LatticeModel& model, NodeRef s, const char* what) {
    if (s.layer < 0 || s.layer > model.steps() || s.index >= model.node_count(s.layer))
        throw std::invalid_argument(std::string(what) + ": query node out of range");
}

std::size_t subtree_node_count(const LatticeModel& model, NodeRef s) {
    std::size_t total = 0, width = 1;
    for (int d = 0; d <= model.steps() - s.layer; ++d) {
        total += width;
        width *= static_cast<std::size_t>(model.branch_count());
    }
    return total;
}

} // namespace

StoppingRule make_stop_region(const LatticeModel& model) {
    StoppingRule rule;
    rule.stop.resize(static_cast<std::size_t>(model.steps()) + 1);
    for (int i = 0; i <= model.steps(); ++i)
        rule.stop[static_cast<std::size_t>(i)].assign(model.node_count(i),
                                                      i == model.steps() ? 1 : 0);
    return rule;
}

StoppingRule stop_immediately(const LatticeModel& model) {
    StoppingRule rule = make_stop_region(model);
    for (auto& layer : rule.stop) std::fill(layer.begin(), layer.end(), std::uint8_t{1});
    return rule;
}

std::vector<int> effective_stop_layers(const LatticeModel& model, const StoppingRule& rule,
                                       NodeRef s) {
    require_tree(model, "effective_stop_layers");
    require_node(model, s, "effective_stop_layers");
    const int depth = model.steps() - s.layer;
    const std::size_t B = static_cast<std::size_t>(model.branch_count());
    std::vector<int> hit{rule.stops_at(s.layer, s.index, model.steps()) ? s.layer : -1};
    for (int d = 1; d <= depth; ++d) {
        const int layer = s.layer + d;
        std::vector<int> next(hit.size() * B);
        const std::size_t base = s.index * ipow(B, d);
        for (std::size_t m = 0; m < next.size(); ++m) {
            const int inherited = hit[m / B];
            if (inherited >= 0)
                next[m] = inherited;
            else
                next[m] = rule.stops_at(layer, base + m, model.steps()) ? layer : -1;
        }
        hit = std::move(next);
    }
    return hit;
}

StoppedSolution solve_stopped(const LatticeModel& model, const NodeDriver& driver,
                              double lipschitz, const AdaptedProcess& obstacle,
                              const StoppingRule& rule, NodeRef s) {
    require_tree(model, "solve_stopped");
    require_node(model, s, "solve_stopped");
    const int N = model.steps();
    const int depth = N - s.layer;
    const int B = model.branch_count();
    const double dt = model.dt();
    if (lipschitz * dt >= 1.0)
        throw std::invalid_argument("solve_stopped: C * dt >= 1; refine the grid");

    StoppedSolution out;
    out.root = s;
    out.x.resize(static_cast<std::size_t>(depth) + 1);
    out.stopped.resize(static_cast<std::size_t>(depth) + 1);

    // Forward: first hit and the frozen obstacle value from there on.
    std::vector<std::vector<double>> frozen(static_cast<std::size_t>(depth) + 1);
    std::size_t base = s.index;
    for (int d = 0; d <= depth; ++d) {
        const int layer = s.layer + d;
        const std::size_t width = ipow(static_cast<std::size_t>(B), d);
        out.stopped[static_cast<std::size_t>(d)].assign(width, 0);
        frozen[static_cast<std::size_t>(d)].assign(width, 0.0);
        for (std::size_t m = 0; m < width; ++m) {
            const std::size_t global = base + m;
            const bool parent_stopped =
                d > 0 && out.stopped[static_cast<std::size_t>(d) - 1][m / static_cast<std::size_t>(B)] != 0;
            if (parent_stopped) {
                out.stopped[static_cast<std::size_t>(d)][m] = 1;
                frozen[static_cast<std::size_t>(d)][m] =
                    frozen[static_cast<std::size_t>(d) - 1][m / static_cast<std::size_t>(B)];
            } else if (rule.stops_at(layer, global, N)) {
                out.stopped[static_cast<std::size_t>(d)][m] = 1;
                frozen[static_cast<std::size_t>(d)][m] = obstacle.at(layer, global);
            }
        }
        if (d < depth) base *= static_cast<std::size_t>(B);
    }

    // Backward: frozen value where stopped, implicit driver step elsewhere.
    out.x[static_cast<std::size_t>(depth)] = frozen[static_cast<std::size_t>(depth)];
    std::vector<double> child(static_cast<std::size_t>(B));
    for (int d = depth - 1; d >= 0; --d) {
        const int layer = s.layer + d;
        const double t = model.grid().time(layer);
        const std::size_t width = ipow(static_cast<std::size_t>(B), d);
        out.x[static_cast<std::size_t>(d)].assign(width, 0.0);
        const std::size_t layer_base = s.index * width;
        for (std::size_t m = 0; m < width; ++m) {
            if (out.stopped[static_cast<std::size_t>(d)][m] != 0) {
                out.x[static_cast<std::size_t>(d)][m] = frozen[static_cast<std::size_t>(d)][m];
                continue;
            }
            for (int b = 0; b < B; ++b)
                child[static_cast<std::size_t>(b)] =
                    out.x[static_cast<std::size_t>(d) + 1][m * static_cast<std::size_t>(B) +
                                                           static_cast<std::size_t>(b)];
            const MartingaleCoefficients mc = model.martingale_coefficients(child);
            const std::size_t global = layer_base + m;
            double prev = mc.mean;
            for (int it = 0; it < 256; ++it) {
                const double next = mc.mean + driver(layer, global, t, prev, mc.z, mc.k) * dt;
                const double delta = std::abs(next - prev);
                prev = next;
                if (delta <= 1e-13) break;
                if (it == 255)
                    throw std::runtime_error("solve_stopped: Picard iteration did not converge");
            }
            out.x[static_cast<std::size_t>(d)][m] = prev;
        }
    }
    return out;
}

double evaluate_stopped(const LatticeModel& model, const DriverSpec& driver,
                        const AdaptedProcess& obstacle, const StoppingRule& rule, NodeRef s) {
    return solve_stopped(model, as_node_driver(driver), driver.lipschitz(), obstacle, rule, s)
        .value();
}

std::uint64_t count_stopping_rules(const LatticeModel& model, NodeRef s, std::uint64_t cap) {
    require_tree(model, "count_stopping_rules");
    const int depth = model.steps() - s.layer;
    const int B = model.branch_count();
    // r(depth) = 1, r(d) = 1 + r(d+1)^B, clamped at cap + 1.
    std::uint64_t r = 1;
    const long double limit = static_cast<long double>(cap) + 1.0L;
    for (int d = depth - 1; d >= 0; --d) {
        long double pow = 1.0L;
        for (int b = 0; b < B; ++b) {
            pow *= static_cast<long double>(r);
            if (pow > limit) return cap + 1;
        }
        const long double next = 1.0L + pow;
        if (next > limit) return cap + 1;
        r = static_cast<std::uint64_t>(next);
    }
    return r;
}

namespace {

struct PreorderNode {
    int depth;
    std::size_t local;
    std::size_t skip; // preorder index of the next node outside this subtree
};

std::vector<PreorderNode> build_preorder(int depth, int branches) {
    std::vector<PreorderNode> order;
    // Recursive preorder with subtree spans.
    std::function<void(int, std::size_t)> rec = [&](int d, std::size_t m) {
        const std::size_t self = order.size();
        order.push_back({d, m, 0});
        if (d < depth)
            for (int b = 0; b < branches; ++b)
                rec(d + 1, m * static_cast<std::size_t>(branches) + static_cast<std::size_t>(b));
        order[self].skip = order.size();
    };
    rec(0, 0);
    return order;
}

} // namespace

void for_each_stopping_rule(const LatticeModel& model, NodeRef s, const EnumerationCaps& caps,
                            const std::function<void(const StoppingRule&)>& visit) {
    require_tree(model, "for_each_stopping_rule");
    require_node(model, s, "for_each_stopping_rule");
    if (subtree_node_count(model, s) > caps.max_subtree_nodes)
        throw std::invalid_argument("for_each_stopping_rule: subtree exceeds the node cap");
    if (count_stopping_rules(model, s, caps.max_rules) > caps.max_rules)
        throw std::invalid_argument("for_each_stopping_rule: rule count exceeds the cap");

    const int depth = model.steps() - s.layer;
    const int B = model.branch_count();
    const auto order = build_preorder(depth, B);

    StoppingRule rule = make_stop_region(model);
    std::vector<std::size_t> base(static_cast<std::size_t>(depth) + 1);
    base[0] = s.index;
    for (int d = 1; d <= depth; ++d) base[static_cast<std::size_t>(d)] = base[static_cast<std::size_t>(d) - 1] * static_cast<std::size_t>(B);

    std::function<void(std::size_t)> rec = [&](std::size_t idx) {
        if (idx == order.size()) {
            visit(rule);
            return;
        }
        const PreorderNode& node = order[idx];
        const int layer = s.layer + node.depth;
        if (node.depth == depth) {
            rec(idx + 1); // horizon nodes always stop; no choice
            return;
        }
        auto& flag = rule.stop[static_cast<std::size_t>(layer)]
                              [base[static_cast<std::size_t>(node.depth)] + node.local];
        flag = 1;
        rec(node.skip);
        flag = 0;
        rec(idx + 1);
    };
    rec(0);
}

BruteForceResult brute_force_value(const LatticeModel& model, const DriverSpec& driver,
                                   const AdaptedProcess& obstacle, NodeRef s,
                                   const EnumerationCaps& caps) {
    BruteForceResult result;
    result.value = -std::numeric_limits<double>::infinity();
    const NodeDriver nd = as_node_driver(driver);
    for_each_stopping_rule(model, s, caps, [&](const StoppingRule& rule) {
        result.rules_enumerated += 1;
        const double value = solve_stopped(model, nd, driver.lipschitz(), obstacle, rule, s).value();
        if (value > result.value) {
            result.value = value;
            result.best = rule;
        }
    });
    return result;
}

namespace {

StoppingRule hitting_region(const LatticeModel& model, const AdaptedProcess& y,
                            const AdaptedProcess& obstacle, NodeRef s,
                            const std::function<bool(double, double)>& inside) {
    StoppingRule rule = make_stop_region(model);
    for (int i = s.layer; i <= model.steps(); ++i)
        for (std::size_t n = 0; n < model.node_count(i); ++n)
            if (inside(y.at(i, n), obstacle.at(i, n)))
                rule.stop[static_cast<std::size_t>(i)][n] = 1;
    return rule;
}

} // namespace

StoppingRule eps_optimal_time(const LatticeModel& model, const RbsdeSolution& sol,
                              const AdaptedProcess& obstacle, NodeRef s, double eps) {
    if (!(eps > 0.0)) throw std::invalid_argument("eps_optimal_time: eps must be > 0");
    require_node(model, s, "eps_optimal_time");
    return hitting_region(model, sol.y, obstacle, s,
                          [eps](double y, double xi) { return y <= xi + eps; });
}

StoppingRule optimal_time(const LatticeModel& model, const RbsdeSolution& sol,
                          const AdaptedProcess& obstacle, NodeRef s) {
    require_node(model, s, "optimal_time");
    return hitting_region(model, sol.y, obstacle, s,
                          [](double y, double xi) { return std::abs(y - xi) <= 1e-12; });
}

OptimalityVerdict check_optimality_criterion(const LatticeModel& model, const DriverSpec& driver,
                                             const AdaptedProcess& obstacle,
                                             const RbsdeSolution& sol, const StoppingRule& rule,
                                             NodeRef s) {
    const StoppedSolution x =
        solve_stopped(model, as_node_driver(driver), driver.lipschitz(), obstacle, rule, s);
    const int depth = model.steps() - s.layer;
    const int B = model.branch_count();
    OptimalityVerdict verdict;
    std::size_t base = s.index;
    for (int d = 0; d <= depth; ++d) {
        for (std::size_t m = 0; m < x.x[static_cast<std::size_t>(d)].size(); ++m) {
            const bool visited =
                d == 0 ||
                x.stopped[static_cast<std::size_t>(d) - 1][m / static_cast<std::size_t>(B)] == 0;
            if (!visited) continue;
            const double y = sol.y.at(s.layer + d, base + m);
            verdict.max_gap =
                std::max(verdict.max_gap, std::abs(y - x.x[static_cast<std::size_t>(d)][m]));
        }
        if (d < depth) base *= static_cast<std::size_t>(B);
    }
    verdict.optimal = verdict.max_gap <= 1e-10;
    return verdict;
}

double risk_value_function(const LatticeModel& model, const DriverSpec& driver,
                           const AdaptedProcess& obstacle, NodeRef s) {
    require_node(model, s, "risk_value_function");
    return -solve_rbsde(model, driver, obstacle).y.at(s.layer, s.index);
}

double risk_measure_stopped(const LatticeModel& model, const DriverSpec& driver,
                            const AdaptedProcess& position, const StoppingRule& maturity,
                            NodeRef s) {
    return -evaluate_stopped(model, driver, position, maturity, s);
}

StoppingReport eps_optimal_report(const LatticeModel& model, const DriverSpec& driver,
                                  const AdaptedProcess& obstacle, const RbsdeSolution& sol,
                                  NodeRef s, double eps) {
    StoppingReport report;
    report.eps = eps;
    report.rule = eps_optimal_time(model, sol, obstacle, s, eps);
    report.value = evaluate_stopped(model, driver, obstacle, report.rule, s);
    report.gap = sol.y.at(s.layer, s.index) - report.value;
    const double c = driver.lipschitz();
    const double beta = 3.0 * c * c + 2.0 * c;
    report.certified_bound = eps * std::exp(beta * model.grid().horizon / 2.0);
    if (report.gap < -1e-10)
        throw std::runtime_error("eps_optimal_report: stopped value exceeds the reflected value");
    return report;
}

} // namespace bsdelab
