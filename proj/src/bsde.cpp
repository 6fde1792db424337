#include "bsdelab/bsde.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace bsdelab {

namespace {

std::vector<std::vector<double>> all_layer_probabilities(const LatticeModel& model, int up_to) {
    std::vector<std::vector<double>> probs(static_cast<std::size_t>(up_to) + 1);
    probs[0] = {1.0};
    for (int i = 0; i < up_to; ++i) {
        probs[static_cast<std::size_t>(i) + 1].assign(model.node_count(i + 1), 0.0);
        for (std::size_t n = 0; n < probs[static_cast<std::size_t>(i)].size(); ++n)
            for (int b = 0; b < model.branch_count(); ++b)
                probs[static_cast<std::size_t>(i) + 1][model.child(i, n, b)] +=
                    probs[static_cast<std::size_t>(i)][n] *
                    model.branches()[static_cast<std::size_t>(b)].prob;
    }
    return probs;
}

} // namespace

NodeDriver as_node_driver(const DriverSpec& d) {
    return [d](int, std::size_t, double t, double y, double z, std::span<const double> k) {
        return d(t, y, z, k);
    };
}

BsdeSolution backward_solve(const LatticeModel& model, const NodeDriver& f,
                            std::vector<double> terminal, const BackwardOptions& options) {
    const int N = model.steps();
    const int B = model.branch_count();
    const int J = model.mark_count();
    const double dt = model.dt();
    if (terminal.size() != model.node_count(N))
        throw std::invalid_argument("backward_solve: terminal values must cover layer N");
    for (double v : terminal)
        if (!std::isfinite(v)) throw std::invalid_argument("backward_solve: non-finite terminal value");
    if (options.lipschitz * dt >= 1.0)
        throw std::invalid_argument("backward_solve: C * dt >= 1; refine the grid so the implicit "
                                    "step contracts");

    BsdeSolution sol;
    sol.scheme = options.scheme;
    sol.y = make_adapted(model);
    sol.z = make_predictable(model);
    sol.k = make_jump_field(model);
    sol.picard_iterations.resize(static_cast<std::size_t>(N));
    sol.y.layers[static_cast<std::size_t>(N)] = std::move(terminal);

    std::vector<double> child_values(static_cast<std::size_t>(B));
    for (int i = N - 1; i >= 0; --i) {
        const double t = model.grid().time(i);
        const std::size_t count = model.node_count(i);
        auto& iters = sol.picard_iterations[static_cast<std::size_t>(i)];
        iters.assign(count, 0);
        for (std::size_t n = 0; n < count; ++n) {
            for (int b = 0; b < B; ++b)
                child_values[static_cast<std::size_t>(b)] =
                    sol.y.layers[static_cast<std::size_t>(i) + 1][model.child(i, n, b)];
            const MartingaleCoefficients mc = model.martingale_coefficients(child_values);
            sol.z.at(i, n) = mc.z;
            for (int j = 0; j < J; ++j)
                sol.k.layers[static_cast<std::size_t>(i)][n * static_cast<std::size_t>(J) +
                                                          static_cast<std::size_t>(j)] =
                    mc.k[static_cast<std::size_t>(j)];
            const bool active = options.mask == nullptr || options.mask->at(i, n) != 0.0;
            double y_tilde = mc.mean;
            if (active) {
                if (options.scheme == Scheme::Explicit) {
                    y_tilde = mc.mean + f(i, n, t, mc.mean, mc.z, mc.k) * dt;
                    iters[n] = 1;
                } else {
                    double prev = mc.mean;
                    int it = 0;
                    for (; it < options.picard_max_iter; ++it) {
                        const double next = mc.mean + f(i, n, t, prev, mc.z, mc.k) * dt;
                        const double delta = std::abs(next - prev);
                        prev = next;
                        if (delta <= options.picard_tol) break;
                    }
                    if (it >= options.picard_max_iter)
                        throw std::runtime_error("backward_solve: Picard iteration did not converge");
                    y_tilde = prev;
                    iters[n] = static_cast<std::uint16_t>(it + 1);
                }
            }
            double value = y_tilde;
            if (options.obstacle != nullptr) {
                const double floor = options.obstacle->at(i, n);
                value = std::max(floor, y_tilde);
                if (options.push_out != nullptr) options.push_out->at(i, n) = value - y_tilde;
            }
            sol.y.at(i, n) = value;
        }
    }
    return sol;
}

BsdeSolution solve_bsde(const LatticeModel& model, const DriverSpec& driver,
                        std::vector<double> terminal, Scheme scheme) {
    BackwardOptions options;
    options.scheme = scheme;
    options.lipschitz = driver.lipschitz();
    return backward_solve(model, as_node_driver(driver), std::move(terminal), options);
}

double node_equation_residual(const LatticeModel& model, const NodeDriver& f,
                              const BsdeSolution& sol, const NodeField* mask,
                              const NodeField* push) {
    const int N = model.steps();
    const int B = model.branch_count();
    const double dt = model.dt();
    double worst = 0.0;
    std::vector<double> child_values(static_cast<std::size_t>(B));
    for (int i = 0; i < N; ++i) {
        const double t = model.grid().time(i);
        for (std::size_t n = 0; n < model.node_count(i); ++n) {
            for (int b = 0; b < B; ++b)
                child_values[static_cast<std::size_t>(b)] =
                    sol.y.layers[static_cast<std::size_t>(i) + 1][model.child(i, n, b)];
            const MartingaleCoefficients mc = model.martingale_coefficients(child_values);
            const double da = push != nullptr ? push->at(i, n) : 0.0;
            const double y_star = sol.y.at(i, n) - da;
            const bool active = mask == nullptr || mask->at(i, n) != 0.0;
            const double drift = active ? f(i, n, t, y_star, mc.z, mc.k) * dt : 0.0;
            worst = std::max(worst, std::abs(sol.y.at(i, n) - (mc.mean + drift + da)));
        }
    }
    return worst;
}

AdaptedProcess risk_measure(const LatticeModel& model, const DriverSpec& driver,
                            const AdaptedProcess& position, int maturity_layer) {
    const int N = model.steps();
    if (maturity_layer < 0 || maturity_layer > N)
        throw std::invalid_argument("risk_measure: maturity layer out of range");
    std::vector<double> terminal;
    BackwardOptions options;
    options.lipschitz = driver.lipschitz();
    NodeField mask;
    if (maturity_layer == N) {
        terminal = position.layers[static_cast<std::size_t>(N)];
    } else {
        if (model.indexing() != NodeIndexing::Tree)
            throw std::invalid_argument("risk_measure: early maturities need tree indexing");
        // Freeze the position at the maturity layer and switch the driver off
        // afterwards; the solution on [0, maturity] is unchanged.
        const std::size_t block = model.node_count(N) / model.node_count(maturity_layer);
        terminal.resize(model.node_count(N));
        for (std::size_t n = 0; n < model.node_count(N); ++n)
            terminal[n] = position.layers[static_cast<std::size_t>(maturity_layer)][n / block];
        mask = make_predictable(model, 1.0);
        for (int i = maturity_layer; i < N; ++i)
            std::fill(mask.layers[static_cast<std::size_t>(i)].begin(),
                      mask.layers[static_cast<std::size_t>(i)].end(), 0.0);
        options.mask = &mask;
    }
    BsdeSolution sol = backward_solve(model, as_node_driver(driver), std::move(terminal), options);
    AdaptedProcess rho = std::move(sol.y);
    for (auto& layer : rho.layers)
        for (double& v : layer) v = -v;
    return rho;
}

void validate_estimate_params(const EstimateParams& params, bool pointwise) {
    if (!(params.eta > 0.0)) throw std::invalid_argument("EstimateParams: eta must be > 0");
    const double min_beta = 3.0 / params.eta + 2.0 * params.lipschitz;
    if (params.beta < min_beta - 1e-12)
        throw std::invalid_argument("EstimateParams: beta >= 3/eta + 2C required");
    if (pointwise && params.lipschitz > 0.0 && params.eta > 1.0 / (params.lipschitz * params.lipschitz) + 1e-12)
        throw std::invalid_argument("EstimateParams: eta <= 1/C^2 required for the pointwise estimate");
}

namespace {

double beta_norm_sq_impl(const LatticeModel& model, const NodeField& values, double beta,
                         bool jump_field) {
    const int N = model.steps();
    const double dt = model.dt();
    const int J = model.mark_count();
    const auto probs = all_layer_probabilities(model, N - 1);
    double total = 0.0;
    const int layers = std::min<int>(static_cast<int>(values.layers.size()), N);
    for (int i = 0; i < layers; ++i) {
        const double weight = std::exp(beta * model.grid().time(i)) * dt;
        double layer_sum = 0.0;
        for (std::size_t n = 0; n < model.node_count(i); ++n) {
            double amount;
            if (jump_field) {
                double norm_sq = 0.0;
                for (int j = 0; j < J; ++j) {
                    const double kj = values.layers[static_cast<std::size_t>(i)]
                                                   [n * static_cast<std::size_t>(J) +
                                                    static_cast<std::size_t>(j)];
                    norm_sq += kj * kj * model.marks().intensity(j);
                }
                amount = norm_sq;
            } else {
                const double v = values.at(i, n);
                amount = v * v;
            }
            layer_sum += probs[static_cast<std::size_t>(i)][n] * amount;
        }
        total += weight * layer_sum;
    }
    return total;
}

} // namespace

double beta_norm_sq(const LatticeModel& model, const NodeField& values, double beta) {
    return beta_norm_sq_impl(model, values, beta, false);
}

double beta_norm_sq_jump(const LatticeModel& model, const NodeField& jump_values, double beta) {
    return beta_norm_sq_impl(model, jump_values, beta, true);
}

AprioriReport apriori_gap_check(const LatticeModel& model, const DriverSpec& f1,
                                const DriverSpec& f2, const std::vector<double>& terminal,
                                const EstimateParams& params, double c0,
                                const AdaptedProcess* obstacle) {
    validate_estimate_params(params, true);
    const int N = model.steps();
    const int J = model.mark_count();
    const double dt = model.dt();

    auto solve_one = [&](const DriverSpec& d) {
        BackwardOptions options;
        options.lipschitz = d.lipschitz();
        options.obstacle = obstacle;
        return backward_solve(model, as_node_driver(d), terminal, options);
    };
    const BsdeSolution s1 = solve_one(f1);
    const BsdeSolution s2 = solve_one(f2);

    // fbar(s) = f1(s, Y2, Z2, K2) - f2(s, Y2, Z2, K2)
    NodeField fbar = make_predictable(model);
    std::vector<double> kbuf(static_cast<std::size_t>(J));
    for (int i = 0; i < N; ++i) {
        const double t = model.grid().time(i);
        for (std::size_t n = 0; n < model.node_count(i); ++n) {
            for (int j = 0; j < J; ++j) kbuf[static_cast<std::size_t>(j)] = s2.k_at(model, i, n, j);
            fbar.at(i, n) =
                f1(t, s2.y.at(i, n), s2.z.at(i, n), kbuf) - f2(t, s2.y.at(i, n), s2.z.at(i, n), kbuf);
        }
    }

    AprioriReport report;
    report.tolerance = c0 * dt;

    // Conditional remaining sum G_i = E_i[sum_{s >= i} e^{beta t_s} fbar_s^2 dt].
    std::vector<double> g(model.node_count(N), 0.0);
    std::vector<double> child(static_cast<std::size_t>(model.branch_count()));
    double violation = -std::numeric_limits<double>::infinity();
    for (int i = N - 1; i >= 0; --i) {
        std::vector<double> g_prev(model.node_count(i), 0.0);
        const double weight = std::exp(params.beta * model.grid().time(i)) * dt;
        for (std::size_t n = 0; n < model.node_count(i); ++n) {
            for (int b = 0; b < model.branch_count(); ++b)
                child[static_cast<std::size_t>(b)] = g[model.child(i, n, b)];
            const double fb = fbar.at(i, n);
            g_prev[n] = weight * fb * fb + model.conditional_expectation(child);
            const double ybar = s1.y.at(i, n) - s2.y.at(i, n);
            const double lhs = std::exp(params.beta * model.grid().time(i)) * ybar * ybar;
            violation = std::max(violation, lhs - params.eta * g_prev[n]);
        }
        g = std::move(g_prev);
    }
    report.pointwise_violation = violation;
    report.pointwise_pass = violation <= report.tolerance;

    NodeField ybar = make_predictable(model);
    NodeField zbar = make_predictable(model);
    NodeField kbar = make_jump_field(model);
    for (int i = 0; i < N; ++i)
        for (std::size_t n = 0; n < model.node_count(i); ++n) {
            ybar.at(i, n) = s1.y.at(i, n) - s2.y.at(i, n);
            zbar.at(i, n) = s1.z.at(i, n) - s2.z.at(i, n);
            for (int j = 0; j < J; ++j)
                kbar.layers[static_cast<std::size_t>(i)][n * static_cast<std::size_t>(J) +
                                                         static_cast<std::size_t>(j)] =
                    s1.k_at(model, i, n, j) - s2.k_at(model, i, n, j);
        }
    const double fbar_norm = beta_norm_sq(model, fbar, params.beta);
    report.integrated_y_lhs = beta_norm_sq(model, ybar, params.beta);
    report.integrated_y_rhs = model.grid().horizon * params.eta * fbar_norm;
    bool integrated_pass = report.integrated_y_lhs <= report.integrated_y_rhs + report.tolerance;
    const double csq = params.lipschitz * params.lipschitz;
    if (params.eta * csq < 1.0 - 1e-12) {
        report.integrated_zk_lhs =
            beta_norm_sq(model, zbar, params.beta) + beta_norm_sq_jump(model, kbar, params.beta);
        report.integrated_zk_rhs = params.eta / (1.0 - params.eta * csq) * fbar_norm;
        integrated_pass =
            integrated_pass && report.integrated_zk_lhs <= report.integrated_zk_rhs + report.tolerance;
    }
    report.integrated_pass = integrated_pass;
    return report;
}

double picard_contraction_ratio(const LatticeModel& model, const DriverSpec& driver,
                                const AdaptedProcess& obstacle, const TripleProcess& a,
                                const TripleProcess& b, double beta) {
    const int N = model.steps();
    const int J = model.mark_count();

    auto apply_phi = [&](const TripleProcess& input) {
        NodeDriver frozen = [&](int layer, std::size_t node, double t, double, double,
                                std::span<const double>) {
            const double* k_row =
                input.l.layers[static_cast<std::size_t>(layer)].data() +
                node * static_cast<std::size_t>(J);
            return driver(t, input.u.at(layer, node), input.v.at(layer, node),
                          std::span<const double>(k_row, static_cast<std::size_t>(J)));
        };
        BackwardOptions options;
        options.obstacle = &obstacle;
        return backward_solve(model, frozen, obstacle.layers[static_cast<std::size_t>(N)], options);
    };
    const BsdeSolution pa = apply_phi(a);
    const BsdeSolution pb = apply_phi(b);

    NodeField dy = make_predictable(model), dz = make_predictable(model);
    NodeField dl = make_jump_field(model), du = make_predictable(model), dv = make_predictable(model);
    NodeField dk = make_jump_field(model);
    for (int i = 0; i < N; ++i)
        for (std::size_t n = 0; n < model.node_count(i); ++n) {
            dy.at(i, n) = pa.y.at(i, n) - pb.y.at(i, n);
            dz.at(i, n) = pa.z.at(i, n) - pb.z.at(i, n);
            du.at(i, n) = a.u.at(i, n) - b.u.at(i, n);
            dv.at(i, n) = a.v.at(i, n) - b.v.at(i, n);
            for (int j = 0; j < J; ++j) {
                const std::size_t idx = n * static_cast<std::size_t>(J) + static_cast<std::size_t>(j);
                dk.layers[static_cast<std::size_t>(i)][idx] =
                    pa.k_at(model, i, n, j) - pb.k_at(model, i, n, j);
                dl.layers[static_cast<std::size_t>(i)][idx] =
                    a.l.layers[static_cast<std::size_t>(i)][idx] -
                    b.l.layers[static_cast<std::size_t>(i)][idx];
            }
        }
    const double denom = beta_norm_sq(model, du, beta) + beta_norm_sq(model, dv, beta) +
                         beta_norm_sq_jump(model, dl, beta);
    if (denom == 0.0) return 0.0;
    const double num = beta_norm_sq(model, dy, beta) + beta_norm_sq(model, dz, beta) +
                       beta_norm_sq_jump(model, dk, beta);
    return num / denom;
}

} // namespace bsdelab
