#include "bsdelab/priors.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

namespace bsdelab {

PriorSpec make_constant_prior(std::vector<double> beta1, std::vector<std::vector<double>> beta2,
                              double C1, std::vector<double> psi) {
    if (beta1.empty() || beta1.size() != beta2.size())
        throw std::invalid_argument("make_constant_prior: one beta1 and beta2 row per control");
    if (!(C1 > -1.0)) throw std::invalid_argument("make_constant_prior: C1 must be > -1");
    PriorSpec prior;
    prior.control_count = static_cast<int>(beta1.size());
    prior.C1 = C1;
    prior.psi = std::move(psi);
    auto b1 = std::make_shared<std::vector<double>>(std::move(beta1));
    auto b2 = std::make_shared<std::vector<std::vector<double>>>(std::move(beta2));
    prior.beta1 = [b1](double, int a) { return (*b1)[static_cast<std::size_t>(a)]; };
    prior.beta2 = [b2](double, int a, int j) {
        return (*b2)[static_cast<std::size_t>(a)][static_cast<std::size_t>(j)];
    };
    return prior;
}

double reweight_factor(const LatticeModel& model, const PriorSpec& prior, double t, int alpha,
                       int branch) {
    double factor =
        1.0 + prior.beta1(t, alpha) * model.branches()[static_cast<std::size_t>(branch)].brownian;
    for (int j = 0; j < model.mark_count(); ++j)
        factor += prior.beta2(t, alpha, j) * model.compensated_jump(branch, j);
    return factor;
}

void validate_prior(const LatticeModel& model, const PriorSpec& prior) {
    if (prior.control_count < 1) throw std::invalid_argument("validate_prior: empty control grid");
    if (!(prior.C1 > -1.0)) throw std::invalid_argument("validate_prior: C1 must be > -1");
    for (int a = 0; a < prior.control_count; ++a)
        for (int i = 0; i < model.steps(); ++i) {
            const double t = model.grid().time(i);
            for (int j = 0; j < model.mark_count(); ++j) {
                const double b2 = prior.beta2(t, a, j);
                if (b2 < prior.C1 - 1e-12)
                    throw std::invalid_argument("validate_prior: beta2 below C1");
                if (!prior.psi.empty() &&
                    std::abs(b2) > prior.psi[static_cast<std::size_t>(j)] + 1e-12)
                    throw std::invalid_argument("validate_prior: |beta2| above psi");
            }
            for (int b = 0; b < model.branch_count(); ++b)
                if (!(reweight_factor(model, prior, t, a, b) > 0.0))
                    throw std::invalid_argument(
                        "validate_prior: nonpositive density factor on the paired lattice");
        }
}

DensityProcess density_process(const LatticeModel& model, const PriorSpec& prior,
                               const ControlProcess& alpha) {
    validate_prior(model, prior);
    DensityProcess density;
    density.z = make_adapted(model);
    density.z.layers[0][0] = 1.0;
    for (int i = 0; i < model.steps(); ++i) {
        const double t = model.grid().time(i);
        if (model.indexing() == NodeIndexing::Markov) {
            // Several parents can share a child; the product is only a state
            // function when the factors are node- and time-independent.
            const int a0 = alpha.at(i, 0);
            for (std::size_t n = 1; n < model.node_count(i); ++n)
                if (alpha.at(i, n) != a0)
                    throw std::invalid_argument(
                        "density_process: markov indexing needs layer-uniform controls");
            if (i > 0 && alpha.at(i - 1, 0) != a0)
                throw std::invalid_argument(
                    "density_process: markov indexing needs time-constant controls");
        }
        for (std::size_t n = 0; n < model.node_count(i); ++n) {
            const int a = alpha.at(i, n);
            for (int b = 0; b < model.branch_count(); ++b) {
                const double factor = reweight_factor(model, prior, t, a, b);
                if (!(factor > 0.0))
                    throw std::runtime_error("density_process: nonpositive factor");
                density.z.at(i + 1, model.child(i, n, b)) = density.z.at(i, n) * factor;
            }
        }
    }
    return density;
}

DensityProcess density_process(const LatticeModel& model, const PriorSpec& prior, int alpha) {
    return density_process(model, prior, constant_control(model, alpha));
}

std::vector<double> density_layer_means(const LatticeModel& model, const DensityProcess& density) {
    std::vector<double> means(static_cast<std::size_t>(model.steps()) + 1, 0.0);
    for (int i = 0; i <= model.steps(); ++i) {
        const auto probs = model.layer_probabilities(i);
        double mean = 0.0;
        for (std::size_t n = 0; n < model.node_count(i); ++n)
            mean += probs[n] * density.z.at(i, n);
        means[static_cast<std::size_t>(i)] = mean;
    }
    return means;
}

LatticeModel reweight_measure(const LatticeModel& model, const PriorSpec& prior, int alpha,
                              ReweightReport* report) {
    validate_prior(model, prior);
    const double dt = model.dt();
    const double t0 = 0.0;
    const double b1 = prior.beta1(t0, alpha);

    std::vector<Branch> branches = model.branches();
    double prob_sum = 0.0;
    for (int b = 0; b < model.branch_count(); ++b) {
        const double factor = reweight_factor(model, prior, t0, alpha, b);
        branches[static_cast<std::size_t>(b)].prob *= factor;
        branches[static_cast<std::size_t>(b)].brownian -= b1 * dt;
        prob_sum += branches[static_cast<std::size_t>(b)].prob;
    }
    // Intensities re-derived from the reweighted jump mass keep the template
    // invariants exact; the O(dt^2) distortion against the Girsanov intensity
    // lambda (1 + beta2) is reported, not asserted.
    std::vector<double> us, lambdas;
    for (int j = 0; j < model.mark_count(); ++j) {
        double mass = 0.0;
        for (int b = 0; b < model.branch_count(); ++b)
            if (model.branches()[static_cast<std::size_t>(b)].mark == j)
                mass += branches[static_cast<std::size_t>(b)].prob;
        us.push_back(model.marks().mark(j));
        lambdas.push_back(mass / dt);
    }
    LatticeModel reweighted(model.grid(), MarkSet(us, lambdas), branches, model.indexing());

    if (report != nullptr) {
        report->prob_sum_error = std::abs(prob_sum - 1.0);
        double mean = 0.0, second = 0.0;
        for (const Branch& b : reweighted.branches()) {
            mean += b.prob * b.brownian;
            second += b.prob * b.brownian * b.brownian;
        }
        report->brownian_mean_error = std::abs(mean);
        report->second_moment_distortion = second - dt;
        report->jump_intensity_distortion.clear();
        for (int j = 0; j < model.mark_count(); ++j) {
            const double girsanov =
                model.marks().intensity(j) * (1.0 + prior.beta2(t0, alpha, j)) * dt;
            report->jump_intensity_distortion.push_back(reweighted.marks().intensity(j) * dt -
                                                        girsanov);
        }
    }
    return reweighted;
}

PriorCost zero_prior_cost() {
    PriorCost cost;
    cost.evaluate = [](double, double, std::span<const double>, int) { return 0.0; };
    return cost;
}

namespace {

// One-step data under Q: reweighted probabilities and the representation
// solver for (1, dW - beta1 dt, 1{mark j} - lambda'_j dt).
struct QStep {
    std::vector<double> probs;
    std::vector<double> solver; // (J+2) x B, row-major
};

QStep build_q_step(const LatticeModel& model, const PriorSpec& prior, double t, int alpha) {
    const int B = model.branch_count();
    const int J = model.mark_count();
    const double dt = model.dt();
    QStep step;
    step.probs.resize(static_cast<std::size_t>(B));
    for (int b = 0; b < B; ++b) {
        const double factor = reweight_factor(model, prior, t, alpha, b);
        if (!(factor > 0.0))
            throw std::runtime_error("solve_under_prior: nonpositive density factor");
        step.probs[static_cast<std::size_t>(b)] =
            model.branches()[static_cast<std::size_t>(b)].prob * factor;
    }
    const double b1 = prior.beta1(t, alpha);
    std::vector<double> lambda_q_dt(static_cast<std::size_t>(J), 0.0);
    for (int b = 0; b < B; ++b) {
        const int mark = model.branches()[static_cast<std::size_t>(b)].mark;
        if (mark >= 0) lambda_q_dt[static_cast<std::size_t>(mark)] += step.probs[static_cast<std::size_t>(b)];
    }
    Eigen::MatrixXd rep(B, J + 2);
    for (int b = 0; b < B; ++b) {
        rep(b, 0) = 1.0;
        rep(b, 1) = model.branches()[static_cast<std::size_t>(b)].brownian - b1 * dt;
        for (int j = 0; j < J; ++j)
            rep(b, 2 + j) = (model.branches()[static_cast<std::size_t>(b)].mark == j ? 1.0 : 0.0) -
                            lambda_q_dt[static_cast<std::size_t>(j)];
    }
    Eigen::MatrixXd solver;
    if (B == J + 2) {
        Eigen::FullPivLU<Eigen::MatrixXd> lu(rep);
        if (!lu.isInvertible())
            throw std::runtime_error("solve_under_prior: representation matrix singular under Q");
        solver = lu.inverse();
    } else {
        Eigen::VectorXd w(B);
        for (int b = 0; b < B; ++b) w(b) = std::sqrt(step.probs[static_cast<std::size_t>(b)]);
        Eigen::MatrixXd scaled = w.asDiagonal() * rep;
        Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(scaled);
        solver = cod.pseudoInverse() * Eigen::MatrixXd(w.asDiagonal());
    }
    step.solver.resize(static_cast<std::size_t>(J + 2) * B);
    for (int r = 0; r < J + 2; ++r)
        for (int b = 0; b < B; ++b) step.solver[static_cast<std::size_t>(r) * B + b] = solver(r, b);
    return step;
}

} // namespace

BsdeSolution solve_under_prior(const LatticeModel& model, const PriorSpec& prior,
                               const ControlProcess& alpha, const PriorCost& cost,
                               std::vector<double> terminal) {
    validate_prior(model, prior);
    const int N = model.steps();
    const int B = model.branch_count();
    const int J = model.mark_count();
    const double dt = model.dt();
    if (terminal.size() != model.node_count(N))
        throw std::invalid_argument("solve_under_prior: terminal values must cover layer N");

    BsdeSolution sol;
    sol.scheme = Scheme::Explicit;
    sol.y = make_adapted(model);
    sol.z = make_predictable(model);
    sol.k = make_jump_field(model);
    sol.picard_iterations.resize(static_cast<std::size_t>(N));
    sol.y.layers[static_cast<std::size_t>(N)] = std::move(terminal);

    std::vector<double> child(static_cast<std::size_t>(B));
    std::vector<double> coeffs(static_cast<std::size_t>(J) + 2);
    std::vector<double> k_row(static_cast<std::size_t>(J));
    for (int i = N - 1; i >= 0; --i) {
        const double t = model.grid().time(i);
        sol.picard_iterations[static_cast<std::size_t>(i)].assign(model.node_count(i), 1);
        if (model.indexing() == NodeIndexing::Markov) {
            const int a0 = alpha.at(i, 0);
            for (std::size_t n = 1; n < model.node_count(i); ++n)
                if (alpha.at(i, n) != a0)
                    throw std::invalid_argument(
                        "solve_under_prior: markov indexing needs layer-uniform controls");
        }
        int cached_alpha = -1;
        QStep step;
        for (std::size_t n = 0; n < model.node_count(i); ++n) {
            const int a = alpha.at(i, n);
            if (a != cached_alpha) {
                step = build_q_step(model, prior, t, a);
                cached_alpha = a;
            }
            for (int b = 0; b < B; ++b)
                child[static_cast<std::size_t>(b)] =
                    sol.y.layers[static_cast<std::size_t>(i) + 1][model.child(i, n, b)];
            double mean_q = 0.0;
            for (int b = 0; b < B; ++b)
                mean_q +=
                    step.probs[static_cast<std::size_t>(b)] * child[static_cast<std::size_t>(b)];
            for (int r = 0; r < J + 2; ++r) {
                double s = 0.0;
                for (int b = 0; b < B; ++b)
                    s += step.solver[static_cast<std::size_t>(r) * B + b] *
                         child[static_cast<std::size_t>(b)];
                coeffs[static_cast<std::size_t>(r)] = s;
            }
            sol.z.at(i, n) = coeffs[1];
            for (int j = 0; j < J; ++j) {
                k_row[static_cast<std::size_t>(j)] = coeffs[static_cast<std::size_t>(j) + 2];
                sol.k.layers[static_cast<std::size_t>(i)][n * static_cast<std::size_t>(J) +
                                                          static_cast<std::size_t>(j)] =
                    coeffs[static_cast<std::size_t>(j) + 2];
            }
            sol.y.at(i, n) = mean_q + cost.evaluate(t, coeffs[1], k_row, a) * dt;
        }
    }
    return sol;
}

BsdeSolution solve_under_prior(const LatticeModel& model, const PriorSpec& prior, int alpha,
                               const PriorCost& cost, std::vector<double> terminal) {
    return solve_under_prior(model, prior, constant_control(model, alpha), cost,
                             std::move(terminal));
}

DriverSpec driver_from_prior(const TimeGrid& grid, const MarkSet& marks, const PriorSpec& prior,
                             int alpha, const PriorCost& cost) {
    if (alpha < 0 || alpha >= prior.control_count)
        throw std::invalid_argument("driver_from_prior: control outside the grid");
    const int J = marks.count();
    auto beta2_row = [prior, J](double t, int a) {
        std::vector<double> row(static_cast<std::size_t>(J));
        for (int j = 0; j < J; ++j) row[static_cast<std::size_t>(j)] = prior.beta2(t, a, j);
        return row;
    };
    auto eval = [marks, prior, cost, alpha, beta2_row](double t, double, double z,
                                                       std::span<const double> k) {
        const auto b2 = beta2_row(t, alpha);
        return cost.evaluate(t, z, k, alpha) + prior.beta1(t, alpha) * z + marks.inner(b2, k);
    };
    double coef_bound = 0.0;
    for (int i = 0; i <= grid.steps; ++i) {
        const double t = grid.time(i);
        coef_bound = std::max(coef_bound,
                              std::abs(prior.beta1(t, alpha)) + marks.norm(beta2_row(t, alpha)));
    }
    DriverFlags flags{false, true, J > 0 || cost.depends_on_k, true};
    DriverSpec::ThetaOracle theta;
    if (!cost.depends_on_k || cost.tau) {
        // theta = tau_F + beta2 >= -1 - C1 + C1 = -1.
        theta = [prior, cost, alpha, beta2_row, J](double t, double, double z,
                                                   std::span<const double> l1,
                                                   std::span<const double> l2) {
            std::vector<double> out = beta2_row(t, alpha);
            if (cost.tau) {
                const auto tau = cost.tau(t, z, l1, l2, alpha);
                for (int j = 0; j < J; ++j)
                    out[static_cast<std::size_t>(j)] += tau[static_cast<std::size_t>(j)];
            }
            return out;
        };
    }
    return DriverSpec(std::move(eval), cost.lipschitz + coef_bound, flags, std::move(theta),
                      prior.psi);
}

AmbiguityFamily family_from_priors(const TimeGrid& grid, const MarkSet& marks,
                                   const PriorSpec& prior, const PriorCost& cost) {
    std::vector<DriverSpec> members;
    for (int a = 0; a < prior.control_count; ++a)
        members.push_back(driver_from_prior(grid, marks, prior, a, cost));
    return make_family(std::move(members));
}

EquivalenceReport cross_check_prior_equivalence(
    double horizon, const MarkSet& marks, const PriorSpec& prior, int alpha, const PriorCost& cost,
    const std::function<double(double w, std::span<const int> jumps)>& terminal,
    const std::vector<int>& refinements) {
    EquivalenceReport report;
    report.refinements = refinements;

    // (a) Algebraic identity of the two driver formulas at sampled points.
    {
        const TimeGrid grid{horizon, refinements.empty() ? 8 : refinements.front()};
        const DriverSpec p_form = driver_from_prior(grid, marks, prior, alpha, cost);
        RandomSource rng(424242);
        const int J = marks.count();
        std::vector<double> k(static_cast<std::size_t>(J));
        for (int s = 0; s < 1000; ++s) {
            const double t = rng.uniform(0.0, horizon);
            const double z = rng.uniform(-3.0, 3.0);
            for (double& kj : k) kj = rng.uniform(-3.0, 3.0);
            double direct = cost.evaluate(t, z, k, alpha) + prior.beta1(t, alpha) * z;
            for (int j = 0; j < J; ++j)
                direct +=
                    prior.beta2(t, alpha, j) * k[static_cast<std::size_t>(j)] * marks.intensity(j);
            report.driver_identity_error =
                std::max(report.driver_identity_error, std::abs(p_form(t, 0.0, z, k) - direct));
        }
    }

    // (b) Q-path vs P-path root values across refinements.
    for (int n_steps : refinements) {
        const LatticeModel model =
            build_default_lattice(horizon, n_steps, marks, NodeIndexing::Markov);
        std::vector<double> xi(model.node_count(n_steps));
        for (std::size_t n = 0; n < xi.size(); ++n) {
            const auto jumps = model.jump_counts(n_steps, n);
            xi[n] = terminal(model.brownian_position(n_steps, n), jumps);
        }
        const BsdeSolution q_path = solve_under_prior(model, prior, alpha, cost, xi);
        const DriverSpec p_form = driver_from_prior(model.grid(), marks, prior, alpha, cost);
        const BsdeSolution p_path = solve_bsde(model, p_form, xi);
        report.gaps.push_back(std::abs(q_path.y.at(0, 0) - p_path.y.at(0, 0)));

        const auto means = density_layer_means(model, density_process(model, prior, alpha));
        for (double mean : means)
            report.max_density_mean_error =
                std::max(report.max_density_mean_error, std::abs(mean - 1.0));
    }
    report.first_order = report.gaps.size() >= 2;
    for (std::size_t i = 0; i + 1 < report.gaps.size(); ++i) {
        const double ratio = report.gaps[i] > 0.0 ? report.gaps[i + 1] / report.gaps[i] : 0.0;
        report.ratios.push_back(ratio);
        if (!(ratio >= 0.375 && ratio <= 0.625)) report.first_order = false;
    }
    return report;
}

} // namespace bsdelab
