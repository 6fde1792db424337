#pragma once

#include "bsdelab/drivers.hpp"
#include "bsdelab/lattice.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

namespace bsdelab {

enum class Scheme { Implicit, Explicit };

// Driver view used by the internal solver; node-dependent generators cover the
// driver-masking device for stopped horizons and control processes.
using NodeDriver = std::function<double(int layer, std::size_t node, double t, double y, double z,
                                        std::span<const double> k)>;

NodeDriver as_node_driver(const DriverSpec& d);

struct BsdeSolution {
    AdaptedProcess y;
    PredictableProcess z;
    NodeField k; // J entries per node
    Scheme scheme = Scheme::Implicit;
    std::vector<std::vector<std::uint16_t>> picard_iterations;

    double k_at(const LatticeModel& model, int layer, std::size_t node, int j) const {
        return k.layers[static_cast<std::size_t>(layer)]
                       [node * static_cast<std::size_t>(model.mark_count()) + static_cast<std::size_t>(j)];
    }
};

struct BackwardOptions {
    Scheme scheme = Scheme::Implicit;
    double picard_tol = 1e-13;
    int picard_max_iter = 256;
    double lipschitz = 0.0;                 // used for the C*dt < 1 precondition
    const NodeField* mask = nullptr;        // driver indicator per node, layers 0..N-1
    const NodeField* obstacle = nullptr;    // reflect on it when present
    NodeField* push_out = nullptr;          // per-step reflection amounts dA
};

// One backward pass: terminal values at layer N, per-node implicit (or
// explicit) driver step, martingale coefficients from the next layer, optional
// reflection. Everything else in the library is a wrapper around this.
BsdeSolution backward_solve(const LatticeModel& model, const NodeDriver& f,
                            std::vector<double> terminal, const BackwardOptions& options);

BsdeSolution solve_bsde(const LatticeModel& model, const DriverSpec& driver,
                        std::vector<double> terminal, Scheme scheme = Scheme::Implicit);

// Max over nodes of |Y_i - E_i[Y_{i+1}] - f(t_i,.) dt|; verifies a solution
// independently of how it was produced.
double node_equation_residual(const LatticeModel& model, const NodeDriver& f,
                              const BsdeSolution& sol, const NodeField* mask = nullptr,
                              const NodeField* push = nullptr);

// rho_t(xi, T) = -X_t(xi, T).
AdaptedProcess risk_measure(const LatticeModel& model, const DriverSpec& driver,
                            const AdaptedProcess& position, int maturity_layer);

struct EstimateParams {
    double eta = 1.0;
    double beta = 5.0;
    double lipschitz = 1.0;
};

// beta >= 3/eta + 2C, and eta <= 1/C^2 where the pointwise estimate is used.
void validate_estimate_params(const EstimateParams& params, bool pointwise);

// Discrete beta-norm ||phi||^2 = E[sum_i e^{beta t_i} phi_i^2 dt] over layers 0..N-1.
double beta_norm_sq(const LatticeModel& model, const NodeField& values, double beta);
double beta_norm_sq_jump(const LatticeModel& model, const NodeField& jump_values, double beta);

struct AprioriReport {
    // Signed max over nodes of lhs - rhs in the pointwise estimate; <= 0 means
    // the inequality holds everywhere.
    double pointwise_violation = 0.0;
    double integrated_y_lhs = 0.0;
    double integrated_y_rhs = 0.0;
    double integrated_zk_lhs = 0.0;
    double integrated_zk_rhs = 0.0;
    bool pointwise_pass = false;
    bool integrated_pass = false;
    double tolerance = 0.0;
};

// Checks the a priori gap estimates between the solutions driven by f1 and f2
// (same terminal, same optional obstacle): pointwise e^{bt} Ybar_t^2 <=
// eta E[int e^{bs} fbar^2 ds | F_t], its integral form, and the (Z,K) form when
// eta < 1/C^2. The pass threshold is c0 * dt.
AprioriReport apriori_gap_check(const LatticeModel& model, const DriverSpec& f1,
                                const DriverSpec& f2, const std::vector<double>& terminal,
                                const EstimateParams& params, double c0,
                                const AdaptedProcess* obstacle = nullptr);

struct TripleProcess {
    PredictableProcess u;
    PredictableProcess v;
    NodeField l; // J entries per node
};

// Applies the frozen-driver reflected map Phi to both inputs and returns
// ||Phi(a) - Phi(b)||_beta^2 / ||a - b||_beta^2. Identical inputs give 0.
double picard_contraction_ratio(const LatticeModel& model, const DriverSpec& driver,
                                const AdaptedProcess& obstacle, const TripleProcess& a,
                                const TripleProcess& b, double beta);

} // namespace bsdelab
