#pragma once

#include "bsdelab/bsde.hpp"
#include "bsdelab/drivers.hpp"
#include "bsdelab/lattice.hpp"
#include "bsdelab/robust.hpp"

#include <functional>
#include <optional>
#include <span>
#include <vector>

namespace bsdelab {

// Girsanov parameters over a finite control grid: per control a, a Brownian
// tilt beta1(t, a) and per-mark jump tilts beta2(t, a, j) with beta2 >= C1 > -1
// and |beta2| <= psi.
struct PriorSpec {
    int control_count = 1;
    std::function<double(double t, int a)> beta1;
    std::function<double(double t, int a, int j)> beta2;
    double C1 = 0.0;
    std::vector<double> psi;
};

PriorSpec make_constant_prior(std::vector<double> beta1,
                              std::vector<std::vector<double>> beta2, double C1,
                              std::vector<double> psi);

// One-step density factor 1 + beta1 dW_b + sum_j beta2_j dN~_{b,j}.
double reweight_factor(const LatticeModel& model, const PriorSpec& prior, double t, int alpha,
                       int branch);

// Positivity of all factors on the paired lattice plus the C1/psi bounds.
void validate_prior(const LatticeModel& model, const PriorSpec& prior);

struct DensityProcess {
    AdaptedProcess z;
};

DensityProcess density_process(const LatticeModel& model, const PriorSpec& prior,
                               const ControlProcess& alpha);
DensityProcess density_process(const LatticeModel& model, const PriorSpec& prior, int alpha);

// E[Z_i] per layer; exact martingales give 1 everywhere.
std::vector<double> density_layer_means(const LatticeModel& model, const DensityProcess& density);

struct ReweightReport {
    double prob_sum_error = 0.0;      // |sum p' - 1|
    double brownian_mean_error = 0.0; // |E'[dW - beta1 dt]|, exact
    // lambda'_j dt - lambda_j (1 + beta2_j) dt, the O(dt^2) intensity distortion
    std::vector<double> jump_intensity_distortion;
    double second_moment_distortion = 0.0; // E'[dW'^2] - dt, O(dt^2), reported only
};

// Reweighted lattice under the prior: p_b -> p_b * factor_b, dW -> dW - beta1 dt,
// intensities from the reweighted jump mass. First moments are exact; second
// moments are distorted at O(dt^2) and reported, not asserted. Needs
// time-constant coefficients (evaluated at t = 0).
LatticeModel reweight_measure(const LatticeModel& model, const PriorSpec& prior, int alpha,
                              ReweightReport* report = nullptr);

// Running cost F(t, pi, l, a); no y argument.
struct PriorCost {
    std::function<double(double t, double z, std::span<const double> k, int a)> evaluate;
    double lipschitz = 0.0;
    bool depends_on_z = false;
    bool depends_on_k = false;
    // Monotonicity coefficient of the k argument, >= -1 - C1 when present.
    std::function<std::vector<double>(double t, double z, std::span<const double> l1,
                                      std::span<const double> l2, int a)>
        tau;
};

PriorCost zero_prior_cost();

// Backward solve under Q^alpha: reweighted one-step expectations and
// martingale coefficients with respect to (dW - beta1 dt, dN~ under Q).
BsdeSolution solve_under_prior(const LatticeModel& model, const PriorSpec& prior,
                               const ControlProcess& alpha, const PriorCost& cost,
                               std::vector<double> terminal);
BsdeSolution solve_under_prior(const LatticeModel& model, const PriorSpec& prior, int alpha,
                               const PriorCost& cost, std::vector<double> terminal);

// P-form driver F + beta1 pi + <beta2, l>_nu for one control.
DriverSpec driver_from_prior(const TimeGrid& grid, const MarkSet& marks, const PriorSpec& prior,
                             int alpha, const PriorCost& cost);

// All controls as an equi-Lipschitz family.
AmbiguityFamily family_from_priors(const TimeGrid& grid, const MarkSet& marks,
                                   const PriorSpec& prior, const PriorCost& cost);

struct EquivalenceReport {
    double driver_identity_error = 0.0;
    std::vector<int> refinements;
    std::vector<double> gaps;   // |X^Q_0 - X^P_0| per refinement
    std::vector<double> ratios; // successive gap ratios
    double max_density_mean_error = 0.0;
    bool first_order = false; // ratios within [0.375, 0.625]
};

// The two deliberately separate code paths: Q-measure solve vs P-measure
// shifted-driver solve, compared across grid refinements.
EquivalenceReport cross_check_prior_equivalence(
    double horizon, const MarkSet& marks, const PriorSpec& prior, int alpha, const PriorCost& cost,
    const std::function<double(double w, std::span<const int> jumps)>& terminal,
    const std::vector<int>& refinements);

} // namespace bsdelab
