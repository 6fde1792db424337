#pragma once

#include "bsdelab/bsde.hpp"
#include "bsdelab/drivers.hpp"
#include "bsdelab/lattice.hpp"
#include "bsdelab/rbsde.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

namespace bsdelab {

struct NodeRef {
    int layer = 0;
    std::size_t index = 0;
};

// Stopping region over the lattice; stopping times are first hits of the
// region at or after the query node. Layer N counts as part of the region, so
// every path stops by the horizon.
struct StoppingRule {
    std::vector<std::vector<std::uint8_t>> stop; // layers 0..N

    bool stops_at(int layer, std::size_t node, int horizon) const {
        return layer == horizon || stop[static_cast<std::size_t>(layer)][node] != 0;
    }
};

StoppingRule make_stop_region(const LatticeModel& model); // empty region (stop at N only)
StoppingRule stop_immediately(const LatticeModel& model); // whole lattice

// First-hit layer at or after S for every layer-N leaf of the subtree of S
// (tree indexing).
std::vector<int> effective_stop_layers(const LatticeModel& model, const StoppingRule& rule,
                                       NodeRef s);

// Stopped BSDE on the subtree of S: the driver is switched off from the first
// hit on and the terminal value is frozen there. x[d][m] indexes depth d below
// S; stopped[d][m] = 1 from the first hit on.
struct StoppedSolution {
    NodeRef root;
    std::vector<std::vector<double>> x;
    std::vector<std::vector<std::uint8_t>> stopped;

    double value() const { return x[0][0]; }
};

StoppedSolution solve_stopped(const LatticeModel& model, const NodeDriver& driver,
                              double lipschitz, const AdaptedProcess& obstacle,
                              const StoppingRule& rule, NodeRef s);

// X_S(xi_tau, tau), the stopped value at S.
double evaluate_stopped(const LatticeModel& model, const DriverSpec& driver,
                        const AdaptedProcess& obstacle, const StoppingRule& rule, NodeRef s);

struct EnumerationCaps {
    std::size_t max_subtree_nodes = 64;
    std::uint64_t max_rules = 2'000'000;
};

// Number of distinct first-hit stopping rules on the subtree of S, clamped to
// cap + 1 when larger.
std::uint64_t count_stopping_rules(const LatticeModel& model, NodeRef s, std::uint64_t cap);

// Enumerates every effective stopping rule on the subtree of S exactly once
// (choices below a stop are skipped rather than enumerated).
void for_each_stopping_rule(const LatticeModel& model, NodeRef s, const EnumerationCaps& caps,
                            const std::function<void(const StoppingRule&)>& visit);

struct BruteForceResult {
    double value = 0.0;
    StoppingRule best;
    std::uint64_t rules_enumerated = 0;
};

// Exact max of evaluate_stopped over all enumerated rules plus an argmax rule.
BruteForceResult brute_force_value(const LatticeModel& model, const DriverSpec& driver,
                                   const AdaptedProcess& obstacle, NodeRef s,
                                   const EnumerationCaps& caps = {});

// First hit of {Y <= xi + eps} at or after S.
StoppingRule eps_optimal_time(const LatticeModel& model, const RbsdeSolution& sol,
                              const AdaptedProcess& obstacle, NodeRef s, double eps);

// First hit of {Y = xi} at or after S (absolute tolerance 1e-12).
StoppingRule optimal_time(const LatticeModel& model, const RbsdeSolution& sol,
                          const AdaptedProcess& obstacle, NodeRef s);

struct OptimalityVerdict {
    bool optimal = false;
    double max_gap = 0.0; // max |Y - X(xi_tau, tau)| on [S, tau]
};

// Y_s = X_s(xi_tau, tau) on [S, tau] iff tau is S-optimal (needs theta > -1
// for the only-if direction).
OptimalityVerdict check_optimality_criterion(const LatticeModel& model, const DriverSpec& driver,
                                             const AdaptedProcess& obstacle,
                                             const RbsdeSolution& sol, const StoppingRule& rule,
                                             NodeRef s);

// v(S) = -Y_S of the reflected solve; minimal risk over stopping times.
double risk_value_function(const LatticeModel& model, const DriverSpec& driver,
                           const AdaptedProcess& obstacle, NodeRef s);

// rho_S(xi_tau, tau) = -X_S(xi_tau, tau): risk of the position stopped at a
// rule-defined maturity.
double risk_measure_stopped(const LatticeModel& model, const DriverSpec& driver,
                            const AdaptedProcess& position, const StoppingRule& maturity,
                            NodeRef s);

struct StoppingReport {
    StoppingRule rule;
    double value = 0.0;     // X_S(xi_tau, tau)
    double gap = 0.0;       // Y_S - value, >= -1e-10
    double eps = 0.0;       // 0 when not an eps-rule
    double certified_bound = 0.0; // eps * e^{beta T / 2}
};

StoppingReport eps_optimal_report(const LatticeModel& model, const DriverSpec& driver,
                                  const AdaptedProcess& obstacle, const RbsdeSolution& sol,
                                  NodeRef s, double eps);

} // namespace bsdelab
