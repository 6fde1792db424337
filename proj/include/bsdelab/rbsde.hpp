#pragma once

#include "bsdelab/bsde.hpp"
#include "bsdelab/drivers.hpp"
#include "bsdelab/lattice.hpp"

#include <vector>

namespace bsdelab {

struct RbsdeSolution {
    AdaptedProcess y;
    PredictableProcess z;
    NodeField k;                    // J entries per node
    PredictableProcess push;        // dA_i, the per-step reflection amounts
    AdaptedProcess push_cumulative; // A, pathwise sums of dA with A_0 = 0
    std::vector<std::vector<std::uint16_t>> picard_iterations;

    double k_at(const LatticeModel& model, int layer, std::size_t node, int j) const {
        return k.layers[static_cast<std::size_t>(layer)]
                       [node * static_cast<std::size_t>(model.mark_count()) + static_cast<std::size_t>(j)];
    }
};

// Reflected solve: implicit driver step, then clip at the obstacle. Flat-off
// (Y - xi) dA = 0 holds exactly by construction.
RbsdeSolution solve_rbsde(const LatticeModel& model, const DriverSpec& driver,
                          const AdaptedProcess& obstacle);

// Node-dependent generator variant (control processes, masked horizons).
RbsdeSolution solve_rbsde_node_driver(const LatticeModel& model, const NodeDriver& driver,
                                      double lipschitz, const AdaptedProcess& obstacle);

// Driver independent of (y, z, k): running reward per node. Asserts agreement
// with the classical backward recursion max(xi, E[Y'] + f dt).
RbsdeSolution snell_envelope(const LatticeModel& model, const PredictableProcess& running_reward,
                             const AdaptedProcess& obstacle);
RbsdeSolution snell_envelope(const LatticeModel& model, const DriverSpec& reward_driver,
                             const AdaptedProcess& obstacle);

struct SkorokhodReport {
    double max_flat_off_violation = 0.0; // max |(Y - xi) dA|
    double min_increment = 0.0;          // min dA (should be >= 0)
    double min_constraint_slack = 0.0;   // min (Y - xi) (should be >= 0)
    bool pass = false;
};

SkorokhodReport skorokhod_report(const LatticeModel& model, const RbsdeSolution& sol,
                                 const AdaptedProcess& obstacle);

} // namespace bsdelab
