#pragma once

#include "bsdelab/drivers.hpp"
#include "bsdelab/rbsde.hpp"
#include "bsdelab/stopping.hpp"

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

namespace bsdelab {

// Family-member index per node, layers 0..N-1.
struct ControlProcess {
    std::vector<std::vector<int>> alpha;

    int at(int layer, std::size_t node) const {
        return alpha[static_cast<std::size_t>(layer)][node];
    }
};

ControlProcess constant_control(const LatticeModel& model, int member);

// Generator f^{alpha_t}: the member selected at each node.
NodeDriver family_control_driver(const AmbiguityFamily& family, const ControlProcess& control);

struct GameCaps {
    EnumerationCaps rules;
    std::uint64_t max_control_maps = 2'000'000;
};

struct ValueWithMember {
    double value = 0.0;
    int member = 0;
};

// inf-sup value restricted to constant controls: one reflected solve per
// member, min over members.
ValueWithMember upper_value(const LatticeModel& model, const AmbiguityFamily& family,
                            const AdaptedProcess& obstacle, NodeRef s);

// Exact inf over predictable control processes of the reflected value at S,
// by enumerating control maps on the subtree. Empty when the cap is exceeded.
std::optional<double> upper_value_exact(const LatticeModel& model, const AmbiguityFamily& family,
                                        const AdaptedProcess& obstacle, NodeRef s,
                                        const GameCaps& caps);

enum class ControlMode { Constant, FullPredictable };

struct LowerValueResult {
    double value = 0.0;
    bool sampled = false; // true when the inner inf ran over constants only
    std::uint64_t rules_enumerated = 0;
};

// sup over stopping rules of the inf over controls of the stopped value.
LowerValueResult lower_value(const LatticeModel& model, const AmbiguityFamily& family,
                             const AdaptedProcess& obstacle, NodeRef s, const GameCaps& caps,
                             ControlMode mode = ControlMode::Constant);

struct GameSolution {
    InfDriver inf;
    RbsdeSolution y;            // reflected solution under the inf driver
    ControlProcess alpha_bar;   // argmin selection along the solution
    RbsdeSolution y_alpha_bar;  // re-solve under f^{alpha_bar}
    double principle_residual;  // max |Y - Y^{alpha_bar}| over all nodes
};

// Builds the inf driver, solves its RBSDE, extracts the argmin control along
// the solution and verifies the optimization principle by re-solving.
GameSolution solve_game(const LatticeModel& model, const AmbiguityFamily& family,
                        const AdaptedProcess& obstacle);

struct SaddleCheck {
    double left_violation = 0.0;  // max over tau of X(tau) - X(tau_hat)
    double right_violation = 0.0; // max over alpha of X(tau_hat) - X^alpha(tau_hat)
    bool certified = false;
    bool sampled = false; // alpha side enumerated over constants only
    std::uint64_t rules_enumerated = 0;
    std::uint64_t maps_enumerated = 0;
};

SaddleCheck check_saddle(const LatticeModel& model, const AmbiguityFamily& family,
                         const AdaptedProcess& obstacle, NodeRef s, const StoppingRule& tau_hat,
                         const ControlProcess& alpha_hat, const GameCaps& caps);

struct SaddleResult {
    std::optional<std::pair<StoppingRule, ControlProcess>> saddle;
    SaddleCheck check;
};

// tau-hat = first hit of {Y = xi}, alpha-hat = argmin control; certified by
// exhaustive verification of both saddle inequalities.
SaddleResult find_saddle(const LatticeModel& model, const AmbiguityFamily& family,
                         const AdaptedProcess& obstacle, NodeRef s, const GameCaps& caps);

struct OptimalityCriteria {
    bool value_match = false;      // Y^{alpha}_{tau*} = xi_{tau*} pathwise
    bool driver_match = false;     // f = f^{alpha} along the solution on [S, tau*)
    bool criterion_holds = false;  // both of the above
    bool eps_criterion_holds = false;
    bool ground_truth_optimal = false; // Y_S = Y^{alpha}_S
    bool agree = false;
    double max_value_gap = 0.0;
    double max_driver_gap = 0.0;
};

// The necessary-and-sufficient optimality conditions for a control, evaluated
// on the lattice and compared against direct optimality.
OptimalityCriteria check_rbsde_optimality_criteria(const LatticeModel& model,
                                                   const AmbiguityFamily& family,
                                                   const AdaptedProcess& obstacle, NodeRef s,
                                                   const ControlProcess& control,
                                                   std::span<const double> eps_grid);

} // namespace bsdelab
