#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace bsdelab {

// Uniform grid on [0, T] with N steps, t_i = i * dt.
struct TimeGrid {
    double horizon = 1.0;
    int steps = 1;

    double dt() const { return horizon / steps; }
    double time(int i) const { return i == steps ? horizon : i * dt(); }
};

// Finitely many jump marks u_j with intensities lambda_j = nu({u_j}).
// Inner products and norms are the weighted sums replacing the L^2_nu integrals.
class MarkSet {
  public:
    MarkSet() = default;
    MarkSet(std::vector<double> marks, std::vector<double> intensities);

    int count() const { return static_cast<int>(marks_.size()); }
    double mark(int j) const { return marks_[static_cast<std::size_t>(j)]; }
    double intensity(int j) const { return intensities_[static_cast<std::size_t>(j)]; }
    double total_intensity() const { return total_; }

    // <a, b>_nu = sum_j a_j b_j lambda_j
    double inner(std::span<const double> a, std::span<const double> b) const;
    double norm_sq(std::span<const double> a) const;
    double norm(std::span<const double> a) const;

  private:
    std::vector<double> marks_;
    std::vector<double> intensities_;
    double total_ = 0.0;
};

// One outcome of the per-step noise template: probability, Brownian increment,
// and the mark index if the branch carries a jump (-1 otherwise).
struct Branch {
    double prob = 0.0;
    double brownian = 0.0;
    int mark = -1;
};

// Tree: non-recombining, node = full branch history (exact filtration).
// Markov: recombining by branch counts; adapted data must be state functions.
enum class NodeIndexing { Tree, Markov };

struct MartingaleCoefficients {
    double mean = 0.0;
    double z = 0.0;
    std::vector<double> k;
    double residual = 0.0; // sup norm of the representation residual
};

// Event lattice: a time grid, a mark set and one branch template reused at
// every step. Immutable after construction; all queries are pure.
class LatticeModel {
  public:
    LatticeModel(TimeGrid grid, MarkSet marks, std::vector<Branch> branches,
                 NodeIndexing indexing = NodeIndexing::Tree);

    const TimeGrid& grid() const { return grid_; }
    const MarkSet& marks() const { return marks_; }
    const std::vector<Branch>& branches() const { return branches_; }
    NodeIndexing indexing() const { return indexing_; }
    int branch_count() const { return static_cast<int>(branches_.size()); }
    int mark_count() const { return marks_.count(); }
    int steps() const { return grid_.steps; }
    double dt() const { return grid_.dt(); }
    bool complete() const { return complete_; }

    // Compensated one-step jump increment dN~_{b,j} = 1{mark_b = j} - lambda_j dt.
    double compensated_jump(int branch, int j) const;

    std::size_t node_count(int layer) const;
    std::size_t child(int layer, std::size_t node, int branch) const;

    // Markov mode: branch counts of a state; Tree mode: counts along the path.
    std::vector<int> branch_counts(int layer, std::size_t node) const;
    // Sum of Brownian increments along the path / state.
    double brownian_position(int layer, std::size_t node) const;
    // Jump counts per mark.
    std::vector<int> jump_counts(int layer, std::size_t node) const;
    // Branch digits of a Tree node, root = empty (Tree mode only).
    std::string node_label(int layer, std::size_t node) const;

    // P(node) for every node of a layer, in node order.
    std::vector<double> layer_probabilities(int layer) const;

    // E[next | node] = sum_b p_b v_b; one value per branch.
    double conditional_expectation(std::span<const double> child_values) const;

    // Solves v_b = m + z dW_b + sum_j k_j dN~_{b,j} (+ residual). Complete mode
    // inverts the square representation system; otherwise weighted least squares.
    MartingaleCoefficients martingale_coefficients(std::span<const double> child_values) const;

    // Empty iff all template invariants hold within tol. Reports, never throws.
    std::vector<std::string> validate(double tol = 1e-12) const;

  private:
    TimeGrid grid_;
    MarkSet marks_;
    std::vector<Branch> branches_;
    NodeIndexing indexing_;
    bool complete_ = false;
    // Row-major (J+2) x B solver: coefficients = solver_ * child_values.
    std::vector<double> solver_;
    // Markov tables: states_[layer] holds B counts per state, children_ the
    // state index reached by each branch.
    std::vector<std::vector<int>> states_;
    std::vector<std::vector<std::uint32_t>> children_;

    void build_solver();
    void build_markov_tables();
};

// Default branch template: one up / one down Brownian branch scaled so
// E[dW^2] = dt holds exactly next to the jump branches, one branch per mark.
LatticeModel build_default_lattice(double T, int N, const MarkSet& marks,
                                   NodeIndexing indexing = NodeIndexing::Tree);

// Per-node scalar field over the lattice layers. AdaptedProcess spans layers
// 0..N, PredictableProcess 0..N-1, JumpField stores J values per node.
struct NodeField {
    std::vector<std::vector<double>> layers;

    double& at(int layer, std::size_t node) { return layers[static_cast<std::size_t>(layer)][node]; }
    double at(int layer, std::size_t node) const { return layers[static_cast<std::size_t>(layer)][node]; }
    int layer_count() const { return static_cast<int>(layers.size()); }
    bool all_finite() const;
};

using AdaptedProcess = NodeField;
using PredictableProcess = NodeField;

NodeField make_adapted(const LatticeModel& model, double fill = 0.0);
NodeField make_predictable(const LatticeModel& model, double fill = 0.0);
// J values per node, node-major.
NodeField make_jump_field(const LatticeModel& model, double fill = 0.0);

// Structured-text (JSON) serialization; round-trips are bit-stable.
std::string lattice_to_json(const LatticeModel& model);
LatticeModel lattice_from_json(const std::string& text);

} // namespace bsdelab
