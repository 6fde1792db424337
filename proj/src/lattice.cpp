#include "bsdelab/lattice.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>

namespace bsdelab {

namespace {

// Total node budget for non-recombining trees; exact filtration enumeration is
// only meant for desk-scale instances.
constexpr std::size_t kMaxTreeNodes = std::size_t{1} << 23;

std::size_t ipow(std::size_t base, int exp) {
    std::size_t r = 1;
    for (int i = 0; i < exp; ++i) r *= base;
    return r;
}

} // namespace

MarkSet::MarkSet(std::vector<double> marks, std::vector<double> intensities)
    : marks_(std::move(marks)), intensities_(std::move(intensities)) {
    if (marks_.size() != intensities_.size())
        throw std::invalid_argument("MarkSet: marks and intensities must have equal length");
    for (std::size_t j = 0; j < marks_.size(); ++j) {
        if (!std::isfinite(marks_[j]) || !std::isfinite(intensities_[j]))
            throw std::invalid_argument("MarkSet: non-finite entry");
        if (intensities_[j] <= 0.0)
            throw std::invalid_argument("MarkSet: intensities must be positive");
        for (std::size_t i = 0; i < j; ++i)
            if (marks_[i] == marks_[j])
                throw std::invalid_argument("MarkSet: marks must be distinct");
        total_ += intensities_[j];
    }
}

double MarkSet::inner(std::span<const double> a, std::span<const double> b) const {
    double s = 0.0;
    for (int j = 0; j < count(); ++j)
        s += a[static_cast<std::size_t>(j)] * b[static_cast<std::size_t>(j)] * intensities_[static_cast<std::size_t>(j)];
    return s;
}

double MarkSet::norm_sq(std::span<const double> a) const { return inner(a, a); }

double MarkSet::norm(std::span<const double> a) const { return std::sqrt(norm_sq(a)); }

LatticeModel::LatticeModel(TimeGrid grid, MarkSet marks, std::vector<Branch> branches,
                           NodeIndexing indexing)
    : grid_(grid), marks_(std::move(marks)), branches_(std::move(branches)), indexing_(indexing) {
    if (grid_.steps < 1) throw std::invalid_argument("LatticeModel: need at least one step");
    if (grid_.horizon <= 0.0) throw std::invalid_argument("LatticeModel: horizon must be positive");
    if (branches_.empty()) throw std::invalid_argument("LatticeModel: empty branch template");
    for (const Branch& b : branches_) {
        if (!(b.prob > 0.0) || b.prob > 1.0)
            throw std::invalid_argument("LatticeModel: branch probabilities must lie in (0,1]");
        if (!std::isfinite(b.brownian))
            throw std::invalid_argument("LatticeModel: non-finite Brownian increment");
        if (b.mark >= marks_.count())
            throw std::invalid_argument("LatticeModel: branch references unknown mark");
    }
    if (marks_.total_intensity() * dt() >= 1.0)
        throw std::invalid_argument("LatticeModel: total jump intensity * dt must be < 1; refine the grid");
    if (indexing_ == NodeIndexing::Tree) {
        std::size_t total = 0, layer_nodes = 1;
        for (int i = 0; i <= grid_.steps; ++i) {
            total += layer_nodes;
            if (total > kMaxTreeNodes)
                throw std::invalid_argument(
                    "LatticeModel: non-recombining tree too large; use Markov indexing");
            if (i < grid_.steps) layer_nodes *= branches_.size();
        }
    } else {
        build_markov_tables();
    }
    build_solver();
}

double LatticeModel::compensated_jump(int branch, int j) const {
    const double indicator = branches_[static_cast<std::size_t>(branch)].mark == j ? 1.0 : 0.0;
    return indicator - marks_.intensity(j) * dt();
}

void LatticeModel::build_solver() {
    const int B = branch_count();
    const int unknowns = mark_count() + 2;
    Eigen::MatrixXd rep(B, unknowns);
    for (int b = 0; b < B; ++b) {
        rep(b, 0) = 1.0;
        rep(b, 1) = branches_[static_cast<std::size_t>(b)].brownian;
        for (int j = 0; j < mark_count(); ++j) rep(b, 2 + j) = compensated_jump(b, j);
    }
    Eigen::MatrixXd solver;
    complete_ = false;
    if (B == unknowns) {
        Eigen::FullPivLU<Eigen::MatrixXd> lu(rep);
        if (lu.isInvertible()) {
            solver = lu.inverse();
            complete_ = true;
        }
    }
    if (!complete_) {
        // Weighted least squares: x = (sqrt(W) rep)^+ sqrt(W) v.
        Eigen::VectorXd w(B);
        for (int b = 0; b < B; ++b) w(b) = std::sqrt(branches_[static_cast<std::size_t>(b)].prob);
        Eigen::MatrixXd scaled = w.asDiagonal() * rep;
        Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(scaled);
        solver = cod.pseudoInverse() * Eigen::MatrixXd(w.asDiagonal());
    }
    solver_.assign(static_cast<std::size_t>(unknowns) * B, 0.0);
    for (int r = 0; r < unknowns; ++r)
        for (int b = 0; b < B; ++b) solver_[static_cast<std::size_t>(r) * B + b] = solver(r, b);
}

void LatticeModel::build_markov_tables() {
    const int B = branch_count();
    states_.resize(static_cast<std::size_t>(grid_.steps) + 1);
    children_.resize(static_cast<std::size_t>(grid_.steps));
    states_[0] = std::vector<int>(static_cast<std::size_t>(B), 0);
    std::map<std::vector<int>, std::uint32_t> index;
    for (int layer = 0; layer < grid_.steps; ++layer) {
        index.clear();
        const auto& cur = states_[static_cast<std::size_t>(layer)];
        auto& next = states_[static_cast<std::size_t>(layer) + 1];
        auto& kids = children_[static_cast<std::size_t>(layer)];
        const std::size_t n_cur = cur.size() / B;
        kids.assign(n_cur * B, 0);
        std::vector<int> counts(static_cast<std::size_t>(B));
        for (std::size_t s = 0; s < n_cur; ++s) {
            for (int b = 0; b < B; ++b) counts[static_cast<std::size_t>(b)] = cur[s * B + b];
            for (int b = 0; b < B; ++b) {
                counts[static_cast<std::size_t>(b)] += 1;
                auto [it, inserted] = index.try_emplace(counts, static_cast<std::uint32_t>(index.size()));
                if (inserted) next.insert(next.end(), counts.begin(), counts.end());
                kids[s * B + static_cast<std::size_t>(b)] = it->second;
                counts[static_cast<std::size_t>(b)] -= 1;
            }
        }
    }
}

std::size_t LatticeModel::node_count(int layer) const {
    if (indexing_ == NodeIndexing::Tree)
        return ipow(static_cast<std::size_t>(branch_count()), layer);
    return states_[static_cast<std::size_t>(layer)].size() / branch_count();
}

std::size_t LatticeModel::child(int layer, std::size_t node, int branch) const {
    if (indexing_ == NodeIndexing::Tree)
        return node * branch_count() + static_cast<std::size_t>(branch);
    return children_[static_cast<std::size_t>(layer)][node * branch_count() + static_cast<std::size_t>(branch)];
}

std::vector<int> LatticeModel::branch_counts(int layer, std::size_t node) const {
    const int B = branch_count();
    std::vector<int> counts(static_cast<std::size_t>(B), 0);
    if (indexing_ == NodeIndexing::Tree) {
        std::size_t n = node;
        for (int i = 0; i < layer; ++i) {
            counts[n % B] += 1;
            n /= B;
        }
    } else {
        const auto& s = states_[static_cast<std::size_t>(layer)];
        for (int b = 0; b < B; ++b) counts[static_cast<std::size_t>(b)] = s[node * B + static_cast<std::size_t>(b)];
    }
    return counts;
}

double LatticeModel::brownian_position(int layer, std::size_t node) const {
    const auto counts = branch_counts(layer, node);
    double w = 0.0;
    for (int b = 0; b < branch_count(); ++b)
        w += counts[static_cast<std::size_t>(b)] * branches_[static_cast<std::size_t>(b)].brownian;
    return w;
}

std::vector<int> LatticeModel::jump_counts(int layer, std::size_t node) const {
    const auto counts = branch_counts(layer, node);
    std::vector<int> jumps(static_cast<std::size_t>(mark_count()), 0);
    for (int b = 0; b < branch_count(); ++b)
        if (branches_[static_cast<std::size_t>(b)].mark >= 0)
            jumps[static_cast<std::size_t>(branches_[static_cast<std::size_t>(b)].mark)] +=
                counts[static_cast<std::size_t>(b)];
    return jumps;
}

std::string LatticeModel::node_label(int layer, std::size_t node) const {
    if (indexing_ != NodeIndexing::Tree)
        throw std::invalid_argument("node_label: only defined for tree indexing");
    std::string digits(static_cast<std::size_t>(layer), '0');
    std::size_t n = node;
    for (int i = layer - 1; i >= 0; --i) {
        digits[static_cast<std::size_t>(i)] = static_cast<char>('0' + static_cast<int>(n % branch_count()));
        n /= branch_count();
    }
    return digits;
}

std::vector<double> LatticeModel::layer_probabilities(int layer) const {
    std::vector<double> probs{1.0};
    for (int i = 0; i < layer; ++i) {
        std::vector<double> next(node_count(i + 1), 0.0);
        for (std::size_t n = 0; n < probs.size(); ++n)
            for (int b = 0; b < branch_count(); ++b)
                next[child(i, n, b)] += probs[n] * branches_[static_cast<std::size_t>(b)].prob;
        probs = std::move(next);
    }
    return probs;
}

double LatticeModel::conditional_expectation(std::span<const double> child_values) const {
    if (child_values.size() != static_cast<std::size_t>(branch_count()))
        throw std::invalid_argument("conditional_expectation: one value per branch required");
    double s = 0.0;
    for (int b = 0; b < branch_count(); ++b)
        s += branches_[static_cast<std::size_t>(b)].prob * child_values[static_cast<std::size_t>(b)];
    return s;
}

MartingaleCoefficients LatticeModel::martingale_coefficients(std::span<const double> child_values) const {
    const int B = branch_count();
    const int J = mark_count();
    if (child_values.size() != static_cast<std::size_t>(B))
        throw std::invalid_argument("martingale_coefficients: one value per branch required");
    MartingaleCoefficients out;
    out.k.assign(static_cast<std::size_t>(J), 0.0);
    std::vector<double> x(static_cast<std::size_t>(J) + 2, 0.0);
    for (int r = 0; r < J + 2; ++r) {
        double s = 0.0;
        for (int b = 0; b < B; ++b)
            s += solver_[static_cast<std::size_t>(r) * B + b] * child_values[static_cast<std::size_t>(b)];
        x[static_cast<std::size_t>(r)] = s;
    }
    out.mean = x[0];
    out.z = x[1];
    for (int j = 0; j < J; ++j) out.k[static_cast<std::size_t>(j)] = x[static_cast<std::size_t>(j) + 2];
    for (int b = 0; b < B; ++b) {
        double fit = out.mean + out.z * branches_[static_cast<std::size_t>(b)].brownian;
        for (int j = 0; j < J; ++j) fit += out.k[static_cast<std::size_t>(j)] * compensated_jump(b, j);
        out.residual = std::max(out.residual, std::abs(child_values[static_cast<std::size_t>(b)] - fit));
    }
    return out;
}

std::vector<std::string> LatticeModel::validate(double tol) const {
    std::vector<std::string> violations;
    auto report = [&](const std::string& what, double err) {
        std::ostringstream os;
        os << what << " (error " << err << ")";
        violations.push_back(os.str());
    };
    const int B = branch_count();
    const int J = mark_count();
    double psum = 0.0, wmean = 0.0, wvar = 0.0;
    for (const Branch& b : branches_) {
        psum += b.prob;
        wmean += b.prob * b.brownian;
        wvar += b.prob * b.brownian * b.brownian;
    }
    if (std::abs(psum - 1.0) > tol) report("branch probabilities do not sum to 1", psum - 1.0);
    if (std::abs(wmean) > tol) report("E[dW] != 0", wmean);
    if (std::abs(wvar - dt()) > tol) report("E[dW^2] != dt", wvar - dt());
    for (int j = 0; j < J; ++j) {
        double pj = 0.0, ortho = 0.0;
        for (int b = 0; b < B; ++b) {
            if (branches_[static_cast<std::size_t>(b)].mark == j) pj += branches_[static_cast<std::size_t>(b)].prob;
            ortho += branches_[static_cast<std::size_t>(b)].prob *
                     branches_[static_cast<std::size_t>(b)].brownian * compensated_jump(b, j);
        }
        if (std::abs(pj - marks_.intensity(j) * dt()) > tol)
            report("jump branch mass != lambda_j dt for mark " + std::to_string(j),
                   pj - marks_.intensity(j) * dt());
        if (std::abs(ortho) > tol)
            report("E[dW dN~_j] != 0 for mark " + std::to_string(j), ortho);
    }
    if (B == J + 2 && !complete_)
        report("representation matrix singular although B = J + 2", 0.0);
    return violations;
}

LatticeModel build_default_lattice(double T, int N, const MarkSet& marks, NodeIndexing indexing) {
    if (N < 1) throw std::invalid_argument("build_default_lattice: N >= 1 required");
    const double dt = T / N;
    const double jump_mass = marks.total_intensity() * dt;
    if (jump_mass >= 1.0)
        throw std::invalid_argument(
            "build_default_lattice: lambda * dt >= 1 makes probabilities invalid; refine the grid");
    std::vector<Branch> branches;
    const double h = std::sqrt(dt / (1.0 - jump_mass));
    branches.push_back({(1.0 - jump_mass) / 2.0, h, -1});
    branches.push_back({(1.0 - jump_mass) / 2.0, -h, -1});
    for (int j = 0; j < marks.count(); ++j)
        branches.push_back({marks.intensity(j) * dt, 0.0, j});
    return LatticeModel(TimeGrid{T, N}, marks, std::move(branches), indexing);
}

bool NodeField::all_finite() const {
    for (const auto& layer : layers)
        for (double v : layer)
            if (!std::isfinite(v)) return false;
    return true;
}

NodeField make_adapted(const LatticeModel& model, double fill) {
    NodeField f;
    f.layers.resize(static_cast<std::size_t>(model.steps()) + 1);
    for (int i = 0; i <= model.steps(); ++i)
        f.layers[static_cast<std::size_t>(i)].assign(model.node_count(i), fill);
    return f;
}

NodeField make_predictable(const LatticeModel& model, double fill) {
    NodeField f;
    f.layers.resize(static_cast<std::size_t>(model.steps()));
    for (int i = 0; i < model.steps(); ++i)
        f.layers[static_cast<std::size_t>(i)].assign(model.node_count(i), fill);
    return f;
}

NodeField make_jump_field(const LatticeModel& model, double fill) {
    NodeField f;
    f.layers.resize(static_cast<std::size_t>(model.steps()));
    for (int i = 0; i < model.steps(); ++i)
        f.layers[static_cast<std::size_t>(i)].assign(
            model.node_count(i) * static_cast<std::size_t>(model.mark_count()), fill);
    return f;
}

std::string lattice_to_json(const LatticeModel& model) {
    nlohmann::json doc;
    doc["T"] = model.grid().horizon;
    doc["N"] = model.grid().steps;
    nlohmann::json marks = nlohmann::json::array();
    for (int j = 0; j < model.mark_count(); ++j)
        marks.push_back({{"u", model.marks().mark(j)}, {"lambda", model.marks().intensity(j)}});
    doc["marks"] = marks;
    doc["indexing"] = model.indexing() == NodeIndexing::Tree ? "tree" : "markov";
    const LatticeModel ref = build_default_lattice(model.grid().horizon, model.grid().steps,
                                                   model.marks(), model.indexing());
    bool is_default = ref.branch_count() == model.branch_count();
    for (int b = 0; is_default && b < model.branch_count(); ++b) {
        const Branch& a = model.branches()[static_cast<std::size_t>(b)];
        const Branch& d = ref.branches()[static_cast<std::size_t>(b)];
        is_default = a.prob == d.prob && a.brownian == d.brownian && a.mark == d.mark;
    }
    doc["mode"] = is_default ? "default" : "custom";
    if (!is_default) {
        nlohmann::json branches = nlohmann::json::array();
        for (const Branch& b : model.branches()) {
            nlohmann::json jb = {{"p", b.prob}, {"dW", b.brownian}};
            if (b.mark >= 0) jb["mark"] = b.mark;
            branches.push_back(jb);
        }
        doc["branches"] = branches;
    }
    return doc.dump(2);
}

LatticeModel lattice_from_json(const std::string& text) {
    const nlohmann::json doc = nlohmann::json::parse(text);
    std::vector<double> us, lambdas;
    for (const auto& m : doc.at("marks")) {
        us.push_back(m.at("u").get<double>());
        lambdas.push_back(m.at("lambda").get<double>());
    }
    MarkSet marks(std::move(us), std::move(lambdas));
    const double T = doc.at("T").get<double>();
    const int N = doc.at("N").get<int>();
    const NodeIndexing indexing =
        doc.value("indexing", "tree") == std::string("markov") ? NodeIndexing::Markov : NodeIndexing::Tree;
    if (doc.at("mode").get<std::string>() == "default")
        return build_default_lattice(T, N, marks, indexing);
    std::vector<Branch> branches;
    for (const auto& jb : doc.at("branches"))
        branches.push_back({jb.at("p").get<double>(), jb.at("dW").get<double>(), jb.value("mark", -1)});
    return LatticeModel(TimeGrid{T, N}, marks, std::move(branches), indexing);
}

} // namespace bsdelab
