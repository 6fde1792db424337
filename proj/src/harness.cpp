#include "bsdelab/harness.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace bsdelab {

namespace {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Seeded instance generators. Everything derives from RandomSource so suite
// reports are byte-identical across runs.

struct SmoothField {
    double level, wave_amp, wave_freq, wave_phase, trend, jump_amp;

    double operator()(double t, double w, int jumps) const {
        return level + wave_amp * std::sin(wave_freq * w + wave_phase) + trend * t +
               jump_amp * std::tanh(0.5 * jumps);
    }
};

SmoothField random_smooth_field(RandomSource& rng, double scale) {
    return SmoothField{rng.uniform(-scale, scale),      rng.uniform(0.2, 1.0) * scale,
                       rng.uniform(0.5, 2.0),           rng.uniform(0.0, 6.28),
                       rng.uniform(-0.5, 0.5) * scale,  rng.uniform(-0.6, 0.6) * scale};
}

AdaptedProcess field_obstacle(const LatticeModel& model, const SmoothField& field) {
    AdaptedProcess xi = make_adapted(model);
    for (int i = 0; i <= model.steps(); ++i)
        for (std::size_t n = 0; n < model.node_count(i); ++n) {
            const auto jumps = model.jump_counts(i, n);
            const int total = jumps.empty() ? 0 : jumps[0];
            xi.at(i, n) = field(model.grid().time(i), model.brownian_position(i, n), total);
        }
    return xi;
}

AdaptedProcess random_walk_obstacle(const LatticeModel& model, RandomSource& rng, double scale,
                                    double lo, double hi) {
    AdaptedProcess xi = make_adapted(model);
    xi.layers[0][0] = std::clamp(rng.uniform(-scale, scale), lo, hi);
    for (int i = 0; i < model.steps(); ++i)
        for (std::size_t n = 0; n < model.node_count(i); ++n)
            for (int b = 0; b < model.branch_count(); ++b)
                xi.at(i + 1, model.child(i, n, b)) = std::clamp(
                    xi.at(i, n) + rng.uniform(-scale, scale) * std::sqrt(model.dt()), lo, hi);
    return xi;
}

AdaptedProcess martingale_obstacle(const LatticeModel& model, RandomSource& rng, double scale) {
    AdaptedProcess xi = make_adapted(model);
    const int N = model.steps();
    for (std::size_t n = 0; n < model.node_count(N); ++n) xi.at(N, n) = rng.uniform(-scale, scale);
    std::vector<double> child(static_cast<std::size_t>(model.branch_count()));
    for (int i = N - 1; i >= 0; --i)
        for (std::size_t n = 0; n < model.node_count(i); ++n) {
            for (int b = 0; b < model.branch_count(); ++b)
                child[static_cast<std::size_t>(b)] = xi.at(i + 1, model.child(i, n, b));
            xi.at(i, n) = model.conditional_expectation(child);
        }
    return xi;
}

struct DriverCoefficients {
    double a, b, r0, r1;
    std::vector<double> gamma;
};

DriverCoefficients random_driver_coefficients(RandomSource& rng, int marks) {
    DriverCoefficients c;
    c.a = rng.uniform(-0.4, 0.4);
    c.b = rng.uniform(-0.4, 0.4);
    c.r0 = rng.uniform(-0.5, 0.5);
    c.r1 = rng.uniform(-0.4, 0.4);
    for (int j = 0; j < marks; ++j) c.gamma.push_back(rng.uniform(-0.4, 0.9));
    return c;
}

DriverSpec driver_from_coefficients(const TimeGrid& grid, const MarkSet& marks,
                                    const DriverCoefficients& c) {
    return make_affine_driver(grid, marks, c.a, c.b, c.gamma, c.r0, c.r1);
}

MarkSet random_marks(RandomSource& rng, bool with_jump) {
    if (!with_jump) return MarkSet{};
    return MarkSet({rng.uniform(0.5, 1.5)}, {rng.uniform(0.2, 0.5)});
}

void fold(PropertyResult& p, double residual, bool ok) {
    p.instances += 1;
    p.max_residual = std::max(p.max_residual, residual);
    p.pass = p.pass && ok;
}

} // namespace

SuiteReport comparison_suite(std::uint64_t seed, int instances) {
    SuiteReport report;
    report.name = "comparison";
    PropertyResult order{"pointwise_order", 0, 0.0, true, "max of Y2 - Y1 over nodes"};
    PropertyResult equal{"equal_pair_equality", 0, 0.0, true, "max |Y1 - Y2| for identical pairs"};
    PropertyResult strict{"strict_separation", 0, 0.0, true,
                          "max of (bound - gap); negative means the recorded bound held"};

    RandomSource root(seed);
    for (int inst = 0; inst < instances; ++inst) {
        RandomSource rng = root.split();
        const bool with_jump = inst % 2 == 1;
        const MarkSet marks = random_marks(rng, with_jump);
        const int steps = with_jump ? 2 + inst % 2 : 3 + inst % 2;
        const LatticeModel model = build_default_lattice(rng.uniform(0.5, 1.5), steps, marks);
        DriverCoefficients low = random_driver_coefficients(rng, marks.count());
        DriverCoefficients high = low;
        high.r0 += rng.uniform(0.0, 1.0);
        const DriverSpec f2 = driver_from_coefficients(model.grid(), marks, low);
        const DriverSpec f1 = driver_from_coefficients(model.grid(), marks, high);
        AdaptedProcess xi2 = random_walk_obstacle(model, rng, 1.0, -5.0, 5.0);
        AdaptedProcess xi1 = xi2;
        for (auto& layer : xi1.layers)
            for (double& v : layer) v += rng.uniform(0.0, 0.5);
        const auto s1 = solve_rbsde(model, f1, xi1);
        const auto s2 = solve_rbsde(model, f2, xi2);
        double violation = -std::numeric_limits<double>::infinity();
        for (int i = 0; i <= model.steps(); ++i)
            for (std::size_t n = 0; n < model.node_count(i); ++n)
                violation = std::max(violation, s2.y.at(i, n) - s1.y.at(i, n));
        fold(order, violation, violation <= 0.0);

        // Identical pair built twice from the same coefficients.
        const DriverSpec f2b = driver_from_coefficients(model.grid(), marks, low);
        const auto s2b = solve_rbsde(model, f2b, xi2);
        double equality_gap = 0.0;
        for (int i = 0; i <= model.steps(); ++i)
            for (std::size_t n = 0; n < model.node_count(i); ++n)
                equality_gap = std::max(equality_gap, std::abs(s2.y.at(i, n) - s2b.y.at(i, n)));
        fold(equal, equality_gap, equality_gap == 0.0);
    }

    RandomSource strict_root(seed + 1);
    for (int inst = 0; inst < std::max(instances / 5, 3); ++inst) {
        RandomSource rng = strict_root.split();
        const bool with_jump = inst % 2 == 1;
        const MarkSet marks = random_marks(rng, with_jump);
        const int steps = with_jump ? 3 : 4;
        const LatticeModel model = build_default_lattice(1.0, steps, marks);
        DriverCoefficients low = random_driver_coefficients(rng, marks.count());
        DriverCoefficients high = low;
        const double delta = rng.uniform(0.2, 0.6);
        high.r0 += delta;
        const DriverSpec f2 = driver_from_coefficients(model.grid(), marks, low);
        const DriverSpec f1 = driver_from_coefficients(model.grid(), marks, high);
        // Obstacle inactive before the horizon: the drivers stay delta-apart on
        // the whole pre-horizon region, forcing a strict root gap.
        AdaptedProcess xi = random_walk_obstacle(model, rng, 0.5, -2.0, 2.0);
        for (int i = 0; i < model.steps(); ++i)
            for (std::size_t n = 0; n < model.node_count(i); ++n) xi.at(i, n) -= 50.0;
        const auto s1 = solve_rbsde(model, f1, xi);
        const auto s2 = solve_rbsde(model, f2, xi);
        const double gap = s1.y.at(0, 0) - s2.y.at(0, 0);
        const double bound = delta * model.dt() * (1.0 - f1.lipschitz() * model.dt());
        fold(strict, bound - gap, gap > 0.0 && gap >= bound);
    }

    report.properties = {order, equal, strict};
    return report;
}

SuiteReport characterization_suite(std::uint64_t seed, int instances) {
    SuiteReport report;
    report.name = "characterization";
    PropertyResult root_match{"rbsde_equals_oracle_at_root", 0, 0.0, true, "|Y_0 - max over rules|"};
    PropertyResult node_match{"rbsde_equals_oracle_at_every_node", 0, 0.0, true,
                              "max over query nodes"};
    PropertyResult path_sum{"time_driver_matches_path_sum_oracle", 0, 0.0, true,
                            "solver-free expectation oracle"};
    PropertyResult closed{"deterministic_obstacles_closed_form", 0, 0.0, true, ""};

    RandomSource root(seed);
    for (int inst = 0; inst < instances; ++inst) {
        RandomSource rng = root.split();
        const bool with_jump = inst % 2 == 1;
        const MarkSet marks = random_marks(rng, with_jump);
        const int steps = with_jump ? 2 + inst % 2 : 3 + inst % 2;
        const LatticeModel model = build_default_lattice(rng.uniform(0.5, 1.5), steps, marks);
        const DriverSpec driver = driver_from_coefficients(
            model.grid(), marks, random_driver_coefficients(rng, marks.count()));
        const AdaptedProcess xi = random_walk_obstacle(model, rng, 1.0, -4.0, 4.0);
        const auto sol = solve_rbsde(model, driver, xi);

        const auto oracle = brute_force_value(model, driver, xi, NodeRef{0, 0});
        fold(root_match, std::abs(sol.y.at(0, 0) - oracle.value),
             std::abs(sol.y.at(0, 0) - oracle.value) <= 1e-10);

        double node_gap = 0.0;
        for (int layer = 0; layer <= model.steps(); ++layer)
            for (std::size_t n = 0; n < model.node_count(layer); ++n) {
                const auto sub = brute_force_value(model, driver, xi, NodeRef{layer, n});
                node_gap = std::max(node_gap, std::abs(sol.y.at(layer, n) - sub.value));
            }
        fold(node_match, node_gap, node_gap <= 1e-10);

        // Time-only driver: compare against plain conditional expectations.
        const double f0 = rng.uniform(-0.5, 0.5), f1 = rng.uniform(-0.5, 0.5);
        PredictableProcess reward = make_predictable(model);
        for (int i = 0; i < model.steps(); ++i)
            std::fill(reward.layers[static_cast<std::size_t>(i)].begin(),
                      reward.layers[static_cast<std::size_t>(i)].end(),
                      f0 + f1 * model.grid().time(i));
        const auto snell = snell_envelope(model, reward, xi);
        double best = -std::numeric_limits<double>::infinity();
        for_each_stopping_rule(model, NodeRef{0, 0}, EnumerationCaps{},
                               [&](const StoppingRule& rule) {
            double value = 0.0;
            std::vector<std::pair<std::size_t, double>> frontier{{0, 1.0}}, next;
            for (int i = 0; i <= model.steps(); ++i) {
                next.clear();
                for (const auto& [node, prob] : frontier) {
                    if (rule.stops_at(i, node, model.steps())) {
                        value += prob * xi.at(i, node);
                        continue;
                    }
                    for (int b = 0; b < model.branch_count(); ++b)
                        next.emplace_back(model.child(i, node, b),
                                          prob * model.branches()[static_cast<std::size_t>(b)].prob);
                }
                if (i < model.steps()) {
                    double alive = 0.0;
                    for (const auto& [node, prob] : next) alive += prob;
                    value += alive * (f0 + f1 * model.grid().time(i)) * model.dt();
                }
                frontier.swap(next);
            }
            best = std::max(best, value);
        });
        fold(path_sum, std::abs(snell.y.at(0, 0) - best),
             std::abs(snell.y.at(0, 0) - best) <= 1e-10);
    }

    // Deterministic ramps: nonincreasing stays on the obstacle, increasing
    // waits for the final value.
    {
        RandomSource rng(seed + 2);
        const LatticeModel model = build_default_lattice(1.0, 4, MarkSet{});
        const DriverSpec zero = make_zero_driver(0);
        AdaptedProcess down = make_adapted(model), up = make_adapted(model);
        const double base = rng.uniform(0.5, 2.0);
        for (int i = 0; i <= 4; ++i) {
            std::fill(down.layers[static_cast<std::size_t>(i)].begin(),
                      down.layers[static_cast<std::size_t>(i)].end(), base - 0.3 * i);
            std::fill(up.layers[static_cast<std::size_t>(i)].begin(),
                      up.layers[static_cast<std::size_t>(i)].end(), base + 0.3 * i);
        }
        const auto sd = solve_rbsde(model, zero, down);
        const auto su = solve_rbsde(model, zero, up);
        double gap = 0.0;
        for (int i = 0; i <= 4; ++i)
            for (std::size_t n = 0; n < model.node_count(i); ++n) {
                gap = std::max(gap, std::abs(sd.y.at(i, n) - down.at(i, n)));
                gap = std::max(gap, std::abs(su.y.at(i, n) - (base + 0.3 * 4)));
            }
        fold(closed, gap, gap <= 1e-12);
    }

    report.properties = {root_match, node_match, path_sum, closed};
    return report;
}

SuiteReport estimates_suite(std::uint64_t seed, int instances) {
    SuiteReport report;
    report.name = "estimates";
    PropertyResult contraction{"contraction_ratio", 0, 0.0, true,
                               "eta = 1/((T+2)4C^2), beta = 3/eta + 2C; ratio <= 0.55"};
    PropertyResult pointwise{"apriori_pointwise_positive_part", 0, 0.0, true,
                             "max(0, lhs - rhs) <= c0 dt with c0 = 1"};
    PropertyResult integrated{"apriori_integrated_forms", 0, 0.0, true,
                              "positive part of the Y and (Z,K) integral estimates"};
    PropertyResult trend{"apriori_refinement_trend", 0, 0.0, true,
                         "positive parts at N=32 vs 64: below floor or ratio in [0.375, 0.625]"};
    PropertyResult zero_pair{"identical_pair_zero_residuals", 0, 0.0, true, ""};

    RandomSource root(seed);
    for (int inst = 0; inst < instances; ++inst) {
        RandomSource rng = root.split();
        const bool with_jump = inst % 2 == 1;
        const MarkSet marks = random_marks(rng, with_jump);
        const double horizon = 1.0;

        DriverCoefficients low = random_driver_coefficients(rng, marks.count());
        DriverCoefficients high = low;
        high.r0 += rng.uniform(0.2, 0.8);
        const SmoothField obstacle_field = random_smooth_field(rng, 1.0);
        const SmoothField u_field = random_smooth_field(rng, 1.0);
        const SmoothField v_field = random_smooth_field(rng, 1.0);
        const SmoothField l_field = random_smooth_field(rng, 1.0);
        const SmoothField u2_field = random_smooth_field(rng, 1.0);
        const SmoothField v2_field = random_smooth_field(rng, 1.0);
        const SmoothField l2_field = random_smooth_field(rng, 1.0);

        double v32_point = 0.0, v64_point = 0.0, v32_zk = 0.0, v64_zk = 0.0;
        for (const int n_steps : {16, 32, 64}) {
            const LatticeModel model =
                build_default_lattice(horizon, n_steps, marks, NodeIndexing::Markov);
            const DriverSpec f1 = driver_from_coefficients(model.grid(), marks, high);
            const DriverSpec f2 = driver_from_coefficients(model.grid(), marks, low);
            const double c = std::max({f1.lipschitz(), f2.lipschitz(), 0.2});
            const AdaptedProcess obstacle = field_obstacle(model, obstacle_field);

            // Contraction of the frozen-driver reflected map.
            const double eta_c = 1.0 / ((horizon + 2.0) * 4.0 * c * c);
            const double beta_c = 3.0 / eta_c + 2.0 * c;
            auto triple = [&](const SmoothField& fu, const SmoothField& fv, const SmoothField& fl) {
                TripleProcess tp;
                tp.u = make_predictable(model);
                tp.v = make_predictable(model);
                tp.l = make_jump_field(model);
                for (int i = 0; i < model.steps(); ++i)
                    for (std::size_t n = 0; n < model.node_count(i); ++n) {
                        const double t = model.grid().time(i);
                        const double w = model.brownian_position(i, n);
                        const auto jumps = model.jump_counts(i, n);
                        const int total = jumps.empty() ? 0 : jumps[0];
                        tp.u.at(i, n) = fu(t, w, total);
                        tp.v.at(i, n) = fv(t, w, total);
                        for (int j = 0; j < model.mark_count(); ++j)
                            tp.l.layers[static_cast<std::size_t>(i)]
                                       [n * static_cast<std::size_t>(model.mark_count()) +
                                        static_cast<std::size_t>(j)] = fl(t, w, total);
                    }
                return tp;
            };
            const double ratio = picard_contraction_ratio(
                model, f1, obstacle, triple(u_field, v_field, l_field),
                triple(u2_field, v2_field, l2_field), beta_c);
            fold(contraction, ratio, ratio <= 0.55);

            // Pointwise estimate at eta = 1/C^2, beta = 3C^2 + 2C.
            const EstimateParams point_params{1.0 / (c * c), 3.0 * c * c + 2.0 * c, c};
            const auto point_report = apriori_gap_check(
                model, f1, f2, obstacle.layers[static_cast<std::size_t>(n_steps)], point_params,
                1.0, &obstacle);
            const double point_pos = std::max(0.0, point_report.pointwise_violation);
            fold(pointwise, point_pos, point_report.pointwise_pass);

            // Integrated (Z, K) estimate needs eta < 1/C^2.
            const EstimateParams zk_params{0.5 / (c * c), 6.0 * c * c + 2.0 * c, c};
            const auto zk_report = apriori_gap_check(
                model, f1, f2, obstacle.layers[static_cast<std::size_t>(n_steps)], zk_params, 1.0,
                &obstacle);
            const double zk_pos =
                std::max({0.0, zk_report.integrated_y_lhs - zk_report.integrated_y_rhs,
                          zk_report.integrated_zk_lhs - zk_report.integrated_zk_rhs});
            fold(integrated, zk_pos, zk_report.integrated_pass);

            if (n_steps == 32) {
                v32_point = point_pos;
                v32_zk = zk_pos;
            } else if (n_steps == 64) {
                v64_point = point_pos;
                v64_zk = zk_pos;
            }
        }
        // First-order trend on the positive parts, vacuous when both sit at 0.
        const double floor = 1e-13;
        auto trend_ok = [floor](double coarse, double fine) {
            if (coarse <= floor && fine <= floor) return true;
            if (coarse <= floor) return false;
            const double ratio = fine / coarse;
            return ratio >= 0.375 && ratio <= 0.625;
        };
        fold(trend, std::max(v64_point, v64_zk),
             trend_ok(v32_point, v64_point) && trend_ok(v32_zk, v64_zk));
    }

    // Identical drivers: every residual is exactly zero.
    {
        RandomSource rng(seed + 3);
        const MarkSet marks({1.0}, {0.3});
        const LatticeModel model = build_default_lattice(1.0, 16, marks, NodeIndexing::Markov);
        const DriverSpec f = driver_from_coefficients(model.grid(), marks,
                                                      random_driver_coefficients(rng, 1));
        const AdaptedProcess obstacle = field_obstacle(model, random_smooth_field(rng, 1.0));
        const double c = std::max(f.lipschitz(), 0.2);
        const EstimateParams params{1.0 / (c * c), 3.0 * c * c + 2.0 * c, c};
        const auto rep = apriori_gap_check(model, f, f,
                                           obstacle.layers[static_cast<std::size_t>(16)], params,
                                           1.0, &obstacle);
        const double worst = std::max(rep.integrated_y_lhs, std::max(0.0, rep.pointwise_violation));
        fold(zero_pair, worst, rep.pointwise_violation <= 0.0 && rep.integrated_y_lhs == 0.0);
    }

    report.properties = {contraction, pointwise, integrated, trend, zero_pair};
    return report;
}

// ---------------------------------------------------------------------------
// Rendering and experiment running.

namespace {

json property_to_json(const PropertyResult& p) {
    json j;
    j["name"] = p.name;
    j["instances"] = p.instances;
    j["max_residual"] = p.max_residual;
    j["pass"] = p.pass;
    if (!p.note.empty()) j["note"] = p.note;
    return j;
}

json suite_to_json(const SuiteReport& suite) {
    json j;
    j["name"] = suite.name;
    j["pass"] = suite.pass();
    json props = json::array();
    for (const auto& p : suite.properties) props.push_back(property_to_json(p));
    j["properties"] = props;
    return j;
}

std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string node_tag(const LatticeModel& model, int layer, std::size_t node) {
    if (model.indexing() == NodeIndexing::Tree) return model.node_label(layer, node);
    const auto counts = model.branch_counts(layer, node);
    std::string tag;
    for (std::size_t b = 0; b < counts.size(); ++b) {
        if (b) tag += '-';
        tag += std::to_string(counts[b]);
    }
    return tag;
}

void write_solution_csv(const std::string& path, const LatticeModel& model,
                        const AdaptedProcess& y, const PredictableProcess* z, const NodeField* k,
                        const PredictableProcess* push) {
    std::ofstream out(path);
    out << "layer,node,label,t,Y";
    if (z != nullptr) out << ",Z";
    const int J = model.mark_count();
    if (k != nullptr)
        for (int j = 0; j < J; ++j) out << ",K" << (j + 1);
    if (push != nullptr) out << ",A,dA";
    out << "\n";
    AdaptedProcess cumulative;
    if (push != nullptr) {
        cumulative = make_adapted(model);
        for (int i = 0; i < model.steps(); ++i)
            for (std::size_t n = 0; n < model.node_count(i); ++n)
                for (int b = 0; b < model.branch_count(); ++b)
                    cumulative.at(i + 1, model.child(i, n, b)) =
                        cumulative.at(i, n) + push->at(i, n);
    }
    for (int i = 0; i <= model.steps(); ++i)
        for (std::size_t n = 0; n < model.node_count(i); ++n) {
            out << i << ',' << n << ',' << node_tag(model, i, n) << ','
                << format_double(model.grid().time(i)) << ',' << format_double(y.at(i, n));
            const bool interior = i < model.steps();
            if (z != nullptr) out << ',' << (interior ? format_double(z->at(i, n)) : "");
            if (k != nullptr)
                for (int j = 0; j < J; ++j)
                    out << ','
                        << (interior ? format_double(
                                           k->layers[static_cast<std::size_t>(i)]
                                                    [n * static_cast<std::size_t>(J) +
                                                     static_cast<std::size_t>(j)])
                                     : "");
            if (push != nullptr) {
                out << ',' << format_double(cumulative.at(i, n)) << ','
                    << (interior ? format_double(push->at(i, n)) : "");
            }
            out << "\n";
        }
}

void write_solution_json(const std::string& path, const LatticeModel& model,
                         const AdaptedProcess& y, const PredictableProcess* z, const NodeField* k,
                         const PredictableProcess* push) {
    json doc;
    doc["model"] = json::parse(lattice_to_json(model));
    json layers = json::array();
    const int J = model.mark_count();
    for (int i = 0; i <= model.steps(); ++i) {
        json layer;
        layer["layer"] = i;
        layer["t"] = model.grid().time(i);
        layer["Y"] = y.layers[static_cast<std::size_t>(i)];
        if (i < model.steps()) {
            if (z != nullptr) layer["Z"] = z->layers[static_cast<std::size_t>(i)];
            if (k != nullptr && J > 0) layer["K"] = k->layers[static_cast<std::size_t>(i)];
            if (push != nullptr) layer["dA"] = push->layers[static_cast<std::size_t>(i)];
        }
        layers.push_back(layer);
    }
    doc["layers"] = layers;
    std::ofstream out(path);
    out << doc.dump(2) << "\n";
}

void write_plot_tsv(const std::string& path, const LatticeModel& model, const AdaptedProcess& y) {
    std::ofstream out(path);
    out << "t\tmean\tmin\tmax\n";
    for (int i = 0; i <= model.steps(); ++i) {
        const auto probs = model.layer_probabilities(i);
        double mean = 0.0;
        double lo = std::numeric_limits<double>::infinity();
        double hi = -std::numeric_limits<double>::infinity();
        for (std::size_t n = 0; n < model.node_count(i); ++n) {
            mean += probs[n] * y.at(i, n);
            lo = std::min(lo, y.at(i, n));
            hi = std::max(hi, y.at(i, n));
        }
        out << format_double(model.grid().time(i)) << '\t' << format_double(mean) << '\t'
            << format_double(lo) << '\t' << format_double(hi) << "\n";
    }
}

void write_rule_csv(const std::string& path, const LatticeModel& model, const StoppingRule& rule) {
    std::ofstream out(path);
    out << "layer,node,label,stop\n";
    for (int i = 0; i <= model.steps(); ++i)
        for (std::size_t n = 0; n < model.node_count(i); ++n)
            out << i << ',' << n << ',' << node_tag(model, i, n) << ','
                << (rule.stops_at(i, n, model.steps()) ? 1 : 0) << "\n";
}

void write_region_tsv(const std::string& path, const LatticeModel& model,
                      const StoppingRule& rule) {
    std::ofstream out(path);
    out << "t\tnode\tstop\n";
    for (int i = 0; i <= model.steps(); ++i)
        for (std::size_t n = 0; n < model.node_count(i); ++n)
            out << format_double(model.grid().time(i)) << '\t' << n << '\t'
                << (rule.stops_at(i, n, model.steps()) ? 1 : 0) << "\n";
}

LatticeModel model_from_config(const json& cfg) {
    const json& m = cfg.at("model");
    std::vector<double> us, lambdas;
    for (const auto& mark : m.value("marks", json::array())) {
        us.push_back(mark.at("u").get<double>());
        lambdas.push_back(mark.at("lambda").get<double>());
    }
    const NodeIndexing indexing = m.value("indexing", "tree") == std::string("markov")
                                      ? NodeIndexing::Markov
                                      : NodeIndexing::Tree;
    return build_default_lattice(m.at("T").get<double>(), m.at("N").get<int>(),
                                 MarkSet(us, lambdas), indexing);
}

std::vector<double> split_numbers(const std::string& text) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(std::stod(item));
    return out;
}

DriverSpec driver_from_config(const std::string& spec, const TimeGrid& grid, const MarkSet& marks) {
    if (spec == "zero") return make_zero_driver(marks.count());
    if (spec.rfind("constant:", 0) == 0) return make_constant_driver(std::stod(spec.substr(9)));
    if (spec.rfind("linear:", 0) == 0) {
        const auto nums = split_numbers(spec.substr(7));
        if (static_cast<int>(nums.size()) != 2 + marks.count())
            throw std::invalid_argument("driver 'linear' needs a, b and one gamma per mark");
        std::vector<double> gamma(nums.begin() + 2, nums.end());
        return make_affine_driver(grid, marks, nums[0], nums[1], gamma);
    }
    throw std::invalid_argument("unknown driver spec: " + spec);
}

AdaptedProcess obstacle_from_config(const json& cfg, const LatticeModel& model,
                                    std::uint64_t seed) {
    const json& o = cfg.at("obstacle");
    const std::string kind = o.at("kind").get<std::string>();
    RandomSource rng(o.value("seed", seed));
    if (kind == "ramp") {
        AdaptedProcess xi = make_adapted(model);
        const double a = o.at("a").get<double>(), b = o.at("b").get<double>();
        for (int i = 0; i <= model.steps(); ++i)
            std::fill(xi.layers[static_cast<std::size_t>(i)].begin(),
                      xi.layers[static_cast<std::size_t>(i)].end(),
                      a + b * model.grid().time(i));
        return xi;
    }
    if (kind == "random") {
        const auto clip = o.value("clip", std::vector<double>{-10.0, 10.0});
        return random_walk_obstacle(model, rng, o.value("scale", 1.0), clip.at(0), clip.at(1));
    }
    if (kind == "martingale") return martingale_obstacle(model, rng, o.value("scale", 1.0));
    if (kind == "wave")
        return field_obstacle(model, random_smooth_field(rng, o.value("scale", 1.0)));
    throw std::invalid_argument("unknown obstacle kind: " + kind);
}

std::vector<double> terminal_from_config(const json& cfg, const LatticeModel& model,
                                         std::uint64_t seed) {
    const json& t = cfg.at("terminal");
    const std::string kind = t.at("kind").get<std::string>();
    const int N = model.steps();
    std::vector<double> terminal(model.node_count(N));
    if (kind == "constant") {
        std::fill(terminal.begin(), terminal.end(), t.at("value").get<double>());
        return terminal;
    }
    if (kind == "wave") {
        RandomSource rng(t.value("seed", seed));
        const SmoothField field = random_smooth_field(rng, t.value("scale", 1.0));
        for (std::size_t n = 0; n < terminal.size(); ++n) {
            const auto jumps = model.jump_counts(N, n);
            terminal[n] = field(model.grid().horizon, model.brownian_position(N, n),
                                jumps.empty() ? 0 : jumps[0]);
        }
        return terminal;
    }
    throw std::invalid_argument("unknown terminal kind: " + kind);
}

GameCaps caps_from_config(const json& cfg) {
    GameCaps caps;
    if (cfg.contains("caps")) {
        const json& c = cfg.at("caps");
        caps.rules.max_subtree_nodes = c.value("subtree_nodes", caps.rules.max_subtree_nodes);
        caps.rules.max_rules = c.value("rules", caps.rules.max_rules);
        caps.max_control_maps = c.value("control_maps", caps.max_control_maps);
    }
    return caps;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    out << text;
}

int run_parsed(const json& cfg, const std::string& out_dir) {
    const std::string task = cfg.at("task").get<std::string>();
    const std::uint64_t seed = cfg.value("seed", std::uint64_t{0});
    std::filesystem::create_directories(out_dir);
    json report;
    report["version"] = cfg.value("version", 1);
    report["task"] = task;
    bool properties_pass = true;

    if (task == "solve") {
        const LatticeModel model = model_from_config(cfg);
        const DriverSpec driver =
            driver_from_config(cfg.at("driver").get<std::string>(), model.grid(), model.marks());
        const auto terminal = terminal_from_config(cfg, model, seed);
        const auto sol = solve_bsde(model, driver, terminal);
        const double residual = node_equation_residual(model, as_node_driver(driver), sol);
        write_solution_csv(out_dir + "/solution.csv", model, sol.y, &sol.z, &sol.k, nullptr);
        write_solution_json(out_dir + "/solution.json", model, sol.y, &sol.z, &sol.k, nullptr);
        write_plot_tsv(out_dir + "/plot.tsv", model, sol.y);
        report["y_root"] = sol.y.at(0, 0);
        report["node_equation_residual"] = residual;
        properties_pass = residual <= 1e-12;
        report["pass"] = properties_pass;
    } else if (task == "reflect") {
        const LatticeModel model = model_from_config(cfg);
        const DriverSpec driver =
            driver_from_config(cfg.at("driver").get<std::string>(), model.grid(), model.marks());
        const AdaptedProcess obstacle = obstacle_from_config(cfg, model, seed);
        const auto sol = solve_rbsde(model, driver, obstacle);
        const auto skorokhod = skorokhod_report(model, sol, obstacle);
        write_solution_csv(out_dir + "/solution.csv", model, sol.y, &sol.z, &sol.k, &sol.push);
        write_solution_json(out_dir + "/solution.json", model, sol.y, &sol.z, &sol.k, &sol.push);
        write_plot_tsv(out_dir + "/plot.tsv", model, sol.y);
        report["y_root"] = sol.y.at(0, 0);
        report["skorokhod"] = {{"flat_off", skorokhod.max_flat_off_violation},
                               {"min_increment", skorokhod.min_increment},
                               {"min_slack", skorokhod.min_constraint_slack},
                               {"pass", skorokhod.pass}};
        properties_pass = skorokhod.pass;
        report["pass"] = properties_pass;
    } else if (task == "stop") {
        const LatticeModel model = model_from_config(cfg);
        const DriverSpec driver =
            driver_from_config(cfg.at("driver").get<std::string>(), model.grid(), model.marks());
        const AdaptedProcess obstacle = obstacle_from_config(cfg, model, seed);
        const auto sol = solve_rbsde(model, driver, obstacle);
        const NodeRef root{0, 0};
        const StoppingRule tau_star = optimal_time(model, sol, obstacle, root);
        const double attained = evaluate_stopped(model, driver, obstacle, tau_star, root);
        write_solution_csv(out_dir + "/solution.csv", model, sol.y, &sol.z, &sol.k, &sol.push);
        write_rule_csv(out_dir + "/optimal_rule.csv", model, tau_star);
        write_region_tsv(out_dir + "/stop_region.tsv", model, tau_star);
        report["y_root"] = sol.y.at(0, 0);
        report["value_function"] = -sol.y.at(0, 0);
        report["optimal_rule_gap"] = sol.y.at(0, 0) - attained;
        properties_pass = std::abs(sol.y.at(0, 0) - attained) <= 1e-10;
        json eps_reports = json::array();
        for (const double eps : cfg.value("eps", std::vector<double>{0.1, 0.01, 0.001})) {
            const auto er = eps_optimal_report(model, driver, obstacle, sol, root, eps);
            char name[64];
            std::snprintf(name, sizeof(name), "eps_rule_%g.csv", eps);
            write_rule_csv(out_dir + "/" + name, model, er.rule);
            eps_reports.push_back({{"eps", eps},
                                   {"gap", er.gap},
                                   {"certified_bound", er.certified_bound},
                                   {"within_bound", er.gap <= er.certified_bound + 1e-12}});
            properties_pass = properties_pass && er.gap >= -1e-10 &&
                              er.gap <= er.certified_bound + 1e-12;
        }
        report["eps_rules"] = eps_reports;
        const GameCaps caps = caps_from_config(cfg);
        if (count_stopping_rules(model, root, caps.rules.max_rules) <= caps.rules.max_rules) {
            const auto oracle = brute_force_value(model, driver, obstacle, root, caps.rules);
            report["oracle_value"] = oracle.value;
            report["oracle_gap"] = std::abs(sol.y.at(0, 0) - oracle.value);
            properties_pass = properties_pass && std::abs(sol.y.at(0, 0) - oracle.value) <= 1e-10;
        }
        report["pass"] = properties_pass;
    } else if (task == "game") {
        const LatticeModel model = model_from_config(cfg);
        // Family as a top-level list or as the driver spelling
        // {"driver": {"ambiguity": [...]}}.
        json family_spec;
        if (cfg.contains("family"))
            family_spec = cfg.at("family");
        else if (cfg.contains("driver") && cfg.at("driver").is_object())
            family_spec = cfg.at("driver").at("ambiguity");
        else
            throw std::invalid_argument("game task needs a driver family");
        std::vector<DriverSpec> members;
        for (const auto& d : family_spec)
            members.push_back(
                driver_from_config(d.get<std::string>(), model.grid(), model.marks()));
        const AmbiguityFamily family = make_family(std::move(members));
        const AdaptedProcess obstacle = obstacle_from_config(cfg, model, seed);
        const GameCaps caps = caps_from_config(cfg);
        const GameSolution game = solve_game(model, family, obstacle);
        const NodeRef root{0, 0};
        report["y_root"] = game.y.y.at(0, 0);
        report["principle_residual"] = game.principle_residual;
        properties_pass = game.principle_residual <= 1e-10;
        const auto members_min = upper_value(model, family, obstacle, root);
        report["upper_value_members"] = members_min.value;
        report["best_member"] = members_min.member;
        if (const auto exact = upper_value_exact(model, family, obstacle, root, caps)) {
            report["upper_value"] = *exact;
            properties_pass = properties_pass && std::abs(*exact - game.y.y.at(0, 0)) <= 1e-10;
        }
        const auto lower = lower_value(model, family, obstacle, root, caps, ControlMode::FullPredictable);
        report["lower_value"] = lower.value;
        report["lower_value_sampled"] = lower.sampled;
        if (!lower.sampled)
            properties_pass = properties_pass && std::abs(lower.value - game.y.y.at(0, 0)) <= 1e-10;
        const auto saddle = find_saddle(model, family, obstacle, root, caps);
        report["saddle"] = {{"found", saddle.saddle.has_value()},
                            {"certified", saddle.check.certified},
                            {"sampled", saddle.check.sampled},
                            {"left_violation", saddle.check.left_violation},
                            {"right_violation", saddle.check.right_violation}};
        properties_pass = properties_pass && saddle.check.certified;
        if (saddle.saddle.has_value())
            write_rule_csv(out_dir + "/saddle_rule.csv", model, saddle.saddle->first);
        report["pass"] = properties_pass;
    } else if (task == "priors") {
        const json& m = cfg.at("model");
        std::vector<double> us, lambdas;
        for (const auto& mark : m.at("marks")) {
            us.push_back(mark.at("u").get<double>());
            lambdas.push_back(mark.at("lambda").get<double>());
        }
        const MarkSet marks(us, lambdas);
        const json& p = cfg.at("prior");
        std::vector<double> beta1;
        std::vector<std::vector<double>> beta2;
        for (const auto& a : p.at("alphas")) {
            beta1.push_back(a.at("beta1").get<double>());
            beta2.push_back(a.at("beta2").get<std::vector<double>>());
        }
        const PriorSpec prior = make_constant_prior(
            beta1, beta2, p.value("C1", -0.9), p.value("psi", std::vector<double>{}));
        const int alpha = cfg.value("alpha", 0);
        RandomSource rng(seed == 0 ? 1 : seed);
        const SmoothField field = random_smooth_field(rng, 1.0);
        const double horizon = m.at("T").get<double>();
        const auto refine = cfg.value("refine", std::vector<int>{8, 16, 32, 64});
        const auto eq = cross_check_prior_equivalence(
            horizon, marks, prior, alpha, zero_prior_cost(),
            [&field, horizon](double w, std::span<const int> jumps) {
                return field(horizon, w, jumps.empty() ? 0 : jumps[0]);
            },
            refine);
        report["driver_identity_error"] = eq.driver_identity_error;
        report["gaps"] = eq.gaps;
        report["ratios"] = eq.ratios;
        report["density_mean_error"] = eq.max_density_mean_error;
        report["first_order"] = eq.first_order;
        properties_pass = eq.driver_identity_error <= 1e-12 &&
                          eq.max_density_mean_error <= 1e-12 && eq.first_order;
        report["pass"] = properties_pass;
    } else if (task == "verify") {
        if (!cfg.contains("seed"))
            throw std::invalid_argument("verify task needs an explicit seed");
        const int instances = cfg.value("instances", 30);
        std::vector<SuiteReport> suites;
        suites.push_back(comparison_suite(seed, std::max(instances, 50)));
        suites.push_back(characterization_suite(seed, instances));
        suites.push_back(estimates_suite(seed, std::max(instances / 2, 10)));
        json suite_json = json::array();
        for (const auto& s : suites) {
            suite_json.push_back(suite_to_json(s));
            properties_pass = properties_pass && s.pass();
        }
        report["suites"] = suite_json;
        report["pass"] = properties_pass;
    } else {
        throw std::invalid_argument("unknown task: " + task);
    }

    write_text(out_dir + "/report.json", report.dump(2) + "\n");
    return properties_pass ? 0 : 1;
}

} // namespace

std::string suites_to_json(const std::vector<SuiteReport>& suites) {
    json arr = json::array();
    for (const auto& s : suites) arr.push_back(suite_to_json(s));
    return arr.dump(2) + "\n";
}

int run_experiment(const std::string& config_text, const std::string& out_dir) {
    json cfg;
    try {
        cfg = json::parse(config_text, nullptr, true, /*ignore_comments=*/true);
        if (!cfg.contains("task")) throw std::invalid_argument("config needs a task");
        if (cfg.value("version", 1) != 1) throw std::invalid_argument("unsupported config version");
        static const std::vector<std::string> known{"solve", "reflect", "stop",
                                                    "game",  "priors",  "verify"};
        const std::string task = cfg.at("task").get<std::string>();
        if (std::find(known.begin(), known.end(), task) == known.end())
            throw std::invalid_argument("unknown task: " + task);
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    }
    try {
        return run_parsed(cfg, out_dir);
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "experiment failed: " << e.what() << "\n";
        return 3;
    }
}

int run_experiment_file(const std::string& config_path, const std::string& out_dir) {
    std::ifstream in(config_path);
    if (!in) {
        std::cerr << "config error: cannot open " << config_path << "\n";
        return 2;
    }
    std::stringstream buffer;
    buffer << in.rdbuf();
    return run_experiment(buffer.str(), out_dir);
}

} // namespace bsdelab
