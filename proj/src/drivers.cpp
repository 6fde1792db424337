#include "bsdelab/drivers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>

namespace bsdelab {

std::uint64_t RandomSource::next_u64() {
    // splitmix64
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

double RandomSource::uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double RandomSource::uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

int RandomSource::uniform_int(int lo, int hi) {
    const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(next_u64() % span);
}

RandomSource RandomSource::split() { return RandomSource(next_u64()); }

DriverSpec::DriverSpec(Evaluator f, double lipschitz, DriverFlags flags, ThetaOracle theta,
                       std::vector<double> psi)
    : f_(std::move(f)), lipschitz_(lipschitz), flags_(flags), theta_(std::move(theta)),
      psi_(std::move(psi)) {
    if (!f_) throw std::invalid_argument("DriverSpec: missing evaluator");
    if (!(lipschitz_ >= 0.0)) throw std::invalid_argument("DriverSpec: Lipschitz constant must be >= 0");
}

double eval_driver(const DriverSpec& d, const MarkSet& marks, double t, double y, double z,
                   std::span<const double> k) {
    if (k.size() != static_cast<std::size_t>(marks.count()))
        throw std::invalid_argument("eval_driver: k must have one entry per mark");
    if (!std::isfinite(t) || !std::isfinite(y) || !std::isfinite(z))
        throw std::invalid_argument("eval_driver: non-finite input");
    for (double kj : k)
        if (!std::isfinite(kj)) throw std::invalid_argument("eval_driver: non-finite jump input");
    return d(t, y, z, k);
}

DriverSpec make_zero_driver(int) {
    return DriverSpec([](double, double, double, std::span<const double>) { return 0.0; }, 0.0,
                      DriverFlags{false, false, false, true});
}

DriverSpec make_constant_driver(double value) {
    return DriverSpec([value](double, double, double, std::span<const double>) { return value; },
                      0.0, DriverFlags{false, false, false, true});
}

DriverSpec make_monotone_jump_driver(const TimeGrid& grid, const MarkSet& marks,
                                     std::function<double(double, double, double)> g,
                                     double g_lipschitz,
                                     std::vector<std::vector<double>> gamma_per_layer,
                                     double delta) {
    const int J = marks.count();
    if (gamma_per_layer.size() != static_cast<std::size_t>(grid.steps))
        throw std::invalid_argument("make_monotone_jump_driver: one gamma vector per layer required");
    if (!(delta > 0.0)) throw std::invalid_argument("make_monotone_jump_driver: delta must be > 0");
    double gamma_norm = 0.0;
    for (const auto& gamma : gamma_per_layer) {
        if (gamma.size() != static_cast<std::size_t>(J))
            throw std::invalid_argument("make_monotone_jump_driver: gamma must have one entry per mark");
        for (double gj : gamma)
            if (gj < -1.0 + delta)
                throw std::invalid_argument("make_monotone_jump_driver: gamma must be >= -1 + delta");
        gamma_norm = std::max(gamma_norm, marks.norm(gamma));
    }
    const double dt = grid.dt();
    const int steps = grid.steps;
    auto layer_of = [dt, steps](double t) {
        int layer = static_cast<int>(std::lround(t / dt));
        return std::clamp(layer, 0, steps - 1);
    };
    std::vector<double> psi(static_cast<std::size_t>(J), 0.0);
    for (const auto& gamma : gamma_per_layer)
        for (int j = 0; j < J; ++j)
            psi[static_cast<std::size_t>(j)] =
                std::max(psi[static_cast<std::size_t>(j)], std::abs(gamma[static_cast<std::size_t>(j)]));

    auto gammas = std::make_shared<std::vector<std::vector<double>>>(std::move(gamma_per_layer));
    auto eval = [g, gammas, marks, layer_of](double t, double y, double z,
                                             std::span<const double> k) {
        const auto& gamma = (*gammas)[static_cast<std::size_t>(layer_of(t))];
        return g(t, y, z) + marks.inner(gamma, k);
    };
    auto theta = [gammas, layer_of](double t, double, double, std::span<const double>,
                                    std::span<const double>) {
        return (*gammas)[static_cast<std::size_t>(layer_of(t))];
    };
    const double lip = std::max(g_lipschitz, gamma_norm);
    return DriverSpec(std::move(eval), lip, DriverFlags{true, true, J > 0, true}, std::move(theta),
                      std::move(psi));
}

DriverSpec make_affine_driver(const TimeGrid& grid, const MarkSet& marks, double a, double b,
                              std::vector<double> gamma, double r0, double r1) {
    auto g = [a, b, r0, r1](double t, double y, double z) { return a * y + b * z + r0 + r1 * t; };
    const double g_lip = std::max(std::abs(a), std::abs(b));
    std::vector<std::vector<double>> per_layer(static_cast<std::size_t>(grid.steps), gamma);
    double delta = 1.0;
    for (double gj : gamma) delta = std::min(delta, gj + 1.0);
    return make_monotone_jump_driver(grid, marks, g, g_lip, std::move(per_layer),
                                     std::max(delta / 2.0, 1e-9));
}

AmbiguityFamily make_family(std::vector<DriverSpec> members) {
    if (members.empty()) throw std::invalid_argument("make_family: empty driver family");
    double shared = 0.0;
    for (const DriverSpec& d : members) shared = std::max(shared, d.lipschitz());
    return AmbiguityFamily{std::move(members), shared};
}

InfDriver inf_driver(const AmbiguityFamily& family) {
    if (family.members.empty()) throw std::invalid_argument("inf_driver: empty driver family");
    auto members = std::make_shared<std::vector<DriverSpec>>(family.members);
    auto argmin = [members](double t, double y, double z, std::span<const double> k) {
        int best = 0;
        double best_value = (*members)[0](t, y, z, k);
        for (std::size_t a = 1; a < members->size(); ++a) {
            const double v = (*members)[a](t, y, z, k);
            if (v < best_value) {
                best_value = v;
                best = static_cast<int>(a);
            }
        }
        return best;
    };
    auto eval = [members](double t, double y, double z, std::span<const double> k) {
        double best = (*members)[0](t, y, z, k);
        for (std::size_t a = 1; a < members->size(); ++a)
            best = std::min(best, (*members)[a](t, y, z, k));
        return best;
    };
    DriverFlags flags{false, false, false, true};
    std::vector<double> psi;
    bool all_theta = true;
    for (const DriverSpec& d : family.members) {
        flags.depends_on_y = flags.depends_on_y || d.flags().depends_on_y;
        flags.depends_on_z = flags.depends_on_z || d.flags().depends_on_z;
        flags.depends_on_k = flags.depends_on_k || d.flags().depends_on_k;
        flags.theta_strict = flags.theta_strict && d.flags().theta_strict;
        all_theta = all_theta && d.has_theta();
        if (d.psi().size() > psi.size()) psi.resize(d.psi().size(), 0.0);
        for (std::size_t j = 0; j < d.psi().size(); ++j) psi[j] = std::max(psi[j], d.psi()[j]);
    }
    DriverSpec::ThetaOracle theta;
    if (all_theta) {
        // f(l1) - f(l2) >= f^{a1}(l1) - f^{a1}(l2) >= <theta^{a1}, l1 - l2>
        // where a1 attains the min at l1.
        theta = [members, argmin](double t, double y, double z, std::span<const double> l1,
                                  std::span<const double> l2) {
            const int a1 = argmin(t, y, z, l1);
            return (*members)[static_cast<std::size_t>(a1)].theta(t, y, z, l1, l2);
        };
    }
    InfDriver out;
    out.driver = DriverSpec(std::move(eval), family.lipschitz, flags, std::move(theta), std::move(psi));
    out.argmin = std::move(argmin);
    return out;
}

namespace {

std::vector<double> random_jump_vector(RandomSource& rng, int J, double scale) {
    std::vector<double> v(static_cast<std::size_t>(J));
    for (double& x : v) x = rng.uniform(-scale, scale);
    return v;
}

} // namespace

RoyerReport check_royer(const DriverSpec& d, const MarkSet& marks, const TimeGrid& grid,
                        int samples, std::uint64_t seed) {
    RoyerReport report;
    report.samples = samples;
    if (!d.has_theta()) {
        report.status = RoyerReport::Status::Unverifiable;
        return report;
    }
    const int J = marks.count();
    RandomSource rng(seed);
    for (int s = 0; s < samples; ++s) {
        const double t = rng.uniform(0.0, grid.horizon);
        const double y = rng.uniform(-2.0, 2.0);
        const double z = rng.uniform(-2.0, 2.0);
        const auto l1 = random_jump_vector(rng, J, 2.0);
        const auto l2 = random_jump_vector(rng, J, 2.0);
        const auto theta = d.theta(t, y, z, l1, l2);
        std::vector<double> diff(static_cast<std::size_t>(J));
        for (int j = 0; j < J; ++j)
            diff[static_cast<std::size_t>(j)] =
                l1[static_cast<std::size_t>(j)] - l2[static_cast<std::size_t>(j)];
        const double lhs = d(t, y, z, l1) - d(t, y, z, l2);
        const double rhs = marks.inner(theta, diff);
        report.max_inequality_violation = std::max(report.max_inequality_violation, rhs - lhs);
        for (double th : theta)
            report.max_theta_bound_violation = std::max(report.max_theta_bound_violation, -1.0 - th);
    }
    const bool pass =
        report.max_inequality_violation <= 1e-10 && report.max_theta_bound_violation <= 1e-10;
    report.status = pass ? RoyerReport::Status::Pass : RoyerReport::Status::Fail;
    return report;
}

LipschitzReport estimate_lipschitz(const DriverSpec& d, const MarkSet& marks, const TimeGrid& grid,
                                   int samples, std::uint64_t seed) {
    LipschitzReport report;
    report.declared = d.lipschitz();
    const int J = marks.count();
    RandomSource rng(seed);
    for (int s = 0; s < samples; ++s) {
        const double t = rng.uniform(0.0, grid.horizon);
        const double y1 = rng.uniform(-2.0, 2.0), y2 = rng.uniform(-2.0, 2.0);
        const double z1 = rng.uniform(-2.0, 2.0), z2 = rng.uniform(-2.0, 2.0);
        const auto k1 = random_jump_vector(rng, J, 2.0);
        const auto k2 = random_jump_vector(rng, J, 2.0);
        std::vector<double> dk(static_cast<std::size_t>(J));
        for (int j = 0; j < J; ++j)
            dk[static_cast<std::size_t>(j)] =
                k1[static_cast<std::size_t>(j)] - k2[static_cast<std::size_t>(j)];
        const double denom = std::abs(y1 - y2) + std::abs(z1 - z2) + marks.norm(dk);
        if (denom < 1e-12) continue;
        const double num = std::abs(d(t, y1, z1, k1) - d(t, y2, z2, k2));
        report.observed = std::max(report.observed, num / denom);
    }
    report.consistent = report.observed <= report.declared * (1.0 + 1e-9) + 1e-12;
    return report;
}

} // namespace bsdelab
