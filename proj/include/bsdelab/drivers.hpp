#pragma once

#include "bsdelab/lattice.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace bsdelab {

struct DriverFlags {
    bool depends_on_y = true;
    bool depends_on_z = true;
    bool depends_on_k = true;
    // theta > -1 everywhere (strict comparison applies).
    bool theta_strict = false;
};

// Generator f(t, y, z, k) with declared Lipschitz constant and an optional
// monotonicity coefficient oracle theta(t, y, z, l1, l2) for the jump argument.
class DriverSpec {
  public:
    using Evaluator = std::function<double(double t, double y, double z, std::span<const double> k)>;
    using ThetaOracle = std::function<std::vector<double>(double t, double y, double z,
                                                          std::span<const double> l1,
                                                          std::span<const double> l2)>;

    DriverSpec() = default;
    DriverSpec(Evaluator f, double lipschitz, DriverFlags flags, ThetaOracle theta = {},
               std::vector<double> psi = {});

    double operator()(double t, double y, double z, std::span<const double> k) const {
        return f_(t, y, z, k);
    }
    double lipschitz() const { return lipschitz_; }
    const DriverFlags& flags() const { return flags_; }
    bool has_theta() const { return static_cast<bool>(theta_); }
    std::vector<double> theta(double t, double y, double z, std::span<const double> l1,
                              std::span<const double> l2) const {
        return theta_(t, y, z, l1, l2);
    }
    const std::vector<double>& psi() const { return psi_; }

  private:
    Evaluator f_;
    double lipschitz_ = 0.0;
    DriverFlags flags_;
    ThetaOracle theta_;
    std::vector<double> psi_;
};

// Evaluates with input validation (finite arguments, k of the right length).
double eval_driver(const DriverSpec& d, const MarkSet& marks, double t, double y, double z,
                   std::span<const double> k);

DriverSpec make_zero_driver(int mark_count);
DriverSpec make_constant_driver(double value);

// f(t,y,z,k) = g(t,y,z) + <gamma(layer), k>_nu with gamma >= -1 + delta. The
// canonical family for which the comparison assumptions hold by construction.
DriverSpec make_monotone_jump_driver(const TimeGrid& grid, const MarkSet& marks,
                                     std::function<double(double, double, double)> g,
                                     double g_lipschitz,
                                     std::vector<std::vector<double>> gamma_per_layer,
                                     double delta = 1e-6);

// Monotone jump driver with g(t,y,z) = a y + b z + r0 + r1 t and constant gamma.
DriverSpec make_affine_driver(const TimeGrid& grid, const MarkSet& marks, double a, double b,
                              std::vector<double> gamma, double r0 = 0.0, double r1 = 0.0);

struct AmbiguityFamily {
    std::vector<DriverSpec> members;
    double lipschitz = 0.0; // shared equi-Lipschitz constant
};

AmbiguityFamily make_family(std::vector<DriverSpec> members);

struct InfDriver {
    DriverSpec driver;
    // Index achieving the pointwise min; ties break to the lowest index.
    std::function<int(double t, double y, double z, std::span<const double> k)> argmin;
};

// Pointwise min over the family members, Eq.-style inf driver.
InfDriver inf_driver(const AmbiguityFamily& family);

struct RoyerReport {
    enum class Status { Pass, Fail, Unverifiable };
    Status status = Status::Unverifiable;
    double max_inequality_violation = 0.0;
    double max_theta_bound_violation = 0.0;
    int samples = 0;
};

// Samples random (t, y, z, l1, l2) and checks the monotonicity inequality and
// the theta >= -1 bound against the declared oracle.
RoyerReport check_royer(const DriverSpec& d, const MarkSet& marks, const TimeGrid& grid,
                        int samples, std::uint64_t seed);

struct LipschitzReport {
    double declared = 0.0;
    double observed = 0.0;
    bool consistent = true;
};

// Sampling estimator; warns (consistent = false) if the observed ratio exceeds
// the declared constant.
LipschitzReport estimate_lipschitz(const DriverSpec& d, const MarkSet& marks, const TimeGrid& grid,
                                   int samples, std::uint64_t seed);

// Deterministic splittable generator used throughout the suites, so reports
// are byte-identical across runs and platforms.
class RandomSource {
  public:
    explicit RandomSource(std::uint64_t seed) : state_(seed) {}
    std::uint64_t next_u64();
    double uniform01();
    double uniform(double lo, double hi);
    int uniform_int(int lo, int hi); // inclusive bounds
    RandomSource split();

  private:
    std::uint64_t state_;
};

} // namespace bsdelab
