#pragma once

#include "bsdelab/bsde.hpp"
#include "bsdelab/drivers.hpp"
#include "bsdelab/lattice.hpp"
#include "bsdelab/priors.hpp"
#include "bsdelab/rbsde.hpp"
#include "bsdelab/robust.hpp"
#include "bsdelab/stopping.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace bsdelab {

struct PropertyResult {
    std::string name;
    int instances = 0;
    double max_residual = 0.0;
    bool pass = false;
    std::string note;
};

struct SuiteReport {
    std::string name;
    std::vector<PropertyResult> properties;

    bool pass() const {
        for (const auto& p : properties)
            if (!p.pass) return false;
        return true;
    }
};

// Ordered comparison pairs f1 >= f2, xi1 >= xi2 across seeded instances, plus
// delta-separated strict pairs with a recorded lower bound on the root gap.
SuiteReport comparison_suite(std::uint64_t seed, int instances);

// Reflected value vs exhaustive stopping-rule maximum at every node, plus the
// solver-free path-sum oracle for time-only drivers.
SuiteReport characterization_suite(std::uint64_t seed, int instances);

// Contraction ratios and the gap estimates across N in {16, 32, 64}.
SuiteReport estimates_suite(std::uint64_t seed, int instances);

// Deterministic JSON rendering of suite reports (no timing data).
std::string suites_to_json(const std::vector<SuiteReport>& suites);

// Runs the experiment described by a JSON config (comments allowed) and writes
// report.json plus task-specific CSV/TSV artifacts under out_dir. Returns the
// process exit code: 0 ok, 1 property failure, 2 config error, 3 solver
// precondition failure.
int run_experiment(const std::string& config_text, const std::string& out_dir);

// Convenience wrapper: reads the config file and runs it.
int run_experiment_file(const std::string& config_path, const std::string& out_dir);

} // namespace bsdelab
