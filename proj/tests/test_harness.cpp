#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "bsdelab/harness.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

using namespace bsdelab;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string temp_dir(const std::string& tag) {
    const auto dir = std::filesystem::temp_directory_path() / ("bsdelab_test_" + tag);
    std::filesystem::remove_all(dir);
    return dir.string();
}

} // namespace

TEST_CASE("suites pass on seeded instances") {
    const auto comparison = comparison_suite(42, 12);
    CHECK(comparison.pass());
    const auto characterization = characterization_suite(42, 6);
    CHECK(characterization.pass());
    const auto estimates = estimates_suite(42, 4);
    CHECK(estimates.pass());

    // Determinism of the rendered reports.
    const std::string once = suites_to_json({comparison, characterization, estimates});
    const std::string twice = suites_to_json({comparison_suite(42, 12),
                                              characterization_suite(42, 6),
                                              estimates_suite(42, 4)});
    CHECK(once == twice);
}

TEST_CASE("solve task writes artifacts and a clean report") {
    const std::string out = temp_dir("solve");
    const std::string cfg = R"({
        // constant terminal under the zero driver stays flat
        "version": 1,
        "task": "solve",
        "model": {"T": 1.0, "N": 4, "marks": [{"u": 1.0, "lambda": 0.2}]},
        "driver": "zero",
        "terminal": {"kind": "constant", "value": 2.5}
    })";
    CHECK(run_experiment(cfg, out) == 0);
    CHECK(std::filesystem::exists(out + "/solution.csv"));
    CHECK(std::filesystem::exists(out + "/plot.tsv"));
    const std::string report = slurp(out + "/report.json");
    CHECK(report.find("\"y_root\": 2.5") != std::string::npos);

    // First CSV line after the header is the root with Y = 2.5.
    std::ifstream csv(out + "/solution.csv");
    std::string header, root;
    std::getline(csv, header);
    std::getline(csv, root);
    CHECK(header.rfind("layer,node,label,t,Y", 0) == 0);
    CHECK(root.find("2.5") != std::string::npos);
}

TEST_CASE("reflect and stop tasks enforce their properties") {
    const std::string cfg_reflect = R"({
        "version": 1, "task": "reflect", "seed": 9,
        "model": {"T": 1.0, "N": 4, "marks": [{"u": 1.0, "lambda": 0.2}]},
        "driver": "linear:0.2,0.3,0.5",
        "obstacle": {"kind": "random", "scale": 1.0, "clip": [-4.0, 4.0]}
    })";
    CHECK(run_experiment(cfg_reflect, temp_dir("reflect")) == 0);

    const std::string out = temp_dir("stop");
    const std::string cfg_stop = R"({
        "version": 1, "task": "stop", "seed": 11,
        "model": {"T": 1.0, "N": 4, "marks": []},
        "driver": "linear:0.2,0.3",
        "obstacle": {"kind": "random", "scale": 1.0, "clip": [-4.0, 4.0]},
        "eps": [0.1, 0.01]
    })";
    CHECK(run_experiment(cfg_stop, out) == 0);
    CHECK(std::filesystem::exists(out + "/optimal_rule.csv"));
    CHECK(std::filesystem::exists(out + "/eps_rule_0.1.csv"));
    CHECK(std::filesystem::exists(out + "/stop_region.tsv"));
    CHECK(slurp(out + "/report.json").find("\"oracle_gap\"") != std::string::npos);
}

TEST_CASE("game and priors tasks report certification") {
    const std::string cfg_game = R"({
        "version": 1, "task": "game", "seed": 13,
        "model": {"T": 1.0, "N": 3, "marks": []},
        "family": ["linear:0.2,0.3", "linear:-0.1,0.4"],
        "obstacle": {"kind": "random", "scale": 1.0, "clip": [-4.0, 4.0]}
    })";
    const std::string out = temp_dir("game");
    CHECK(run_experiment(cfg_game, out) == 0);
    const std::string report = slurp(out + "/report.json");
    CHECK(report.find("\"certified\": true") != std::string::npos);
    CHECK(report.find("\"lower_value\"") != std::string::npos);

    const std::string cfg_priors = R"({
        "version": 1, "task": "priors", "seed": 17,
        "model": {"T": 1.0, "N": 8, "marks": [{"u": 1.0, "lambda": 0.5}]},
        "prior": {"alphas": [{"beta1": 0.4, "beta2": [0.5]}], "C1": -0.5, "psi": [1.0]},
        "alpha": 0,
        "refine": [8, 16, 32, 64]
    })";
    CHECK(run_experiment(cfg_priors, temp_dir("priors")) == 0);
}

TEST_CASE("exit codes follow the contract") {
    // Unparseable config.
    CHECK(run_experiment("{ not json", temp_dir("bad1")) == 2);
    // Unknown task.
    CHECK(run_experiment(R"({"task": "nope"})", temp_dir("bad2")) == 2);
    // Missing task key.
    CHECK(run_experiment(R"({"version": 1})", temp_dir("bad3")) == 2);
    // Solver precondition: lambda dt >= 1.
    const std::string cfg = R"({
        "version": 1, "task": "solve",
        "model": {"T": 1.0, "N": 2, "marks": [{"u": 1.0, "lambda": 5.0}]},
        "driver": "zero",
        "terminal": {"kind": "constant", "value": 0.0}
    })";
    CHECK(run_experiment(cfg, temp_dir("bad4")) == 3);
}

TEST_CASE("verify runs are byte identical for a fixed seed") {
    const std::string cfg = R"({
        "version": 1, "task": "verify", "seed": 4242, "instances": 6
    })";
    const std::string out1 = temp_dir("verify1");
    const std::string out2 = temp_dir("verify2");
    CHECK(run_experiment(cfg, out1) == 0);
    CHECK(run_experiment(cfg, out2) == 0);
    CHECK(slurp(out1 + "/report.json") == slurp(out2 + "/report.json"));
    CHECK(slurp(out1 + "/report.json").find("\"pass\": true") != std::string::npos);
}
