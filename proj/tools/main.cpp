#include "bsdelab/harness.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdint>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace {

int run_task(const std::string& task, const std::string& config_path, std::int64_t seed,
             const std::string& out_dir, int instances, const std::string& refine) {
    nlohmann::json cfg;
    if (!config_path.empty()) {
        std::ifstream in(config_path);
        if (!in) {
            std::cerr << "config error: cannot open " << config_path << "\n";
            return 2;
        }
        std::stringstream buffer;
        buffer << in.rdbuf();
        try {
            cfg = nlohmann::json::parse(buffer.str(), nullptr, true, /*ignore_comments=*/true);
        } catch (const std::exception& e) {
            std::cerr << "config error: " << e.what() << "\n";
            return 2;
        }
    }
    cfg["task"] = task;
    if (!cfg.contains("version")) cfg["version"] = 1;
    if (seed >= 0) cfg["seed"] = static_cast<std::uint64_t>(seed);
    if (instances > 0) cfg["instances"] = instances;
    if (!refine.empty()) {
        std::vector<int> steps;
        std::stringstream ss(refine);
        std::string item;
        while (std::getline(ss, item, ',')) steps.push_back(std::stoi(item));
        cfg["refine"] = steps;
    }
    return bsdelab::run_experiment(cfg.dump(), out_dir);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Discrete lattice laboratory for reflected BSDEs with jumps, optimal stopping "
                 "and robust stopping games"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir = "out";
    std::int64_t seed = -1;
    int instances = 0;
    std::string refine;
    app.add_option("--config", config_path, "experiment config (JSON, comments allowed)");
    app.add_option("--seed", seed, "override the config seed");
    app.add_option("--out", out_dir, "output directory")->capture_default_str();
    app.add_option("--instances", instances, "override the instance count");
    app.add_option("--refine", refine, "comma-separated refinement steps, e.g. 8,16,32,64");

    for (const std::string task : {"solve", "reflect", "stop", "game", "priors", "verify"})
        app.add_subcommand(task)->fallthrough();

    CLI11_PARSE(app, argc, argv);
    const std::string task = app.get_subcommands().front()->get_name();
    if (task != "verify" && config_path.empty()) {
        std::cerr << "config error: task '" << task << "' needs --config\n";
        return 2;
    }
    if (task == "verify" && config_path.empty() && seed < 0) {
        std::cerr << "config error: verify needs --config or --seed\n";
        return 2;
    }
    const int code = run_task(task, config_path, seed, out_dir, instances, refine);
    std::cerr << "exit code " << code << " (0 ok, 1 property failure, 2 config error, 3 solver "
                 "error); report in "
              << out_dir << "/report.json\n";
    return code;
}
