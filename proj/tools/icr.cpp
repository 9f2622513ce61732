// Command-line front end: icr <command> --config PATH [--seed N] [--out DIR] [--quiet]

#include "icr/pipeline.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
    CLI::App app{"In-context routing experiments on a synthetic testbed"};
    app.require_subcommand(1, 1);

    std::string config_path;
    std::uint64_t seed = 0;
    std::string out_dir;
    bool quiet = false;

    for (const auto& name : icr::command_names()) {
        CLI::App* sub = app.add_subcommand(name, "run the " + name + " stage");
        sub->add_option("--config", config_path, "JSON run configuration")->check(CLI::ExistingFile);
        sub->add_option("--seed", seed, "override the global seed");
        sub->add_option("--out", out_dir, "override the output directory");
        sub->add_flag("--quiet", quiet, "suppress progress output");
    }

    CLI11_PARSE(app, argc, argv);
    const std::string command = app.get_subcommands().front()->get_name();
    const CLI::App* sub = app.get_subcommands().front();

    try {
        icr::RunConfig cfg;
        if (!config_path.empty()) cfg = icr::load_run_config(config_path);
        if (sub->count("--seed")) cfg.seed = seed;
        if (sub->count("--out")) cfg.out = out_dir;
        cfg.resolve();
        icr::run_command(command, cfg, [&](const std::string& msg) {
            if (!quiet) std::cerr << msg << '\n';
        });
    } catch (const icr::Error& e) {
        std::cerr << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
