#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "rcl/cli.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Recursive-utility control toolkit: BSDE, HJB and DPP checks"};
    app.set_version_flag("--version", rcl::cli::kVersion);
    app.require_subcommand(1);

    std::string scenario;
    std::string out = "out";
    std::size_t threads = 0;
    std::optional<std::uint64_t> seed;

    for (const auto& [name, help] : rcl::cli::subcommands()) {
        CLI::App* sub = app.add_subcommand(name, help);
        sub->add_option("--scenario", scenario, "scenario JSON file")->required();
        sub->add_option("--out", out, "output directory");
        sub->add_option("--threads", threads, "worker threads, 0 = auto");
        sub->add_option("--seed", seed, "overrides the config and RCL_SEED");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }
    const std::string sub = app.get_subcommands().front()->get_name();

    rcl::cli::json cfg;
    try {
        cfg = rcl::cli::parse_config(scenario);
        rcl::cli::apply_seed_override(cfg, seed);
    } catch (const rcl::Error& e) {
        std::cerr << sub << ": " << e.what() << '\n';
        return 2;
    }
    rcl::set_threads(threads);
    return rcl::cli::dispatch(sub, cfg, out, std::cerr);
}
