#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mowe/cli.hpp"

namespace {

struct Bound {
    std::string config;
    long long seed = 0;
    std::vector<std::string> sets;
    std::map<std::string, std::string> values;
    std::map<std::string, bool> switches;
    std::map<std::string, CLI::Option*> options;
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Mixture-of-Word-Experts toolkit"};
    app.require_subcommand(1);
    std::map<std::string, Bound> bound;
    for (const auto& cmd : mowe::cli::commands()) {
        auto* sub = app.add_subcommand(cmd.name, cmd.help);
        auto& b = bound[cmd.name];
        sub->add_option("--config", b.config, "key = value config file; flags override its keys");
        b.options["seed"] = sub->add_option("--seed", b.seed, "random seed")->default_val(0);
        sub->add_option("--set", b.sets, "override any config key (key=value), repeatable");
        for (const auto& f : cmd.flags) {
            if (f.is_switch) {
                b.options[f.key] = sub->add_flag("--" + f.flag, b.switches[f.key], f.help);
            } else {
                b.options[f.key] = sub->add_option("--" + f.flag, b.values[f.key], f.help);
            }
        }
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }
    try {
        for (const auto* sub : app.get_subcommands()) {
            auto& b = bound.at(sub->get_name());
            std::vector<std::pair<std::string, std::string>> overrides;
            for (const auto& s : b.sets) {
                const auto eq = s.find('=');
                if (eq == std::string::npos) {
                    throw mowe::ConfigError("--set expects key=value, got '" + s + "'");
                }
                overrides.emplace_back(mowe::trim(s.substr(0, eq)), mowe::trim(s.substr(eq + 1)));
            }
            if (b.options["seed"]->count() > 0 || b.config.empty()) {
                overrides.emplace_back("seed", std::to_string(b.seed));
            }
            for (const auto& [key, opt] : b.options) {
                if (key == "seed" || opt->count() == 0) {
                    continue;
                }
                overrides.emplace_back(key, b.switches.count(key) ? (b.switches[key] ? "true" : "false") : b.values[key]);
            }
            mowe::cli::run(sub->get_name(), b.config, overrides, std::cout);
        }
    } catch (const mowe::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
