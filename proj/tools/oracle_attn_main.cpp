#include <string>
#include <vector>

#include <CLI11.hpp>

#include "oattn/commands.hpp"
#include "oattn/run_config.hpp"

int main(int argc, char** argv) {
    CLI::App app{"face completion with supervised dual spatial attention"};
    app.require_subcommand(1);

    struct SubArgs {
        std::string config_path;
        std::vector<std::string> overrides;
    };
    std::map<std::string, SubArgs> args;
    std::map<std::string, CLI::App*> subs;
    const std::pair<const char*, const char*> specs[] = {
        {"train", "train a model"},
        {"infer", "complete images with a trained checkpoint"},
        {"eval", "score a checkpoint on a dataset (L1% / PSNR / SSIM)"},
        {"bench-dsa", "time the attention kernels against a patch-matching reference"},
    };
    for (const auto& [name, desc] : specs) {
        CLI::App* sub = app.add_subcommand(name, desc);
        auto& a = args[name];
        sub->add_option("--config", a.config_path, "JSON config file with flat dotted keys");
        sub->add_option("--set", a.overrides, "override: key=value (repeatable)");
        subs[name] = sub;
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;  // usage errors map to the stable contract
    }

    try {
        for (const auto& [name, sub] : subs) {
            if (!sub->parsed()) continue;
            const auto& a = args[name];
            oattn::RunConfig cfg = a.config_path.empty() ? oattn::RunConfig()
                                                         : oattn::RunConfig::from_file(a.config_path);
            for (const auto& kv : a.overrides) cfg.set_override(kv);
            if (name == "train")
                oattn::cmd_train(cfg);
            else if (name == "infer")
                oattn::cmd_infer(cfg);
            else if (name == "eval")
                oattn::cmd_eval(cfg);
            else
                oattn::cmd_bench_dsa(cfg);
        }
        return 0;
    } catch (...) {
        return oattn::exit_code_for_current_exception();
    }
}
