#include "fuseclin/error.hpp"
#include "fuseclin/pipeline.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kPrecondition = 2, kDataError = 3 };

void print_result(const fuseclin::pipeline::StageResult& r) {
    std::printf("%s: %zu artifact(s) in %.1f s\n", r.stage.c_str(), r.artifacts.size(), r.seconds);
    for (const auto& w : r.warnings) std::printf("  warning: %s\n", w.c_str());
}

}  // namespace

int main(int argc, char** argv) {
    namespace pl = fuseclin::pipeline;

    CLI::App app{"Multimodal (EHR + chest X-ray) mortality risk pipeline"};
    app.require_subcommand(1, 1);

    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "pipeline configuration (JSON)")->required();
        sub->add_option("--seed", seed, "global seed (overrides the config)");
        sub->add_option("--out", out, "output directory (overrides the config)");
    };

    std::vector<std::string> commands = pl::stage_names();
    commands.push_back("all");
    for (const auto& name : commands) {
        auto* sub = app.add_subcommand(name, name == "all" ? "run every stage in order" : "run the " + name + " stage");
        add_common(sub);
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kPrecondition;
    }

    const std::string command = app.get_subcommands().front()->get_name();
    try {
        auto cfg = pl::PipelineConfig::load(config_path);
        if (seed) cfg.set_seed(*seed);
        if (out) cfg.out = *out;
        if (command == "all") {
            for (const auto& r : pl::run_all(cfg)) print_result(r);
        } else {
            print_result(pl::run_stage(command, cfg));
        }
        return kOk;
    } catch (const fuseclin::PreconditionError& e) {
        std::cerr << "fuseclin " << command << ": " << e.what() << "\n";
        return kPrecondition;
    } catch (const fuseclin::CapabilityError& e) {
        std::cerr << "fuseclin " << command << ": " << e.what() << "\n";
        return kPrecondition;
    } catch (const fuseclin::DataError& e) {
        std::cerr << "fuseclin " << command << ": data error: " << e.what() << "\n";
        return kDataError;
    } catch (const fuseclin::NumericError& e) {
        std::cerr << "fuseclin " << command << ": numeric failure: " << e.what() << "\n";
        return kDataError;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "fuseclin " << command << ": malformed JSON: " << e.what() << "\n";
        return kDataError;
    } catch (const std::exception& e) {
        std::cerr << "fuseclin " << command << ": " << e.what() << "\n";
        return kFailure;
    }
}
