// Command-line front end: one subcommand per pipeline stage, plus `all`,
// `verify-math` and `make-fixtures`.

#include "vlpref/math_fixtures.hpp"
#include "vlpref/pipeline.hpp"

#include <CLI11.hpp>

#include <iostream>

#ifndef VLPREF_DATA_DIR
#define VLPREF_DATA_DIR "data"
#endif

namespace {

struct Args {
    std::string config;
    std::string in = ".";
    std::string out = "out";
    std::optional<std::uint64_t> seed;
    std::string strategy;
    std::optional<int> pairs_per_item;
    std::optional<int> max_parallel;
    std::string trace;
    std::string fixtures = std::string(VLPREF_DATA_DIR) + "/toy_fixtures.json";
    bool mock = false;
    bool json = false;
    bool force = false;
};

int run(vlpref::Stage stage, const Args& a) {
    using namespace vlpref;
    try {
        ConfigOverrides ov;
        ov.seed = a.seed;
        if (!a.strategy.empty()) ov.strategy = parse_negative_strategy(a.strategy);
        ov.pairs_per_item = a.pairs_per_item;
        ov.max_parallel = a.max_parallel;
        ov.mock = a.mock;

        RunOptions opt;
        opt.config = resolve_config(a.config.empty() ? std::nullopt : std::optional<std::filesystem::path>(a.config), ov);
        opt.in = a.in;
        opt.out_dir = a.out;
        if (!a.trace.empty()) opt.trace_path = a.trace;
        opt.fixtures_path = a.fixtures;
        opt.force = a.force;

        const auto reports = run_stage(stage, opt);
        if (a.json) {
            nlohmann::json arr = nlohmann::json::array();
            for (const auto& r : reports) arr.push_back(r.to_json());
            std::cout << arr.dump(2) << '\n';
        } else {
            for (const auto& r : reports) std::cout << r.to_text();
        }
        for (const auto& r : reports) {
            if (r.warnings.any()) {
                const auto& w = r.warnings;
                std::cerr << "warning: " << r.stage << ": " << w.tie_verdicts << " tie verdict(s), " << w.parse_retries
                          << " parse retr(ies), " << w.transport_retries << " transport retr(ies), "
                          << w.expert_tie_breaks << " expert tie-break(s), " << w.items_without_pairings
                          << " item(s) without pairings\n";
            }
        }
        for (const auto& r : reports) {
            if (r.verification_failed()) {
                std::cerr << "error: " << r.stage << ": verification failed\n";
                return 5;
            }
        }
        return 0;
    } catch (const StageFailure& e) {
        std::cerr << "error: " << e.what() << '\n';
        if (a.json) std::cout << nlohmann::json{{"stage", e.stage()}, {"error", e.what()}, {"exit_code", e.exit_code()}}.dump(2) << '\n';
        return e.exit_code();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return exit_code_for(e);
    }
}

void add_common(CLI::App* cmd, Args& a) {
    cmd->add_option("--config", a.config, "pipeline config JSON (defaults apply when omitted)");
    cmd->add_option("--in", a.in, "directory containing items.jsonl, or the items file itself");
    cmd->add_option("--out", a.out, "directory for stage outputs and manifest.json");
    cmd->add_option("--seed", a.seed, "override pipeline.rng_seed");
    cmd->add_option("--strategy", a.strategy, "override negative_strategy")
        ->check(CLI::IsMember({"strategy1", "strategy2", "strategy3", "best_to_worse"}));
    cmd->add_option("--pairs-per-item", a.pairs_per_item, "override pairs_per_item")->check(CLI::PositiveNumber);
    cmd->add_option("--max-parallel", a.max_parallel, "worker pool size")->check(CLI::PositiveNumber);
    cmd->add_option("--trace", a.trace, "append every backend exchange to this JSONL file");
    cmd->add_flag("--mock", a.mock, "replace every HTTP backend with a deterministic mock");
    cmd->add_flag("--json", a.json, "print the stage report as JSON");
    cmd->add_flag("--force", a.force, "ignore the manifest and recompute");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Vision-language preference data curation pipeline"};
    app.set_version_flag("--version", vlpref::tool_version());
    app.require_subcommand(1);

    Args args;
    std::optional<vlpref::Stage> chosen;
    const std::pair<const char*, const char*> stages[] = {
        {"generate", "sample candidate responses and enumerate pairings"},
        {"compare", "judge verdicts, caption-guided expert votes, confidence split"},
        {"relabel", "reassign low-confidence labels and resample critiques"},
        {"score", "score each critique with the multi-dimensional prompt"},
        {"pairs", "build chosen/rejected pairs"},
        {"emit", "write sft.jsonl, dpo.jsonl and the manifest"},
        {"all", "run every stage in order, skipping those already up to date"},
    };
    for (const auto& [name, help] : stages) {
        auto* cmd = app.add_subcommand(name, help);
        add_common(cmd, args);
        cmd->callback([&chosen, n = std::string(name)] { chosen = vlpref::parse_stage(n); });
    }

    auto* verify = app.add_subcommand("verify-math", "check loss identities, gradients and toy training");
    verify->add_option("--fixtures", args.fixtures, "math fixture file")->check(CLI::ExistingFile);
    verify->add_flag("--json", args.json, "print the report as JSON");
    verify->callback([&chosen] { chosen = vlpref::Stage::VerifyMath; });

    std::string fixtures_out;
    std::uint64_t fixtures_seed = 20240601;
    auto* make = app.add_subcommand("make-fixtures", "regenerate the math fixture file");
    make->add_option("--out", fixtures_out, "output path")->required();
    make->add_option("--seed", fixtures_seed, "generator seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }

    if (make->parsed()) {
        try {
            vlpref::trainmath::save_math_fixtures(vlpref::trainmath::make_math_fixtures(fixtures_seed), fixtures_out);
            std::cout << "wrote " << fixtures_out << '\n';
            return 0;
        } catch (const std::exception& e) {
            std::cerr << "error: " << e.what() << '\n';
            return 1;
        }
    }
    return run(*chosen, args);
}
