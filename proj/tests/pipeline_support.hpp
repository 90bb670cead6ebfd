#pragma once
// Shared setup for end-to-end runs in the pipeline and acceptance tests.

#include "helpers.hpp"

#include "vlpref/pipeline.hpp"

#include <cstdlib>
#include <map>
#include <sys/wait.h>

namespace testing {

inline std::filesystem::path sample_items() { return std::filesystem::path(VLPREF_DATA_DIR) / "sample_items.jsonl"; }

inline vlpref::RunOptions mock_run(const std::filesystem::path& out, std::size_t pool = 4, std::uint64_t seed = 7,
                                   std::optional<std::filesystem::path> config = std::nullopt) {
    vlpref::ConfigOverrides ov;
    ov.seed = seed;
    ov.max_parallel = static_cast<int>(pool);
    ov.pairs_per_item = 4;
    ov.mock = true;
    vlpref::RunOptions opt;
    opt.config = vlpref::resolve_config(config, ov);
    opt.in = sample_items();
    opt.out_dir = out;
    return opt;
}

// sha256 of every regular file in dir, keyed by file name.
inline std::map<std::string, std::string> digests_of(const std::filesystem::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
        if (e.is_regular_file()) out[e.path().filename().string()] = vlpref::sha256_hex(slurp(e.path()));
    }
    return out;
}

// Runs the CLI binary through the shell and returns its exit status.
inline int run_cli(const std::string& args, const std::filesystem::path& log) {
    const std::string cmd = std::string("\"") + VLPREF_CLI + "\" " + args + " >\"" + log.string() + "\" 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace testing
