#pragma once

#include "vlpref/core.hpp"
#include "vlpref/errors.hpp"
#include "vlpref/math_fixtures.hpp"
#include "vlpref/store.hpp"

#include <cstdint>
#include <exception>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace vlpref {

enum class Stage { Generate, Compare, Relabel, Score, Pairs, Emit, VerifyMath, All };

std::string_view to_string(Stage s);
Stage parse_stage(std::string_view text);  // accepts "verify-math" and "verify_math"

// The order `All` runs in.
inline constexpr Stage kPipelineOrder[] = {Stage::Generate, Stage::Compare, Stage::Relabel,
                                           Stage::Score,    Stage::Pairs,   Stage::Emit};

struct StageWarnings {
    std::uint64_t tie_verdicts = 0;
    std::uint64_t parse_retries = 0;
    std::uint64_t transport_retries = 0;
    std::uint64_t expert_tie_breaks = 0;
    std::uint64_t items_without_pairings = 0;

    bool any() const;
};

struct StageReport {
    std::string stage;
    double wall_seconds = 0.0;
    bool skipped = false;
    nlohmann::json counts = nlohmann::json::object();
    StageWarnings warnings;
    std::vector<trainmath::CheckRow> checks;  // VerifyMath only

    // True when a VerifyMath check did not pass. The report is still
    // returned so callers can show every row; the CLI maps this to exit 5.
    bool verification_failed() const;

    nlohmann::json to_json() const;
    std::string to_text() const;
};

struct RunOptions {
    PipelineConfig config;  // already validated
    // Directory holding items.jsonl, or the items file itself.
    std::filesystem::path in;
    std::filesystem::path out_dir;
    std::optional<std::filesystem::path> trace_path;
    std::filesystem::path fixtures_path;
    // Ignore the manifest and recompute every requested stage.
    bool force = false;
};

// Command-line overrides applied on top of the config file before
// validation, so that derived defaults (mock seeds) follow them.
struct ConfigOverrides {
    std::optional<std::uint64_t> seed;
    std::optional<NegativeStrategy> strategy;
    std::optional<int> pairs_per_item;
    std::optional<int> max_parallel;
    bool mock = false;
};

// Loads the file (or starts from defaults when path is empty), applies the
// overrides and validates. Throws ConfigError.
PipelineConfig resolve_config(const std::optional<std::filesystem::path>& path, const ConfigOverrides& overrides);

// Runs one stage (or the whole chain for Stage::All) and returns one report
// per stage executed or skipped. Errors arrive as StageFailure.
std::vector<StageReport> run_stage(Stage stage, const RunOptions& options);

// Process exit status for an error: 2 config, 3 missing prerequisite,
// 4 failure budget, 5 verification, 1 anything else.
int exit_code_for(const std::exception& e);

class StageFailure : public Error {
public:
    StageFailure(std::string stage, std::exception_ptr cause, int exit_code, const std::string& what)
        : Error(what), stage_(std::move(stage)), cause_(std::move(cause)), exit_code_(exit_code) {}

    const std::string& stage() const { return stage_; }
    int exit_code() const { return exit_code_; }
    [[noreturn]] void rethrow_cause() const { std::rethrow_exception(cause_); }

private:
    std::string stage_;
    std::exception_ptr cause_;
    int exit_code_;
};

std::string tool_version();

// Stage file names inside out_dir.
namespace files {
inline constexpr const char* kItems = "items.jsonl";
inline constexpr const char* kItemsKeyed = "items_keyed.jsonl";
inline constexpr const char* kResponses = "responses.jsonl";
inline constexpr const char* kGenerateFailures = "generate_failures.jsonl";
inline constexpr const char* kPairings = "pairings.jsonl";
inline constexpr const char* kCaptions = "captions.jsonl";
inline constexpr const char* kComparisons = "comparisons.jsonl";
inline constexpr const char* kFailures = "failures.jsonl";
inline constexpr const char* kRelabeled = "relabeled.jsonl";
inline constexpr const char* kSamples = "samples.jsonl";
inline constexpr const char* kScored = "scored.jsonl";
inline constexpr const char* kScoreFailures = "score_failures.jsonl";
inline constexpr const char* kPairs = "pairs.jsonl";
inline constexpr const char* kPairSkips = "pair_skips.jsonl";
inline constexpr const char* kSft = "sft.jsonl";
inline constexpr const char* kDpo = "dpo.jsonl";
inline constexpr const char* kManifest = "manifest.json";
}  // namespace files

}  // namespace vlpref
