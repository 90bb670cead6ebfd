#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace vlpref {

enum class Side { A, B };

inline Side opposite(Side s) { return s == Side::A ? Side::B : Side::A; }
std::string_view to_string(Side s);

enum class SamplingKind { Greedy, Temperature };

struct SamplingStrategy {
    SamplingKind kind = SamplingKind::Greedy;
    double temperature = 0.0;  // meaningful only for Temperature

    static SamplingStrategy greedy() { return {}; }
    static SamplingStrategy with_temperature(double t) { return {SamplingKind::Temperature, t}; }

    // Stable text form ("greedy", "temperature=1"); part of response identity.
    std::string label() const;
    // Temperature sent to the endpoint. Greedy decodes at 0.
    double request_temperature() const { return kind == SamplingKind::Greedy ? 0.0 : temperature; }

    bool operator==(const SamplingStrategy&) const = default;
};

enum class NegativeStrategy { Strategy1, Strategy2, Strategy3, BestToWorse };

std::string_view to_string(NegativeStrategy s);
NegativeStrategy parse_negative_strategy(std::string_view text);

struct ImageQuestionPair {
    std::string pair_id;
    std::string image_ref;
    std::string question;

    bool operator==(const ImageQuestionPair&) const = default;
};

struct CandidateResponse {
    std::string response_id;
    std::string pair_id;
    std::string generator_id;
    SamplingStrategy strategy;
    std::string text;

    bool operator==(const CandidateResponse&) const = default;
};

enum class BackendRole { Generator, StrongJudge, Expert, Captioner, Scorer, SftPolicy };
enum class BackendKind { Http, Mock };

std::string_view to_string(BackendRole r);
BackendRole parse_backend_role(std::string_view text);

struct BackendSpec {
    std::string backend_id;
    BackendRole role = BackendRole::Generator;
    BackendKind kind = BackendKind::Mock;
    std::string endpoint_url;
    std::string model_name;
    std::string api_key_env;
    std::uint64_t mock_seed = 0;
    // Probability that a mock reply is deliberately malformed. Lets offline
    // runs exercise every failure path.
    double mock_fault_rate = 0.0;

    bool operator==(const BackendSpec&) const = default;
};

// Fully resolved configuration. Produced only by validate_config.
struct PipelineConfig {
    int num_generators = 5;
    int num_experts = 5;
    int vote_threshold = 4;
    int num_resamples = 10;
    double beta = 0.01;
    std::vector<SamplingStrategy> sampling_strategies;
    NegativeStrategy negative_strategy = NegativeStrategy::BestToWorse;
    std::uint64_t rng_seed = 0;
    int max_parallel_requests = 4;
    int retry_limit = 2;

    int pairs_per_item = 1;
    bool randomize_orientation = false;
    // true: every correct sample other than the chosen one is rejected, even
    // at an equal score. false: only strictly lower-scoring correct samples.
    bool reject_tied_correct = true;
    // Maximum failed fraction of pairings (or generation calls) before a
    // stage aborts with FailureBudgetExceeded.
    double failure_budget = 0.5;
    int max_tokens = 1024;
    int retry_backoff_ms = 200;

    std::vector<BackendSpec> backends;

    bool operator==(const PipelineConfig&) const = default;
};

// Parsed but unvalidated configuration; absent fields take defaults.
struct RawConfig {
    std::optional<int> num_generators;
    std::optional<int> num_experts;
    std::optional<int> vote_threshold;
    std::optional<int> num_resamples;
    std::optional<double> beta;
    std::optional<std::vector<SamplingStrategy>> sampling_strategies;
    std::optional<NegativeStrategy> negative_strategy;
    std::optional<std::uint64_t> rng_seed;
    std::optional<int> max_parallel_requests;
    std::optional<int> retry_limit;
    std::optional<int> pairs_per_item;
    std::optional<bool> randomize_orientation;
    std::optional<bool> reject_tied_correct;
    std::optional<double> failure_budget;
    std::optional<int> max_tokens;
    std::optional<int> retry_backoff_ms;
    std::optional<std::vector<BackendSpec>> backends;
};

// Fills defaults and checks every invariant; throws ConfigError naming the
// first violation. When no backends are declared, a mock roster matching the
// configured counts is synthesized.
PipelineConfig validate_config(const RawConfig& raw);
PipelineConfig validate_config(const PipelineConfig& cfg);

RawConfig to_raw(const PipelineConfig& cfg);

// Replaces every Http backend with a Mock whose seed derives from the run
// seed and backend id.
PipelineConfig force_mock(PipelineConfig cfg);

// Config document: {"pipeline": {...}, "backends": [...]}. Unknown keys throw.
RawConfig parse_config(const nlohmann::json& doc);
RawConfig load_config(const std::filesystem::path& path);

// Canonical JSON form. Execution-only knobs (pool size) are omitted when
// include_execution is false so that snapshots do not depend on them.
nlohmann::json config_to_json(const PipelineConfig& cfg, bool include_execution = true);

nlohmann::json to_json(const SamplingStrategy& s);
SamplingStrategy sampling_strategy_from_json(const nlohmann::json& j);
nlohmann::json to_json(const BackendSpec& b);
BackendSpec backend_spec_from_json(const nlohmann::json& j);

// Hex SHA-256 over image_ref ‖ 0x00 ‖ question. Throws EmptyQuestion.
std::string pair_key(std::string_view image_ref, std::string_view question);

std::string make_response_id(std::string_view pair_id, std::string_view generator_id,
                             const SamplingStrategy& strategy);

}  // namespace vlpref
