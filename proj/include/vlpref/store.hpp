#pragma once

#include "vlpref/comparison.hpp"
#include "vlpref/core.hpp"
#include "vlpref/digest.hpp"
#include "vlpref/errors.hpp"
#include "vlpref/generation.hpp"
#include "vlpref/refine.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace vlpref {

// --- record codecs (nlohmann ADL hooks) ---------------------------------------
// Missing or mistyped fields throw json exceptions; read_jsonl turns them
// into SchemaError with the offending line.

void to_json(nlohmann::json& j, const ImageQuestionPair& v);
void from_json(const nlohmann::json& j, ImageQuestionPair& v);
void to_json(nlohmann::json& j, const CandidateResponse& v);
void from_json(const nlohmann::json& j, CandidateResponse& v);
void to_json(nlohmann::json& j, const GenerationFailure& v);
void from_json(const nlohmann::json& j, GenerationFailure& v);
void to_json(nlohmann::json& j, const ResponsePairing& v);
void from_json(const nlohmann::json& j, ResponsePairing& v);
void to_json(nlohmann::json& j, const Caption& v);
void from_json(const nlohmann::json& j, Caption& v);
void to_json(nlohmann::json& j, const Judgment& v);
void from_json(const nlohmann::json& j, Judgment& v);
void to_json(nlohmann::json& j, const VoteRecord& v);
void from_json(const nlohmann::json& j, VoteRecord& v);
void to_json(nlohmann::json& j, const ComparisonOutcome& v);
void from_json(const nlohmann::json& j, ComparisonOutcome& v);
void to_json(nlohmann::json& j, const ComparisonFailure& v);
void from_json(const nlohmann::json& j, ComparisonFailure& v);
void to_json(nlohmann::json& j, const ReassignedLabel& v);
void from_json(const nlohmann::json& j, ReassignedLabel& v);
void to_json(nlohmann::json& j, const PreferenceSample& v);
void from_json(const nlohmann::json& j, PreferenceSample& v);
void to_json(nlohmann::json& j, const ScoredSample& v);
void from_json(const nlohmann::json& j, ScoredSample& v);
void to_json(nlohmann::json& j, const ChosenRejectedPair& v);
void from_json(const nlohmann::json& j, ChosenRejectedPair& v);

struct ScoreFailure {
    std::string sample_id;
    std::string pairing_id;
    std::string reason;  // "unparseable_sample" or "score_parse"
    std::string message;

    bool operator==(const ScoreFailure&) const = default;
};
void to_json(nlohmann::json& j, const ScoreFailure& v);
void from_json(const nlohmann::json& j, ScoreFailure& v);

struct PairSkip {
    std::string pairing_id;
    SkipReason reason = SkipReason::NoCorrectSample;

    bool operator==(const PairSkip&) const = default;
};
void to_json(nlohmann::json& j, const PairSkip& v);
void from_json(const nlohmann::json& j, PairSkip& v);

struct SftRecord {
    std::string pair_id;
    std::string image_ref;
    std::string question;
    std::string response_a;
    std::string response_b;
    std::string target_critique;

    bool operator==(const SftRecord&) const = default;
};
void to_json(nlohmann::json& j, const SftRecord& v);
void from_json(const nlohmann::json& j, SftRecord& v);

struct DpoRecord {
    std::string pair_id;
    std::string image_ref;
    std::string question;
    std::string response_a;
    std::string response_b;
    std::string chosen_critique;
    std::string rejected_critique;
    int chosen_score = 0;
    int rejected_score = 0;
    NegativeStrategy strategy = NegativeStrategy::BestToWorse;

    bool operator==(const DpoRecord&) const = default;
};
void to_json(nlohmann::json& j, const DpoRecord& v);
void from_json(const nlohmann::json& j, DpoRecord& v);

// Items as provided by users: pair_id optional, filled with pair_key.
ImageQuestionPair item_from_input_json(const nlohmann::json& j);

// --- JSONL --------------------------------------------------------------------

// One canonical JSON object per line: sorted keys, no insignificant
// whitespace, UTF-8, LF endings.
std::string canonical_line(const nlohmann::json& j);

// Writes the records and returns the hex SHA-256 of the file bytes.
template <typename T>
std::string write_jsonl(const std::filesystem::path& path, const std::vector<T>& records) {
    std::string body;
    for (const auto& r : records) {
        body += canonical_line(nlohmann::json(r));
        body += '\n';
    }
    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + path.string());
        out.write(body.data(), static_cast<std::streamsize>(body.size()));
        if (!out) throw IoError("write failed for " + path.string());
    }
    return sha256_hex(body);
}

// Reads every non-empty line; returns the parsed JSON values. Throws
// SchemaError(line) for malformed JSON, IoError if unreadable.
std::vector<nlohmann::json> read_jsonl_values(const std::filesystem::path& path);

template <typename T>
std::vector<T> read_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<T> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            out.push_back(nlohmann::json::parse(line).get<T>());
        } catch (const nlohmann::json::exception& e) {
            throw SchemaError(lineno, path.filename().string() + ": " + e.what());
        } catch (const Error& e) {
            throw SchemaError(lineno, path.filename().string() + ": " + e.what());
        }
    }
    return out;
}

// --- manifest -----------------------------------------------------------------

struct RunCounts {
    std::int64_t items = 0;
    std::int64_t responses = 0;
    std::int64_t generation_failures = 0;
    std::int64_t pairings = 0;
    std::int64_t high = 0;
    std::int64_t low = 0;
    std::int64_t failures = 0;
    std::int64_t relabeled = 0;
    std::int64_t samples = 0;
    std::int64_t scored = 0;
    std::int64_t pairs = 0;
    std::int64_t sft_records = 0;
    std::int64_t dpo_records = 0;
    std::int64_t dpo_identical_dropped = 0;

    bool operator==(const RunCounts&) const = default;
};

struct StageEntry {
    std::string fingerprint;
    std::map<std::string, std::string> inputs;   // file name -> digest
    std::map<std::string, std::string> outputs;  // file name -> digest

    bool operator==(const StageEntry&) const = default;
};

struct RunManifest {
    nlohmann::json config;
    std::uint64_t seed = 0;
    std::string tool_version;
    RunCounts counts;
    std::map<std::string, StageEntry> stages;
    std::map<std::string, std::string> digests;  // every output file

    bool operator==(const RunManifest&) const = default;
};

nlohmann::json to_json(const RunManifest& m);
RunManifest manifest_from_json(const nlohmann::json& j);
void write_manifest(const std::filesystem::path& path, const RunManifest& m);
RunManifest read_manifest(const std::filesystem::path& path);

// Throws ReconciliationError unless high + low + failures == pairings and the
// dataset counts match their sources.
void reconcile(const RunCounts& counts);

struct EmitInputs {
    std::vector<ImageQuestionPair> items;
    std::vector<CandidateResponse> responses;
    std::vector<ResponsePairing> pairings;
    std::vector<ComparisonOutcome> outcomes;
    std::vector<ComparisonFailure> failures;
    std::vector<ChosenRejectedPair> pairs;
};

struct EmitPaths {
    std::filesystem::path sft_path;
    std::filesystem::path dpo_path;
    std::filesystem::path manifest_path;
};

std::vector<SftRecord> build_sft_records(const EmitInputs& in);
// Pairs whose two critiques are textually identical are dropped and counted.
std::vector<DpoRecord> build_dpo_records(const EmitInputs& in, std::int64_t* identical_dropped = nullptr);

// Writes sft.jsonl and dpo.jsonl, then fills the manifest's dataset counts and
// digests, reconciles, and writes manifest.json last.
EmitPaths emit_datasets(const EmitInputs& in, const std::filesystem::path& out_dir, RunManifest manifest);

}  // namespace vlpref
