#pragma once

#include "vlpref/backends.hpp"
#include "vlpref/core.hpp"
#include "vlpref/generation.hpp"

#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace vlpref {

struct Judgment {
    std::string pairing_id;
    Side preferred = Side::A;
    std::string explanation;
    std::string judge_id;
    std::string raw_text;

    bool operator==(const Judgment&) const = default;
};

struct ExpertVote {
    std::string expert_id;
    double reward_a = 0.0;
    double reward_b = 0.0;
    Side vote = Side::A;

    bool operator==(const ExpertVote&) const = default;
};

struct VoteRecord {
    std::string pairing_id;
    int votes_a = 0;
    int votes_b = 0;
    std::vector<ExpertVote> per_expert;  // sorted by expert_id

    int num_experts() const { return votes_a + votes_b; }
    int max_votes() const { return std::max(votes_a, votes_b); }
    // Experts whose two rewards were exactly equal.
    int tie_breaks() const;

    bool operator==(const VoteRecord&) const = default;
};

enum class Confidence { High, Low };
std::string_view to_string(Confidence c);

struct ComparisonOutcome {
    std::string pairing_id;
    Judgment judgment;
    VoteRecord votes;
    Confidence confidence = Confidence::Low;
    std::optional<Side> majority;

    bool operator==(const ComparisonOutcome&) const = default;
};

struct FinalJudgment {
    Side preferred = Side::A;
    std::string critique;

    bool operator==(const FinalJudgment&) const = default;
};

// Result of reading a "Better: A|B" verdict header.
struct VerdictParse {
    std::optional<Side> preferred;
    std::string explanation;
    bool tie = false;
};

// Finds the first line starting with "Better:"; its value must be A or B and
// some explanation text must follow. Anything else (including "Tie") leaves
// `preferred` empty.
VerdictParse parse_verdict(std::string_view raw);

// Prompt shared by the strong judge, the SFT policy, and inference.
ChatRequest make_judge_request(const ImageQuestionPair& pair, const std::string& response_a,
                               const std::string& response_b, double temperature, int max_tokens = 1024);

// Re-asks up to the backend's retry_limit on unparseable or tie verdicts, then
// throws JudgeParseError.
Judgment strong_judge(const Backend& judge, const ImageQuestionPair& pair, const std::string& pairing_id,
                      const std::string& response_a, const std::string& response_b, int max_tokens = 1024);

// Each expert scores both responses from the caption; an exact tie votes for
// the canonically first response. A single ScoreParseError fails the record.
VoteRecord expert_vote(const std::vector<Backend>& experts, const Caption& caption, const std::string& question,
                       const std::string& pairing_id, const std::string& response_a,
                       const std::string& response_b, bool a_is_canonical_first = true);

// High iff max(v_A, v_B) >= tau and the judge picked the majority side.
ComparisonOutcome classify_confidence(const VoteRecord& votes, const Judgment& judgment, int tau);

FinalJudgment infer_preference(const Backend& trained, const ImageQuestionPair& pair, const std::string& response_a,
                               const std::string& response_b, int max_tokens = 1024);

struct InferenceInput {
    ImageQuestionPair pair;
    std::string response_a;
    std::string response_b;
};

// Results come back in input order whatever the completion order.
std::vector<FinalJudgment> infer_preferences(const Backend& trained, const std::vector<InferenceInput>& inputs,
                                             std::size_t workers, int max_tokens = 1024);

enum class FailureClass { JudgeFailure, ExpertFailure };
enum class FailureReason { JudgeParse, JudgeBackend, ExpertScoreParse, ExpertBackend, Caption };

std::string_view to_string(FailureClass c);
std::string_view to_string(FailureReason r);
FailureReason parse_failure_reason(std::string_view text);
FailureClass failure_class_of(FailureReason r);

struct ComparisonFailure {
    std::string pairing_id;
    std::string pair_id;
    FailureReason reason = FailureReason::JudgeParse;
    std::string message;

    FailureClass failure_class() const { return failure_class_of(reason); }
    bool operator==(const ComparisonFailure&) const = default;
};

using ComparisonResult = std::variant<ComparisonOutcome, ComparisonFailure>;

// Caption, judge verdict, expert votes, and classification for one pairing.
// Backend and parse errors are converted into a ComparisonFailure; the judge
// is consulted first, so a pairing failing both ways counts as JudgeFailure.
ComparisonResult compare_pairing(const Roster& roster, CaptionCache& captions, const ImageQuestionPair& pair,
                                 const ResponsePairing& pairing, const std::string& response_a,
                                 const std::string& response_b, int tau, int max_tokens = 1024);

}  // namespace vlpref
