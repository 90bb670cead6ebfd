#pragma once

#include "vlpref/backends.hpp"
#include "vlpref/comparison.hpp"
#include "vlpref/core.hpp"

#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace vlpref {

enum class LabelSource { JudgeRetained, MajorityOverride };
std::string_view to_string(LabelSource s);

struct ReassignedLabel {
    std::string pairing_id;
    Side label = Side::A;
    LabelSource source = LabelSource::JudgeRetained;

    bool operator==(const ReassignedLabel&) const = default;
};

// Balanced votes keep the judge's side; a confident majority that disagrees
// with the judge overrides it. Throws NotLowConfidence for High outcomes.
ReassignedLabel reassign_label(const ComparisonOutcome& outcome, int tau);

struct PreferenceSample {
    std::string sample_id;
    std::string pairing_id;
    int index = 0;
    std::string critique_text;
    std::optional<Side> parsed_preference;  // empty = unparseable
    bool correct = false;

    bool operator==(const PreferenceSample&) const = default;
};

std::string make_sample_id(std::string_view pairing_id, int index);

// m critiques at temperature 1.0, one seed per draw. A backend error turns
// that draw into an unparseable sample; the group is never aborted.
std::vector<PreferenceSample> sample_preference_responses(const Backend& sft_policy, const ImageQuestionPair& pair,
                                                          const std::string& response_a,
                                                          const std::string& response_b, int m,
                                                          const ReassignedLabel& label, int max_tokens = 1024,
                                                          std::size_t workers = 1);

struct ScoredSample {
    PreferenceSample sample;
    int score = 0;
    std::string scorer_id;

    bool operator==(const ScoredSample&) const = default;
};

// The multi-dimensional scoring template with {question}, {caption},
// {answer-A}, {answer-B}, {reference-choice} and {dpo-sample} placeholders.
std::string_view scoring_prompt_template();

// Single-pass substitution; placeholder text inside a value is left alone.
std::string render_scoring_prompt(std::string_view question, std::string_view caption, std::string_view answer_a,
                                  std::string_view answer_b, std::string_view reference_choice,
                                  std::string_view dpo_sample);

// "Answer 1" for A, "Answer 2" for B, matching how the template names them.
std::string_view reference_choice_text(Side label);

// Integer after the last "**Score**:" marker; must lie in [0, 100].
// Throws ScoreParseError otherwise.
int parse_score(std::string_view text);

ScoredSample score_sample(const Backend& scorer, const std::string& question, const Caption& caption,
                          const std::string& response_a, const std::string& response_b,
                          const ReassignedLabel& reference_choice, const PreferenceSample& sample,
                          int max_tokens = 1024);

struct ChosenRejectedPair {
    std::string pairing_id;
    ScoredSample chosen;
    ScoredSample rejected;
    NegativeStrategy strategy = NegativeStrategy::BestToWorse;

    bool operator==(const ChosenRejectedPair&) const = default;
};

enum class SkipReason { NoCorrectSample, EmptyRejectedSet, NoScoredSamples };
std::string_view to_string(SkipReason r);

struct PairSelection {
    std::vector<ChosenRejectedPair> pairs;  // ordered by rejected sample index
    std::optional<SkipReason> skip;
};

// Chosen is the highest-scoring correct sample (lowest index on ties).
// Rejected set:
//   Strategy1   - the lowest-scoring incorrect sample
//   Strategy2   - the highest-scoring incorrect sample
//   Strategy3   - every incorrect sample
//   BestToWorse - every other sample; with reject_tied_correct == false,
//                 correct samples scoring equal to chosen are kept out.
// Unparseable samples never take part. Throws MixedPairingIds.
PairSelection select_pairs(NegativeStrategy strategy, const std::vector<ScoredSample>& samples,
                           bool reject_tied_correct = true);

}  // namespace vlpref
