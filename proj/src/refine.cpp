#include "vlpref/refine.hpp"

#include "vlpref/errors.hpp"
#include "vlpref/worker_pool.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>

namespace vlpref {

// Defined in the generated scoring_prompt_asset.cpp.
extern const std::string_view kScoringPromptTemplate;

std::string_view to_string(LabelSource s) {
    return s == LabelSource::JudgeRetained ? "judge_retained" : "majority_override";
}

std::string_view to_string(SkipReason r) {
    switch (r) {
        case SkipReason::NoCorrectSample: return "no_correct_sample";
        case SkipReason::EmptyRejectedSet: return "empty_rejected_set";
        case SkipReason::NoScoredSamples: return "no_scored_samples";
    }
    return "no_correct_sample";
}

ReassignedLabel reassign_label(const ComparisonOutcome& outcome, int tau) {
    if (outcome.confidence != Confidence::Low)
        throw NotLowConfidence("pairing '" + outcome.pairing_id + "' is high confidence");
    const VoteRecord& v = outcome.votes;
    if (v.max_votes() < tau) return {outcome.pairing_id, outcome.judgment.preferred, LabelSource::JudgeRetained};
    const Side majority = v.votes_a >= tau ? Side::A : Side::B;
    return {outcome.pairing_id, majority, LabelSource::MajorityOverride};
}

std::string make_sample_id(std::string_view pairing_id, int index) {
    return std::string(pairing_id) + ":" + std::to_string(index);
}

std::vector<PreferenceSample> sample_preference_responses(const Backend& sft_policy, const ImageQuestionPair& pair,
                                                          const std::string& response_a,
                                                          const std::string& response_b, int m,
                                                          const ReassignedLabel& label, int max_tokens,
                                                          std::size_t workers) {
    if (sft_policy.spec.role != BackendRole::SftPolicy)
        throw ConfigError("backend '" + sft_policy.id() + "' is not an SFT policy");
    if (m < 2) throw ConfigError("m must be at least 2");

    return parallel_map<PreferenceSample>(static_cast<std::size_t>(m), workers, [&](std::size_t i) {
        const int index = static_cast<int>(i);
        PreferenceSample s;
        s.sample_id = make_sample_id(label.pairing_id, index);
        s.pairing_id = label.pairing_id;
        s.index = index;
        ChatRequest req = make_judge_request(pair, response_a, response_b, 1.0, max_tokens);
        req.seed = static_cast<std::uint64_t>(index);
        try {
            s.critique_text = chat_complete(sft_policy, req);
            s.parsed_preference = parse_verdict(s.critique_text).preferred;
        } catch (const Error&) {
            s.parsed_preference.reset();
        }
        s.correct = s.parsed_preference && *s.parsed_preference == label.label;
        return s;
    });
}

std::string_view scoring_prompt_template() { return kScoringPromptTemplate; }

std::string render_scoring_prompt(std::string_view question, std::string_view caption, std::string_view answer_a,
                                  std::string_view answer_b, std::string_view reference_choice,
                                  std::string_view dpo_sample) {
    const std::array<std::pair<std::string_view, std::string_view>, 6> slots{{
        {"{question}", question},
        {"{caption}", caption},
        {"{answer-A}", answer_a},
        {"{answer-B}", answer_b},
        {"{reference-choice}", reference_choice},
        {"{dpo-sample}", dpo_sample},
    }};
    const std::string_view tpl = kScoringPromptTemplate;
    std::string out;
    out.reserve(tpl.size() + question.size() + caption.size() + answer_a.size() + answer_b.size() + dpo_sample.size());
    std::size_t pos = 0;
    while (pos < tpl.size()) {
        bool replaced = false;
        if (tpl[pos] == '{') {
            for (const auto& [name, value] : slots) {
                if (tpl.compare(pos, name.size(), name) == 0) {
                    out.append(value);
                    pos += name.size();
                    replaced = true;
                    break;
                }
            }
        }
        if (!replaced) out.push_back(tpl[pos++]);
    }
    return out;
}

std::string_view reference_choice_text(Side label) { return label == Side::A ? "Answer 1" : "Answer 2"; }

int parse_score(std::string_view text) {
    constexpr std::string_view kMarker = "**Score**:";
    std::optional<std::string_view> last_digits;
    bool negative = false;
    for (auto pos = text.find(kMarker); pos != std::string_view::npos; pos = text.find(kMarker, pos + 1)) {
        std::size_t i = pos + kMarker.size();
        while (i < text.size() && (text[i] == ' ' || text[i] == '\t')) ++i;
        bool neg = false;
        if (i < text.size() && (text[i] == '-' || text[i] == '+')) {
            neg = text[i] == '-';
            ++i;
        }
        std::size_t j = i;
        while (j < text.size() && std::isdigit(static_cast<unsigned char>(text[j]))) ++j;
        if (j > i) {
            last_digits = text.substr(i, j - i);
            negative = neg;
        }
    }
    if (!last_digits) throw ScoreParseError("no \"**Score**: <integer>\" found");
    long long value = 0;
    auto res = std::from_chars(last_digits->data(), last_digits->data() + last_digits->size(), value);
    if (res.ec != std::errc() || negative || value > 100)
        throw ScoreParseError("score " + std::string(negative ? "-" : "") + std::string(*last_digits) +
                              " outside [0, 100]");
    return static_cast<int>(value);
}

ScoredSample score_sample(const Backend& scorer, const std::string& question, const Caption& caption,
                          const std::string& response_a, const std::string& response_b,
                          const ReassignedLabel& reference_choice, const PreferenceSample& sample, int max_tokens) {
    if (scorer.spec.role != BackendRole::Scorer) throw ConfigError("backend '" + scorer.id() + "' is not a scorer");
    ChatRequest req;
    req.messages.push_back({ChatMessage::Role::User,
                            render_scoring_prompt(question, caption.text, response_a, response_b,
                                                  reference_choice_text(reference_choice.label), sample.critique_text),
                            std::nullopt});
    req.temperature = 0.0;
    req.max_tokens = max_tokens;

    const int attempts = scorer.retry.retry_limit + 1;
    std::string last_error;
    for (int attempt = 0; attempt < attempts; ++attempt) {
        if (attempt > 0) {
            req.seed = static_cast<std::uint64_t>(attempt);
            scorer.stats->parse_retries.fetch_add(1, std::memory_order_relaxed);
        }
        try {
            return ScoredSample{sample, parse_score(chat_complete(scorer, req)), scorer.id()};
        } catch (const ScoreParseError& e) {
            last_error = e.what();
        }
    }
    throw ScoreParseError("scorer '" + scorer.id() + "' on " + sample.sample_id + ": " + last_error);
}

PairSelection select_pairs(NegativeStrategy strategy, const std::vector<ScoredSample>& samples,
                           bool reject_tied_correct) {
    PairSelection out;
    if (samples.empty()) {
        out.skip = SkipReason::NoScoredSamples;
        return out;
    }
    const std::string& pairing_id = samples.front().sample.pairing_id;
    std::vector<const ScoredSample*> usable;
    for (const auto& s : samples) {
        if (s.sample.pairing_id != pairing_id)
            throw MixedPairingIds("samples from '" + pairing_id + "' and '" + s.sample.pairing_id + "' mixed");
        if (s.sample.parsed_preference) usable.push_back(&s);
    }
    std::sort(usable.begin(), usable.end(),
              [](const ScoredSample* a, const ScoredSample* b) { return a->sample.index < b->sample.index; });

    const ScoredSample* chosen = nullptr;
    for (const auto* s : usable) {
        if (s->sample.correct && (chosen == nullptr || s->score > chosen->score)) chosen = s;
    }
    if (chosen == nullptr) {
        out.skip = usable.empty() ? SkipReason::NoScoredSamples : SkipReason::NoCorrectSample;
        return out;
    }

    std::vector<const ScoredSample*> rejected;
    const ScoredSample* lowest_incorrect = nullptr;
    const ScoredSample* highest_incorrect = nullptr;
    for (const auto* s : usable) {
        if (s->sample.correct) continue;
        if (lowest_incorrect == nullptr || s->score < lowest_incorrect->score) lowest_incorrect = s;
        if (highest_incorrect == nullptr || s->score > highest_incorrect->score) highest_incorrect = s;
    }
    switch (strategy) {
        case NegativeStrategy::Strategy1:
            if (lowest_incorrect) rejected.push_back(lowest_incorrect);
            break;
        case NegativeStrategy::Strategy2:
            if (highest_incorrect) rejected.push_back(highest_incorrect);
            break;
        case NegativeStrategy::Strategy3:
            for (const auto* s : usable) {
                if (!s->sample.correct) rejected.push_back(s);
            }
            break;
        case NegativeStrategy::BestToWorse:
            for (const auto* s : usable) {
                if (s == chosen) continue;
                if (s->sample.correct && !reject_tied_correct && s->score >= chosen->score) continue;
                rejected.push_back(s);
            }
            break;
    }
    if (rejected.empty()) {
        out.skip = SkipReason::EmptyRejectedSet;
        return out;
    }
    for (const auto* r : rejected) out.pairs.push_back({pairing_id, *chosen, *r, strategy});
    return out;
}

}  // namespace vlpref
