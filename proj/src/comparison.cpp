#include "vlpref/comparison.hpp"

#include "vlpref/errors.hpp"
#include "vlpref/worker_pool.hpp"

#include <algorithm>
#include <cctype>

namespace vlpref {

std::string_view to_string(Confidence c) { return c == Confidence::High ? "high" : "low"; }

int VoteRecord::tie_breaks() const {
    return static_cast<int>(
        std::count_if(per_expert.begin(), per_expert.end(), [](const ExpertVote& v) { return v.reward_a == v.reward_b; }));
}

namespace {

std::string_view trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

bool iequals(std::string_view a, std::string_view b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (std::tolower(static_cast<unsigned char>(a[i])) != std::tolower(static_cast<unsigned char>(b[i])))
            return false;
    }
    return true;
}

constexpr std::string_view kJudgeInstructions =
    "You are an impartial judge of answers to questions about an image. Compare Response A and "
    "Response B and decide which one answers the question better, considering accuracy with respect "
    "to the image, relevance, reasoning, and clarity. Ties are not allowed; you must choose one.\n"
    "Output format: the first line must be exactly \"Better: A\" or \"Better: B\". Follow it with an "
    "explanation of your judgment.";

}  // namespace

VerdictParse parse_verdict(std::string_view raw) {
    VerdictParse out;
    std::size_t pos = 0;
    while (pos <= raw.size()) {
        const auto nl = raw.find('\n', pos);
        const std::string_view line = raw.substr(pos, nl == std::string_view::npos ? raw.npos : nl - pos);
        const std::string_view t = trim(line);
        constexpr std::string_view kHeader = "Better:";
        if (t.size() >= kHeader.size() && iequals(t.substr(0, kHeader.size()), kHeader)) {
            const std::string_view value = trim(t.substr(kHeader.size()));
            if (value == "A" || value == "a")
                out.preferred = Side::A;
            else if (value == "B" || value == "b")
                out.preferred = Side::B;
            else if (iequals(value, "tie"))
                out.tie = true;
            if (out.preferred) {
                const std::string_view rest = nl == std::string_view::npos ? std::string_view{} : raw.substr(nl + 1);
                out.explanation = std::string(trim(rest));
                if (out.explanation.empty()) out.preferred.reset();
            }
            return out;
        }
        if (nl == std::string_view::npos) break;
        pos = nl + 1;
    }
    return out;
}

ChatRequest make_judge_request(const ImageQuestionPair& pair, const std::string& response_a,
                               const std::string& response_b, double temperature, int max_tokens) {
    ChatRequest req;
    req.messages.push_back({ChatMessage::Role::System, std::string(kJudgeInstructions), std::nullopt});
    req.messages.push_back({ChatMessage::Role::User,
                            "Question:\n" + pair.question + "\n\n[Response A]\n" + response_a + "\n\n[Response B]\n" +
                                response_b,
                            pair.image_ref});
    req.temperature = temperature;
    req.max_tokens = max_tokens;
    return req;
}

namespace {

// Asks until a verdict parses; returns the raw reply and its parse.
std::pair<std::string, VerdictParse> ask_for_verdict(const Backend& backend, ChatRequest req) {
    const int attempts = backend.retry.retry_limit + 1;
    bool saw_tie = false;
    for (int attempt = 0; attempt < attempts; ++attempt) {
        if (attempt > 0) {
            req.seed = req.seed.value_or(0) + 0x9e3779b9ULL * static_cast<std::uint64_t>(attempt);
            backend.stats->parse_retries.fetch_add(1, std::memory_order_relaxed);
        }
        std::string raw = chat_complete(backend, req);
        VerdictParse parsed = parse_verdict(raw);
        if (parsed.preferred) return {std::move(raw), std::move(parsed)};
        if (parsed.tie) {
            saw_tie = true;
            backend.stats->tie_verdicts.fetch_add(1, std::memory_order_relaxed);
        }
    }
    throw JudgeParseError("backend '" + backend.id() + "' gave no usable verdict after " + std::to_string(attempts) +
                          " attempts" + (saw_tie ? " (tie verdicts are not accepted)" : ""));
}

}  // namespace

Judgment strong_judge(const Backend& judge, const ImageQuestionPair& pair, const std::string& pairing_id,
                      const std::string& response_a, const std::string& response_b, int max_tokens) {
    if (judge.spec.role != BackendRole::StrongJudge)
        throw ConfigError("backend '" + judge.id() + "' is not a strong judge");
    auto [raw, parsed] = ask_for_verdict(judge, make_judge_request(pair, response_a, response_b, 0.0, max_tokens));
    return Judgment{pairing_id, *parsed.preferred, std::move(parsed.explanation), judge.id(), std::move(raw)};
}

VoteRecord expert_vote(const std::vector<Backend>& experts, const Caption& caption, const std::string& question,
                       const std::string& pairing_id, const std::string& response_a,
                       const std::string& response_b, bool a_is_canonical_first) {
    if (experts.empty()) throw ConfigError("expert_vote needs at least one expert");
    VoteRecord record;
    record.pairing_id = pairing_id;
    for (const auto& e : experts) {
        if (e.spec.role != BackendRole::Expert) throw ConfigError("backend '" + e.id() + "' is not an expert");
        ExpertVote v;
        v.expert_id = e.id();
        v.reward_a = expert_reward(e, caption, question, response_a);
        v.reward_b = expert_reward(e, caption, question, response_b);
        if (v.reward_a > v.reward_b)
            v.vote = Side::A;
        else if (v.reward_b > v.reward_a)
            v.vote = Side::B;
        else
            v.vote = a_is_canonical_first ? Side::A : Side::B;
        record.per_expert.push_back(std::move(v));
    }
    std::sort(record.per_expert.begin(), record.per_expert.end(),
              [](const ExpertVote& a, const ExpertVote& b) { return a.expert_id < b.expert_id; });
    for (const auto& v : record.per_expert) (v.vote == Side::A ? record.votes_a : record.votes_b) += 1;
    return record;
}

ComparisonOutcome classify_confidence(const VoteRecord& votes, const Judgment& judgment, int tau) {
    if (votes.pairing_id != judgment.pairing_id)
        throw MismatchedPairing("votes for '" + votes.pairing_id + "' paired with judgment for '" +
                                judgment.pairing_id + "'");
    if (tau < 1 || tau > votes.num_experts())
        throw ConfigError("tau must lie in [1, M]");

    ComparisonOutcome out;
    out.pairing_id = votes.pairing_id;
    out.judgment = judgment;
    out.votes = votes;
    if (votes.votes_a >= tau)
        out.majority = Side::A;
    else if (votes.votes_b >= tau)
        out.majority = Side::B;
    out.confidence = out.majority && *out.majority == judgment.preferred ? Confidence::High : Confidence::Low;
    return out;
}

FinalJudgment infer_preference(const Backend& trained, const ImageQuestionPair& pair, const std::string& response_a,
                               const std::string& response_b, int max_tokens) {
    if (trained.spec.role != BackendRole::SftPolicy && trained.spec.role != BackendRole::StrongJudge)
        throw ConfigError("backend '" + trained.id() + "' cannot produce judgments");
    auto [raw, parsed] = ask_for_verdict(trained, make_judge_request(pair, response_a, response_b, 0.0, max_tokens));
    return FinalJudgment{*parsed.preferred, std::move(raw)};
}

std::vector<FinalJudgment> infer_preferences(const Backend& trained, const std::vector<InferenceInput>& inputs,
                                             std::size_t workers, int max_tokens) {
    return parallel_map<FinalJudgment>(inputs.size(), workers, [&](std::size_t i) {
        const auto& in = inputs[i];
        return infer_preference(trained, in.pair, in.response_a, in.response_b, max_tokens);
    });
}

std::string_view to_string(FailureClass c) {
    return c == FailureClass::JudgeFailure ? "judge_failure" : "expert_failure";
}

std::string_view to_string(FailureReason r) {
    switch (r) {
        case FailureReason::JudgeParse: return "judge_parse";
        case FailureReason::JudgeBackend: return "judge_backend";
        case FailureReason::ExpertScoreParse: return "expert_score_parse";
        case FailureReason::ExpertBackend: return "expert_backend";
        case FailureReason::Caption: return "caption";
    }
    return "judge_parse";
}

FailureReason parse_failure_reason(std::string_view text) {
    for (auto r : {FailureReason::JudgeParse, FailureReason::JudgeBackend, FailureReason::ExpertScoreParse,
                   FailureReason::ExpertBackend, FailureReason::Caption}) {
        if (text == to_string(r)) return r;
    }
    throw ProtocolError("unknown failure reason '" + std::string(text) + "'");
}

FailureClass failure_class_of(FailureReason r) {
    return r == FailureReason::JudgeParse || r == FailureReason::JudgeBackend ? FailureClass::JudgeFailure
                                                                               : FailureClass::ExpertFailure;
}

ComparisonResult compare_pairing(const Roster& roster, CaptionCache& captions, const ImageQuestionPair& pair,
                                 const ResponsePairing& pairing, const std::string& response_a,
                                 const std::string& response_b, int tau, int max_tokens) {
    auto fail = [&](FailureReason reason, const std::exception& e) {
        return ComparisonFailure{pairing.pairing_id, pair.pair_id, reason, e.what()};
    };

    Judgment judgment;
    try {
        judgment = strong_judge(roster.require_judge(), pair, pairing.pairing_id, response_a, response_b, max_tokens);
    } catch (const JudgeParseError& e) {
        return fail(FailureReason::JudgeParse, e);
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        return fail(FailureReason::JudgeBackend, e);
    }

    Caption caption;
    try {
        caption = generate_caption(roster.require_captioner(), pair, captions);
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        return fail(FailureReason::Caption, e);
    }

    VoteRecord votes;
    try {
        votes = expert_vote(roster.experts, caption, pair.question, pairing.pairing_id, response_a, response_b,
                            pairing.a_is_canonical_first());
    } catch (const ScoreParseError& e) {
        return fail(FailureReason::ExpertScoreParse, e);
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        return fail(FailureReason::ExpertBackend, e);
    }
    return classify_confidence(votes, judgment, tau);
}

}  // namespace vlpref
