#include "helpers.hpp"

#include "vlpref/comparison.hpp"
#include "vlpref/errors.hpp"
#include "vlpref/refine.hpp"

#include <doctest.h>

#include <random>
#include <thread>

using namespace vlpref;

namespace {

const ImageQuestionPair kPair{"pair-1", "img/clock.png", "What time does the clock show?"};

Judgment judgment(Side s, const std::string& pairing = "pg") { return {pairing, s, "because", "judge", "Better: X"}; }

VoteRecord votes(int va, int m, const std::string& pairing = "pg") {
    VoteRecord v;
    v.pairing_id = pairing;
    v.votes_a = va;
    v.votes_b = m - va;
    for (int i = 0; i < m; ++i)
        v.per_expert.push_back({"e" + std::to_string(i), 0.0, 0.0, i < va ? Side::A : Side::B});
    return v;
}

// Expert whose reward is read from a table keyed by response text.
Backend table_expert(const std::string& id, std::map<std::string, std::string> replies) {
    auto t = std::make_shared<testing::ScriptedTransport>([replies](const ChatRequest& req, int) {
        const std::string& user = req.messages.back().text;
        for (const auto& [resp, reply] : replies) {
            if (user.size() >= resp.size() && user.compare(user.size() - resp.size(), resp.size(), resp) == 0)
                return reply;
        }
        return std::string("Quality score: 0.5");
    });
    return testing::scripted_backend(id, BackendRole::Expert, t);
}

Backend scripted_judge(std::string reply) {
    auto t = std::make_shared<testing::ScriptedTransport>([reply](const ChatRequest&, int) { return reply; });
    return testing::scripted_backend("judge", BackendRole::StrongJudge, t);
}

}  // namespace

TEST_CASE("verdict format contract") {
    const auto j = strong_judge(scripted_judge("Better: B\nResponse B correctly names the clock."), kPair, "pg",
                                "ra", "rb");
    CHECK(j.preferred == Side::B);
    CHECK(j.explanation == "Response B correctly names the clock.");
    CHECK(j.raw_text == "Better: B\nResponse B correctly names the clock.");
    CHECK(j.judge_id == "judge");
    CHECK(j.pairing_id == "pg");
}

TEST_CASE("parse_verdict edge cases") {
    CHECK(parse_verdict("Better: A\nok").preferred == Side::A);
    CHECK(parse_verdict("preamble\n  better:  b  \nexplained").preferred == Side::B);
    CHECK_FALSE(parse_verdict("Better: A").preferred.has_value());  // no explanation
    CHECK_FALSE(parse_verdict("Both are fine").preferred.has_value());
    CHECK_FALSE(parse_verdict("Better: C\nhmm").preferred.has_value());
    const auto tie = parse_verdict("Better: Tie\nequally good");
    CHECK(tie.tie);
    CHECK_FALSE(tie.preferred.has_value());
    // Only the first header counts.
    CHECK(parse_verdict("Better: A\nx\nBetter: B\ny").preferred == Side::A);
}

TEST_CASE("repeatedly unparseable judge raises JudgeParseError after retry_limit re-asks") {
    auto t = std::make_shared<testing::ScriptedTransport>(
        [](const ChatRequest&, int) { return std::string("Both are fine"); });
    const auto judge = testing::scripted_backend("judge", BackendRole::StrongJudge, t, 2);
    CHECK_THROWS_AS(strong_judge(judge, kPair, "pg", "a", "b"), JudgeParseError);
    CHECK(t->calls() == 3);
    CHECK(judge.stats->parse_retries == 2);
    // Re-asks vary the seed so a sampling endpoint can answer differently.
    const auto reqs = t->requests();
    CHECK(reqs[1].seed != reqs[2].seed);
}

TEST_CASE("tie verdicts are counted and retried") {
    auto t = std::make_shared<testing::ScriptedTransport>([](const ChatRequest&, int call) {
        return call == 0 ? std::string("Better: tie\nsame") : std::string("Better: A\nA is sharper");
    });
    const auto judge = testing::scripted_backend("judge", BackendRole::StrongJudge, t, 2);
    CHECK(strong_judge(judge, kPair, "pg", "a", "b").preferred == Side::A);
    CHECK(judge.stats->tie_verdicts == 1);
}

TEST_CASE("judge request carries the image, both responses and greedy temperature") {
    const auto req = make_judge_request(kPair, "first answer", "second answer", 0.0);
    CHECK(req.has_image());
    CHECK(req.temperature == 0.0);
    const auto& user = req.messages.back().text;
    CHECK(user.find("first answer") < user.find("second answer"));
    CHECK(user.find(kPair.question) != std::string::npos);
    CHECK(req.messages.front().text.find("Better: A") != std::string::npos);
}

TEST_CASE("mock judge verdicts over 50 pairings are pinned") {
    const auto judge = testing::mock_backend("judge", BackendRole::StrongJudge, 4242);
    std::string verdicts;
    for (int i = 0; i < 50; ++i) {
        const auto j = strong_judge(judge, kPair, "pg" + std::to_string(i), "answer a" + std::to_string(i),
                                    "answer b" + std::to_string(i));
        verdicts += to_string(j.preferred);
    }
    CHECK(verdicts == "BABBAAAABBBBAABBAAABBAAAAABBBAAABAAAABABBBAAABABBB");
}

TEST_CASE("expert tally: four of five favour A") {
    std::vector<Backend> experts;
    for (int i = 0; i < 5; ++i) {
        const bool favour_a = i != 2;
        experts.push_back(table_expert("expert-" + std::to_string(i),
                                       {{"resp-a", favour_a ? "Quality score: 0.9" : "Quality score: 0.1"},
                                        {"resp-b", "Quality score: 0.5"}}));
    }
    const auto v = expert_vote(experts, {"p", "caption", "cap"}, "q", "pg", "resp-a", "resp-b");
    CHECK(v.votes_a == 4);
    CHECK(v.votes_b == 1);
    CHECK(v.per_expert[2].vote == Side::B);
    CHECK(v.tie_breaks() == 0);
}

TEST_CASE("exact reward ties go to the canonically first response") {
    std::vector<Backend> experts;
    for (int i = 0; i < 5; ++i) experts.push_back(table_expert("expert-" + std::to_string(i), {}));
    const auto v = expert_vote(experts, {"p", "c", "cap"}, "q", "pg", "x", "y", true);
    CHECK(v.votes_a == 5);
    CHECK(v.votes_b == 0);
    CHECK(v.tie_breaks() == 5);
    const auto w = expert_vote(experts, {"p", "c", "cap"}, "q", "pg", "x", "y", false);
    CHECK(w.votes_b == 5);
}

TEST_CASE("five mock experts over a fixed pairing give pinned votes") {
    const auto experts = testing::mock_experts(5, 900);
    const auto v = expert_vote(experts, {"p", "a kitchen with two mugs", "cap"}, "How many mugs?", "pg",
                               "There are two mugs.", "There are three mugs.");
    CHECK(v.votes_a == 4);
    CHECK(v.votes_b == 1);
    CHECK(v == expert_vote(experts, {"p", "a kitchen with two mugs", "cap"}, "How many mugs?", "pg",
                           "There are two mugs.", "There are three mugs."));
}

TEST_CASE("per_expert is sorted by expert id whatever the roster order") {
    auto experts = testing::mock_experts(5, 1);
    std::reverse(experts.begin(), experts.end());
    const auto v = expert_vote(experts, {"p", "c", "cap"}, "q", "pg", "a", "b");
    for (std::size_t i = 1; i < v.per_expert.size(); ++i) CHECK(v.per_expert[i - 1].expert_id < v.per_expert[i].expert_id);
}

TEST_CASE("one unparseable expert fails the whole vote") {
    auto experts = testing::mock_experts(4, 1);
    auto bad = std::make_shared<testing::ScriptedTransport>(
        [](const ChatRequest&, int) { return std::string("no digits here"); });
    experts.push_back(testing::scripted_backend("expert-9", BackendRole::Expert, bad));
    CHECK_THROWS_AS(expert_vote(experts, {"p", "c", "cap"}, "q", "pg", "a", "b"), ScoreParseError);
}

TEST_CASE("classification examples") {
    CHECK(classify_confidence(votes(4, 5), judgment(Side::A), 4).confidence == Confidence::High);
    const auto balanced = classify_confidence(votes(3, 5), judgment(Side::A), 4);
    CHECK(balanced.confidence == Confidence::Low);
    CHECK_FALSE(balanced.majority.has_value());
    const auto conflict = classify_confidence(votes(0, 5), judgment(Side::A), 4);
    CHECK(conflict.confidence == Confidence::Low);
    CHECK(conflict.majority == Side::B);
    CHECK_THROWS_AS(classify_confidence(votes(4, 5, "x"), judgment(Side::A, "y"), 4), MismatchedPairing);
    CHECK_THROWS_AS(classify_confidence(votes(4, 5), judgment(Side::A), 6), ConfigError);
}

TEST_CASE("rule tables, M=5 tau=4: all 12 (v_A, judge) cases") {
    int cases = 0;
    for (int va = 0; va <= 5; ++va) {
        for (Side js : {Side::A, Side::B}) {
            ++cases;
            const auto o = classify_confidence(votes(va, 5), judgment(js), 4);
            const int vb = 5 - va;
            std::optional<Side> majority;
            if (va >= 4) majority = Side::A;
            if (vb >= 4) majority = Side::B;
            CAPTURE(va);
            CAPTURE(to_string(js));
            CHECK(o.majority == majority);
            const bool high = majority && *majority == js;
            CHECK(o.confidence == (high ? Confidence::High : Confidence::Low));
            if (!high) {
                const auto label = reassign_label(o, 4);
                if (!majority) {
                    CHECK(label.source == LabelSource::JudgeRetained);
                    CHECK(label.label == js);
                } else {
                    CHECK(label.source == LabelSource::MajorityOverride);
                    CHECK(label.label == *majority);
                }
            } else {
                CHECK_THROWS_AS(reassign_label(o, 4), NotLowConfidence);
            }
        }
    }
    CHECK(cases == 12);
}

TEST_CASE("flipping the judge on a High outcome makes it Low") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        const int m = 3 + static_cast<int>(rng() % 5);
        const int tau = m - 1;
        const int va = static_cast<int>(rng() % (m + 1));
        const Side js = rng() % 2 ? Side::A : Side::B;
        const auto o = classify_confidence(votes(va, m), judgment(js), tau);
        if (o.confidence != Confidence::High) continue;
        CHECK(std::max(va, m - va) >= m - 1);
        CHECK(classify_confidence(votes(va, m), judgment(opposite(js)), tau).confidence == Confidence::Low);
    }
}

TEST_CASE("v_A + v_B = M over random reward tables") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 100; ++trial) {
        const int m = 1 + static_cast<int>(rng() % 7);
        std::vector<Backend> experts;
        for (int i = 0; i < m; ++i) {
            // coarse rewards so exact ties happen
            auto reward = [&] { return "Quality score: " + std::to_string(static_cast<int>(rng() % 3)) + ".0"; };
            experts.push_back(table_expert("e" + std::to_string(i), {{"AAA", reward()}, {"BBB", reward()}}));
        }
        const auto v = expert_vote(experts, {"p", "c", "cap"}, "q", "pg", "AAA", "BBB");
        CHECK(v.votes_a + v.votes_b == m);
        CHECK(v.num_experts() == m);
        int a = 0;
        for (const auto& e : v.per_expert) a += e.vote == Side::A;
        CHECK(a == v.votes_a);
    }
}

TEST_CASE("compare_pairing partitions into outcome or failure with the right class") {
    RawConfig raw;
    raw.num_experts = 5;
    raw.rng_seed = 3;
    auto roster = make_roster(validate_config(raw));
    const ResponsePairing pg{"pg", kPair.pair_id, "ra", "rb"};

    CaptionCache cache;
    const auto ok = compare_pairing(roster, cache, kPair, pg, "a", "b", 4);
    REQUIRE(std::holds_alternative<ComparisonOutcome>(ok));
    CHECK(std::get<ComparisonOutcome>(ok).votes.num_experts() == 5);

    auto judge_fail = roster;
    judge_fail.judge = scripted_judge("no verdict");
    CaptionCache c2;
    const auto jf = compare_pairing(judge_fail, c2, kPair, pg, "a", "b", 4);
    REQUIRE(std::holds_alternative<ComparisonFailure>(jf));
    CHECK(std::get<ComparisonFailure>(jf).failure_class() == FailureClass::JudgeFailure);
    CHECK(std::get<ComparisonFailure>(jf).reason == FailureReason::JudgeParse);

    auto expert_fail = roster;
    auto bad = std::make_shared<testing::ScriptedTransport>(
        [](const ChatRequest&, int) -> std::string { throw TransportError("down"); });
    expert_fail.experts[3].transport = bad;
    CaptionCache c3;
    const auto ef = compare_pairing(expert_fail, c3, kPair, pg, "a", "b", 4);
    REQUIRE(std::holds_alternative<ComparisonFailure>(ef));
    CHECK(std::get<ComparisonFailure>(ef).reason == FailureReason::ExpertBackend);
    CHECK(std::get<ComparisonFailure>(ef).failure_class() == FailureClass::ExpertFailure);

    auto caption_fail = roster;
    auto blank = std::make_shared<testing::ScriptedTransport>([](const ChatRequest&, int) { return std::string(" "); });
    caption_fail.captioner->transport = blank;
    CaptionCache c4;
    const auto cf = compare_pairing(caption_fail, c4, kPair, pg, "a", "b", 4);
    REQUIRE(std::holds_alternative<ComparisonFailure>(cf));
    CHECK(std::get<ComparisonFailure>(cf).reason == FailureReason::Caption);
}

TEST_CASE("inference path") {
    const auto trained = scripted_judge("Better: A\nResponse A is more accurate about the clock.");
    auto sft = trained;
    sft.spec.role = BackendRole::SftPolicy;
    const auto fj = infer_preference(sft, kPair, "a", "b");
    CHECK(fj.preferred == Side::A);
    CHECK(fj.critique == "Better: A\nResponse A is more accurate about the clock.");

    const auto mock = testing::mock_backend("policy", BackendRole::SftPolicy, 8);
    CHECK(infer_preference(mock, kPair, "a", "b") == infer_preference(mock, kPair, "a", "b"));
    CHECK_THROWS_AS(infer_preference(testing::mock_backend("g", BackendRole::Generator, 1), kPair, "a", "b"),
                    ConfigError);
}

TEST_CASE("batch inference returns results in input order despite shuffled completion") {
    auto t = std::make_shared<testing::ScriptedTransport>([](const ChatRequest& req, int) {
        const auto& user = req.messages.back().text;
        const auto idx = std::stoi(user.substr(user.rfind('#') + 1));
        // later inputs finish first
        std::this_thread::sleep_for(std::chrono::milliseconds(20 - idx));
        return std::string(idx % 2 ? "Better: B\n" : "Better: A\n") + "item #" + std::to_string(idx);
    });
    const auto policy = testing::scripted_backend("policy", BackendRole::SftPolicy, t);
    std::vector<InferenceInput> inputs;
    for (int i = 0; i < 20; ++i) inputs.push_back({kPair, "a", "b #" + std::to_string(i)});
    const auto out = infer_preferences(policy, inputs, 8);
    REQUIRE(out.size() == 20);
    for (int i = 0; i < 20; ++i) {
        CHECK(out[i].critique.substr(out[i].critique.rfind('#') + 1) == std::to_string(i));
        CHECK(out[i].preferred == (i % 2 ? Side::B : Side::A));
    }
}
