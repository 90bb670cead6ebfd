// Acceptance run: one PASS/FAIL line per criterion. Exits nonzero if any
// criterion fails.

#include "oracles.hpp"
#include "pipeline_support.hpp"

#include "vlpref/comparison.hpp"
#include "vlpref/errors.hpp"
#include "vlpref/math_fixtures.hpp"
#include "vlpref/refine.hpp"
#include "vlpref/trainmath.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <set>
#include <sstream>

using namespace vlpref;
using namespace vlpref::trainmath;

namespace {

struct Verdict {
    bool pass = true;
    std::ostringstream detail;

    void require(bool ok, const std::string& what) {
        if (!ok) {
            if (pass) detail << "first failure: " << what << "; ";
            pass = false;
        }
    }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// --- 1 ---------------------------------------------------------------------------

void classification_partition(Verdict& v) {
    const auto t0 = std::chrono::steady_clock::now();
    constexpr int kPairings = 500;
    constexpr int kExperts = 5;
    Roster roster;
    // Faults on every role; retry_limit 0 so a single fault becomes a failure.
    roster.judge = testing::mock_backend("judge", BackendRole::StrongJudge, 501, 0.15, 0);
    roster.captioner = testing::mock_backend("captioner", BackendRole::Captioner, 502, 0.02, 0);
    for (int i = 0; i < kExperts; ++i)
        roster.experts.push_back(
            testing::mock_backend("expert-" + std::to_string(i), BackendRole::Expert, 600 + i, 0.03, 0));

    std::mt19937_64 rng(2024);
    auto text = [&](const char* prefix) { return std::string(prefix) + " " + std::to_string(rng() % 1000003); };
    std::set<std::string> high, low, judge_fail, expert_fail;
    int bad_tally = 0;
    CaptionCache captions;
    for (int i = 0; i < kPairings; ++i) {
        const ImageQuestionPair item{"item" + std::to_string(i % 97), "img/" + std::to_string(i % 97) + ".png",
                                     text("question")};
        const ResponsePairing pg{"pg" + std::to_string(i), item.pair_id, "ra" + std::to_string(i),
                                 "rb" + std::to_string(i)};
        const auto res = compare_pairing(roster, captions, item, pg, text("answer"), text("answer"), kExperts - 1);
        if (const auto* o = std::get_if<ComparisonOutcome>(&res)) {
            if (o->votes.votes_a + o->votes.votes_b != kExperts || o->votes.num_experts() != kExperts) ++bad_tally;
            (o->confidence == Confidence::High ? high : low).insert(pg.pairing_id);
        } else {
            const auto& f = std::get<ComparisonFailure>(res);
            (f.failure_class() == FailureClass::JudgeFailure ? judge_fail : expert_fail).insert(pg.pairing_id);
        }
    }
    std::set<std::string> all;
    std::size_t total = 0;
    for (const auto* s : {&high, &low, &judge_fail, &expert_fail}) {
        total += s->size();
        all.insert(s->begin(), s->end());
    }
    const double secs = seconds_since(t0);
    v.require(total == kPairings && all.size() == kPairings, "partition does not cover every pairing exactly once");
    v.require(bad_tally == 0, "v_A + v_B != M");
    v.require(secs < 30.0, "runtime >= 30 s");
    v.require(!high.empty() && !low.empty() && !judge_fail.empty() && !expert_fail.empty(),
              "a class is empty, so the run does not exercise the whole partition");
    v.detail << "high=" << high.size() << " low=" << low.size() << " judge_fail=" << judge_fail.size()
             << " expert_fail=" << expert_fail.size() << " runtime=" << secs << "s (single-threaded)";
}

// --- 2 ---------------------------------------------------------------------------

void rule_fidelity(Verdict& v) {
    // v_A, judge side, expected confidence, expected label for Low outcomes
    // (empty for High), expected source.
    struct Row {
        int va;
        Side judge;
        Confidence confidence;
        std::optional<Side> label;
        std::optional<LabelSource> source;
    };
    using enum Confidence;
    const Side A = Side::A, B = Side::B;
    const auto JR = LabelSource::JudgeRetained, MO = LabelSource::MajorityOverride;
    const std::vector<Row> table{
        {0, A, Low, B, MO},  {0, B, High, {}, {}}, {1, A, Low, B, MO},  {1, B, High, {}, {}},
        {2, A, Low, A, JR},  {2, B, Low, B, JR},   {3, A, Low, A, JR},  {3, B, Low, B, JR},
        {4, A, High, {}, {}}, {4, B, Low, A, MO},  {5, A, High, {}, {}}, {5, B, Low, A, MO},
    };
    int checked = 0;
    for (const auto& row : table) {
        VoteRecord votes;
        votes.pairing_id = "pg";
        votes.votes_a = row.va;
        votes.votes_b = 5 - row.va;
        for (int i = 0; i < 5; ++i) votes.per_expert.push_back({"e" + std::to_string(i), 0, 0, i < row.va ? A : B});
        const Judgment j{"pg", row.judge, "x", "judge", "Better: x"};
        const auto o = classify_confidence(votes, j, 4);
        const std::string where = "v_A=" + std::to_string(row.va) + " judge=" + std::string(to_string(row.judge));
        v.require(o.confidence == row.confidence, "confidence at " + where);
        if (row.confidence == High) {
            bool threw = false;
            try {
                reassign_label(o, 4);
            } catch (const NotLowConfidence&) {
                threw = true;
            }
            v.require(threw, "High outcome accepted by reassign_label at " + where);
        } else {
            const auto l = reassign_label(o, 4);
            v.require(l.label == *row.label && l.source == *row.source, "label/source at " + where);
        }
        ++checked;
    }
    v.require(checked == 12, "not all 12 cases asserted");
    v.detail << checked << " cases asserted (M=5, tau=4)";
}

// --- 3 ---------------------------------------------------------------------------

void negative_sampling_oracle(Verdict& v) {
    std::mt19937_64 rng(7);
    auto as_set = [](const std::vector<std::pair<int, int>>& x) { return std::set<std::pair<int, int>>(x.begin(), x.end()); };
    auto subset = [](const auto& a, const auto& b) { return std::includes(b.begin(), b.end(), a.begin(), a.end()); };
    int groups = 0, mismatches = 0, containment = 0, nonempty = 0;
    for (; groups < 1000; ++groups) {
        const auto g = oracle::random_group(rng);
        std::map<NegativeStrategy, std::set<std::pair<int, int>>> got;
        for (auto s : {NegativeStrategy::Strategy1, NegativeStrategy::Strategy2, NegativeStrategy::Strategy3,
                       NegativeStrategy::BestToWorse}) {
            const auto mine = oracle::as_index_pairs(select_pairs(s, g));
            if (mine != oracle::brute_force_pairs(s, g)) ++mismatches;
            got[s] = as_set(mine);
        }
        if (!subset(got[NegativeStrategy::Strategy1], got[NegativeStrategy::Strategy3]) ||
            !subset(got[NegativeStrategy::Strategy3], got[NegativeStrategy::BestToWorse]) ||
            !subset(got[NegativeStrategy::Strategy2], got[NegativeStrategy::Strategy3]))
            ++containment;
        nonempty += !got[NegativeStrategy::BestToWorse].empty();
    }
    v.require(mismatches == 0, std::to_string(mismatches) + " strategy results differ from brute force");
    v.require(containment == 0, std::to_string(containment) + " groups break containment");
    v.detail << groups << " groups x 4 strategies, " << mismatches << " mismatches, " << containment
             << " containment violations, " << nonempty << " groups with pairs";
}

// --- 4 ---------------------------------------------------------------------------

void loss_exactness(Verdict& v) {
    double sft_err = 0.0;
    const ToyPolicy uniform(4, 1, 16);
    for (int len = 1; len <= 16; ++len)
        sft_err = std::max(sft_err, std::abs(sft_loss(uniform, {0, std::vector<int>(len, len % 4)}) - std::log(4.0)));
    double dpo_err = 0.0;
    for (double mu : {-3.5, 0.0, 1e-3, 42.0})
        for (double beta : {0.01, 1.0}) dpo_err = std::max(dpo_err, std::abs(dpo_loss({mu, mu}, beta) - std::log(2.0)));
    const double pos = dpo_loss({700.0, 0.0}, 1.0);
    const double neg = dpo_loss({0.0, 700.0}, 1.0);
    // softplus(-700) = log1p(e^-700); softplus(700) = 700 + log1p(e^-700)
    const double asym_err = std::max(std::abs(pos - std::log1p(std::exp(-700.0))),
                                     std::abs(neg - (700.0 + std::log1p(std::exp(-700.0)))));
    v.require(sft_err <= 1e-12, "sft_loss(uniform, V=4) off ln 4");
    v.require(dpo_err <= 1e-12, "dpo_loss(equal) off ln 2");
    v.require(std::isfinite(pos) && std::isfinite(neg), "non-finite asymptote");
    v.require(asym_err <= 1e-9, "asymptote off closed form");
    v.detail << "|sft-ln4|=" << sft_err << " |dpo-ln2|=" << dpo_err << " asymptote err=" << asym_err;
}

// --- 5 ---------------------------------------------------------------------------

void gradient_verification(Verdict& v, const MathFixtures& fx) {
    double sft = 0.0, dpo_small = 0.0, dpo_one = 0.0;
    for (const auto& g : fx.gradient) {
        sft = std::max(sft, grad_check([&](const ToyPolicy& p) { return sft_loss(p, g.sft_seq); },
                                       [&](const ToyPolicy& p) { return sft_loss_grad(p, g.sft_seq); }, g.theta, 1e-6));
        for (double beta : {0.01, 1.0}) {
            const double e = grad_check(
                [&](const ToyPolicy& p) { return dpo_loss(dpo_terms(p, g.ref, g.chosen, g.rejected), beta); },
                [&](const ToyPolicy& p) { return dpo_loss_grad(p, g.ref, g.chosen, g.rejected, beta); }, g.theta, 1e-6);
            (beta == 1.0 ? dpo_one : dpo_small) = std::max(beta == 1.0 ? dpo_one : dpo_small, e);
        }
    }
    const auto& g0 = fx.gradient.front();
    const double sentinel = grad_check([&](const ToyPolicy& p) { return sft_loss(p, g0.sft_seq); },
                                       [&](const ToyPolicy& p) {
                                           auto grad = sft_loss_grad(p, g0.sft_seq);
                                           grad[p.offset(g0.sft_seq.context_id, 0) + g0.sft_seq.tokens[0]] *= 2.0;
                                           return grad;
                                       },
                                       g0.theta, 1e-6);
    v.require(fx.gradient.size() == 20, "fixture count is not 20");
    v.require(sft < 1e-5 && dpo_small < 1e-5 && dpo_one < 1e-5, "max relative error >= 1e-5");
    v.require(sentinel > 1e-3, "corrupted gradient not detected");
    v.detail << fx.gradient.size() << " fixtures, max rel err sft=" << sft << " dpo(0.01)=" << dpo_small
             << " dpo(1)=" << dpo_one << " sentinel=" << sentinel;
}

// --- 6 ---------------------------------------------------------------------------

void toy_training(Verdict& v, const MathFixtures& fx) {
    const auto& t = fx.training;
    const auto t0 = std::chrono::steady_clock::now();
    const auto a = train_toy(t.pairs, t.sft_seqs, t.config, ToyPolicy(t.vocab, t.contexts, t.max_len));
    const double secs = seconds_since(t0);
    const auto b = train_toy(t.pairs, t.sft_seqs, t.config, ToyPolicy(t.vocab, t.contexts, t.max_len));
    const auto& h = a.history;
    v.require(t.pairs.size() == 100, "training set is not 100 pairs");
    v.require(t.config.dpo_steps == 300, "not 300 DPO steps");
    v.require(h.dpo_loss.front() == std::log(2.0), "DPO start loss is not exactly ln 2");
    v.require(h.dpo_margin.front() == 0.0, "DPO start margin is not exactly 0");
    v.require(h.dpo_loss.back() < std::log(2.0), "final loss not below ln 2");
    v.require(h.dpo_margin.back() > 0.0, "final margin not positive");
    v.require(a.policy.params() == b.policy.params() && h.dpo_loss == b.history.dpo_loss &&
                  h.dpo_margin == b.history.dpo_margin,
              "two runs differ");
    v.require(secs < 10.0, "runtime >= 10 s");
    char buf[200];
    std::snprintf(buf, sizeof buf, "start loss=%.17g margin=%g, final loss=%.6f margin=%.4f, runtime=%.3fs, bitwise repeat ok",
                  h.dpo_loss.front(), h.dpo_margin.front(), h.dpo_loss.back(), h.dpo_margin.back(), secs);
    v.detail << buf;
}

// --- 7 ---------------------------------------------------------------------------

void determinism_and_resume(Verdict& v) {
    testing::TempDir first, second, pool1, pool8;
    const auto fault_cfg = std::filesystem::path(VLPREF_DATA_DIR) / "mock_faults_config.json";
    run_stage(Stage::All, testing::mock_run(first.path(), 4, 11, fault_cfg));
    run_stage(Stage::All, testing::mock_run(second.path(), 4, 11, fault_cfg));
    const auto d1 = testing::digests_of(first.path());
    v.require(d1 == testing::digests_of(second.path()), "two identical runs differ");

    run_stage(Stage::All, testing::mock_run(pool1.path(), 1, 11, fault_cfg));
    run_stage(Stage::All, testing::mock_run(pool8.path(), 8, 11, fault_cfg));
    v.require(testing::digests_of(pool1.path()) == testing::digests_of(pool8.path()), "pool 1 and pool 8 differ");
    v.require(testing::digests_of(pool1.path()) == d1, "pool size changes output");

    const auto resumed = run_stage(Stage::All, testing::mock_run(first.path(), 4, 11, fault_cfg));
    const bool all_skipped =
        std::all_of(resumed.begin(), resumed.end(), [](const StageReport& r) { return r.skipped; });
    v.require(all_skipped, "resumed run recomputed a completed stage");
    v.require(testing::digests_of(first.path()) == d1, "resumed run changed the manifest or outputs");
    v.detail << d1.size() << " files byte-identical across repeat, pool sizes 1/8, and resume (" << resumed.size()
             << " stages skipped); manifest sha256=" << d1.at(files::kManifest).substr(0, 16);
}

// --- 8 ---------------------------------------------------------------------------

void prompt_fidelity(Verdict& v) {
    const auto golden = testing::slurp(std::filesystem::path(VLPREF_GOLDEN_DIR) / "scoring_prompt_fixture.txt");
    const auto rendered =
        render_scoring_prompt("How many mugs are on the table?", "A wooden table with two white mugs and a laptop.",
                              "There are two mugs.", "There are three mugs.", reference_choice_text(Side::A),
                              "Better: A\nAnswer 1 counts the mugs correctly; Answer 2 overcounts.");
    std::size_t diff_at = 0;
    while (diff_at < std::min(golden.size(), rendered.size()) && golden[diff_at] == rendered[diff_at]) ++diff_at;
    v.require(rendered == golden, "rendered prompt differs from golden at byte " + std::to_string(diff_at));
    int round_trips = 0;
    for (int k = 0; k <= 100; ++k) round_trips += parse_score("Clarity: fine\n**Score**: " + std::to_string(k)) == k;
    v.require(round_trips == 101, "parse_score round trip failed");
    v.detail << "golden " << golden.size() << " bytes identical, parse_score round-trips " << round_trips << "/101";
}

}  // namespace

int main() {
    const auto fx = load_math_fixtures(std::filesystem::path(VLPREF_DATA_DIR) / "toy_fixtures.json");
    const std::vector<std::pair<std::string, std::function<void(Verdict&)>>> criteria{
        {"classification partition", classification_partition},
        {"rule fidelity", rule_fidelity},
        {"negative-sampling oracle", negative_sampling_oracle},
        {"loss exactness", loss_exactness},
        {"gradient verification", [&](Verdict& v) { gradient_verification(v, fx); }},
        {"toy training behavior", [&](Verdict& v) { toy_training(v, fx); }},
        {"determinism and resumability", determinism_and_resume},
        {"prompt fidelity", prompt_fidelity},
    };
    int failed = 0;
    for (const auto& [name, check] : criteria) {
        Verdict v;
        try {
            check(v);
        } catch (const std::exception& e) {
            v.pass = false;
            v.detail << "exception: " << e.what();
        }
        std::printf("%s  %-30s %s\n", v.pass ? "PASS" : "FAIL", name.c_str(), v.detail.str().c_str());
        failed += !v.pass;
    }
    std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
    return failed == 0 ? 0 : 1;
}
