#include "vlpref/pipeline.hpp"

#include "vlpref/backends.hpp"
#include "vlpref/comparison.hpp"
#include "vlpref/digest.hpp"
#include "vlpref/generation.hpp"
#include "vlpref/refine.hpp"
#include "vlpref/worker_pool.hpp"

#include <chrono>
#include <map>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#ifndef VLPREF_VERSION
#define VLPREF_VERSION "0.0.0"
#endif

namespace vlpref {

namespace fs = std::filesystem;
using nlohmann::json;

std::string tool_version() { return VLPREF_VERSION; }

std::string_view to_string(Stage s) {
    switch (s) {
        case Stage::Generate: return "generate";
        case Stage::Compare: return "compare";
        case Stage::Relabel: return "relabel";
        case Stage::Score: return "score";
        case Stage::Pairs: return "pairs";
        case Stage::Emit: return "emit";
        case Stage::VerifyMath: return "verify-math";
        case Stage::All: return "all";
    }
    return "all";
}

Stage parse_stage(std::string_view text) {
    if (text == "verify_math") return Stage::VerifyMath;
    for (auto s : {Stage::Generate, Stage::Compare, Stage::Relabel, Stage::Score, Stage::Pairs, Stage::Emit,
                   Stage::VerifyMath, Stage::All}) {
        if (text == to_string(s)) return s;
    }
    throw ConfigError("unknown stage '" + std::string(text) + "'");
}

bool StageReport::verification_failed() const {
    return std::any_of(checks.begin(), checks.end(), [](const auto& c) { return !c.pass; });
}

bool StageWarnings::any() const {
    return tie_verdicts + parse_retries + transport_retries + expert_tie_breaks + items_without_pairings > 0;
}

json StageReport::to_json() const {
    json j{{"stage", stage},
           {"wall_seconds", wall_seconds},
           {"skipped", skipped},
           {"counts", counts},
           {"warnings",
            {{"tie_verdicts", warnings.tie_verdicts},
             {"parse_retries", warnings.parse_retries},
             {"transport_retries", warnings.transport_retries},
             {"expert_tie_breaks", warnings.expert_tie_breaks},
             {"items_without_pairings", warnings.items_without_pairings}}}};
    if (!checks.empty()) {
        json rows = json::array();
        for (const auto& c : checks) {
            rows.push_back(json{{"name", c.name},
                                {"value", c.value},
                                {"threshold", c.threshold},
                                {"relation", c.relation},
                                {"pass", c.pass}});
        }
        j["checks"] = rows;
    }
    return j;
}

std::string StageReport::to_text() const {
    std::ostringstream os;
    os << "stage " << stage << (skipped ? " (skipped, up to date)" : "") << "  wall " << wall_seconds << " s\n";
    for (const auto& [k, v] : counts.items()) os << "  " << k << ": " << v.dump() << '\n';
    if (warnings.any()) {
        os << "  warnings: tie_verdicts=" << warnings.tie_verdicts << " parse_retries=" << warnings.parse_retries
           << " transport_retries=" << warnings.transport_retries
           << " expert_tie_breaks=" << warnings.expert_tie_breaks
           << " items_without_pairings=" << warnings.items_without_pairings << '\n';
    }
    for (const auto& c : checks) {
        os << "  [" << (c.pass ? "PASS" : "FAIL") << "] " << c.name << ": " << c.value << ' ' << c.relation << ' '
           << c.threshold << '\n';
    }
    return os.str();
}

int exit_code_for(const std::exception& e) {
    if (const auto* sf = dynamic_cast<const StageFailure*>(&e)) return sf->exit_code();
    if (dynamic_cast<const ConfigError*>(&e)) return 2;
    if (dynamic_cast<const MissingPrerequisite*>(&e)) return 3;
    if (dynamic_cast<const FailureBudgetExceeded*>(&e)) return 4;
    if (dynamic_cast<const VerificationFailed*>(&e)) return 5;
    return 1;
}

PipelineConfig resolve_config(const std::optional<fs::path>& path, const ConfigOverrides& ov) {
    RawConfig raw = path ? load_config(*path) : RawConfig{};
    if (ov.seed) raw.rng_seed = *ov.seed;
    if (ov.strategy) raw.negative_strategy = *ov.strategy;
    if (ov.pairs_per_item) raw.pairs_per_item = *ov.pairs_per_item;
    if (ov.max_parallel) raw.max_parallel_requests = *ov.max_parallel;
    PipelineConfig cfg = validate_config(raw);
    return ov.mock ? force_mock(std::move(cfg)) : cfg;
}

namespace {

struct StageIo {
    std::vector<std::string> inputs;
    std::vector<std::string> outputs;
};

StageIo stage_io(Stage s) {
    using namespace files;
    switch (s) {
        case Stage::Generate: return {{}, {kItemsKeyed, kResponses, kGenerateFailures, kPairings}};
        // Inputs are listed nearest producer first, so a missing file is
        // reported against the stage that should have run just before.
        case Stage::Compare:
            return {{kPairings, kResponses, kItemsKeyed}, {kCaptions, kComparisons, kFailures}};
        case Stage::Relabel: return {{kComparisons, kPairings, kResponses, kItemsKeyed}, {kRelabeled, kSamples}};
        case Stage::Score:
            return {{kSamples, kRelabeled, kCaptions, kPairings, kResponses, kItemsKeyed}, {kScored, kScoreFailures}};
        case Stage::Pairs: return {{kScored, kRelabeled}, {kPairs, kPairSkips}};
        case Stage::Emit:
            return {{kPairs, kComparisons, kFailures, kPairings, kResponses, kItemsKeyed}, {kSft, kDpo}};
        default: return {};
    }
}

std::string producer_of(const std::string& file) {
    for (Stage s : kPipelineOrder) {
        for (const auto& o : stage_io(s).outputs) {
            if (o == file) return std::string(to_string(s));
        }
    }
    return "?";
}

fs::path items_input(const RunOptions& opt) {
    if (fs::is_directory(opt.in)) return opt.in / files::kItems;
    return opt.in;
}

std::string fingerprint(Stage s, const PipelineConfig& cfg) {
    return field_digest({"stage", to_string(s), config_to_json(cfg, false).dump(), tool_version()});
}

// Everything a stage needs that outlives a single stage run.
struct Context {
    const RunOptions& opt;
    RunManifest manifest;
    std::shared_ptr<TraceSink> trace;

    fs::path path(const std::string& name) const { return opt.out_dir / name; }
    std::size_t workers() const { return static_cast<std::size_t>(std::max(1, opt.config.max_parallel_requests)); }

    void require(const std::string& name) const {
        if (!fs::exists(path(name)))
            throw MissingPrerequisite("missing prerequisite file " + path(name).string() + " (produced by stage '" +
                                      producer_of(name) + "')");
    }

    template <typename T>
    std::vector<T> load(const std::string& name) const {
        require(name);
        return read_jsonl<T>(path(name));
    }

    template <typename T>
    std::string save(const std::string& name, const std::vector<T>& records) const {
        return write_jsonl(path(name), records);
    }
};

void check_budget(const char* what, std::size_t failed, std::size_t total, double budget) {
    if (total == 0) return;
    const double frac = static_cast<double>(failed) / static_cast<double>(total);
    if (frac > budget) {
        std::ostringstream os;
        os << what << " failures " << failed << "/" << total << " exceed the failure budget " << budget;
        throw FailureBudgetExceeded(os.str());
    }
}

void collect_roster_warnings(const Roster& roster, StageWarnings& w) {
    w.tie_verdicts += roster.total_tie_verdicts();
    w.parse_retries += roster.total_parse_retries();
    w.transport_retries += roster.total_transport_retries();
}

struct Lookups {
    std::unordered_map<std::string, ImageQuestionPair> items;
    std::unordered_map<std::string, CandidateResponse> responses;
    std::unordered_map<std::string, ResponsePairing> pairings;

    explicit Lookups(const Context& ctx) {
        for (auto& i : ctx.load<ImageQuestionPair>(files::kItemsKeyed)) items.emplace(i.pair_id, std::move(i));
        for (auto& r : ctx.load<CandidateResponse>(files::kResponses)) responses.emplace(r.response_id, std::move(r));
        for (auto& p : ctx.load<ResponsePairing>(files::kPairings)) pairings.emplace(p.pairing_id, std::move(p));
    }

    template <typename M>
    static const auto& at(const M& m, const std::string& key, const char* what) {
        auto it = m.find(key);
        if (it == m.end()) throw ReconciliationError(std::string("unknown ") + what + " '" + key + "'");
        return it->second;
    }
    const ResponsePairing& pairing(const std::string& id) const { return at(pairings, id, "pairing"); }
    const ImageQuestionPair& item(const std::string& id) const { return at(items, id, "item"); }
    const std::string& text(const std::string& id) const { return at(responses, id, "response").text; }
};

// --- stages ------------------------------------------------------------------

void stage_generate(Context& ctx, StageReport& rep) {
    const auto& cfg = ctx.opt.config;
    const fs::path input = items_input(ctx.opt);
    if (!fs::exists(input)) throw MissingPrerequisite("missing input file " + input.string());

    std::vector<ImageQuestionPair> items;
    std::unordered_set<std::string> seen;
    std::size_t lineno = 0;
    for (const auto& j : read_jsonl_values(input)) {
        ++lineno;
        try {
            items.push_back(item_from_input_json(j));
        } catch (const nlohmann::json::exception& e) {
            throw SchemaError(lineno, input.filename().string() + ": " + e.what());
        } catch (const EmptyQuestion& e) {
            throw SchemaError(lineno, input.filename().string() + ": " + e.what());
        }
        if (!seen.insert(items.back().pair_id).second)
            throw SchemaError(lineno, "duplicate pair_id " + items.back().pair_id);
    }

    const Roster roster = make_roster(cfg, ctx.trace);
    auto results = parallel_map<GenerationResult>(items.size(), ctx.workers(), [&](std::size_t i) {
        return sample_responses(items[i], roster.generators, cfg.sampling_strategies, cfg.max_tokens, 1);
    });

    std::vector<CandidateResponse> responses;
    std::vector<GenerationFailure> failures;
    std::vector<ResponsePairing> pairings;
    for (std::size_t i = 0; i < items.size(); ++i) {
        auto& r = results[i];
        if (r.responses.size() >= 2) {
            auto p = enumerate_pairings(r.responses, cfg.pairs_per_item, cfg.rng_seed, cfg.randomize_orientation);
            pairings.insert(pairings.end(), p.begin(), p.end());
        } else {
            ++rep.warnings.items_without_pairings;
        }
        responses.insert(responses.end(), r.responses.begin(), r.responses.end());
        failures.insert(failures.end(), r.failures.begin(), r.failures.end());
    }
    collect_roster_warnings(roster, rep.warnings);

    ctx.save(files::kItemsKeyed, items);
    ctx.save(files::kResponses, responses);
    ctx.save(files::kGenerateFailures, failures);
    ctx.save(files::kPairings, pairings);

    auto& c = ctx.manifest.counts;
    c.items = static_cast<std::int64_t>(items.size());
    c.responses = static_cast<std::int64_t>(responses.size());
    c.generation_failures = static_cast<std::int64_t>(failures.size());
    c.pairings = static_cast<std::int64_t>(pairings.size());
    rep.counts = {{"items", c.items},
                  {"responses", c.responses},
                  {"generation_failures", c.generation_failures},
                  {"pairings", c.pairings}};
    check_budget("generation", failures.size(), responses.size() + failures.size(), cfg.failure_budget);
}

void stage_compare(Context& ctx, StageReport& rep) {
    const auto& cfg = ctx.opt.config;
    const Lookups look(ctx);
    const auto pairings = ctx.load<ResponsePairing>(files::kPairings);
    const Roster roster = make_roster(cfg, ctx.trace);
    CaptionCache cache;

    // One caption per item that has pairings, computed up front so that the
    // pairing fan-out below never races to caption the same image.
    std::vector<std::string> pair_ids;
    for (const auto& p : pairings) {
        if (pair_ids.empty() || pair_ids.back() != p.pair_id) pair_ids.push_back(p.pair_id);
    }
    std::sort(pair_ids.begin(), pair_ids.end());
    pair_ids.erase(std::unique(pair_ids.begin(), pair_ids.end()), pair_ids.end());
    const Backend& captioner = roster.require_captioner();
    parallel_for(pair_ids.size(), ctx.workers(), [&](std::size_t i) {
        try {
            generate_caption(captioner, look.item(pair_ids[i]), cache);
        } catch (const ConfigError&) {
            throw;
        } catch (const Error&) {
            // compare_pairing records the failure for every affected pairing.
        }
    });

    auto results = parallel_map<ComparisonResult>(pairings.size(), ctx.workers(), [&](std::size_t i) {
        const auto& p = pairings[i];
        return compare_pairing(roster, cache, look.item(p.pair_id), p, look.text(p.a_id), look.text(p.b_id),
                               cfg.vote_threshold, cfg.max_tokens);
    });

    std::vector<ComparisonOutcome> outcomes;
    std::vector<ComparisonFailure> failures;
    std::int64_t high = 0;
    for (auto& r : results) {
        if (auto* o = std::get_if<ComparisonOutcome>(&r)) {
            rep.warnings.expert_tie_breaks += static_cast<std::uint64_t>(o->votes.tie_breaks());
            if (o->confidence == Confidence::High) ++high;
            outcomes.push_back(std::move(*o));
        } else {
            failures.push_back(std::get<ComparisonFailure>(std::move(r)));
        }
    }
    std::vector<Caption> captions;
    for (const auto& id : pair_ids) {
        if (auto c = cache.find(id)) captions.push_back(*c);
    }
    collect_roster_warnings(roster, rep.warnings);

    ctx.save(files::kCaptions, captions);
    ctx.save(files::kComparisons, outcomes);
    ctx.save(files::kFailures, failures);

    std::int64_t judge_failures = 0;
    for (const auto& f : failures) judge_failures += f.failure_class() == FailureClass::JudgeFailure ? 1 : 0;
    auto& c = ctx.manifest.counts;
    c.pairings = static_cast<std::int64_t>(pairings.size());
    c.high = high;
    c.low = static_cast<std::int64_t>(outcomes.size()) - high;
    c.failures = static_cast<std::int64_t>(failures.size());
    rep.counts = {{"pairings", c.pairings},
                  {"high", c.high},
                  {"low", c.low},
                  {"judge_failures", judge_failures},
                  {"expert_failures", c.failures - judge_failures},
                  {"captions", captions.size()}};
    if (c.high + c.low + c.failures != c.pairings) throw ReconciliationError("comparison partition does not add up");
    check_budget("comparison", failures.size(), pairings.size(), cfg.failure_budget);
}

void stage_relabel(Context& ctx, StageReport& rep) {
    const auto& cfg = ctx.opt.config;
    const Lookups look(ctx);
    std::vector<ComparisonOutcome> low;
    for (auto& o : ctx.load<ComparisonOutcome>(files::kComparisons)) {
        if (o.confidence == Confidence::Low) low.push_back(std::move(o));
    }
    std::vector<ReassignedLabel> labels;
    labels.reserve(low.size());
    for (const auto& o : low) labels.push_back(reassign_label(o, cfg.vote_threshold));

    const Roster roster = make_roster(cfg, ctx.trace);
    const Backend& policy = roster.require_sft_policy();
    auto groups = parallel_map<std::vector<PreferenceSample>>(low.size(), ctx.workers(), [&](std::size_t i) {
        const auto& p = look.pairing(low[i].pairing_id);
        return sample_preference_responses(policy, look.item(p.pair_id), look.text(p.a_id), look.text(p.b_id),
                                           cfg.num_resamples, labels[i], cfg.max_tokens, 1);
    });

    std::vector<PreferenceSample> samples;
    std::int64_t overrides = 0;
    std::int64_t unparseable = 0;
    std::int64_t correct = 0;
    for (const auto& l : labels) overrides += l.source == LabelSource::MajorityOverride ? 1 : 0;
    for (auto& g : groups) {
        for (auto& s : g) {
            unparseable += s.parsed_preference ? 0 : 1;
            correct += s.correct ? 1 : 0;
            samples.push_back(std::move(s));
        }
    }
    collect_roster_warnings(roster, rep.warnings);

    ctx.save(files::kRelabeled, labels);
    ctx.save(files::kSamples, samples);

    auto& c = ctx.manifest.counts;
    c.relabeled = static_cast<std::int64_t>(labels.size());
    c.samples = static_cast<std::int64_t>(samples.size());
    rep.counts = {{"relabeled", c.relabeled},
                  {"majority_overrides", overrides},
                  {"samples", c.samples},
                  {"correct_samples", correct},
                  {"unparseable_samples", unparseable}};
}

void stage_score(Context& ctx, StageReport& rep) {
    const auto& cfg = ctx.opt.config;
    const Lookups look(ctx);
    std::unordered_map<std::string, Caption> captions;
    for (auto& c : ctx.load<Caption>(files::kCaptions)) captions.emplace(c.pair_id, std::move(c));
    std::unordered_map<std::string, ReassignedLabel> labels;
    for (auto& l : ctx.load<ReassignedLabel>(files::kRelabeled)) labels.emplace(l.pairing_id, std::move(l));
    const auto samples = ctx.load<PreferenceSample>(files::kSamples);

    const Roster roster = make_roster(cfg, ctx.trace);
    const Backend& scorer = roster.require_scorer();

    using Slot = std::variant<std::monostate, ScoredSample, ScoreFailure>;
    auto slots = parallel_map<Slot>(samples.size(), ctx.workers(), [&](std::size_t i) -> Slot {
        const auto& s = samples[i];
        if (!s.parsed_preference)
            return ScoreFailure{s.sample_id, s.pairing_id, "unparseable_sample", "critique has no verdict header"};
        const auto& p = look.pairing(s.pairing_id);
        const auto& item = look.item(p.pair_id);
        auto cap = captions.find(p.pair_id);
        if (cap == captions.end()) throw ReconciliationError("no caption for item '" + p.pair_id + "'");
        auto lab = labels.find(s.pairing_id);
        if (lab == labels.end()) throw ReconciliationError("no label for pairing '" + s.pairing_id + "'");
        try {
            return score_sample(scorer, item.question, cap->second, look.text(p.a_id), look.text(p.b_id), lab->second,
                                s, cfg.max_tokens);
        } catch (const ConfigError&) {
            throw;
        } catch (const ScoreParseError& e) {
            return ScoreFailure{s.sample_id, s.pairing_id, "score_parse", e.what()};
        } catch (const Error& e) {
            return ScoreFailure{s.sample_id, s.pairing_id, "scorer_backend", e.what()};
        }
    });

    std::vector<ScoredSample> scored;
    std::vector<ScoreFailure> failures;
    std::size_t attempted = 0;
    std::size_t hard_failures = 0;
    for (auto& s : slots) {
        if (auto* ok = std::get_if<ScoredSample>(&s)) {
            ++attempted;
            scored.push_back(std::move(*ok));
        } else if (auto* f = std::get_if<ScoreFailure>(&s)) {
            if (f->reason != "unparseable_sample") {
                ++attempted;
                ++hard_failures;
            }
            failures.push_back(std::move(*f));
        }
    }
    collect_roster_warnings(roster, rep.warnings);

    ctx.save(files::kScored, scored);
    ctx.save(files::kScoreFailures, failures);

    ctx.manifest.counts.scored = static_cast<std::int64_t>(scored.size());
    rep.counts = {{"samples", samples.size()},
                  {"scored", scored.size()},
                  {"score_failures", hard_failures},
                  {"unparseable_skipped", failures.size() - hard_failures}};
    check_budget("scoring", hard_failures, attempted, cfg.failure_budget);
}

void stage_pairs(Context& ctx, StageReport& rep) {
    const auto& cfg = ctx.opt.config;
    const auto labels = ctx.load<ReassignedLabel>(files::kRelabeled);
    std::map<std::string, std::vector<ScoredSample>> groups;
    for (auto& s : ctx.load<ScoredSample>(files::kScored)) groups[s.sample.pairing_id].push_back(std::move(s));

    std::vector<ChosenRejectedPair> pairs;
    std::vector<PairSkip> skips;
    for (const auto& l : labels) {
        static const std::vector<ScoredSample> kEmpty;
        auto it = groups.find(l.pairing_id);
        const auto sel = select_pairs(cfg.negative_strategy, it == groups.end() ? kEmpty : it->second,
                                      cfg.reject_tied_correct);
        if (sel.skip) skips.push_back({l.pairing_id, *sel.skip});
        pairs.insert(pairs.end(), sel.pairs.begin(), sel.pairs.end());
    }

    ctx.save(files::kPairs, pairs);
    ctx.save(files::kPairSkips, skips);

    ctx.manifest.counts.pairs = static_cast<std::int64_t>(pairs.size());
    rep.counts = {{"groups", labels.size()},
                  {"pairs", pairs.size()},
                  {"skipped_groups", skips.size()},
                  {"strategy", to_string(cfg.negative_strategy)}};
}

void stage_emit(Context& ctx, StageReport& rep) {
    EmitInputs in;
    in.items = ctx.load<ImageQuestionPair>(files::kItemsKeyed);
    in.responses = ctx.load<CandidateResponse>(files::kResponses);
    in.pairings = ctx.load<ResponsePairing>(files::kPairings);
    in.outcomes = ctx.load<ComparisonOutcome>(files::kComparisons);
    in.failures = ctx.load<ComparisonFailure>(files::kFailures);
    in.pairs = ctx.load<ChosenRejectedPair>(files::kPairs);

    auto& c = ctx.manifest.counts;
    const auto sft = build_sft_records(in);
    std::int64_t dropped = 0;
    const auto dpo = build_dpo_records(in, &dropped);
    c.pairings = static_cast<std::int64_t>(in.pairings.size());
    c.high = static_cast<std::int64_t>(sft.size());
    c.low = static_cast<std::int64_t>(in.outcomes.size()) - c.high;
    c.failures = static_cast<std::int64_t>(in.failures.size());
    c.pairs = static_cast<std::int64_t>(in.pairs.size());
    c.sft_records = static_cast<std::int64_t>(sft.size());
    c.dpo_records = static_cast<std::int64_t>(dpo.size());
    c.dpo_identical_dropped = dropped;
    reconcile(c);
    ctx.save(files::kSft, sft);
    ctx.save(files::kDpo, dpo);

    rep.counts = {{"sft_records", c.sft_records},
                  {"dpo_records", c.dpo_records},
                  {"dpo_identical_dropped", c.dpo_identical_dropped}};
}

void stage_verify_math(const RunOptions& opt, StageReport& rep) {
    const auto fx = trainmath::load_math_fixtures(opt.fixtures_path);
    rep.checks = trainmath::verify_math(fx);
    std::size_t failed = 0;
    for (const auto& c : rep.checks) failed += c.pass ? 0 : 1;
    rep.counts = {{"checks", rep.checks.size()}, {"failed", failed}};
}

// --- resumability ------------------------------------------------------------

std::map<std::string, std::string> digests_of(const Context& ctx, const std::vector<std::string>& names,
                                              bool include_items_input) {
    std::map<std::string, std::string> out;
    for (const auto& n : names) {
        const auto p = ctx.path(n);
        out[n] = fs::exists(p) ? file_sha256_hex(p) : std::string();
    }
    if (include_items_input) {
        const auto p = items_input(ctx.opt);
        out[std::string("input:") + files::kItems] = fs::exists(p) ? file_sha256_hex(p) : std::string();
    }
    return out;
}

bool up_to_date(const Context& ctx, Stage s) {
    if (ctx.opt.force) return false;
    auto it = ctx.manifest.stages.find(std::string(to_string(s)));
    if (it == ctx.manifest.stages.end()) return false;
    const auto io = stage_io(s);
    const StageEntry& e = it->second;
    if (e.fingerprint != fingerprint(s, ctx.opt.config)) return false;
    if (e.inputs != digests_of(ctx, io.inputs, s == Stage::Generate)) return false;
    return e.outputs == digests_of(ctx, io.outputs, false);
}

RunManifest fresh_manifest(const PipelineConfig& cfg) {
    RunManifest m;
    m.config = config_to_json(cfg, false);
    m.seed = cfg.rng_seed;
    m.tool_version = tool_version();
    return m;
}

void refresh_digests(Context& ctx) {
    ctx.manifest.digests.clear();
    for (Stage s : kPipelineOrder) {
        for (const auto& o : stage_io(s).outputs) {
            const auto p = ctx.path(o);
            if (fs::exists(p)) ctx.manifest.digests[o] = file_sha256_hex(p);
        }
    }
}

StageReport run_one(Context& ctx, Stage s) {
    StageReport rep;
    rep.stage = std::string(to_string(s));
    const auto started = std::chrono::steady_clock::now();
    try {
        if (s == Stage::VerifyMath) {
            stage_verify_math(ctx.opt, rep);
        } else if (up_to_date(ctx, s)) {
            rep.skipped = true;
        } else {
            const auto io = stage_io(s);
            for (const auto& in : io.inputs) ctx.require(in);
            const auto input_digests = digests_of(ctx, io.inputs, s == Stage::Generate);
            // Drop the stale entry first so an interrupted or over-budget run
            // is never mistaken for a completed one.
            ctx.manifest.stages.erase(rep.stage);
            ctx.manifest.config = config_to_json(ctx.opt.config, false);
            ctx.manifest.seed = ctx.opt.config.rng_seed;
            ctx.manifest.tool_version = tool_version();
            try {
                switch (s) {
                    case Stage::Generate: stage_generate(ctx, rep); break;
                    case Stage::Compare: stage_compare(ctx, rep); break;
                    case Stage::Relabel: stage_relabel(ctx, rep); break;
                    case Stage::Score: stage_score(ctx, rep); break;
                    case Stage::Pairs: stage_pairs(ctx, rep); break;
                    case Stage::Emit: stage_emit(ctx, rep); break;
                    default: break;
                }
            } catch (const FailureBudgetExceeded&) {
                refresh_digests(ctx);
                write_manifest(ctx.path(files::kManifest), ctx.manifest);
                throw;
            }
            ctx.manifest.stages[rep.stage] =
                StageEntry{fingerprint(s, ctx.opt.config), input_digests, digests_of(ctx, io.outputs, false)};
            refresh_digests(ctx);
            write_manifest(ctx.path(files::kManifest), ctx.manifest);
        }
    } catch (const StageFailure&) {
        throw;
    } catch (const std::exception& e) {
        throw StageFailure(rep.stage, std::current_exception(), exit_code_for(e),
                           "stage '" + rep.stage + "': " + e.what());
    }
    rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return rep;
}

}  // namespace

std::vector<StageReport> run_stage(Stage stage, const RunOptions& options) {
    Context ctx{options, fresh_manifest(options.config), nullptr};
    const std::string name(to_string(stage));
    try {
        if (stage != Stage::VerifyMath) {
            fs::create_directories(options.out_dir);
            const auto mpath = ctx.path(files::kManifest);
            if (fs::exists(mpath)) ctx.manifest = read_manifest(mpath);
            if (options.trace_path) ctx.trace = std::make_shared<TraceSink>(*options.trace_path);
        }
    } catch (const std::exception& e) {
        throw StageFailure(name, std::current_exception(), exit_code_for(e), "stage '" + name + "': " + e.what());
    }

    std::vector<StageReport> reports;
    if (stage == Stage::All) {
        for (Stage s : kPipelineOrder) reports.push_back(run_one(ctx, s));
    } else {
        reports.push_back(run_one(ctx, stage));
    }
    return reports;
}

}  // namespace vlpref
