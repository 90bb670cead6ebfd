#include "vlpref/store.hpp"

#include <set>
#include <unordered_map>

namespace vlpref {

using nlohmann::json;

namespace {

Side side_from(const json& j) {
    const auto s = j.get<std::string>();
    if (s == "A") return Side::A;
    if (s == "B") return Side::B;
    throw ProtocolError("expected \"A\" or \"B\", got \"" + s + "\"");
}

template <typename E, typename Parse>
E enum_from(const json& j, Parse parse) {
    return parse(j.get<std::string>());
}

LabelSource label_source_from(std::string_view s) {
    if (s == to_string(LabelSource::JudgeRetained)) return LabelSource::JudgeRetained;
    if (s == to_string(LabelSource::MajorityOverride)) return LabelSource::MajorityOverride;
    throw ProtocolError("unknown label source '" + std::string(s) + "'");
}

SkipReason skip_reason_from(std::string_view s) {
    for (auto r : {SkipReason::NoCorrectSample, SkipReason::EmptyRejectedSet, SkipReason::NoScoredSamples}) {
        if (s == to_string(r)) return r;
    }
    throw ProtocolError("unknown skip reason '" + std::string(s) + "'");
}

NegativeStrategy strategy_from(const json& j) {
    try {
        return parse_negative_strategy(j.get<std::string>());
    } catch (const ConfigError& e) {
        throw ProtocolError(e.what());
    }
}

SamplingStrategy sampling_from(const json& j) {
    try {
        return sampling_strategy_from_json(j);
    } catch (const ConfigError& e) {
        throw ProtocolError(e.what());
    }
}

}  // namespace

void to_json(json& j, const ImageQuestionPair& v) {
    j = json{{"pair_id", v.pair_id}, {"image_ref", v.image_ref}, {"question", v.question}};
}
void from_json(const json& j, ImageQuestionPair& v) {
    v.pair_id = j.at("pair_id").get<std::string>();
    v.image_ref = j.at("image_ref").get<std::string>();
    v.question = j.at("question").get<std::string>();
    if (v.question.empty()) throw EmptyQuestion("question must be non-empty");
}

ImageQuestionPair item_from_input_json(const json& j) {
    ImageQuestionPair v;
    v.image_ref = j.at("image_ref").get<std::string>();
    v.question = j.at("question").get<std::string>();
    if (auto it = j.find("pair_id"); it != j.end() && !it->is_null())
        v.pair_id = it->get<std::string>();
    else
        v.pair_id = pair_key(v.image_ref, v.question);
    if (v.question.empty()) throw EmptyQuestion("question must be non-empty");
    return v;
}

void to_json(json& j, const CandidateResponse& v) {
    j = json{{"response_id", v.response_id},
             {"pair_id", v.pair_id},
             {"generator_id", v.generator_id},
             {"strategy", to_json(v.strategy)},
             {"text", v.text}};
}
void from_json(const json& j, CandidateResponse& v) {
    v.response_id = j.at("response_id").get<std::string>();
    v.pair_id = j.at("pair_id").get<std::string>();
    v.generator_id = j.at("generator_id").get<std::string>();
    v.strategy = sampling_from(j.at("strategy"));
    v.text = j.at("text").get<std::string>();
}

void to_json(json& j, const GenerationFailure& v) {
    j = json{{"pair_id", v.pair_id},
             {"generator_id", v.generator_id},
             {"strategy", to_json(v.strategy)},
             {"reason", v.reason}};
}
void from_json(const json& j, GenerationFailure& v) {
    v.pair_id = j.at("pair_id").get<std::string>();
    v.generator_id = j.at("generator_id").get<std::string>();
    v.strategy = sampling_from(j.at("strategy"));
    v.reason = j.at("reason").get<std::string>();
}

void to_json(json& j, const ResponsePairing& v) {
    j = json{{"pairing_id", v.pairing_id}, {"pair_id", v.pair_id}, {"a_id", v.a_id}, {"b_id", v.b_id}};
}
void from_json(const json& j, ResponsePairing& v) {
    v.pairing_id = j.at("pairing_id").get<std::string>();
    v.pair_id = j.at("pair_id").get<std::string>();
    v.a_id = j.at("a_id").get<std::string>();
    v.b_id = j.at("b_id").get<std::string>();
}

void to_json(json& j, const Caption& v) {
    j = json{{"pair_id", v.pair_id}, {"text", v.text}, {"captioner_id", v.captioner_id}};
}
void from_json(const json& j, Caption& v) {
    v.pair_id = j.at("pair_id").get<std::string>();
    v.text = j.at("text").get<std::string>();
    v.captioner_id = j.at("captioner_id").get<std::string>();
}

void to_json(json& j, const Judgment& v) {
    j = json{{"pairing_id", v.pairing_id},
             {"preferred", to_string(v.preferred)},
             {"explanation", v.explanation},
             {"judge_id", v.judge_id},
             {"raw_text", v.raw_text}};
}
void from_json(const json& j, Judgment& v) {
    v.pairing_id = j.at("pairing_id").get<std::string>();
    v.preferred = side_from(j.at("preferred"));
    v.explanation = j.at("explanation").get<std::string>();
    v.judge_id = j.at("judge_id").get<std::string>();
    v.raw_text = j.at("raw_text").get<std::string>();
}

void to_json(json& j, const VoteRecord& v) {
    json per = json::array();
    for (const auto& e : v.per_expert) {
        per.push_back(json{{"expert_id", e.expert_id},
                           {"reward_A", e.reward_a},
                           {"reward_B", e.reward_b},
                           {"vote", to_string(e.vote)}});
    }
    j = json{{"pairing_id", v.pairing_id}, {"v_A", v.votes_a}, {"v_B", v.votes_b}, {"per_expert", per}};
}
void from_json(const json& j, VoteRecord& v) {
    v.pairing_id = j.at("pairing_id").get<std::string>();
    v.votes_a = j.at("v_A").get<int>();
    v.votes_b = j.at("v_B").get<int>();
    v.per_expert.clear();
    for (const auto& e : j.at("per_expert")) {
        v.per_expert.push_back({e.at("expert_id").get<std::string>(), e.at("reward_A").get<double>(),
                                e.at("reward_B").get<double>(), side_from(e.at("vote"))});
    }
    int a = 0;
    for (const auto& e : v.per_expert) a += e.vote == Side::A ? 1 : 0;
    if (a != v.votes_a || v.votes_a + v.votes_b != static_cast<int>(v.per_expert.size()))
        throw ProtocolError("vote tallies disagree with per_expert votes");
}

void to_json(json& j, const ComparisonOutcome& v) {
    j = json{{"pairing_id", v.pairing_id},
             {"judgment", v.judgment},
             {"votes", v.votes},
             {"confidence", to_string(v.confidence)},
             {"majority", v.majority ? std::string(to_string(*v.majority)) : std::string("none")}};
}
void from_json(const json& j, ComparisonOutcome& v) {
    v.pairing_id = j.at("pairing_id").get<std::string>();
    v.judgment = j.at("judgment").get<Judgment>();
    v.votes = j.at("votes").get<VoteRecord>();
    const auto conf = j.at("confidence").get<std::string>();
    if (conf == "high")
        v.confidence = Confidence::High;
    else if (conf == "low")
        v.confidence = Confidence::Low;
    else
        throw ProtocolError("unknown confidence '" + conf + "'");
    const auto maj = j.at("majority").get<std::string>();
    if (maj == "none")
        v.majority.reset();
    else
        v.majority = side_from(j.at("majority"));
}

void to_json(json& j, const ComparisonFailure& v) {
    j = json{{"pairing_id", v.pairing_id},
             {"pair_id", v.pair_id},
             {"class", to_string(v.failure_class())},
             {"reason", to_string(v.reason)},
             {"message", v.message}};
}
void from_json(const json& j, ComparisonFailure& v) {
    v.pairing_id = j.at("pairing_id").get<std::string>();
    v.pair_id = j.at("pair_id").get<std::string>();
    v.reason = parse_failure_reason(j.at("reason").get<std::string>());
    v.message = j.at("message").get<std::string>();
    if (j.at("class").get<std::string>() != to_string(v.failure_class()))
        throw ProtocolError("failure class does not match reason");
}

void to_json(json& j, const ReassignedLabel& v) {
    j = json{{"pairing_id", v.pairing_id}, {"label", to_string(v.label)}, {"source", to_string(v.source)}};
}
void from_json(const json& j, ReassignedLabel& v) {
    v.pairing_id = j.at("pairing_id").get<std::string>();
    v.label = side_from(j.at("label"));
    v.source = label_source_from(j.at("source").get<std::string>());
}

void to_json(json& j, const PreferenceSample& v) {
    j = json{{"sample_id", v.sample_id},
             {"pairing_id", v.pairing_id},
             {"index", v.index},
             {"critique_text", v.critique_text},
             {"parsed_preference",
              v.parsed_preference ? std::string(to_string(*v.parsed_preference)) : std::string("unparseable")},
             {"correct", v.correct}};
}
void from_json(const json& j, PreferenceSample& v) {
    v.sample_id = j.at("sample_id").get<std::string>();
    v.pairing_id = j.at("pairing_id").get<std::string>();
    v.index = j.at("index").get<int>();
    v.critique_text = j.at("critique_text").get<std::string>();
    const auto p = j.at("parsed_preference").get<std::string>();
    if (p == "unparseable")
        v.parsed_preference.reset();
    else
        v.parsed_preference = side_from(j.at("parsed_preference"));
    v.correct = j.at("correct").get<bool>();
    if (!v.parsed_preference && v.correct) throw ProtocolError("unparseable sample marked correct");
}

void to_json(json& j, const ScoredSample& v) {
    j = json{{"sample", v.sample}, {"score", v.score}, {"scorer_id", v.scorer_id}};
}
void from_json(const json& j, ScoredSample& v) {
    v.sample = j.at("sample").get<PreferenceSample>();
    v.score = j.at("score").get<int>();
    v.scorer_id = j.at("scorer_id").get<std::string>();
    if (v.score < 0 || v.score > 100) throw ProtocolError("score outside [0, 100]");
}

void to_json(json& j, const ChosenRejectedPair& v) {
    j = json{{"pairing_id", v.pairing_id},
             {"chosen", v.chosen},
             {"rejected", v.rejected},
             {"strategy", to_string(v.strategy)}};
}
void from_json(const json& j, ChosenRejectedPair& v) {
    v.pairing_id = j.at("pairing_id").get<std::string>();
    v.chosen = j.at("chosen").get<ScoredSample>();
    v.rejected = j.at("rejected").get<ScoredSample>();
    v.strategy = strategy_from(j.at("strategy"));
}

void to_json(json& j, const ScoreFailure& v) {
    j = json{{"sample_id", v.sample_id}, {"pairing_id", v.pairing_id}, {"reason", v.reason}, {"message", v.message}};
}
void from_json(const json& j, ScoreFailure& v) {
    v.sample_id = j.at("sample_id").get<std::string>();
    v.pairing_id = j.at("pairing_id").get<std::string>();
    v.reason = j.at("reason").get<std::string>();
    v.message = j.at("message").get<std::string>();
}

void to_json(json& j, const PairSkip& v) {
    j = json{{"pairing_id", v.pairing_id}, {"reason", to_string(v.reason)}};
}
void from_json(const json& j, PairSkip& v) {
    v.pairing_id = j.at("pairing_id").get<std::string>();
    v.reason = skip_reason_from(j.at("reason").get<std::string>());
}

void to_json(json& j, const SftRecord& v) {
    j = json{{"pair_id", v.pair_id},       {"image_ref", v.image_ref},   {"question", v.question},
             {"response_a", v.response_a}, {"response_b", v.response_b}, {"target_critique", v.target_critique}};
}
void from_json(const json& j, SftRecord& v) {
    v.pair_id = j.at("pair_id").get<std::string>();
    v.image_ref = j.at("image_ref").get<std::string>();
    v.question = j.at("question").get<std::string>();
    v.response_a = j.at("response_a").get<std::string>();
    v.response_b = j.at("response_b").get<std::string>();
    v.target_critique = j.at("target_critique").get<std::string>();
    if (!parse_verdict(v.target_critique).preferred)
        throw ProtocolError("target_critique lacks a parseable verdict header");
}

void to_json(json& j, const DpoRecord& v) {
    j = json{{"pair_id", v.pair_id},
             {"image_ref", v.image_ref},
             {"question", v.question},
             {"response_a", v.response_a},
             {"response_b", v.response_b},
             {"chosen_critique", v.chosen_critique},
             {"rejected_critique", v.rejected_critique},
             {"chosen_score", v.chosen_score},
             {"rejected_score", v.rejected_score},
             {"strategy", to_string(v.strategy)}};
}
void from_json(const json& j, DpoRecord& v) {
    v.pair_id = j.at("pair_id").get<std::string>();
    v.image_ref = j.at("image_ref").get<std::string>();
    v.question = j.at("question").get<std::string>();
    v.response_a = j.at("response_a").get<std::string>();
    v.response_b = j.at("response_b").get<std::string>();
    v.chosen_critique = j.at("chosen_critique").get<std::string>();
    v.rejected_critique = j.at("rejected_critique").get<std::string>();
    v.chosen_score = j.at("chosen_score").get<int>();
    v.rejected_score = j.at("rejected_score").get<int>();
    v.strategy = strategy_from(j.at("strategy"));
    if (v.chosen_critique == v.rejected_critique) throw ProtocolError("chosen and rejected critiques are identical");
    for (int s : {v.chosen_score, v.rejected_score}) {
        if (s < 0 || s > 100) throw ProtocolError("score outside [0, 100]");
    }
}

// --- JSONL ----------------------------------------------------------------------

std::string canonical_line(const json& j) { return j.dump(-1, ' ', false, json::error_handler_t::replace); }

std::vector<json> read_jsonl_values(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<json> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            out.push_back(json::parse(line));
        } catch (const json::exception& e) {
            throw SchemaError(lineno, path.filename().string() + ": " + e.what());
        }
    }
    return out;
}

// --- manifest -------------------------------------------------------------------

namespace {

json counts_json(const RunCounts& c) {
    return json{{"items", c.items},
                {"responses", c.responses},
                {"generation_failures", c.generation_failures},
                {"pairings", c.pairings},
                {"high", c.high},
                {"low", c.low},
                {"failures", c.failures},
                {"relabeled", c.relabeled},
                {"samples", c.samples},
                {"scored", c.scored},
                {"pairs", c.pairs},
                {"sft_records", c.sft_records},
                {"dpo_records", c.dpo_records},
                {"dpo_identical_dropped", c.dpo_identical_dropped}};
}

RunCounts counts_from(const json& j) {
    RunCounts c;
    c.items = j.at("items").get<std::int64_t>();
    c.responses = j.at("responses").get<std::int64_t>();
    c.generation_failures = j.at("generation_failures").get<std::int64_t>();
    c.pairings = j.at("pairings").get<std::int64_t>();
    c.high = j.at("high").get<std::int64_t>();
    c.low = j.at("low").get<std::int64_t>();
    c.failures = j.at("failures").get<std::int64_t>();
    c.relabeled = j.at("relabeled").get<std::int64_t>();
    c.samples = j.at("samples").get<std::int64_t>();
    c.scored = j.at("scored").get<std::int64_t>();
    c.pairs = j.at("pairs").get<std::int64_t>();
    c.sft_records = j.at("sft_records").get<std::int64_t>();
    c.dpo_records = j.at("dpo_records").get<std::int64_t>();
    c.dpo_identical_dropped = j.at("dpo_identical_dropped").get<std::int64_t>();
    return c;
}

}  // namespace

json to_json(const RunManifest& m) {
    json stages = json::object();
    for (const auto& [name, s] : m.stages) {
        stages[name] = json{{"fingerprint", s.fingerprint}, {"inputs", s.inputs}, {"outputs", s.outputs}};
    }
    return json{{"config", m.config},
                {"seed", m.seed},
                {"tool_version", m.tool_version},
                {"counts", counts_json(m.counts)},
                {"stages", stages},
                {"digests", m.digests}};
}

RunManifest manifest_from_json(const json& j) {
    RunManifest m;
    m.config = j.at("config");
    m.seed = j.at("seed").get<std::uint64_t>();
    m.tool_version = j.at("tool_version").get<std::string>();
    m.counts = counts_from(j.at("counts"));
    for (const auto& [name, s] : j.at("stages").items()) {
        m.stages[name] = StageEntry{s.at("fingerprint").get<std::string>(),
                                    s.at("inputs").get<std::map<std::string, std::string>>(),
                                    s.at("outputs").get<std::map<std::string, std::string>>()};
    }
    m.digests = j.at("digests").get<std::map<std::string, std::string>>();
    return m;
}

void write_manifest(const std::filesystem::path& path, const RunManifest& m) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << to_json(m).dump(2) << '\n';
    if (!out) throw IoError("write failed for " + path.string());
}

RunManifest read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    try {
        return manifest_from_json(json::parse(in));
    } catch (const json::exception& e) {
        throw SchemaError(0, path.filename().string() + ": " + e.what());
    }
}

void reconcile(const RunCounts& c) {
    if (c.high + c.low + c.failures != c.pairings) {
        throw ReconciliationError("high (" + std::to_string(c.high) + ") + low (" + std::to_string(c.low) +
                                  ") + failures (" + std::to_string(c.failures) + ") != pairings (" +
                                  std::to_string(c.pairings) + ")");
    }
    if (c.sft_records != c.high)
        throw ReconciliationError("sft_records (" + std::to_string(c.sft_records) + ") != high (" +
                                  std::to_string(c.high) + ")");
    if (c.dpo_records + c.dpo_identical_dropped != c.pairs)
        throw ReconciliationError("dpo_records + dropped != pairs");
}

// --- emission -------------------------------------------------------------------

namespace {

struct Lookup {
    std::unordered_map<std::string, const ImageQuestionPair*> items;
    std::unordered_map<std::string, const CandidateResponse*> responses;
    std::unordered_map<std::string, const ResponsePairing*> pairings;

    explicit Lookup(const EmitInputs& in) {
        for (const auto& i : in.items) items[i.pair_id] = &i;
        for (const auto& r : in.responses) responses[r.response_id] = &r;
        for (const auto& p : in.pairings) pairings[p.pairing_id] = &p;
    }

    template <typename M>
    static const auto& get(const M& map, const std::string& key, const char* what) {
        auto it = map.find(key);
        if (it == map.end()) throw ReconciliationError(std::string("unknown ") + what + " '" + key + "'");
        return *it->second;
    }

    struct Context {
        const ImageQuestionPair& item;
        const CandidateResponse& a;
        const CandidateResponse& b;
    };

    Context context(const std::string& pairing_id) const {
        const auto& p = get(pairings, pairing_id, "pairing");
        return {get(items, p.pair_id, "item"), get(responses, p.a_id, "response"), get(responses, p.b_id, "response")};
    }
};

}  // namespace

std::vector<SftRecord> build_sft_records(const EmitInputs& in) {
    const Lookup lookup(in);
    std::vector<SftRecord> out;
    for (const auto& o : in.outcomes) {
        if (o.confidence != Confidence::High) continue;
        const auto ctx = lookup.context(o.pairing_id);
        if (!parse_verdict(o.judgment.raw_text).preferred)
            throw ReconciliationError("judgment for '" + o.pairing_id + "' has no parseable verdict");
        out.push_back({ctx.item.pair_id, ctx.item.image_ref, ctx.item.question, ctx.a.text, ctx.b.text,
                       o.judgment.raw_text});
    }
    return out;
}

std::vector<DpoRecord> build_dpo_records(const EmitInputs& in, std::int64_t* identical_dropped) {
    const Lookup lookup(in);
    std::vector<DpoRecord> out;
    std::int64_t dropped = 0;
    for (const auto& p : in.pairs) {
        if (p.chosen.sample.critique_text == p.rejected.sample.critique_text) {
            ++dropped;
            continue;
        }
        const auto ctx = lookup.context(p.pairing_id);
        out.push_back({ctx.item.pair_id, ctx.item.image_ref, ctx.item.question, ctx.a.text, ctx.b.text,
                       p.chosen.sample.critique_text, p.rejected.sample.critique_text, p.chosen.score,
                       p.rejected.score, p.strategy});
    }
    if (identical_dropped) *identical_dropped = dropped;
    return out;
}

EmitPaths emit_datasets(const EmitInputs& in, const std::filesystem::path& out_dir, RunManifest manifest) {
    std::filesystem::create_directories(out_dir);
    EmitPaths paths{out_dir / "sft.jsonl", out_dir / "dpo.jsonl", out_dir / "manifest.json"};

    const auto sft = build_sft_records(in);
    std::int64_t dropped = 0;
    const auto dpo = build_dpo_records(in, &dropped);

    auto& c = manifest.counts;
    c.pairings = static_cast<std::int64_t>(in.pairings.size());
    c.high = 0;
    c.low = 0;
    for (const auto& o : in.outcomes) (o.confidence == Confidence::High ? c.high : c.low) += 1;
    c.failures = static_cast<std::int64_t>(in.failures.size());
    c.pairs = static_cast<std::int64_t>(in.pairs.size());
    c.sft_records = static_cast<std::int64_t>(sft.size());
    c.dpo_records = static_cast<std::int64_t>(dpo.size());
    c.dpo_identical_dropped = dropped;
    reconcile(c);

    manifest.digests["sft.jsonl"] = write_jsonl(paths.sft_path, sft);
    manifest.digests["dpo.jsonl"] = write_jsonl(paths.dpo_path, dpo);
    write_manifest(paths.manifest_path, manifest);
    return paths;
}

}  // namespace vlpref
