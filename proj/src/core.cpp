#include "vlpref/core.hpp"

#include "vlpref/digest.hpp"
#include "vlpref/errors.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <set>

namespace vlpref {

using nlohmann::json;

std::string_view to_string(Side s) { return s == Side::A ? "A" : "B"; }

std::string SamplingStrategy::label() const {
    if (kind == SamplingKind::Greedy) return "greedy";
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), temperature);
    return "temperature=" + std::string(buf, res.ptr);
}

std::string_view to_string(NegativeStrategy s) {
    switch (s) {
        case NegativeStrategy::Strategy1: return "strategy1";
        case NegativeStrategy::Strategy2: return "strategy2";
        case NegativeStrategy::Strategy3: return "strategy3";
        case NegativeStrategy::BestToWorse: return "best_to_worse";
    }
    return "best_to_worse";
}

NegativeStrategy parse_negative_strategy(std::string_view text) {
    for (auto s : {NegativeStrategy::Strategy1, NegativeStrategy::Strategy2,
                   NegativeStrategy::Strategy3, NegativeStrategy::BestToWorse}) {
        if (text == to_string(s)) return s;
    }
    throw ConfigError("unknown negative strategy '" + std::string(text) + "'");
}

std::string_view to_string(BackendRole r) {
    switch (r) {
        case BackendRole::Generator: return "generator";
        case BackendRole::StrongJudge: return "strong_judge";
        case BackendRole::Expert: return "expert";
        case BackendRole::Captioner: return "captioner";
        case BackendRole::Scorer: return "scorer";
        case BackendRole::SftPolicy: return "sft_policy";
    }
    return "generator";
}

BackendRole parse_backend_role(std::string_view text) {
    for (auto r : {BackendRole::Generator, BackendRole::StrongJudge, BackendRole::Expert,
                   BackendRole::Captioner, BackendRole::Scorer, BackendRole::SftPolicy}) {
        if (text == to_string(r)) return r;
    }
    throw ConfigError("unknown backend role '" + std::string(text) + "'");
}

namespace {

std::uint64_t mock_seed_for(std::uint64_t run_seed, std::string_view backend_id) {
    return digest_u64({"mock-seed", std::to_string(run_seed), backend_id});
}

std::vector<BackendSpec> default_roster(int generators, int experts, std::uint64_t seed) {
    std::vector<BackendSpec> out;
    auto add = [&](std::string id, BackendRole role) {
        BackendSpec b;
        b.backend_id = std::move(id);
        b.role = role;
        b.kind = BackendKind::Mock;
        b.mock_seed = mock_seed_for(seed, b.backend_id);
        out.push_back(std::move(b));
    };
    for (int i = 0; i < generators; ++i) add("generator-" + std::to_string(i), BackendRole::Generator);
    add("judge", BackendRole::StrongJudge);
    for (int i = 0; i < experts; ++i) add("expert-" + std::to_string(i), BackendRole::Expert);
    add("captioner", BackendRole::Captioner);
    add("scorer", BackendRole::Scorer);
    add("sft-policy", BackendRole::SftPolicy);
    return out;
}

int count_role(const std::vector<BackendSpec>& roster, BackendRole role) {
    int n = 0;
    for (const auto& b : roster) n += b.role == role ? 1 : 0;
    return n;
}

void check_backends(const std::vector<BackendSpec>& roster) {
    std::set<std::string> ids;
    for (const auto& b : roster) {
        if (b.backend_id.empty()) throw ConfigError("backend_id must be non-empty");
        if (!ids.insert(b.backend_id).second)
            throw ConfigError("duplicate backend_id '" + b.backend_id + "'");
        if (b.kind == BackendKind::Http) {
            if (b.endpoint_url.empty())
                throw ConfigError("backend '" + b.backend_id + "' needs endpoint_url");
            if (b.api_key_env.empty())
                throw ConfigError("backend '" + b.backend_id + "' needs api_key_env");
            if (b.model_name.empty())
                throw ConfigError("backend '" + b.backend_id + "' needs model_name");
        } else if (!(b.mock_fault_rate >= 0.0 && b.mock_fault_rate <= 1.0)) {
            throw ConfigError("backend '" + b.backend_id + "' mock_fault_rate must lie in [0,1]");
        }
    }
    for (auto role : {BackendRole::StrongJudge, BackendRole::Captioner, BackendRole::Scorer,
                      BackendRole::SftPolicy}) {
        if (count_role(roster, role) > 1)
            throw ConfigError("at most one " + std::string(to_string(role)) + " backend allowed");
    }
}

}  // namespace

PipelineConfig validate_config(const RawConfig& raw) {
    PipelineConfig cfg;
    cfg.rng_seed = raw.rng_seed.value_or(0);

    int declared_generators = -1;
    int declared_experts = -1;
    if (raw.backends) {
        declared_generators = count_role(*raw.backends, BackendRole::Generator);
        declared_experts = count_role(*raw.backends, BackendRole::Expert);
    }
    cfg.num_generators = raw.num_generators.value_or(declared_generators >= 0 ? declared_generators : 5);
    cfg.num_experts = raw.num_experts.value_or(declared_experts >= 0 ? declared_experts : 5);

    if (cfg.num_generators < 2) throw ConfigError("n_generators must be at least 2");
    if (cfg.num_experts < 1) throw ConfigError("M must be positive");

    cfg.vote_threshold = raw.vote_threshold.value_or(cfg.num_experts - 1);
    if (cfg.vote_threshold < 1) throw ConfigError("tau must be at least 1");
    if (cfg.vote_threshold > cfg.num_experts) throw ConfigError("tau exceeds M");
    if (2 * cfg.vote_threshold <= cfg.num_experts)
        throw ConfigError("tau must exceed M/2 so that at most one side reaches it");

    cfg.num_resamples = raw.num_resamples.value_or(10);
    if (cfg.num_resamples < 2) throw ConfigError("m must be at least 2");

    cfg.beta = raw.beta.value_or(0.01);
    if (!(cfg.beta > 0.0) || !std::isfinite(cfg.beta)) throw ConfigError("beta must be positive");

    cfg.sampling_strategies = raw.sampling_strategies.value_or(
        std::vector<SamplingStrategy>{SamplingStrategy::greedy(), SamplingStrategy::with_temperature(1.0)});
    if (cfg.sampling_strategies.empty()) throw ConfigError("sampling_strategies must be non-empty");
    for (std::size_t i = 0; i < cfg.sampling_strategies.size(); ++i) {
        const auto& s = cfg.sampling_strategies[i];
        if (s.kind == SamplingKind::Greedy && s.temperature != 0.0)
            throw ConfigError("greedy strategy must not carry a temperature");
        if (s.kind == SamplingKind::Temperature && !(s.temperature > 0.0 && std::isfinite(s.temperature)))
            throw ConfigError("temperature strategy needs a positive temperature");
        for (std::size_t j = 0; j < i; ++j) {
            if (cfg.sampling_strategies[j] == s)
                throw ConfigError("duplicate sampling strategy " + s.label());
        }
    }

    cfg.negative_strategy = raw.negative_strategy.value_or(NegativeStrategy::BestToWorse);

    cfg.max_parallel_requests = raw.max_parallel_requests.value_or(4);
    if (cfg.max_parallel_requests < 1) throw ConfigError("max_parallel_requests must be positive");
    cfg.retry_limit = raw.retry_limit.value_or(2);
    if (cfg.retry_limit < 0) throw ConfigError("retry_limit must be non-negative");
    cfg.pairs_per_item = raw.pairs_per_item.value_or(1);
    if (cfg.pairs_per_item < 1) throw ConfigError("pairs_per_item must be positive");
    cfg.randomize_orientation = raw.randomize_orientation.value_or(false);
    cfg.reject_tied_correct = raw.reject_tied_correct.value_or(true);
    cfg.failure_budget = raw.failure_budget.value_or(0.5);
    if (!(cfg.failure_budget >= 0.0 && cfg.failure_budget <= 1.0))
        throw ConfigError("failure_budget must lie in [0,1]");
    cfg.max_tokens = raw.max_tokens.value_or(1024);
    if (cfg.max_tokens < 1) throw ConfigError("max_tokens must be positive");
    cfg.retry_backoff_ms = raw.retry_backoff_ms.value_or(200);
    if (cfg.retry_backoff_ms < 0) throw ConfigError("retry_backoff_ms must be non-negative");

    cfg.backends = raw.backends.value_or(default_roster(cfg.num_generators, cfg.num_experts, cfg.rng_seed));
    check_backends(cfg.backends);
    if (count_role(cfg.backends, BackendRole::Generator) != cfg.num_generators)
        throw ConfigError("n_generators does not match the declared generator backends");
    if (count_role(cfg.backends, BackendRole::Expert) != cfg.num_experts)
        throw ConfigError("M does not match the declared expert backends");
    return cfg;
}

PipelineConfig validate_config(const PipelineConfig& cfg) { return validate_config(to_raw(cfg)); }

RawConfig to_raw(const PipelineConfig& cfg) {
    RawConfig raw;
    raw.num_generators = cfg.num_generators;
    raw.num_experts = cfg.num_experts;
    raw.vote_threshold = cfg.vote_threshold;
    raw.num_resamples = cfg.num_resamples;
    raw.beta = cfg.beta;
    raw.sampling_strategies = cfg.sampling_strategies;
    raw.negative_strategy = cfg.negative_strategy;
    raw.rng_seed = cfg.rng_seed;
    raw.max_parallel_requests = cfg.max_parallel_requests;
    raw.retry_limit = cfg.retry_limit;
    raw.pairs_per_item = cfg.pairs_per_item;
    raw.randomize_orientation = cfg.randomize_orientation;
    raw.reject_tied_correct = cfg.reject_tied_correct;
    raw.failure_budget = cfg.failure_budget;
    raw.max_tokens = cfg.max_tokens;
    raw.retry_backoff_ms = cfg.retry_backoff_ms;
    raw.backends = cfg.backends;
    return raw;
}

PipelineConfig force_mock(PipelineConfig cfg) {
    for (auto& b : cfg.backends) {
        if (b.kind == BackendKind::Http) {
            b.kind = BackendKind::Mock;
            b.endpoint_url.clear();
            b.model_name.clear();
            b.api_key_env.clear();
            b.mock_seed = mock_seed_for(cfg.rng_seed, b.backend_id);
        }
    }
    return cfg;
}

// --- JSON -----------------------------------------------------------------

namespace {

void reject_unknown(const json& obj, std::initializer_list<std::string_view> allowed, std::string_view where) {
    if (!obj.is_object()) throw ConfigError(std::string(where) + " must be an object");
    for (const auto& [key, _] : obj.items()) {
        bool ok = false;
        for (auto a : allowed) ok = ok || key == a;
        if (!ok) throw ConfigError("unknown key '" + key + "' in " + std::string(where));
    }
}

template <typename T>
std::optional<T> opt(const json& obj, const char* key) {
    auto it = obj.find(key);
    if (it == obj.end() || it->is_null()) return std::nullopt;
    try {
        return it->get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
    }
}

template <typename T>
T required(const json& obj, const char* key, std::string_view where) {
    auto v = opt<T>(obj, key);
    if (!v) throw ConfigError("missing '" + std::string(key) + "' in " + std::string(where));
    return *v;
}

}  // namespace

json to_json(const SamplingStrategy& s) {
    if (s.kind == SamplingKind::Greedy) return json{{"kind", "greedy"}};
    return json{{"kind", "temperature"}, {"temperature", s.temperature}};
}

SamplingStrategy sampling_strategy_from_json(const json& j) {
    reject_unknown(j, {"kind", "temperature"}, "sampling strategy");
    const auto kind = required<std::string>(j, "kind", "sampling strategy");
    if (kind == "greedy") {
        if (j.contains("temperature")) throw ConfigError("greedy strategy must not carry a temperature");
        return SamplingStrategy::greedy();
    }
    if (kind == "temperature")
        return SamplingStrategy::with_temperature(required<double>(j, "temperature", "sampling strategy"));
    throw ConfigError("unknown sampling kind '" + kind + "'");
}

json to_json(const BackendSpec& b) {
    json j{{"id", b.backend_id}, {"role", to_string(b.role)}};
    if (b.kind == BackendKind::Http) {
        j["kind"] = "http";
        j["endpoint_url"] = b.endpoint_url;
        j["model_name"] = b.model_name;
        j["api_key_env"] = b.api_key_env;
    } else {
        j["kind"] = "mock";
        j["mock_seed"] = b.mock_seed;
        if (b.mock_fault_rate != 0.0) j["mock_fault_rate"] = b.mock_fault_rate;
    }
    return j;
}

BackendSpec backend_spec_from_json(const json& j) {
    reject_unknown(j, {"id", "role", "kind", "endpoint_url", "model_name", "api_key_env", "mock_seed",
                       "mock_fault_rate"},
                   "backend");
    BackendSpec b;
    b.backend_id = required<std::string>(j, "id", "backend");
    b.role = parse_backend_role(required<std::string>(j, "role", "backend"));
    const auto kind = opt<std::string>(j, "kind").value_or("mock");
    if (kind == "http") {
        b.kind = BackendKind::Http;
        b.endpoint_url = opt<std::string>(j, "endpoint_url").value_or("");
        b.model_name = opt<std::string>(j, "model_name").value_or("");
        b.api_key_env = opt<std::string>(j, "api_key_env").value_or("");
    } else if (kind == "mock") {
        b.kind = BackendKind::Mock;
        b.mock_seed = opt<std::uint64_t>(j, "mock_seed").value_or(0);
        b.mock_fault_rate = opt<double>(j, "mock_fault_rate").value_or(0.0);
    } else {
        throw ConfigError("unknown backend kind '" + kind + "'");
    }
    return b;
}

RawConfig parse_config(const json& doc) {
    reject_unknown(doc, {"pipeline", "backends"}, "config");
    RawConfig raw;
    if (auto it = doc.find("pipeline"); it != doc.end()) {
        const json& p = *it;
        reject_unknown(p,
                       {"n_generators", "M", "tau", "m", "beta", "sampling_strategies", "negative_strategy",
                        "rng_seed", "max_parallel_requests", "retry_limit", "pairs_per_item",
                        "randomize_orientation", "reject_tied_correct", "failure_budget", "max_tokens",
                        "retry_backoff_ms"},
                       "pipeline");
        raw.num_generators = opt<int>(p, "n_generators");
        raw.num_experts = opt<int>(p, "M");
        raw.vote_threshold = opt<int>(p, "tau");
        raw.num_resamples = opt<int>(p, "m");
        raw.beta = opt<double>(p, "beta");
        if (auto s = p.find("sampling_strategies"); s != p.end()) {
            if (!s->is_array()) throw ConfigError("sampling_strategies must be an array");
            std::vector<SamplingStrategy> list;
            for (const auto& e : *s) list.push_back(sampling_strategy_from_json(e));
            raw.sampling_strategies = std::move(list);
        }
        if (auto s = opt<std::string>(p, "negative_strategy")) raw.negative_strategy = parse_negative_strategy(*s);
        raw.rng_seed = opt<std::uint64_t>(p, "rng_seed");
        raw.max_parallel_requests = opt<int>(p, "max_parallel_requests");
        raw.retry_limit = opt<int>(p, "retry_limit");
        raw.pairs_per_item = opt<int>(p, "pairs_per_item");
        raw.randomize_orientation = opt<bool>(p, "randomize_orientation");
        raw.reject_tied_correct = opt<bool>(p, "reject_tied_correct");
        raw.failure_budget = opt<double>(p, "failure_budget");
        raw.max_tokens = opt<int>(p, "max_tokens");
        raw.retry_backoff_ms = opt<int>(p, "retry_backoff_ms");
    }
    if (auto it = doc.find("backends"); it != doc.end()) {
        if (!it->is_array()) throw ConfigError("backends must be an array");
        std::vector<BackendSpec> list;
        for (const auto& e : *it) list.push_back(backend_spec_from_json(e));
        raw.backends = std::move(list);
    }
    return raw;
}

RawConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("config " + path.string() + ": " + e.what());
    }
    return parse_config(doc);
}

json config_to_json(const PipelineConfig& cfg, bool include_execution) {
    json strategies = json::array();
    for (const auto& s : cfg.sampling_strategies) strategies.push_back(to_json(s));
    json p{{"n_generators", cfg.num_generators},
           {"M", cfg.num_experts},
           {"tau", cfg.vote_threshold},
           {"m", cfg.num_resamples},
           {"beta", cfg.beta},
           {"sampling_strategies", strategies},
           {"negative_strategy", to_string(cfg.negative_strategy)},
           {"rng_seed", cfg.rng_seed},
           {"retry_limit", cfg.retry_limit},
           {"pairs_per_item", cfg.pairs_per_item},
           {"randomize_orientation", cfg.randomize_orientation},
           {"reject_tied_correct", cfg.reject_tied_correct},
           {"failure_budget", cfg.failure_budget},
           {"max_tokens", cfg.max_tokens}};
    if (include_execution) {
        p["max_parallel_requests"] = cfg.max_parallel_requests;
        p["retry_backoff_ms"] = cfg.retry_backoff_ms;
    }
    json backends = json::array();
    for (const auto& b : cfg.backends) backends.push_back(to_json(b));
    return json{{"pipeline", p}, {"backends", backends}};
}

std::string pair_key(std::string_view image_ref, std::string_view question) {
    if (question.empty()) throw EmptyQuestion("question must be non-empty");
    return field_digest({image_ref, question});
}

std::string make_response_id(std::string_view pair_id, std::string_view generator_id,
                             const SamplingStrategy& strategy) {
    return short_id({"response", pair_id, generator_id, strategy.label()});
}

}  // namespace vlpref
