#include "vlpref/generation.hpp"

#include "vlpref/digest.hpp"
#include "vlpref/errors.hpp"
#include "vlpref/worker_pool.hpp"

#include <algorithm>
#include <optional>
#include <set>
#include <variant>

namespace vlpref {

GenerationResult sample_responses(const ImageQuestionPair& pair, const std::vector<Backend>& generators,
                                  const std::vector<SamplingStrategy>& strategies, int max_tokens,
                                  std::size_t workers) {
    if (generators.empty()) throw ConfigError("sample_responses needs at least one generator");
    for (const auto& g : generators) {
        if (g.spec.role != BackendRole::Generator)
            throw ConfigError("backend '" + g.id() + "' is not a generator");
    }

    std::vector<const Backend*> ordered;
    for (const auto& g : generators) ordered.push_back(&g);
    std::sort(ordered.begin(), ordered.end(), [](const Backend* a, const Backend* b) { return a->id() < b->id(); });

    using Outcome = std::variant<std::monostate, CandidateResponse, GenerationFailure>;
    const std::size_t tasks = ordered.size() * strategies.size();
    auto outcomes = parallel_map<Outcome>(tasks, workers, [&](std::size_t i) -> Outcome {
        const Backend& gen = *ordered[i / strategies.size()];
        const SamplingStrategy& strategy = strategies[i % strategies.size()];
        ChatRequest req;
        req.messages.push_back({ChatMessage::Role::System,
                                "You are a helpful assistant. Answer the user's question about the image.",
                                std::nullopt});
        req.messages.push_back({ChatMessage::Role::User, pair.question, pair.image_ref});
        req.temperature = strategy.request_temperature();
        req.max_tokens = max_tokens;
        try {
            std::string text = chat_complete(gen, req);
            if (text.find_first_not_of(" \t\r\n") == std::string::npos)
                return GenerationFailure{pair.pair_id, gen.id(), strategy, "empty response"};
            return CandidateResponse{make_response_id(pair.pair_id, gen.id(), strategy), pair.pair_id, gen.id(),
                                     strategy, std::move(text)};
        } catch (const Error& e) {
            return GenerationFailure{pair.pair_id, gen.id(), strategy, e.what()};
        }
    });

    GenerationResult result;
    for (auto& o : outcomes) {
        if (auto* r = std::get_if<CandidateResponse>(&o)) result.responses.push_back(std::move(*r));
        if (auto* f = std::get_if<GenerationFailure>(&o)) result.failures.push_back(std::move(*f));
    }
    return result;
}

std::string make_pairing_id(std::string_view pair_id, std::string_view a_id, std::string_view b_id) {
    return short_id({"pairing", pair_id, a_id, b_id});
}

std::vector<ResponsePairing> enumerate_pairings(const std::vector<CandidateResponse>& responses, int pairs_per_item,
                                                std::uint64_t rng_seed, bool randomize_orientation) {
    if (responses.size() < 2)
        throw TooFewResponses("need at least 2 responses, got " + std::to_string(responses.size()));
    if (pairs_per_item < 1) throw ConfigError("pairs_per_item must be positive");

    const std::string& pair_id = responses.front().pair_id;
    std::vector<std::string> ids;
    for (const auto& r : responses) {
        if (r.pair_id != pair_id) throw ConfigError("responses from different items passed to enumerate_pairings");
        ids.push_back(r.response_id);
    }
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) throw ConfigError("duplicate response_id");

    std::vector<std::pair<std::size_t, std::size_t>> combos;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        for (std::size_t j = i + 1; j < ids.size(); ++j) combos.emplace_back(i, j);
    }

    SplitMix64 rng(digest_u64({"pairings", std::to_string(rng_seed), pair_id}));
    const std::size_t take = std::min(combos.size(), static_cast<std::size_t>(pairs_per_item));
    if (take < combos.size()) {
        // Partial Fisher-Yates: the first `take` slots become a uniform sample.
        for (std::size_t i = 0; i < take; ++i) {
            const std::size_t j = i + rng.below(combos.size() - i);
            std::swap(combos[i], combos[j]);
        }
        combos.resize(take);
    }

    std::vector<ResponsePairing> out;
    out.reserve(combos.size());
    for (auto [i, j] : combos) {
        std::string a = ids[i];
        std::string b = ids[j];
        if (randomize_orientation && rng.below(2) == 1) std::swap(a, b);
        out.push_back({make_pairing_id(pair_id, a, b), pair_id, a, b});
    }
    std::sort(out.begin(), out.end(),
              [](const ResponsePairing& x, const ResponsePairing& y) { return x.pairing_id < y.pairing_id; });
    return out;
}

}  // namespace vlpref
