#pragma once

#include "vlpref/backends.hpp"
#include "vlpref/core.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace vlpref {

struct GenerationFailure {
    std::string pair_id;
    std::string generator_id;
    SamplingStrategy strategy;
    std::string reason;

    bool operator==(const GenerationFailure&) const = default;
};

struct GenerationResult {
    // Canonical (generator_id, strategy) order.
    std::vector<CandidateResponse> responses;
    std::vector<GenerationFailure> failures;
};

// One request per (generator, strategy). Backend errors and empty replies
// become GenerationFailure records rather than exceptions.
GenerationResult sample_responses(const ImageQuestionPair& pair, const std::vector<Backend>& generators,
                                  const std::vector<SamplingStrategy>& strategies, int max_tokens = 1024,
                                  std::size_t workers = 1);

struct ResponsePairing {
    std::string pairing_id;
    std::string pair_id;
    std::string a_id;
    std::string b_id;

    // True unless orientation randomization swapped the canonical order.
    bool a_is_canonical_first() const { return a_id < b_id; }
    bool operator==(const ResponsePairing&) const = default;
};

std::string make_pairing_id(std::string_view pair_id, std::string_view a_id, std::string_view b_id);

// Samples pairs_per_item distinct unordered pairs (all of them when
// pairs_per_item >= C(n,2)) with an RNG keyed on (rng_seed, pair_id).
// Output is sorted by pairing_id. Throws TooFewResponses when n < 2.
std::vector<ResponsePairing> enumerate_pairings(const std::vector<CandidateResponse>& responses, int pairs_per_item,
                                                std::uint64_t rng_seed, bool randomize_orientation = false);

}  // namespace vlpref
