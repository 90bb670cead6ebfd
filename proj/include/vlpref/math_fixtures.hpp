#pragma once

#include "vlpref/trainmath.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace vlpref::trainmath {

// One random instance for gradient verification. chosen and rejected live in
// different contexts so that no logit row is shared between them.
struct GradientFixture {
    ToyPolicy theta;
    ToyPolicy ref;
    TokenSequence sft_seq;
    TokenSequence chosen;
    TokenSequence rejected;
};

struct TrainingFixture {
    int vocab = 0;
    int contexts = 0;
    int max_len = 0;
    std::vector<TokenSequence> sft_seqs;
    std::vector<PreferencePair> pairs;
    TrainConfig config;
};

struct MathFixtures {
    std::uint64_t seed = 0;
    std::vector<GradientFixture> gradient;
    TrainingFixture training;
};

MathFixtures make_math_fixtures(std::uint64_t seed, int gradient_count = 20, int pair_count = 100);

nlohmann::json to_json(const MathFixtures& fx);
MathFixtures math_fixtures_from_json(const nlohmann::json& j);
MathFixtures load_math_fixtures(const std::filesystem::path& path);
void save_math_fixtures(const MathFixtures& fx, const std::filesystem::path& path);

struct CheckRow {
    std::string name;
    double value = 0.0;
    double threshold = 0.0;
    std::string relation;  // how value compares to threshold when passing
    bool pass = false;
};

// Loss identities, asymptotes, gradient checks, and the toy training run.
std::vector<CheckRow> verify_math(const MathFixtures& fx);

}  // namespace vlpref::trainmath
