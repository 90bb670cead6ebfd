#include "vlpref/math_fixtures.hpp"

#include "vlpref/digest.hpp"
#include "vlpref/errors.hpp"

#include <cmath>
#include <fstream>

namespace vlpref::trainmath {

using nlohmann::json;

namespace {

int uniform_int(SplitMix64& rng, int lo, int hi) {
    return lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
}

TokenSequence random_sequence(SplitMix64& rng, int context, int vocab, int min_len, int max_len) {
    TokenSequence s;
    s.context_id = context;
    const int len = uniform_int(rng, min_len, max_len);
    for (int t = 0; t < len; ++t) s.tokens.push_back(uniform_int(rng, 0, vocab - 1));
    return s;
}

void randomize(ToyPolicy& p, SplitMix64& rng, double scale) {
    for (auto& v : p.params()) v = scale * (2.0 * rng.unit() - 1.0);
}

}  // namespace

MathFixtures make_math_fixtures(std::uint64_t seed, int gradient_count, int pair_count) {
    MathFixtures fx;
    fx.seed = seed;
    SplitMix64 rng(seed);

    for (int i = 0; i < gradient_count; ++i) {
        const int vocab = uniform_int(rng, 2, 5);
        const int contexts = uniform_int(rng, 2, 3);
        const int max_len = uniform_int(rng, 1, 4);
        GradientFixture g{ToyPolicy(vocab, contexts, max_len), ToyPolicy(vocab, contexts, max_len), {}, {}, {}};
        randomize(g.theta, rng, 1.0);
        randomize(g.ref, rng, 1.0);
        const int chosen_ctx = uniform_int(rng, 0, contexts - 1);
        const int rejected_ctx = (chosen_ctx + uniform_int(rng, 1, contexts - 1)) % contexts;
        g.sft_seq = random_sequence(rng, uniform_int(rng, 0, contexts - 1), vocab, 1, max_len);
        g.chosen = random_sequence(rng, chosen_ctx, vocab, 1, max_len);
        g.rejected = random_sequence(rng, rejected_ctx, vocab, 1, max_len);
        fx.gradient.push_back(std::move(g));
    }

    // Training set: each context has a preferred token per position; chosen
    // sequences follow it, rejected ones are drawn uniformly.
    TrainingFixture& t = fx.training;
    t.vocab = 6;
    t.contexts = 10;
    t.max_len = 4;
    std::vector<std::vector<int>> preferred(t.contexts, std::vector<int>(t.max_len));
    for (auto& row : preferred) {
        for (auto& tok : row) tok = uniform_int(rng, 0, t.vocab - 1);
    }
    auto preferred_sequence = [&](int ctx) {
        TokenSequence s;
        s.context_id = ctx;
        const int len = uniform_int(rng, 2, t.max_len);
        for (int p = 0; p < len; ++p) {
            s.tokens.push_back(rng.unit() < 0.8 ? preferred[ctx][p] : uniform_int(rng, 0, t.vocab - 1));
        }
        return s;
    };
    for (int c = 0; c < t.contexts; ++c) {
        t.sft_seqs.push_back(preferred_sequence(c));
        t.sft_seqs.push_back(preferred_sequence(c));
    }
    for (int i = 0; i < pair_count; ++i) {
        const int ctx = uniform_int(rng, 0, t.contexts - 1);
        TokenSequence chosen = preferred_sequence(ctx);
        TokenSequence rejected = random_sequence(rng, ctx, t.vocab, 2, t.max_len);
        while (rejected == chosen) rejected = random_sequence(rng, ctx, t.vocab, 2, t.max_len);
        t.pairs.emplace_back(std::move(chosen), std::move(rejected));
    }
    t.config = TrainConfig{100, 300, 0.5, 50.0, 0.01};
    return fx;
}

namespace {

json seq_json(const TokenSequence& s) { return json{{"context", s.context_id}, {"tokens", s.tokens}}; }

TokenSequence seq_from(const json& j) {
    return TokenSequence{j.at("context").get<int>(), j.at("tokens").get<std::vector<int>>()};
}

json policy_json(const ToyPolicy& p) {
    return json{{"vocab", p.vocab()}, {"contexts", p.contexts()}, {"max_len", p.max_len()}, {"logits", p.params()}};
}

ToyPolicy policy_from(const json& j) {
    ToyPolicy p(j.at("vocab").get<int>(), j.at("contexts").get<int>(), j.at("max_len").get<int>());
    auto logits = j.at("logits").get<std::vector<double>>();
    if (logits.size() != p.num_params()) throw OutOfRange("fixture logits have the wrong size");
    p.params() = std::move(logits);
    return p;
}

}  // namespace

json to_json(const MathFixtures& fx) {
    json grads = json::array();
    for (const auto& g : fx.gradient) {
        grads.push_back(json{{"theta", policy_json(g.theta)},
                             {"ref", policy_json(g.ref)},
                             {"sft_seq", seq_json(g.sft_seq)},
                             {"chosen", seq_json(g.chosen)},
                             {"rejected", seq_json(g.rejected)}});
    }
    const auto& t = fx.training;
    json sft = json::array();
    for (const auto& s : t.sft_seqs) sft.push_back(seq_json(s));
    json pairs = json::array();
    for (const auto& [c, r] : t.pairs) pairs.push_back(json{{"chosen", seq_json(c)}, {"rejected", seq_json(r)}});
    return json{{"seed", fx.seed},
                {"gradient_fixtures", grads},
                {"training",
                 {{"vocab", t.vocab},
                  {"contexts", t.contexts},
                  {"max_len", t.max_len},
                  {"sft_seqs", sft},
                  {"pairs", pairs},
                  {"config",
                   {{"sft_steps", t.config.sft_steps},
                    {"dpo_steps", t.config.dpo_steps},
                    {"lr_sft", t.config.lr_sft},
                    {"lr_dpo", t.config.lr_dpo},
                    {"beta", t.config.beta}}}}}};
}

MathFixtures math_fixtures_from_json(const json& j) {
    try {
        MathFixtures fx;
        fx.seed = j.at("seed").get<std::uint64_t>();
        for (const auto& g : j.at("gradient_fixtures")) {
            fx.gradient.push_back({policy_from(g.at("theta")), policy_from(g.at("ref")), seq_from(g.at("sft_seq")),
                                   seq_from(g.at("chosen")), seq_from(g.at("rejected"))});
        }
        const json& tj = j.at("training");
        auto& t = fx.training;
        t.vocab = tj.at("vocab").get<int>();
        t.contexts = tj.at("contexts").get<int>();
        t.max_len = tj.at("max_len").get<int>();
        for (const auto& s : tj.at("sft_seqs")) t.sft_seqs.push_back(seq_from(s));
        for (const auto& p : tj.at("pairs")) t.pairs.emplace_back(seq_from(p.at("chosen")), seq_from(p.at("rejected")));
        const json& c = tj.at("config");
        t.config = TrainConfig{c.at("sft_steps").get<int>(), c.at("dpo_steps").get<int>(), c.at("lr_sft").get<double>(),
                               c.at("lr_dpo").get<double>(), c.at("beta").get<double>()};
        return fx;
    } catch (const json::exception& e) {
        throw IoError(std::string("malformed math fixtures: ") + e.what());
    }
}

MathFixtures load_math_fixtures(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open fixtures " + path.string());
    try {
        return math_fixtures_from_json(json::parse(in));
    } catch (const json::parse_error& e) {
        throw IoError("fixtures " + path.string() + ": " + e.what());
    }
}

void save_math_fixtures(const MathFixtures& fx, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << to_json(fx).dump() << '\n';
}

std::vector<CheckRow> verify_math(const MathFixtures& fx) {
    std::vector<CheckRow> rows;
    auto at_most = [&](std::string name, double value, double threshold) {
        rows.push_back({std::move(name), value, threshold, "<=", std::isfinite(value) && value <= threshold});
    };
    auto below = [&](std::string name, double value, double threshold) {
        rows.push_back({std::move(name), value, threshold, "<", std::isfinite(value) && value < threshold});
    };
    auto above = [&](std::string name, double value, double threshold) {
        rows.push_back({std::move(name), value, threshold, ">", std::isfinite(value) && value > threshold});
    };

    {
        ToyPolicy uniform(4, 1, 5);
        double worst = 0.0;
        for (int len = 1; len <= 5; ++len) {
            TokenSequence s{0, std::vector<int>(static_cast<std::size_t>(len), len % 4)};
            worst = std::max(worst, std::abs(sft_loss(uniform, s) - std::log(4.0)));
        }
        at_most("sft_loss(uniform, V=4) - ln 4", worst, 1e-12);
    }
    at_most("dpo_loss(equal terms) - ln 2", std::abs(dpo_loss({0.3, 0.3}, 0.01) - std::log(2.0)), 1e-12);
    {
        // beta = 1, margin = +-700: softplus closed forms are exp(-700) and 700 + exp(-700).
        const double pos = dpo_loss({700.0, 0.0}, 1.0);
        const double neg = dpo_loss({0.0, 700.0}, 1.0);
        const double err = std::max(std::abs(pos - std::exp(-700.0)), std::abs(neg - (700.0 + std::exp(-700.0))));
        at_most("dpo_loss asymptotes at +-700", std::isfinite(pos) && std::isfinite(neg) ? err : INFINITY, 1e-9);
    }

    double sft_err = 0.0;
    double dpo_err_small = 0.0;
    double dpo_err_one = 0.0;
    for (const auto& g : fx.gradient) {
        sft_err = std::max(sft_err, grad_check([&](const ToyPolicy& p) { return sft_loss(p, g.sft_seq); },
                                               [&](const ToyPolicy& p) { return sft_loss_grad(p, g.sft_seq); }, g.theta));
        for (double beta : {0.01, 1.0}) {
            const double e = grad_check(
                [&](const ToyPolicy& p) { return dpo_loss(dpo_terms(p, g.ref, g.chosen, g.rejected), beta); },
                [&](const ToyPolicy& p) { return dpo_loss_grad(p, g.ref, g.chosen, g.rejected, beta); }, g.theta);
            double& worst = beta == 1.0 ? dpo_err_one : dpo_err_small;
            worst = std::max(worst, e);
        }
    }
    below("sft gradient max rel error", sft_err, 1e-5);
    below("dpo gradient max rel error (beta=0.01)", dpo_err_small, 1e-5);
    below("dpo gradient max rel error (beta=1)", dpo_err_one, 1e-5);

    if (!fx.gradient.empty()) {
        const auto& g = fx.gradient.front();
        const double e = grad_check([&](const ToyPolicy& p) { return sft_loss(p, g.sft_seq); },
                                    [&](const ToyPolicy& p) {
                                        auto grad = sft_loss_grad(p, g.sft_seq);
                                        const std::size_t i = p.offset(g.sft_seq.context_id, 0) + g.sft_seq.tokens[0];
                                        grad[i] *= 2.0;
                                        return grad;
                                    },
                                    g.theta);
        above("corrupted gradient sentinel", e, 1e-3);
    }

    const auto& t = fx.training;
    const TrainResult run = train_toy(t.pairs, t.sft_seqs, t.config, ToyPolicy(t.vocab, t.contexts, t.max_len));
    const auto& h = run.history;
    at_most("dpo start |mean loss - ln 2|", std::abs(h.dpo_loss.front() - std::log(2.0)), 0.0);
    at_most("dpo start |mean margin|", std::abs(h.dpo_margin.front()), 0.0);
    below("dpo final mean loss vs ln 2", h.dpo_loss.back(), std::log(2.0));
    above("dpo final mean margin", h.dpo_margin.back(), 0.0);
    below("sft final mean loss vs start", h.sft_loss.back(), h.sft_loss.front());
    return rows;
}

}  // namespace vlpref::trainmath
