#include "vlpref/trainmath.hpp"

#include "vlpref/errors.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace vlpref::trainmath {

ToyPolicy::ToyPolicy(int vocab, int contexts, int max_len, double fill)
    : vocab_(vocab), contexts_(contexts), max_len_(max_len) {
    if (vocab < 1 || contexts < 1 || max_len < 1) throw OutOfRange("policy dimensions must be positive");
    logits_.assign(static_cast<std::size_t>(vocab) * contexts * max_len, fill);
}

double softplus(double x) {
    if (x > 0.0) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

namespace {

void check(const ToyPolicy& policy, const TokenSequence& seq) {
    if (seq.tokens.empty()) throw OutOfRange("sequence must contain at least one token");
    if (seq.context_id < 0 || seq.context_id >= policy.contexts())
        throw OutOfRange("context " + std::to_string(seq.context_id) + " outside [0, " +
                         std::to_string(policy.contexts()) + ")");
    if (static_cast<int>(seq.tokens.size()) > policy.max_len())
        throw OutOfRange("sequence length " + std::to_string(seq.tokens.size()) + " exceeds " +
                         std::to_string(policy.max_len()));
    for (int tok : seq.tokens) {
        if (tok < 0 || tok >= policy.vocab()) throw OutOfRange("token " + std::to_string(tok) + " outside vocabulary");
    }
}

// max + log(sum exp(row - max))
double log_sum_exp(std::span<const double> row) {
    const double m = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (double v : row) sum += std::exp(v - m);
    return m + std::log(sum);
}

// grad += scale * d seq_logprob / d logits
void accumulate_logprob_grad(const ToyPolicy& policy, const TokenSequence& seq, double scale,
                             std::vector<double>& grad) {
    for (std::size_t t = 0; t < seq.tokens.size(); ++t) {
        const auto row = policy.row(seq.context_id, static_cast<int>(t));
        const double lse = log_sum_exp(row);
        const std::size_t base = policy.offset(seq.context_id, static_cast<int>(t));
        for (int v = 0; v < policy.vocab(); ++v) grad[base + v] -= scale * std::exp(row[v] - lse);
        grad[base + seq.tokens[t]] += scale;
    }
}

void require_finite(double v, const char* what) {
    if (!std::isfinite(v)) throw DivergenceError(std::string(what) + " became non-finite");
}

}  // namespace

double seq_logprob(const ToyPolicy& policy, const TokenSequence& seq) {
    check(policy, seq);
    double total = 0.0;
    for (std::size_t t = 0; t < seq.tokens.size(); ++t) {
        const auto row = policy.row(seq.context_id, static_cast<int>(t));
        total += row[seq.tokens[t]] - log_sum_exp(row);
    }
    return total;
}

double sft_loss(const ToyPolicy& policy, const TokenSequence& seq) {
    return -seq_logprob(policy, seq) / static_cast<double>(seq.tokens.size());
}

DpoTerms dpo_terms(const ToyPolicy& theta, const ToyPolicy& ref, const TokenSequence& chosen,
                   const TokenSequence& rejected) {
    if (!theta.same_shape(ref)) throw OutOfRange("theta and ref shapes differ");
    return {seq_logprob(theta, chosen) - seq_logprob(ref, chosen),
            seq_logprob(theta, rejected) - seq_logprob(ref, rejected)};
}

double dpo_loss(const DpoTerms& terms, double beta) { return softplus(-beta * terms.margin()); }

std::vector<double> sft_loss_grad(const ToyPolicy& policy, const TokenSequence& seq) {
    check(policy, seq);
    std::vector<double> grad(policy.num_params(), 0.0);
    accumulate_logprob_grad(policy, seq, -1.0 / static_cast<double>(seq.tokens.size()), grad);
    return grad;
}

std::vector<double> dpo_loss_grad(const ToyPolicy& theta, const ToyPolicy& ref, const TokenSequence& chosen,
                                  const TokenSequence& rejected, double beta) {
    const DpoTerms terms = dpo_terms(theta, ref, chosen, rejected);
    // dL/dmargin = -beta * sigmoid(-beta * margin)
    const double z = beta * terms.margin();
    const double sig_neg = z >= 0.0 ? std::exp(-z) / (1.0 + std::exp(-z)) : 1.0 / (1.0 + std::exp(z));
    const double dmargin = -beta * sig_neg;
    std::vector<double> grad(theta.num_params(), 0.0);
    accumulate_logprob_grad(theta, chosen, dmargin, grad);
    accumulate_logprob_grad(theta, rejected, -dmargin, grad);
    return grad;
}

double grad_check(const LossFn& loss, const GradFn& grad, const ToyPolicy& policy, double epsilon) {
    if (!(epsilon > 0.0)) throw NonFiniteGradient("epsilon must be positive");
    const std::vector<double> analytic = grad(policy);
    if (analytic.size() != policy.num_params()) throw NonFiniteGradient("gradient size mismatch");
    ToyPolicy probe = policy;
    double worst = 0.0;
    for (std::size_t i = 0; i < probe.num_params(); ++i) {
        const double saved = probe.params()[i];
        probe.params()[i] = saved + epsilon;
        const double up = loss(probe);
        probe.params()[i] = saved - epsilon;
        const double down = loss(probe);
        probe.params()[i] = saved;
        const double fd = (up - down) / (2.0 * epsilon);
        if (!std::isfinite(fd) || !std::isfinite(analytic[i]))
            throw NonFiniteGradient("non-finite gradient at parameter " + std::to_string(i));
        const double denom = std::max(1e-8, std::abs(analytic[i]) + std::abs(fd));
        worst = std::max(worst, std::abs(analytic[i] - fd) / denom);
    }
    return worst;
}

namespace {

// Running mean: stays bit-exact when every term is identical, which a plain
// sum-then-divide does not.
template <typename Range, typename Fn>
double running_mean(const Range& items, Fn&& term) {
    double mean = 0.0;
    std::size_t k = 0;
    for (const auto& item : items) {
        ++k;
        mean += (term(item) - mean) / static_cast<double>(k);
    }
    return mean;
}

}  // namespace

double mean_sft_loss(const ToyPolicy& policy, const std::vector<TokenSequence>& seqs) {
    return running_mean(seqs, [&](const TokenSequence& s) { return sft_loss(policy, s); });
}

double mean_dpo_loss(const ToyPolicy& theta, const ToyPolicy& ref, const std::vector<PreferencePair>& pairs,
                     double beta) {
    return running_mean(pairs, [&](const PreferencePair& p) { return dpo_loss(dpo_terms(theta, ref, p.first, p.second), beta); });
}

double mean_margin(const ToyPolicy& theta, const ToyPolicy& ref, const std::vector<PreferencePair>& pairs) {
    return running_mean(pairs, [&](const PreferencePair& p) { return dpo_terms(theta, ref, p.first, p.second).margin(); });
}

TrainResult train_toy(const std::vector<PreferencePair>& pairs, const std::vector<TokenSequence>& sft_seqs,
                      const TrainConfig& config, ToyPolicy init) {
    if (pairs.empty() || sft_seqs.empty()) throw OutOfRange("train_toy needs non-empty pairs and SFT sequences");
    if (!(config.beta > 0.0)) throw OutOfRange("beta must be positive");

    TrainResult result;
    ToyPolicy policy = std::move(init);
    const double inv_sft = 1.0 / static_cast<double>(sft_seqs.size());

    for (int step = 0;; ++step) {
        const double loss = mean_sft_loss(policy, sft_seqs);
        require_finite(loss, "SFT loss");
        result.history.sft_loss.push_back(loss);
        if (step == config.sft_steps) break;
        std::vector<double> grad(policy.num_params(), 0.0);
        for (const auto& s : sft_seqs) {
            accumulate_logprob_grad(policy, s, -inv_sft / static_cast<double>(s.tokens.size()), grad);
        }
        for (std::size_t i = 0; i < grad.size(); ++i) policy.params()[i] -= config.lr_sft * grad[i];
    }

    result.reference = policy;
    const ToyPolicy& ref = result.reference;
    const double inv_pairs = 1.0 / static_cast<double>(pairs.size());
    for (int step = 0;; ++step) {
        const double loss = mean_dpo_loss(policy, ref, pairs, config.beta);
        require_finite(loss, "DPO loss");
        result.history.dpo_loss.push_back(loss);
        result.history.dpo_margin.push_back(mean_margin(policy, ref, pairs));
        if (step == config.dpo_steps) break;
        std::vector<double> grad(policy.num_params(), 0.0);
        for (const auto& [c, r] : pairs) {
            const auto g = dpo_loss_grad(policy, ref, c, r, config.beta);
            for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += inv_pairs * g[i];
        }
        for (std::size_t i = 0; i < grad.size(); ++i) policy.params()[i] -= config.lr_dpo * grad[i];
    }
    result.policy = std::move(policy);
    return result;
}

}  // namespace vlpref::trainmath
