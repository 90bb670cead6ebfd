#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <utility>
#include <vector>

namespace vlpref::trainmath {

// A response at toy scale: an opaque context index standing in for
// (image, question, response pair) and a token list.
struct TokenSequence {
    int context_id = 0;
    std::vector<int> tokens;

    bool operator==(const TokenSequence&) const = default;
};

// Tabular categorical policy: one logit row per (context, position). Token
// probabilities are the softmax of that row.
class ToyPolicy {
public:
    ToyPolicy() = default;
    ToyPolicy(int vocab, int contexts, int max_len, double fill = 0.0);

    int vocab() const { return vocab_; }
    int contexts() const { return contexts_; }
    int max_len() const { return max_len_; }
    std::size_t num_params() const { return logits_.size(); }

    std::size_t offset(int context, int position) const {
        return (static_cast<std::size_t>(context) * max_len_ + position) * vocab_;
    }
    std::span<const double> row(int context, int position) const { return {logits_.data() + offset(context, position), static_cast<std::size_t>(vocab_)}; }
    std::span<double> row(int context, int position) { return {logits_.data() + offset(context, position), static_cast<std::size_t>(vocab_)}; }

    std::vector<double>& params() { return logits_; }
    const std::vector<double>& params() const { return logits_; }

    bool same_shape(const ToyPolicy& other) const {
        return vocab_ == other.vocab_ && contexts_ == other.contexts_ && max_len_ == other.max_len_;
    }
    bool operator==(const ToyPolicy&) const = default;

private:
    int vocab_ = 0;
    int contexts_ = 0;
    int max_len_ = 0;
    std::vector<double> logits_;
};

struct DpoTerms {
    double mu_plus = 0.0;
    double mu_minus = 0.0;

    double margin() const { return mu_plus - mu_minus; }
};

// log(1 + exp(x)) without overflow for large |x|.
double softplus(double x);

// Sum over positions of log softmax(row)[token], max-shifted before exp.
// Throws OutOfRange on a bad context, length, or token.
double seq_logprob(const ToyPolicy& policy, const TokenSequence& seq);

// Mean per-token negative log-likelihood.
double sft_loss(const ToyPolicy& policy, const TokenSequence& seq);

DpoTerms dpo_terms(const ToyPolicy& theta, const ToyPolicy& ref, const TokenSequence& chosen,
                   const TokenSequence& rejected);

// -log sigmoid(beta * (mu_plus - mu_minus)) = softplus(-beta * margin).
double dpo_loss(const DpoTerms& terms, double beta);

// Analytic gradients with respect to the policy logits, flattened like
// ToyPolicy::params().
std::vector<double> sft_loss_grad(const ToyPolicy& policy, const TokenSequence& seq);
std::vector<double> dpo_loss_grad(const ToyPolicy& theta, const ToyPolicy& ref, const TokenSequence& chosen,
                                  const TokenSequence& rejected, double beta);

using LossFn = std::function<double(const ToyPolicy&)>;
using GradFn = std::function<std::vector<double>(const ToyPolicy&)>;

// Central differences on every parameter. Returns
// max_i |g_i - fd_i| / max(1e-8, |g_i| + |fd_i|). Throws NonFiniteGradient.
double grad_check(const LossFn& loss, const GradFn& grad, const ToyPolicy& policy, double epsilon = 1e-6);

struct TrainConfig {
    int sft_steps = 200;
    int dpo_steps = 300;
    double lr_sft = 0.5;
    double lr_dpo = 1.0;
    double beta = 0.01;
};

// Entry k holds the value before update k; the final entry is after the last
// update, so each vector has steps + 1 elements.
struct TrainHistory {
    std::vector<double> sft_loss;
    std::vector<double> dpo_loss;
    std::vector<double> dpo_margin;
};

struct TrainResult {
    ToyPolicy policy;
    ToyPolicy reference;
    TrainHistory history;
};

using PreferencePair = std::pair<TokenSequence, TokenSequence>;  // (chosen, rejected)

double mean_sft_loss(const ToyPolicy& policy, const std::vector<TokenSequence>& seqs);
double mean_dpo_loss(const ToyPolicy& theta, const ToyPolicy& ref, const std::vector<PreferencePair>& pairs,
                     double beta);
double mean_margin(const ToyPolicy& theta, const ToyPolicy& ref, const std::vector<PreferencePair>& pairs);

// Full-batch gradient descent: SFT on sft_seqs, then DPO against a frozen
// snapshot of the SFT result. Throws DivergenceError on a non-finite loss.
TrainResult train_toy(const std::vector<PreferencePair>& pairs, const std::vector<TokenSequence>& sft_seqs,
                      const TrainConfig& config, ToyPolicy init);

}  // namespace vlpref::trainmath
