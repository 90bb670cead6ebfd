#pragma once

#include "vlpref/core.hpp"

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

namespace vlpref {

struct ChatMessage {
    enum class Role { System, User };
    Role role = Role::User;
    std::string text;
    std::optional<std::string> image_ref;

    bool operator==(const ChatMessage&) const = default;
};

struct ChatRequest {
    std::vector<ChatMessage> messages;
    std::optional<double> temperature;
    int max_tokens = 1024;
    // Forwarded to endpoints that accept a sampling seed; mocks fold it into
    // their hash so that repeated draws of one prompt differ.
    std::optional<std::uint64_t> seed;

    bool has_image() const;
};

// Canonical JSON of a request (sorted keys). Mock replies hash this.
nlohmann::json to_json(const ChatRequest& req);

// One request/response exchange with a model endpoint.
class Transport {
public:
    virtual ~Transport() = default;
    virtual std::string send(const ChatRequest& req) = 0;
};

// OpenAI-compatible chat-completions client.
class HttpTransport : public Transport {
public:
    explicit HttpTransport(BackendSpec spec, std::chrono::seconds timeout = std::chrono::seconds(120));
    std::string send(const ChatRequest& req) override;

    // Request body as sent on the wire; exposed for tests.
    nlohmann::json request_body(const ChatRequest& req) const;

private:
    BackendSpec spec_;
    std::chrono::seconds timeout_;
    std::string origin_;  // scheme://host[:port]
    std::string path_;
};

// Deterministic offline stand-in: every reply is a pure function of
// (mock_seed, canonical request) shaped to the backend's role protocol.
class MockTransport : public Transport {
public:
    explicit MockTransport(BackendSpec spec) : spec_(std::move(spec)) {}
    std::string send(const ChatRequest& req) override;

private:
    BackendSpec spec_;
};

// Appends one JSON object per exchange to a file. Thread safe.
class TraceSink {
public:
    explicit TraceSink(const std::filesystem::path& path);
    void record(const std::string& backend_id, const ChatRequest& req, const std::string& outcome, bool ok);

private:
    std::mutex mu_;
    std::ofstream out_;
};

struct BackendStats {
    std::atomic<std::uint64_t> calls{0};
    std::atomic<std::uint64_t> transport_retries{0};
    std::atomic<std::uint64_t> parse_retries{0};
    std::atomic<std::uint64_t> tie_verdicts{0};
};

struct RetryPolicy {
    int retry_limit = 2;
    std::chrono::milliseconds base_backoff{200};
};

// A configured endpoint: its spec plus the transport that serves it. Cheap to
// copy; copies share transport and counters.
struct Backend {
    BackendSpec spec;
    std::shared_ptr<Transport> transport;
    RetryPolicy retry;
    std::shared_ptr<BackendStats> stats = std::make_shared<BackendStats>();
    std::shared_ptr<TraceSink> trace;

    const std::string& id() const { return spec.backend_id; }
};

Backend make_backend(const BackendSpec& spec, const RetryPolicy& retry, std::shared_ptr<TraceSink> trace = {});

// Sends req, retrying TransportError with exponential backoff. At most
// retry_limit + 1 attempts. AuthError and ProtocolError are not retried.
std::string chat_complete(const Backend& backend, const ChatRequest& req);

// Every backend of a validated config, grouped by role. Experts and
// generators are sorted by backend_id.
struct Roster {
    std::vector<Backend> generators;
    std::vector<Backend> experts;
    std::optional<Backend> judge;
    std::optional<Backend> captioner;
    std::optional<Backend> scorer;
    std::optional<Backend> sft_policy;

    const Backend& require_judge() const;
    const Backend& require_captioner() const;
    const Backend& require_scorer() const;
    const Backend& require_sft_policy() const;

    std::uint64_t total_parse_retries() const;
    std::uint64_t total_transport_retries() const;
    std::uint64_t total_tie_verdicts() const;
};

Roster make_roster(const PipelineConfig& cfg, std::shared_ptr<TraceSink> trace = {});

struct Caption {
    std::string pair_id;
    std::string text;
    std::string captioner_id;

    bool operator==(const Caption&) const = default;
};

class CaptionCache {
public:
    std::optional<Caption> find(const std::string& pair_id) const;
    void insert(const Caption& caption);
    std::size_t size() const;

private:
    mutable std::mutex mu_;
    std::unordered_map<std::string, Caption> entries_;
};

Caption generate_caption(const Backend& captioner, const ImageQuestionPair& pair, CaptionCache& cache);

// Text-only reward for one response. The outbound request never carries the
// image. Http replies yield the last integer in the text; Mock replies carry
// a value in [0,1].
double expert_reward(const Backend& expert, const Caption& caption, const std::string& question,
                     const std::string& response);

// Last run of decimal digits in text, if any.
std::optional<long long> parse_last_integer(std::string_view text);

}  // namespace vlpref
