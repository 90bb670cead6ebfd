#include "vlpref/backends.hpp"

#include "vlpref/digest.hpp"
#include "vlpref/errors.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <thread>

namespace vlpref {

using nlohmann::json;

bool ChatRequest::has_image() const {
    for (const auto& m : messages) {
        if (m.image_ref) return true;
    }
    return false;
}

json to_json(const ChatRequest& req) {
    json msgs = json::array();
    for (const auto& m : req.messages) {
        json jm{{"role", m.role == ChatMessage::Role::System ? "system" : "user"}, {"text", m.text}};
        if (m.image_ref) jm["image_ref"] = *m.image_ref;
        msgs.push_back(std::move(jm));
    }
    json j{{"messages", msgs}, {"max_tokens", req.max_tokens}};
    if (req.temperature) j["temperature"] = *req.temperature;
    if (req.seed) j["seed"] = *req.seed;
    return j;
}

// --- mock -------------------------------------------------------------------

namespace {

constexpr std::array kAdjectives{"red",    "small",  "wooden", "crowded", "quiet",  "bright",
                                 "old",    "narrow", "blue",   "striped", "metal",  "round",
                                 "sunlit", "empty",  "tall",   "green",   "plastic", "broken"};
constexpr std::array kNouns{"clock",  "bicycle", "table", "street", "dog",   "window", "sign",
                            "bridge", "kitchen", "chart", "bottle", "tree",  "train",  "shelf",
                            "person", "laptop",  "boat",  "field",  "lamp",  "door"};
constexpr std::array kVerbs{"stands near", "rests on", "leans against", "faces", "sits beside",
                            "is behind", "hangs above", "is next to"};
constexpr std::array kQualities{"accurate", "detailed", "grounded", "specific", "faithful",
                                "complete", "precise",  "careful"};

template <typename Arr>
const char* pick(SplitMix64& rng, const Arr& arr) {
    return arr[rng.below(arr.size())];
}

std::string scene_sentence(SplitMix64& rng) {
    std::string s = "A ";
    s += pick(rng, kAdjectives);
    s += ' ';
    s += pick(rng, kNouns);
    s += ' ';
    s += pick(rng, kVerbs);
    s += " a ";
    s += pick(rng, kAdjectives);
    s += ' ';
    s += pick(rng, kNouns);
    s += '.';
    return s;
}

std::string verdict_reply(SplitMix64& rng) {
    const Side side = rng.below(2) == 0 ? Side::A : Side::B;
    const Side other = opposite(side);
    std::string out = "Better: " + std::string(to_string(side)) + "\n";
    out += "Response " + std::string(to_string(side)) + " is more " + pick(rng, kQualities) +
           " about the " + pick(rng, kNouns) + ", while Response " + std::string(to_string(other)) +
           " misdescribes the " + pick(rng, kAdjectives) + " " + pick(rng, kNouns) + ".";
    return out;
}

std::string shortest(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

}  // namespace

std::string MockTransport::send(const ChatRequest& req) {
    const std::string canonical = to_json(req).dump();
    SplitMix64 rng(digest_u64({"mock-reply", std::to_string(spec_.mock_seed), canonical}));
    const bool fault = spec_.mock_fault_rate > 0.0 && rng.unit() < spec_.mock_fault_rate;

    switch (spec_.role) {
        case BackendRole::Generator: {
            if (fault) return "";
            std::string out = scene_sentence(rng);
            const auto extra = rng.below(3);
            for (std::uint64_t i = 0; i < extra; ++i) out += " " + scene_sentence(rng);
            return out;
        }
        case BackendRole::Captioner:
            if (fault) return "  \n";
            return "Caption: " + scene_sentence(rng) + " " + scene_sentence(rng);
        case BackendRole::StrongJudge:
        case BackendRole::SftPolicy:
            if (fault) return "Both answers look fine to me.";
            return verdict_reply(rng);
        case BackendRole::Expert:
            if (fault) return "no digits here";
            return "Quality score: " + shortest(rng.unit());
        case BackendRole::Scorer: {
            if (fault) return "Score seventy-two";
            std::array<std::uint64_t, 4> parts{};
            for (auto& p : parts) p = rng.below(26);
            return "Relevance: " + std::to_string(parts[0]) + "/25\nAccuracy: " + std::to_string(parts[1]) +
                   "/25\nLogic: " + std::to_string(parts[2]) + "/25\nClarity: " + std::to_string(parts[3]) +
                   "/25\n**Score**: " + std::to_string(parts[0] + parts[1] + parts[2] + parts[3]);
        }
    }
    return {};
}

// --- trace ------------------------------------------------------------------

TraceSink::TraceSink(const std::filesystem::path& path) : out_(path, std::ios::binary | std::ios::app) {
    if (!out_) throw IoError("cannot open trace file " + path.string());
}

void TraceSink::record(const std::string& backend_id, const ChatRequest& req, const std::string& outcome,
                       bool ok) {
    json line{{"backend_id", backend_id}, {"request", to_json(req)}, {ok ? "response" : "error", outcome}};
    std::lock_guard lock(mu_);
    out_ << line.dump() << '\n';
    out_.flush();
}

// --- chat_complete ----------------------------------------------------------

Backend make_backend(const BackendSpec& spec, const RetryPolicy& retry, std::shared_ptr<TraceSink> trace) {
    Backend b;
    b.spec = spec;
    b.retry = retry;
    b.trace = std::move(trace);
    if (spec.kind == BackendKind::Http)
        b.transport = std::make_shared<HttpTransport>(spec);
    else
        b.transport = std::make_shared<MockTransport>(spec);
    return b;
}

std::string chat_complete(const Backend& backend, const ChatRequest& req) {
    const int attempts = backend.retry.retry_limit + 1;
    for (int attempt = 0;; ++attempt) {
        backend.stats->calls.fetch_add(1, std::memory_order_relaxed);
        try {
            std::string reply = backend.transport->send(req);
            if (backend.trace) backend.trace->record(backend.id(), req, reply, true);
            return reply;
        } catch (const TransportError& e) {
            if (backend.trace) backend.trace->record(backend.id(), req, e.what(), false);
            if (attempt + 1 >= attempts) throw;
            backend.stats->transport_retries.fetch_add(1, std::memory_order_relaxed);
            const auto delay = backend.retry.base_backoff * (1LL << std::min(attempt, 16));
            if (delay.count() > 0) std::this_thread::sleep_for(delay);
        } catch (const Error& e) {
            if (backend.trace) backend.trace->record(backend.id(), req, e.what(), false);
            throw;
        }
    }
}

// --- roster -----------------------------------------------------------------

namespace {

const Backend& require(const std::optional<Backend>& b, BackendRole role) {
    if (!b) throw ConfigError("no " + std::string(to_string(role)) + " backend configured");
    return *b;
}

}  // namespace

const Backend& Roster::require_judge() const { return require(judge, BackendRole::StrongJudge); }
const Backend& Roster::require_captioner() const { return require(captioner, BackendRole::Captioner); }
const Backend& Roster::require_scorer() const { return require(scorer, BackendRole::Scorer); }
const Backend& Roster::require_sft_policy() const { return require(sft_policy, BackendRole::SftPolicy); }

namespace {

template <typename F>
void for_each_backend(const Roster& r, F&& f) {
    for (const auto& b : r.generators) f(b);
    for (const auto& b : r.experts) f(b);
    for (const auto* o : {&r.judge, &r.captioner, &r.scorer, &r.sft_policy}) {
        if (*o) f(**o);
    }
}

}  // namespace

std::uint64_t Roster::total_parse_retries() const {
    std::uint64_t n = 0;
    for_each_backend(*this, [&](const Backend& b) { n += b.stats->parse_retries.load(); });
    return n;
}

std::uint64_t Roster::total_transport_retries() const {
    std::uint64_t n = 0;
    for_each_backend(*this, [&](const Backend& b) { n += b.stats->transport_retries.load(); });
    return n;
}

std::uint64_t Roster::total_tie_verdicts() const {
    std::uint64_t n = 0;
    for_each_backend(*this, [&](const Backend& b) { n += b.stats->tie_verdicts.load(); });
    return n;
}

Roster make_roster(const PipelineConfig& cfg, std::shared_ptr<TraceSink> trace) {
    const RetryPolicy retry{cfg.retry_limit, std::chrono::milliseconds(cfg.retry_backoff_ms)};
    Roster r;
    for (const auto& spec : cfg.backends) {
        Backend b = make_backend(spec, retry, trace);
        switch (spec.role) {
            case BackendRole::Generator: r.generators.push_back(std::move(b)); break;
            case BackendRole::Expert: r.experts.push_back(std::move(b)); break;
            case BackendRole::StrongJudge: r.judge = std::move(b); break;
            case BackendRole::Captioner: r.captioner = std::move(b); break;
            case BackendRole::Scorer: r.scorer = std::move(b); break;
            case BackendRole::SftPolicy: r.sft_policy = std::move(b); break;
        }
    }
    auto by_id = [](const Backend& a, const Backend& b) { return a.id() < b.id(); };
    std::sort(r.generators.begin(), r.generators.end(), by_id);
    std::sort(r.experts.begin(), r.experts.end(), by_id);
    return r;
}

// --- captions ---------------------------------------------------------------

std::optional<Caption> CaptionCache::find(const std::string& pair_id) const {
    std::lock_guard lock(mu_);
    auto it = entries_.find(pair_id);
    if (it == entries_.end()) return std::nullopt;
    return it->second;
}

void CaptionCache::insert(const Caption& caption) {
    std::lock_guard lock(mu_);
    entries_[caption.pair_id] = caption;
}

std::size_t CaptionCache::size() const {
    std::lock_guard lock(mu_);
    return entries_.size();
}

namespace {

bool is_blank(std::string_view s) {
    return s.find_first_not_of(" \t\r\n\f\v") == std::string_view::npos;
}

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n\f\v");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n\f\v");
    return std::string(s.substr(b, e - b + 1));
}

}  // namespace

Caption generate_caption(const Backend& captioner, const ImageQuestionPair& pair, CaptionCache& cache) {
    if (captioner.spec.role != BackendRole::Captioner)
        throw ConfigError("backend '" + captioner.id() + "' is not a captioner");
    if (auto hit = cache.find(pair.pair_id)) return *hit;

    ChatRequest req;
    req.messages.push_back({ChatMessage::Role::System,
                            "Describe the image in detail. Mention every object, its attributes, any visible "
                            "text, and the spatial layout. Do not answer any question; only describe.",
                            std::nullopt});
    req.messages.push_back({ChatMessage::Role::User, "Write a detailed caption for this image.", pair.image_ref});
    req.temperature = 0.0;
    const std::string reply = chat_complete(captioner, req);
    if (is_blank(reply)) throw EmptyCaption("captioner '" + captioner.id() + "' returned an empty caption");
    Caption c{pair.pair_id, trim(reply), captioner.id()};
    cache.insert(c);
    return c;
}

// --- expert rewards ---------------------------------------------------------

std::optional<long long> parse_last_integer(std::string_view text) {
    std::size_t end = text.size();
    while (end > 0 && !std::isdigit(static_cast<unsigned char>(text[end - 1]))) --end;
    if (end == 0) return std::nullopt;
    std::size_t begin = end;
    while (begin > 0 && std::isdigit(static_cast<unsigned char>(text[begin - 1]))) --begin;
    long long value = 0;
    auto res = std::from_chars(text.data() + begin, text.data() + end, value);
    if (res.ec != std::errc()) return std::nullopt;
    return value;
}

namespace {

std::optional<double> parse_mock_reward(std::string_view text) {
    constexpr std::string_view kTag = "Quality score: ";
    const auto pos = text.rfind(kTag);
    if (pos == std::string_view::npos) return std::nullopt;
    const char* first = text.data() + pos + kTag.size();
    double v = 0.0;
    auto res = std::from_chars(first, text.data() + text.size(), v);
    if (res.ec != std::errc() || !std::isfinite(v)) return std::nullopt;
    return v;
}

}  // namespace

double expert_reward(const Backend& expert, const Caption& caption, const std::string& question,
                     const std::string& response) {
    if (expert.spec.role != BackendRole::Expert)
        throw ConfigError("backend '" + expert.id() + "' is not an expert");

    ChatRequest req;
    req.messages.push_back(
        {ChatMessage::Role::System,
         "You are a reward model. You cannot see the image; a detailed caption describes it instead. "
         "Judge how well the response answers the question about the described image, considering "
         "correctness, relevance, and helpfulness. Reply with a single line of the form "
         "\"Quality score: N\" where N is an integer from 0 to 100.",
         std::nullopt});
    req.messages.push_back({ChatMessage::Role::User,
                            "Image caption:\n" + caption.text + "\n\nQuestion:\n" + question + "\n\nResponse:\n" +
                                response,
                            std::nullopt});
    req.temperature = 0.0;

    const int attempts = expert.retry.retry_limit + 1;
    for (int attempt = 0; attempt < attempts; ++attempt) {
        if (attempt > 0) {
            req.seed = static_cast<std::uint64_t>(attempt);
            expert.stats->parse_retries.fetch_add(1, std::memory_order_relaxed);
        }
        const std::string reply = chat_complete(expert, req);
        if (expert.spec.kind == BackendKind::Mock) {
            if (auto v = parse_mock_reward(reply)) return *v;
        } else if (auto v = parse_last_integer(reply)) {
            return static_cast<double>(*v);
        }
    }
    throw ScoreParseError("expert '" + expert.id() + "' produced no score after " + std::to_string(attempts) +
                          " attempts");
}

}  // namespace vlpref
