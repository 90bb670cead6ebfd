#include "helpers.hpp"

#include "vlpref/backends.hpp"
#include "vlpref/errors.hpp"
#include "vlpref/worker_pool.hpp"

#include <httplib.h>
#include <doctest.h>

#include <atomic>
#include <cstdlib>
#include <deque>
#include <set>
#include <thread>

using namespace vlpref;
using testing::mock_backend;
using testing::ScriptedTransport;

namespace {

ChatRequest ping() {
    ChatRequest r;
    r.messages.push_back({ChatMessage::Role::User, "ping", std::nullopt});
    return r;
}

// Local chat-completions endpoint that replays a scripted list of
// (status, body) replies and records the requests it saw.
class FakeServer {
public:
    explicit FakeServer(std::deque<std::pair<int, std::string>> script) : script_(std::move(script)) {
        server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
            std::lock_guard lock(mu_);
            bodies_.push_back(req.body);
            auth_.push_back(req.get_header_value("Authorization"));
            auto [status, body] = script_.empty() ? std::pair<int, std::string>{500, "{}"} : script_.front();
            if (!script_.empty()) script_.pop_front();
            res.status = status;
            res.set_content(body, "application/json");
        });
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }
    ~FakeServer() {
        server_.stop();
        thread_.join();
    }

    std::string url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1/chat/completions"; }
    std::size_t hits() const {
        std::lock_guard lock(mu_);
        return bodies_.size();
    }
    nlohmann::json body(std::size_t i) const {
        std::lock_guard lock(mu_);
        return nlohmann::json::parse(bodies_.at(i));
    }
    std::string auth(std::size_t i) const {
        std::lock_guard lock(mu_);
        return auth_.at(i);
    }

private:
    httplib::Server server_;
    int port_ = 0;
    std::thread thread_;
    mutable std::mutex mu_;
    std::deque<std::pair<int, std::string>> script_;
    std::vector<std::string> bodies_;
    std::vector<std::string> auth_;
};

std::string ok_body(const std::string& content) {
    return nlohmann::json{{"choices", {{{"message", {{"role", "assistant"}, {"content", content}}}}}}}.dump();
}

Backend http_backend(const std::string& url, BackendRole role = BackendRole::Generator, int retry_limit = 2) {
    ::setenv("VLPREF_TEST_KEY", "secret-token", 1);
    BackendSpec s;
    s.backend_id = "http-under-test";
    s.role = role;
    s.kind = BackendKind::Http;
    s.endpoint_url = url;
    s.model_name = "test-model";
    s.api_key_env = "VLPREF_TEST_KEY";
    return make_backend(s, testing::fast_retry(retry_limit));
}

}  // namespace

TEST_CASE("mock replies are a pure function of seed and request") {
    const auto a = mock_backend("g", BackendRole::Generator, 5);
    const auto b = mock_backend("g", BackendRole::Generator, 5);
    const auto c = mock_backend("g", BackendRole::Generator, 6);
    const auto r1 = chat_complete(a, ping());
    CHECK_FALSE(r1.empty());
    CHECK(r1 == chat_complete(a, ping()));
    CHECK(r1 == chat_complete(b, ping()));
    CHECK(r1 != chat_complete(c, ping()));
    auto seeded = ping();
    seeded.seed = 3;
    CHECK(chat_complete(a, seeded) != r1);
}

TEST_CASE("mock replies follow each role's protocol") {
    CHECK(chat_complete(mock_backend("j", BackendRole::StrongJudge, 1), ping()).rfind("Better: ", 0) == 0);
    CHECK(chat_complete(mock_backend("s", BackendRole::SftPolicy, 1), ping()).rfind("Better: ", 0) == 0);
    CHECK(chat_complete(mock_backend("c", BackendRole::Captioner, 1), ping()).rfind("Caption: ", 0) == 0);
    CHECK(chat_complete(mock_backend("e", BackendRole::Expert, 1), ping()).rfind("Quality score: ", 0) == 0);
    CHECK(chat_complete(mock_backend("x", BackendRole::Scorer, 1), ping()).find("**Score**: ") != std::string::npos);
}

TEST_CASE("http: two 500s then 200 succeeds within retry_limit=2") {
    FakeServer server({{500, "{}"}, {500, "{}"}, {200, ok_body("ok")}});
    const auto b = http_backend(server.url());
    CHECK(chat_complete(b, ping()) == "ok");
    CHECK(server.hits() == 3);
    CHECK(b.stats->transport_retries == 2);
    CHECK(server.auth(0) == "Bearer secret-token");
}

TEST_CASE("http: attempts never exceed retry_limit + 1") {
    FakeServer server({{503, "{}"}, {503, "{}"}, {503, "{}"}, {200, ok_body("late")}});
    const auto b = http_backend(server.url(), BackendRole::Generator, 2);
    CHECK_THROWS_AS(chat_complete(b, ping()), TransportError);
    CHECK(server.hits() == 3);
}

TEST_CASE("http: 401 and 403 raise AuthError without retry") {
    for (int status : {401, 403}) {
        FakeServer server({{status, "{}"}, {200, ok_body("never")}});
        CHECK_THROWS_AS(chat_complete(http_backend(server.url()), ping()), AuthError);
        CHECK(server.hits() == 1);
    }
}

TEST_CASE("http: malformed body and 4xx raise ProtocolError without retry") {
    {
        FakeServer server({{200, "{\"choices\": []}"}, {200, ok_body("never")}});
        CHECK_THROWS_AS(chat_complete(http_backend(server.url()), ping()), ProtocolError);
        CHECK(server.hits() == 1);
    }
    {
        FakeServer server({{200, "not json"}});
        CHECK_THROWS_AS(chat_complete(http_backend(server.url()), ping()), ProtocolError);
    }
    {
        FakeServer server({{400, "{}"}});
        CHECK_THROWS_AS(chat_complete(http_backend(server.url()), ping()), ProtocolError);
    }
}

TEST_CASE("http: 429 is retried") {
    FakeServer server({{429, "{}"}, {200, ok_body("after throttle")}});
    CHECK(chat_complete(http_backend(server.url()), ping()) == "after throttle");
}

TEST_CASE("http: missing api key env var is an AuthError") {
    auto b = http_backend("http://127.0.0.1:9/v1/chat/completions");
    b.spec.api_key_env = "VLPREF_DEFINITELY_UNSET_VAR";
    b.transport = std::make_shared<HttpTransport>(b.spec);
    CHECK_THROWS_AS(chat_complete(b, ping()), AuthError);
}

TEST_CASE("http: unreachable endpoint surfaces as TransportError after retries") {
    // Port 9 (discard) is closed on loopback in the sandbox.
    const auto b = http_backend("http://127.0.0.1:9/v1/chat/completions", BackendRole::Generator, 1);
    CHECK_THROWS_AS(chat_complete(b, ping()), TransportError);
    CHECK(b.stats->calls == 2);
}

TEST_CASE("http request body has the chat-completions shape") {
    testing::TempDir dir("img");
    testing::spit(dir / "pixel.png", std::string("\x89PNG\r\n", 6));
    const auto b = http_backend("http://127.0.0.1:1/v1/chat/completions");
    const auto* t = dynamic_cast<HttpTransport*>(b.transport.get());
    REQUIRE(t != nullptr);

    ChatRequest req;
    req.messages.push_back({ChatMessage::Role::System, "sys", std::nullopt});
    req.messages.push_back({ChatMessage::Role::User, "look", (dir / "pixel.png").string()});
    req.temperature = 0.0;
    req.max_tokens = 64;
    const auto body = t->request_body(req);
    CHECK(body["model"] == "test-model");
    CHECK(body["max_tokens"] == 64);
    CHECK(body["temperature"] == 0.0);
    CHECK(body["messages"][0]["role"] == "system");
    CHECK(body["messages"][0]["content"] == "sys");
    const auto& parts = body["messages"][1]["content"];
    CHECK(parts[0]["type"] == "text");
    CHECK(parts[1]["type"] == "image_url");
    CHECK(parts[1]["image_url"]["url"] == "data:image/png;base64,iVBORw0K");
}

TEST_CASE("counting transport: chat_complete stops at retry_limit + 1") {
    for (int limit : {0, 1, 2, 5}) {
        auto t = std::make_shared<ScriptedTransport>(
            [](const ChatRequest&, int) -> std::string { throw TransportError("down"); });
        const auto b = testing::scripted_backend("g", BackendRole::Generator, t, limit);
        CHECK_THROWS_AS(chat_complete(b, ping()), TransportError);
        CHECK(t->calls() == static_cast<std::size_t>(limit + 1));
    }
}

TEST_CASE("captions are cached per pair") {
    auto inner = std::make_shared<MockTransport>(testing::mock_spec("cap", BackendRole::Captioner, 3));
    auto rec = std::make_shared<testing::RecordingTransport>(inner);
    const auto b = testing::scripted_backend("cap", BackendRole::Captioner, rec);
    CaptionCache cache;
    const ImageQuestionPair p{"p1", "img/1.png", "q?"};
    const auto c1 = generate_caption(b, p, cache);
    const auto c2 = generate_caption(b, p, cache);
    CHECK(c1 == c2);
    CHECK(rec->requests().size() == 1);
    CHECK(c1.captioner_id == "cap");
    CHECK(c1.pair_id == "p1");
    CHECK_FALSE(c1.text.empty());
    // The captioner sees the image.
    CHECK(rec->requests()[0].has_image());
}

TEST_CASE("captions over 100 pairs are distinct and reproducible") {
    auto run = [] {
        const auto b = mock_backend("cap", BackendRole::Captioner, 77);
        CaptionCache cache;
        std::vector<std::string> out;
        for (int i = 0; i < 100; ++i) {
            const auto id = std::to_string(i);
            out.push_back(generate_caption(b, {"pair-" + id, "img/" + id + ".png", "q"}, cache).text);
        }
        return out;
    };
    const auto a = run();
    CHECK(std::set<std::string>(a.begin(), a.end()).size() == 100);
    CHECK(a == run());
}

TEST_CASE("whitespace caption raises EmptyCaption") {
    auto t = std::make_shared<ScriptedTransport>([](const ChatRequest&, int) { return std::string(" \n\t "); });
    const auto b = testing::scripted_backend("cap", BackendRole::Captioner, t);
    CaptionCache cache;
    CHECK_THROWS_AS(generate_caption(b, {"p", "i", "q"}, cache), EmptyCaption);
    CHECK(cache.size() == 0);
}

TEST_CASE("caption from the wrong role is a config error") {
    CaptionCache cache;
    CHECK_THROWS_AS(generate_caption(mock_backend("g", BackendRole::Generator, 1), {"p", "i", "q"}, cache), ConfigError);
}

TEST_CASE("mock expert reward is deterministic and in [0,1]") {
    const auto e = mock_backend("e", BackendRole::Expert, 11);
    const Caption cap{"p", "a red bicycle", "cap"};
    for (int i = 0; i < 50; ++i) {
        const std::string resp = "response " + std::to_string(i);
        const double r = expert_reward(e, cap, "what?", resp);
        CHECK(r >= 0.0);
        CHECK(r <= 1.0);
        CHECK(r == expert_reward(e, cap, "what?", resp));
    }
}

TEST_CASE("expert requests never carry the image") {
    auto inner = std::make_shared<MockTransport>(testing::mock_spec("e", BackendRole::Expert, 4));
    auto rec = std::make_shared<testing::RecordingTransport>(inner);
    const auto e = testing::scripted_backend("e", BackendRole::Expert, rec);
    for (int i = 0; i < 20; ++i) expert_reward(e, {"p", "caption", "c"}, "q", "r" + std::to_string(i));
    REQUIRE(rec->requests().size() == 20);
    for (const auto& req : rec->requests()) {
        CHECK_FALSE(req.has_image());
        CHECK(req.messages.back().text.find("caption") != std::string::npos);
    }
}

TEST_CASE("http expert: last integer of the reply") {
    FakeServer server({{200, ok_body("Quality score: 87")}});
    CHECK(expert_reward(http_backend(server.url(), BackendRole::Expert), {"p", "c", "cap"}, "q", "r") == 87.0);
    const auto body = server.body(0);
    for (const auto& m : body["messages"]) CHECK(m["content"].is_string());
}

TEST_CASE("http expert: no digits after retries raises ScoreParseError") {
    FakeServer server({{200, ok_body("no digits here")}, {200, ok_body("no digits here")}, {200, ok_body("none")}});
    const auto e = http_backend(server.url(), BackendRole::Expert, 2);
    CHECK_THROWS_AS(expert_reward(e, {"p", "c", "cap"}, "q", "r"), ScoreParseError);
    CHECK(server.hits() == 3);
    CHECK(e.stats->parse_retries == 2);
}

TEST_CASE("parse_last_integer") {
    CHECK(parse_last_integer("Quality score: 87") == 87);
    CHECK(parse_last_integer("7 of 10, final 42.") == 42);
    CHECK_FALSE(parse_last_integer("no digits here").has_value());
    CHECK(parse_last_integer("0") == 0);
}

TEST_CASE("trace sink writes one line per exchange") {
    testing::TempDir dir("trace");
    auto sink = std::make_shared<TraceSink>(dir / "trace.jsonl");
    auto b = make_backend(testing::mock_spec("g", BackendRole::Generator, 1), testing::fast_retry(), sink);
    parallel_for(16, 4, [&](std::size_t) { chat_complete(b, ping()); });
    const auto body = testing::slurp(dir / "trace.jsonl");
    CHECK(std::count(body.begin(), body.end(), '\n') == 16);
    const auto first = nlohmann::json::parse(body.substr(0, body.find('\n')));
    CHECK(first["backend_id"] == "g");
    CHECK(first.contains("response"));
}

TEST_CASE("roster groups and sorts backends") {
    RawConfig raw;
    raw.num_generators = 3;
    raw.num_experts = 3;
    const auto roster = make_roster(validate_config(raw));
    CHECK(roster.generators.size() == 3);
    CHECK(roster.experts.size() == 3);
    CHECK(roster.experts[0].id() < roster.experts[1].id());
    CHECK_NOTHROW(roster.require_judge());
    CHECK_NOTHROW(roster.require_scorer());
    Roster empty;
    CHECK_THROWS_AS(empty.require_captioner(), ConfigError);
}

TEST_CASE("parallel_map keeps slot order and rethrows") {
    const auto out = parallel_map<int>(100, 8, [](std::size_t i) { return static_cast<int>(i * i); });
    for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == static_cast<int>(i * i));
    CHECK_THROWS_AS(parallel_for(10, 4,
                                 [](std::size_t i) {
                                     if (i == 7) throw IoError("boom");
                                 }),
                    IoError);
}
