#include <httplib.h>

#include "vlpref/backends.hpp"
#include "vlpref/digest.hpp"
#include "vlpref/errors.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

namespace vlpref {

using nlohmann::json;

namespace {

bool starts_with(std::string_view s, std::string_view prefix) { return s.substr(0, prefix.size()) == prefix; }

std::string mime_for(const std::string& path) {
    const auto dot = path.rfind('.');
    std::string ext = dot == std::string::npos ? "" : path.substr(dot + 1);
    for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (ext == "jpg" || ext == "jpeg") return "image/jpeg";
    if (ext == "gif") return "image/gif";
    if (ext == "webp") return "image/webp";
    return "image/png";
}

std::string image_url(const std::string& ref) {
    if (starts_with(ref, "http://") || starts_with(ref, "https://") || starts_with(ref, "data:")) return ref;
    std::ifstream in(ref, std::ios::binary);
    if (!in) throw ProtocolError("cannot read image '" + ref + "'");
    std::ostringstream bytes;
    bytes << in.rdbuf();
    return "data:" + mime_for(ref) + ";base64," + base64_encode(bytes.str());
}

}  // namespace

HttpTransport::HttpTransport(BackendSpec spec, std::chrono::seconds timeout)
    : spec_(std::move(spec)), timeout_(timeout) {
    const std::string& url = spec_.endpoint_url;
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw ConfigError("endpoint_url '" + url + "' lacks a scheme");
    const auto path_begin = url.find('/', scheme_end + 3);
    origin_ = url.substr(0, path_begin);
    path_ = path_begin == std::string::npos ? "/" : url.substr(path_begin);
}

json HttpTransport::request_body(const ChatRequest& req) const {
    json messages = json::array();
    for (const auto& m : req.messages) {
        json jm{{"role", m.role == ChatMessage::Role::System ? "system" : "user"}};
        if (m.image_ref) {
            jm["content"] = json::array({json{{"type", "text"}, {"text", m.text}},
                                         json{{"type", "image_url"}, {"image_url", {{"url", image_url(*m.image_ref)}}}}});
        } else {
            jm["content"] = m.text;
        }
        messages.push_back(std::move(jm));
    }
    json body{{"model", spec_.model_name}, {"messages", messages}, {"max_tokens", req.max_tokens}};
    if (req.temperature) body["temperature"] = *req.temperature;
    if (req.seed) body["seed"] = *req.seed;
    return body;
}

std::string HttpTransport::send(const ChatRequest& req) {
    const char* key = std::getenv(spec_.api_key_env.c_str());
    if (key == nullptr) throw AuthError("environment variable " + spec_.api_key_env + " is not set");

    httplib::Client client(origin_);
    client.set_connection_timeout(std::chrono::seconds(10));
    client.set_read_timeout(timeout_);
    client.set_write_timeout(timeout_);
    client.set_bearer_token_auth(key);

    const std::string body = request_body(req).dump();
    auto res = client.Post(path_, body, "application/json");
    if (!res) {
        throw TransportError("backend '" + spec_.backend_id + "': " + httplib::to_string(res.error()));
    }
    const int status = res->status;
    if (status == 401 || status == 403)
        throw AuthError("backend '" + spec_.backend_id + "' rejected credentials (HTTP " + std::to_string(status) + ")");
    if (status == 408 || status == 429 || status >= 500)
        throw TransportError("backend '" + spec_.backend_id + "' returned HTTP " + std::to_string(status));
    if (status < 200 || status >= 300)
        throw ProtocolError("backend '" + spec_.backend_id + "' returned HTTP " + std::to_string(status));

    try {
        const json reply = json::parse(res->body);
        const json& content = reply.at("choices").at(0).at("message").at("content");
        if (!content.is_string()) throw ProtocolError("content is not a string");
        return content.get<std::string>();
    } catch (const json::exception& e) {
        throw ProtocolError("backend '" + spec_.backend_id + "' sent a malformed body: " + e.what());
    }
}

}  // namespace vlpref
