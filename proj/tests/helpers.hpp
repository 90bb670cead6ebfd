#pragma once

#include "vlpref/backends.hpp"
#include "vlpref/core.hpp"
#include "vlpref/digest.hpp"

#include <atomic>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

namespace testing {

// Scratch directory removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag = "t") {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("vlpref_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

inline void spit(const std::filesystem::path& p, const std::string& body) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << body;
}

// Transport answering from a callback and keeping every request it saw.
class ScriptedTransport : public vlpref::Transport {
public:
    using Fn = std::function<std::string(const vlpref::ChatRequest&, int call)>;
    explicit ScriptedTransport(Fn fn) : fn_(std::move(fn)) {}

    std::string send(const vlpref::ChatRequest& req) override {
        int call = 0;
        {
            std::lock_guard lock(mu_);
            requests_.push_back(req);
            call = static_cast<int>(requests_.size()) - 1;
        }
        return fn_(req, call);
    }

    std::vector<vlpref::ChatRequest> requests() const {
        std::lock_guard lock(mu_);
        return requests_;
    }
    std::size_t calls() const {
        std::lock_guard lock(mu_);
        return requests_.size();
    }

private:
    Fn fn_;
    mutable std::mutex mu_;
    std::vector<vlpref::ChatRequest> requests_;
};

// Wraps a real transport and records what passes through it.
class RecordingTransport : public vlpref::Transport {
public:
    explicit RecordingTransport(std::shared_ptr<vlpref::Transport> inner) : inner_(std::move(inner)) {}
    std::string send(const vlpref::ChatRequest& req) override {
        {
            std::lock_guard lock(mu_);
            requests_.push_back(req);
        }
        return inner_->send(req);
    }
    std::vector<vlpref::ChatRequest> requests() const {
        std::lock_guard lock(mu_);
        return requests_;
    }

private:
    std::shared_ptr<vlpref::Transport> inner_;
    mutable std::mutex mu_;
    std::vector<vlpref::ChatRequest> requests_;
};

inline vlpref::BackendSpec mock_spec(std::string id, vlpref::BackendRole role, std::uint64_t seed,
                                     double fault_rate = 0.0) {
    vlpref::BackendSpec s;
    s.backend_id = std::move(id);
    s.role = role;
    s.kind = vlpref::BackendKind::Mock;
    s.mock_seed = seed;
    s.mock_fault_rate = fault_rate;
    return s;
}

inline vlpref::RetryPolicy fast_retry(int limit = 2) { return {limit, std::chrono::milliseconds(0)}; }

inline vlpref::Backend mock_backend(std::string id, vlpref::BackendRole role, std::uint64_t seed,
                                    double fault_rate = 0.0, int retry_limit = 2) {
    return vlpref::make_backend(mock_spec(std::move(id), role, seed, fault_rate), fast_retry(retry_limit));
}

inline vlpref::Backend scripted_backend(std::string id, vlpref::BackendRole role,
                                        std::shared_ptr<vlpref::Transport> transport, int retry_limit = 2) {
    vlpref::Backend b = vlpref::make_backend(mock_spec(std::move(id), role, 0), fast_retry(retry_limit));
    b.transport = std::move(transport);
    return b;
}

inline std::vector<vlpref::Backend> mock_experts(int count, std::uint64_t seed_base, double fault_rate = 0.0) {
    std::vector<vlpref::Backend> out;
    for (int i = 0; i < count; ++i) {
        out.push_back(mock_backend("expert-" + std::to_string(i), vlpref::BackendRole::Expert,
                                   seed_base + static_cast<std::uint64_t>(i), fault_rate));
    }
    return out;
}

}  // namespace testing
