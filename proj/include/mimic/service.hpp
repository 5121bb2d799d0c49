#pragma once

// HTTP facade over a live run for the human rater:
//   GET  /api/pairs/next   lease a pending pair (204 when none, 409 for oracle runs)
//   POST /api/ratings      {"pair_id": N, "rating": 1..5} (400 bad rating, 410 unknown or expired)
//   GET  /api/status       counters and queue accounting
//   GET  /                 annotator page

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <thread>

#include "mimic/orchestrator.hpp"

namespace httplib {
class Server;
}

namespace mimic::service {

struct Response {
    int status = 200;
    std::string content_type = "application/json";
    std::string body;
};

/// Request handling without sockets. Handlers may be called concurrently.
class ServiceCore {
public:
    explicit ServiceCore(orchestrator::Run& run);

    Response next_pair();
    Response submit_rating(std::string_view body);
    Response status() const;
    Response index() const;

private:
    std::string pair_payload(const feedback::ClipPair& pair);

    orchestrator::Run& run_;
    std::mutex cache_mutex_;
    std::map<std::uint64_t, std::string> payloads_;  // pair id -> served body, so re-serves are byte-identical
};

/// JSON body of a status snapshot.
std::string status_json(const orchestrator::RunStatus& s);

class Server {
public:
    explicit Server(ServiceCore& core);
    ~Server();
    Server(const Server&) = delete;
    Server& operator=(const Server&) = delete;

    /// Binds (port 0 picks a free port) and serves on a background thread.
    /// Throws std::runtime_error when the port cannot be bound.
    int start(const std::string& host, int port);
    void stop();
    int port() const { return port_; }

private:
    ServiceCore& core_;
    std::unique_ptr<httplib::Server> http_;
    std::thread thread_;
    int port_ = 0;
};

}  // namespace mimic::service
