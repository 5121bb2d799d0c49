#include "mimic/service.hpp"

#include <stdexcept>

#include <httplib.h>
#include <json.hpp>

#include "mimic/image.hpp"
#include "mimic/render.hpp"

namespace mimic::service {

using nlohmann::json;

namespace {

// Minimal built-in page. It plays both clips on canvases and posts ratings;
// keys 1-5 rate the displayed pair.
constexpr std::string_view kIndexHtml = R"html(<!doctype html>
<html><head><meta charset="utf-8"><title>Rate similarity</title>
<style>body{font-family:sans-serif;margin:2em}canvas{image-rendering:pixelated;width:256px;height:256px;border:1px solid #888;margin-right:1em}</style>
</head><body>
<p id="msg">waiting for a pair...</p>
<canvas id="demo" width="64" height="64"></canvas><canvas id="agent" width="64" height="64"></canvas>
<p>How similar is the right clip to the left one? <span id="buttons"></span> rated this session: <span id="count">0</span></p>
<script>
let pair = null, frames = null, idx = 0, rated = 0, timer = null;
const load = src => new Promise(r => { const i = new Image(); i.onload = () => r(i); i.src = 'data:image/png;base64,' + src; });
async function next() {
  pair = null;
  let res;
  try { res = await fetch('/api/pairs/next'); } catch (e) { msg.textContent = 'network error, retrying'; return setTimeout(next, 2000); }
  if (res.status !== 200) { msg.textContent = res.status === 204 ? 'waiting for a pair...' : 'server said ' + res.status; return setTimeout(next, 2000); }
  const p = await res.json();
  frames = [await Promise.all(p.demo_frames.map(load)), await Promise.all(p.agent_frames.map(load))];
  pair = p; idx = 0; msg.textContent = 'pair ' + p.pair_id;
  clearInterval(timer);
  timer = setInterval(() => {
    demo.getContext('2d').drawImage(frames[0][idx], 0, 0);
    agent.getContext('2d').drawImage(frames[1][idx], 0, 0);
    idx = (idx + 1) % frames[0].length;
  }, 1000 / p.fps);
}
async function rate(r) {
  if (!pair) return;
  const id = pair.pair_id; pair = null;
  const res = await fetch('/api/ratings', {method: 'POST', body: JSON.stringify({pair_id: id, rating: r})});
  if (res.status === 200) document.getElementById('count').textContent = String(++rated);
  next();
}
for (let r = 1; r <= 5; r++) { const b = document.createElement('button'); b.textContent = r; b.onclick = () => rate(r); buttons.appendChild(b); }
document.addEventListener('keydown', e => { if (e.key >= '1' && e.key <= '5') rate(Number(e.key)); });
next();
</script></body></html>
)html";

Response json_response(int status, const json& body) {
    return {status, "application/json", body.dump()};
}

Response error(int status, std::string_view message) {
    return json_response(status, json{{"error", message}});
}

}  // namespace

std::string status_json(const orchestrator::RunStatus& s) {
    return json{{"annotations", s.annotations},
                {"oracle_annotations", s.oracle_annotations},
                {"human_annotations", s.human_annotations},
                {"predictor_version", s.predictor_version},
                {"rl_updates", s.rl_updates},
                {"queue_depth", s.queue_depth},
                {"outstanding", s.outstanding},
                {"enqueued", s.enqueued},
                {"rated", s.rated},
                {"phase", s.phase},
                {"waiting_for_rater", s.waiting_for_rater},
                {"human_mode", s.human_mode}}
        .dump();
}

ServiceCore::ServiceCore(orchestrator::Run& run) : run_(run) {}

std::string ServiceCore::pair_payload(const feedback::ClipPair& pair) {
    std::lock_guard lock(cache_mutex_);
    if (const auto it = payloads_.find(pair.pair_id); it != payloads_.end()) {
        return it->second;
    }
    const auto traj = run_.rollout(pair.agent_rollout_id);
    if (!traj) {
        throw std::logic_error("pair " + std::to_string(pair.pair_id) + " references an unknown rollout");
    }
    const auto& demo = run_.demo();
    pair.check_bounds(demo.size(), traj->length());
    json demo_frames = json::array();
    json agent_frames = json::array();
    for (std::size_t k = 0; k < pair.length; ++k) {
        demo_frames.push_back(image::base64_encode(image::encode_png(demo.frames[pair.demo_start + k])));
        const auto agent = render::rasterize(traj->steps[pair.agent_start + k].state);
        agent_frames.push_back(image::base64_encode(image::encode_png(agent)));
    }
    const json body{{"pair_id", pair.pair_id},
                    {"fps", demo.fps},
                    {"length", pair.length},
                    {"demo_start", pair.demo_start},
                    {"agent_start", pair.agent_start},
                    {"demo_frames", std::move(demo_frames)},
                    {"agent_frames", std::move(agent_frames)}};
    return payloads_.emplace(pair.pair_id, body.dump()).first->second;
}

Response ServiceCore::next_pair() {
    if (!run_.human_mode()) {
        return error(409, "run uses the oracle rater");
    }
    const auto pair = run_.lease_pair();
    if (!pair) {
        return {204, "application/json", ""};
    }
    return {200, "application/json", pair_payload(*pair)};
}

Response ServiceCore::submit_rating(std::string_view body) {
    std::uint64_t pair_id = 0;
    int rating = 0;
    try {
        const json j = json::parse(body);
        pair_id = j.at("pair_id").get<std::uint64_t>();
        rating = j.at("rating").get<int>();
    } catch (const json::exception&) {
        return error(400, "expected {\"pair_id\": integer, \"rating\": 1..5}");
    }
    switch (run_.submit_rating(pair_id, rating)) {
        case orchestrator::Run::Submit::Accepted:
            return json_response(200, json{{"pair_id", pair_id}, {"rating", rating}});
        case orchestrator::Run::Submit::BadRating:
            return error(400, "rating must be an integer in 1..5");
        case orchestrator::Run::Submit::Gone:
            break;
    }
    return error(410, "pair " + std::to_string(pair_id) + " is not outstanding");
}

Response ServiceCore::status() const {
    return {200, "application/json", status_json(run_.status())};
}

Response ServiceCore::index() const {
    return {200, "text/html; charset=utf-8", std::string(kIndexHtml)};
}

Server::Server(ServiceCore& core) : core_(core) {}

Server::~Server() {
    stop();
}

int Server::start(const std::string& host, int port) {
    if (http_) {
        throw std::logic_error("server already started");
    }
    http_ = std::make_unique<httplib::Server>();
    const auto reply = [](httplib::Response& res, const Response& r) {
        res.status = r.status;
        if (!r.body.empty()) {
            res.set_content(r.body, r.content_type);
        }
    };
    http_->Get("/", [this, reply](const httplib::Request&, httplib::Response& res) { reply(res, core_.index()); });
    http_->Get("/api/status",
               [this, reply](const httplib::Request&, httplib::Response& res) { reply(res, core_.status()); });
    http_->Get("/api/pairs/next",
               [this, reply](const httplib::Request&, httplib::Response& res) { reply(res, core_.next_pair()); });
    http_->Post("/api/ratings", [this, reply](const httplib::Request& req, httplib::Response& res) {
        reply(res, core_.submit_rating(req.body));
    });
    port_ = port == 0 ? http_->bind_to_any_port(host) : (http_->bind_to_port(host, port) ? port : -1);
    if (port_ <= 0) {
        http_.reset();
        throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
    }
    thread_ = std::thread([this] { http_->listen_after_bind(); });
    http_->wait_until_ready();
    return port_;
}

void Server::stop() {
    if (!http_) {
        return;
    }
    http_->stop();
    if (thread_.joinable()) {
        thread_.join();
    }
    http_.reset();
}

}  // namespace mimic::service
