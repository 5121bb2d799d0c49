#include "mimic/feedback.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include <json.hpp>

#include "mimic/util.hpp"

namespace mimic::feedback {

void ClipPair::check_bounds(std::size_t demo_length, std::size_t rollout_length) const {
    if (length < 1) {
        throw std::out_of_range("clip pair " + std::to_string(pair_id) + ": length must be >= 1");
    }
    if (demo_start != agent_start) {
        throw std::out_of_range("clip pair " + std::to_string(pair_id) + ": clips are not aligned");
    }
    if (demo_start + length > demo_length || agent_start + length > rollout_length) {
        throw std::out_of_range("clip pair " + std::to_string(pair_id) + ": clip exceeds its source");
    }
}

std::string_view to_string(RaterSource s) { return s == RaterSource::Oracle ? "oracle" : "human"; }

std::string to_line(const AnnotationRecord& r) {
    const nlohmann::json j = {
        {"pair_id", r.pair.pair_id},     {"demo_start", r.pair.demo_start},
        {"agent_rollout_id", r.pair.agent_rollout_id}, {"agent_start", r.pair.agent_start},
        {"length", r.pair.length},       {"rating", r.rating},
        {"source", to_string(r.source)}, {"timestamp", r.timestamp},
    };
    return j.dump();
}

AnnotationRecord from_line(std::string_view line, std::size_t line_number) {
    const std::string where = "annotation log line " + std::to_string(line_number);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
        throw FormatError(where + ": not a JSON object");
    }
    AnnotationRecord r;
    try {
        r.pair.pair_id = j.at("pair_id").get<std::uint64_t>();
        r.pair.demo_start = j.at("demo_start").get<std::size_t>();
        r.pair.agent_rollout_id = j.at("agent_rollout_id").get<std::uint64_t>();
        r.pair.agent_start = j.at("agent_start").get<std::size_t>();
        r.pair.length = j.at("length").get<std::size_t>();
        r.rating = j.at("rating").get<int>();
        const auto source = j.at("source").get<std::string>();
        if (source == "oracle") {
            r.source = RaterSource::Oracle;
        } else if (source == "human") {
            r.source = RaterSource::Human;
        } else {
            throw FormatError(where + ": unknown source '" + source + "'");
        }
        r.timestamp = j.at("timestamp").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(where + ": " + e.what());
    }
    if (r.rating < 1 || r.rating > 5) {
        throw FormatError(where + ": rating outside 1..5");
    }
    return r;
}

void OracleConfig::validate() const {
    for (double w : weights) {
        if (!(w >= 0.0) || !std::isfinite(w)) {
            throw std::invalid_argument("OracleConfig: weights must be non-negative");
        }
    }
    if (!(sigma > 0.0)) {
        throw std::invalid_argument("OracleConfig: sigma must be positive");
    }
    for (std::size_t k = 0; k < thresholds.size(); ++k) {
        if (!(thresholds[k] > 0.0 && thresholds[k] < 1.0) || (k > 0 && !(thresholds[k] < thresholds[k - 1]))) {
            throw std::invalid_argument("OracleConfig: thresholds must be strictly decreasing in (0, 1)");
        }
    }
}

int rating_from_similarity(double similarity, const OracleConfig& cfg) {
    for (std::size_t k = 0; k < cfg.thresholds.size(); ++k) {
        if (similarity >= cfg.thresholds[k]) {
            return 5 - static_cast<int>(k);
        }
    }
    return 1;
}

constexpr std::size_t kThetaIndex = 2;

OracleScore oracle_score(std::span<const env::EnvState> demo, std::span<const env::EnvState> agent,
                         const OracleConfig& cfg) {
    cfg.validate();
    if (demo.size() != agent.size() || demo.empty()) {
        throw std::invalid_argument("oracle: clips must be non-empty and of equal length");
    }
    // Per-component totals are summed in sorted order so the score does not
    // depend on how the components are ordered.
    std::array<double, env::kStateDim> per_component{};
    for (std::size_t t = 0; t < demo.size(); ++t) {
        const auto a = demo[t].to_array();
        const auto b = agent[t].to_array();
        for (std::size_t c = 0; c < env::kStateDim; ++c) {
            double d = a[c] - b[c];
            if (c == kThetaIndex) {
                // Orientation is judged as seen: a full turn apart looks identical.
                d = std::remainder(d, 2.0 * std::numbers::pi);
            }
            per_component[c] += d * d;
        }
    }
    for (std::size_t c = 0; c < env::kStateDim; ++c) {
        per_component[c] *= cfg.weights[c];
    }
    std::sort(per_component.begin(), per_component.end());
    auto weights = cfg.weights;
    std::sort(weights.begin(), weights.end());
    double total = 0.0;
    double weight_sum = 0.0;
    for (std::size_t c = 0; c < env::kStateDim; ++c) {
        total += per_component[c];
        weight_sum += weights[c];
    }
    OracleScore s;
    s.error = weight_sum > 0.0 ? std::sqrt(total / (static_cast<double>(demo.size()) * weight_sum)) : 0.0;
    if (!std::isfinite(s.error)) {
        s.error = std::numeric_limits<double>::infinity();
    }
    s.similarity = std::exp(-s.error / cfg.sigma);
    s.rating = rating_from_similarity(s.similarity, cfg);
    return s;
}

int oracle_rate(std::span<const env::EnvState> demo, std::span<const env::EnvState> agent, const OracleConfig& cfg) {
    return oracle_score(demo, agent, cfg).rating;
}

int oracle_rate_pair(const render::DemoVideo& demo, const env::Trajectory& rollout, const ClipPair& pair,
                     const OracleConfig& cfg) {
    if (!demo.has_states()) {
        throw OracleUnavailable();
    }
    pair.check_bounds(demo.size(), rollout.length());
    std::vector<env::EnvState> agent;
    agent.reserve(pair.length);
    for (std::size_t k = 0; k < pair.length; ++k) {
        agent.push_back(rollout.steps[pair.agent_start + k].state);
    }
    return oracle_rate(std::span(demo.states).subspan(pair.demo_start, pair.length), agent, cfg);
}

ClipPair sample_clip_pair(std::size_t demo_length, std::size_t rollout_length, std::size_t length,
                          std::uint64_t seed) {
    if (length < 1 || demo_length < length || rollout_length < length) {
        throw std::out_of_range("sample_clip_pair: a clip of " + std::to_string(length) + " steps does not fit");
    }
    Rng rng(derive_seed(seed, 0xc11b));
    const std::size_t last = std::min(demo_length, rollout_length) - length;
    std::uniform_int_distribution<std::size_t> pick(0, last);
    ClipPair p;
    p.length = length;
    p.demo_start = pick(rng);
    p.agent_start = p.demo_start;
    return p;
}

ClipPair sample_clip_pair(const render::DemoVideo& demo, const env::Trajectory& rollout, std::size_t length,
                          std::uint64_t seed) {
    return sample_clip_pair(demo.size(), rollout.length(), length, seed);
}

simpred::Dataset expand(const render::DemoVideo& demo, const env::Trajectory& rollout, const AnnotationRecord& rec) {
    rec.pair.check_bounds(demo.size(), rollout.length());
    simpred::Dataset out;
    out.reserve(rec.pair.length);
    for (std::size_t k = 0; k < rec.pair.length; ++k) {
        const env::Step& st = rollout.steps[rec.pair.agent_start + k];
        out.push_back({demo.frames[rec.pair.demo_start + k], simpred::Observation::from(st.state, st.action),
                       rec.rating});
    }
    return out;
}

AnnotationStore::AnnotationStore(std::filesystem::path path) : path_(std::move(path)) {
    if (path_.has_parent_path()) {
        std::filesystem::create_directories(path_.parent_path());
    }
    if (std::filesystem::exists(path_)) {
        count_ = load_annotations(path_).size();
    }
    out_.open(path_, std::ios::app);
    if (!out_) {
        throw std::runtime_error("cannot open annotation log " + path_.string());
    }
}

void AnnotationStore::append(const AnnotationRecord& record) {
    if (record.rating < 1 || record.rating > 5) {
        throw std::out_of_range("annotation rating " + std::to_string(record.rating) + " outside 1..5");
    }
    const std::string line = to_line(record) + "\n";
    std::lock_guard lock(mutex_);
    out_ << line;
    out_.flush();
    if (!out_) {
        throw std::runtime_error("write failed: " + path_.string());
    }
    ++count_;
}

std::size_t AnnotationStore::count() const {
    std::lock_guard lock(mutex_);
    return count_;
}

std::vector<AnnotationRecord> load_annotations(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot open annotation log " + path.string());
    }
    std::vector<AnnotationRecord> out;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.empty()) {
            continue;
        }
        out.push_back(from_line(line, n));
    }
    return out;
}

double wall_clock() {
    using namespace std::chrono;
    return duration<double>(system_clock::now().time_since_epoch()).count();
}

PairQueue::PairQueue(Clock clock, double lease_seconds) : clock_(std::move(clock)), lease_seconds_(lease_seconds) {}

void PairQueue::expire_locked(double now) {
    for (auto it = leased_.begin(); it != leased_.end();) {
        if (now > it->second.second) {
            pending_.push_front(it->second.first);
            it = leased_.erase(it);
        } else {
            ++it;
        }
    }
}

void PairQueue::push(const ClipPair& pair) {
    {
        std::lock_guard lock(mutex_);
        pending_.push_back(pair);
        ++enqueued_;
    }
    cv_.notify_one();
}

std::optional<ClipPair> PairQueue::lease() {
    std::lock_guard lock(mutex_);
    const double now = clock_();
    expire_locked(now);
    if (pending_.empty()) {
        return std::nullopt;
    }
    ClipPair p = pending_.front();
    pending_.pop_front();
    leased_[p.pair_id] = {p, now + lease_seconds_};
    return p;
}

std::optional<ClipPair> PairQueue::wait_lease() {
    std::unique_lock lock(mutex_);
    cv_.wait(lock, [&] { return closed_ || !pending_.empty(); });
    if (pending_.empty()) {
        return std::nullopt;
    }
    ClipPair p = pending_.front();
    pending_.pop_front();
    leased_[p.pair_id] = {p, clock_() + lease_seconds_};
    return p;
}

PairQueue::Completion PairQueue::complete(std::uint64_t pair_id) {
    std::lock_guard lock(mutex_);
    const double now = clock_();
    const auto it = leased_.find(pair_id);
    if (it == leased_.end()) {
        expire_locked(now);
        return Completion::Unknown;
    }
    if (now > it->second.second) {
        expire_locked(now);
        return Completion::Expired;
    }
    leased_.erase(it);
    ++completed_;
    expire_locked(now);
    return Completion::Accepted;
}

std::optional<ClipPair> PairQueue::outstanding_pair(std::uint64_t pair_id) {
    std::lock_guard lock(mutex_);
    expire_locked(clock_());
    const auto it = leased_.find(pair_id);
    if (it == leased_.end()) {
        return std::nullopt;
    }
    return it->second.first;
}

std::size_t PairQueue::depth() {
    std::lock_guard lock(mutex_);
    expire_locked(clock_());
    return pending_.size();
}

std::size_t PairQueue::outstanding() {
    std::lock_guard lock(mutex_);
    expire_locked(clock_());
    return leased_.size();
}

std::size_t PairQueue::enqueued() const {
    std::lock_guard lock(mutex_);
    return enqueued_;
}

std::size_t PairQueue::completed() const {
    std::lock_guard lock(mutex_);
    return completed_;
}

void PairQueue::close() {
    {
        std::lock_guard lock(mutex_);
        closed_ = true;
    }
    cv_.notify_all();
}

Rater oracle_rater(const render::DemoVideo& demo, const OracleConfig& cfg) {
    if (!demo.has_states()) {
        throw OracleUnavailable();
    }
    return [&demo, cfg](const ClipPair& pair, const env::Trajectory& rollout) {
        return oracle_rate_pair(demo, rollout, pair, cfg);
    };
}

env::Policy random_action_policy(std::uint64_t seed, double noise_std) {
    Rng rng(derive_seed(seed, 0xb1a5));
    std::uniform_real_distribution<double> bias(-1.0, 1.0);
    const env::EnvAction mean{bias(rng), bias(rng)};
    return [mean, noise_std](const env::EnvState&, Rng& step_rng) {
        std::normal_distribution<double> noise(0.0, noise_std);
        return env::EnvAction{mean.torque + noise(step_rng), mean.thrust + noise(step_rng)};
    };
}

std::vector<PendingClip> pretrain_pairs(const render::DemoVideo& demo, const env::EnvParams& params,
                                        std::size_t n_pairs, std::uint64_t seed, std::size_t clip_length,
                                        std::uint64_t first_id) {
    if (demo.size() < clip_length) {
        throw std::out_of_range("pretrain_pairs: demo shorter than one clip");
    }
    const auto no_reward = [](std::size_t, const env::EnvState&, const env::EnvAction&) { return 0.0; };
    std::vector<PendingClip> out;
    out.reserve(n_pairs);
    for (std::size_t i = 0; i < n_pairs; ++i) {
        const std::uint64_t id = first_id + i;
        const std::uint64_t rollout_seed = derive_seed(seed, 0x9e7a, i);
        env::Trajectory traj =
            env::rollout(random_action_policy(rollout_seed), params, no_reward, demo.size(), rollout_seed).trajectory;
        ClipPair pair = sample_clip_pair(demo, traj, clip_length, derive_seed(seed, 0xc1, i));
        pair.pair_id = id;
        pair.agent_rollout_id = id;
        out.push_back({pair, std::move(traj)});
    }
    return out;
}

Collection pretrain_collect(const render::DemoVideo& demo, const env::EnvParams& params, std::size_t n_annotations,
                            const Rater& rater, std::uint64_t seed, std::size_t clip_length, std::uint64_t first_id,
                            RaterSource source) {
    if (n_annotations < 1) {
        throw std::invalid_argument("pretrain_collect: n_annotations must be >= 1");
    }
    Collection c;
    for (auto& [pair, traj] : pretrain_pairs(demo, params, n_annotations, seed, clip_length, first_id)) {
        AnnotationRecord rec{pair, rater(pair, traj), source, wall_clock()};
        auto samples = expand(demo, traj, rec);
        c.samples.insert(c.samples.end(), samples.begin(), samples.end());
        c.records.push_back(rec);
        c.rollouts.push_back(std::move(traj));
    }
    return c;
}

}  // namespace mimic::feedback
