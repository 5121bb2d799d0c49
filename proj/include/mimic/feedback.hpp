#pragma once

#include <array>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mimic/env.hpp"
#include "mimic/render.hpp"
#include "mimic/simpred.hpp"

namespace mimic::feedback {

inline constexpr std::size_t kDefaultClipLength = 9;  // 0.3 s at 30 fps
inline constexpr double kDefaultLeaseSeconds = 120.0;

/// An aligned pair of clips: demo frames [start, start+length) against the
/// same step range of one agent rollout.
struct ClipPair {
    std::uint64_t pair_id = 0;
    std::size_t demo_start = 0;
    std::uint64_t agent_rollout_id = 0;
    std::size_t agent_start = 0;
    std::size_t length = kDefaultClipLength;

    /// Throws std::out_of_range when the pair does not fit the given lengths.
    void check_bounds(std::size_t demo_length, std::size_t rollout_length) const;
    bool operator==(const ClipPair&) const = default;
};

enum class RaterSource { Oracle, Human };
std::string_view to_string(RaterSource s);

struct AnnotationRecord {
    ClipPair pair;
    int rating = 1;
    RaterSource source = RaterSource::Oracle;
    double timestamp = 0.0;  // seconds since epoch
    bool operator==(const AnnotationRecord&) const = default;
};

std::string to_line(const AnnotationRecord& r);
/// Throws FormatError; `line_number` is only used in the message.
AnnotationRecord from_line(std::string_view line, std::size_t line_number = 0);

struct OracleConfig {
    // Per state component (x, y, theta, vx, vy, omega, leg, leg_vel).
    std::array<double, env::kStateDim> weights{1.0, 2.0, 3.0, 1.0, 1.0, 1.0, 1.0, 1.0};
    double sigma = 1.0;
    std::array<double, 4> thresholds{0.8, 0.6, 0.4, 0.2};  // similarity cut points for ratings 5, 4, 3, 2

    void validate() const;
};

/// Raised when ground-truth demo states are needed but the demo is frames-only.
class OracleUnavailable : public std::runtime_error {
public:
    OracleUnavailable() : std::runtime_error("oracle unavailable: demo has no ground-truth states; human rating required") {}
};

struct OracleScore {
    double error = 0.0;       // weighted RMS state deviation
    double similarity = 0.0;  // exp(-error / sigma)
    int rating = 1;
};

OracleScore oracle_score(std::span<const env::EnvState> demo, std::span<const env::EnvState> agent,
                         const OracleConfig& cfg = {});
int oracle_rate(std::span<const env::EnvState> demo, std::span<const env::EnvState> agent,
                const OracleConfig& cfg = {});
int rating_from_similarity(double similarity, const OracleConfig& cfg = {});

/// Rates a clip pair against the demo's ground-truth states. Throws OracleUnavailable for frames-only demos.
int oracle_rate_pair(const render::DemoVideo& demo, const env::Trajectory& rollout, const ClipPair& pair,
                     const OracleConfig& cfg = {});

/// Aligned start t uniform in [0, min(demo, rollout) - length].
ClipPair sample_clip_pair(std::size_t demo_length, std::size_t rollout_length, std::size_t length,
                          std::uint64_t seed);
ClipPair sample_clip_pair(const render::DemoVideo& demo, const env::Trajectory& rollout, std::size_t length,
                          std::uint64_t seed);

/// Per-step samples of a rated clip; the clip rating is broadcast to every step.
simpred::Dataset expand(const render::DemoVideo& demo, const env::Trajectory& rollout, const AnnotationRecord& rec);

/// Append-only annotation log: one JSON object per line. Appends are serialized
/// through the store, which is the only writer of its file.
class AnnotationStore {
public:
    explicit AnnotationStore(std::filesystem::path path);

    /// Validates, appends and flushes one record. Throws std::out_of_range for ratings outside 1..5.
    void append(const AnnotationRecord& record);
    std::size_t count() const;
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
    mutable std::mutex mutex_;
    std::ofstream out_;
    std::size_t count_ = 0;
};

/// Records in append order. Throws FormatError naming the first malformed line.
std::vector<AnnotationRecord> load_annotations(const std::filesystem::path& path);

using Clock = std::function<double()>;
double wall_clock();

/// Pending clip pairs awaiting a rating. Each pair is leased to exactly one
/// consumer at a time; an unrated lease expires and the pair is served again.
class PairQueue {
public:
    explicit PairQueue(Clock clock = wall_clock, double lease_seconds = kDefaultLeaseSeconds);

    void push(const ClipPair& pair);
    std::optional<ClipPair> lease();
    /// Blocks until a pair is available or close() is called.
    std::optional<ClipPair> wait_lease();

    enum class Completion { Accepted, Unknown, Expired };
    /// Clears an outstanding lease. A lease past its deadline is re-queued and reported Expired.
    Completion complete(std::uint64_t pair_id);

    std::optional<ClipPair> outstanding_pair(std::uint64_t pair_id);

    std::size_t depth();
    std::size_t outstanding();
    std::size_t enqueued() const;
    std::size_t completed() const;

    void close();

private:
    void expire_locked(double now);

    Clock clock_;
    double lease_seconds_;
    mutable std::mutex mutex_;
    std::condition_variable cv_;
    std::deque<ClipPair> pending_;
    std::map<std::uint64_t, std::pair<ClipPair, double>> leased_;  // id -> (pair, deadline)
    std::size_t enqueued_ = 0;
    std::size_t completed_ = 0;
    bool closed_ = false;
};

/// Rates a pair against its rollout; oracle or human-backed.
using Rater = std::function<int(const ClipPair&, const env::Trajectory&)>;

Rater oracle_rater(const render::DemoVideo& demo, const OracleConfig& cfg = {});

/// The pre-training behaviour: a per-rollout random constant command plus
/// per-step Gaussian noise, both seeded.
env::Policy random_action_policy(std::uint64_t seed, double noise_std = 0.5);

struct PendingClip {
    ClipPair pair;
    env::Trajectory rollout;
};

/// The unrated half of pretrain_collect: random-policy rollouts (ids first_id + i) with one aligned pair each.
std::vector<PendingClip> pretrain_pairs(const render::DemoVideo& demo, const env::EnvParams& params,
                                        std::size_t n_pairs, std::uint64_t seed,
                                        std::size_t clip_length = kDefaultClipLength, std::uint64_t first_id = 0);

struct Collection {
    simpred::Dataset samples;
    std::vector<AnnotationRecord> records;
    std::vector<env::Trajectory> rollouts;  // rollouts[i] has id first_rollout_id + i
};

/// Random-policy rollouts (one per annotation), one aligned clip pair each,
/// rated and expanded into per-step samples.
Collection pretrain_collect(const render::DemoVideo& demo, const env::EnvParams& params, std::size_t n_annotations,
                            const Rater& rater, std::uint64_t seed, std::size_t clip_length = kDefaultClipLength,
                            std::uint64_t first_id = 0, RaterSource source = RaterSource::Oracle);

}  // namespace mimic::feedback
