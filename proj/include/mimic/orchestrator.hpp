#pragma once

// The three processes of a run (RL optimization, rating collection, predictor
// training) and the run directory they persist into.
//
// Run directory:
//   config.json          RunConfig
//   demo.vdm             copy of the demonstration
//   annotations.log      append-only rating log
//   metrics.csv          one row per RL update
//   rollouts.bin         rollouts referenced by annotations (checkpointed)
//   state.json           run-state manifest (checkpointed, written last)
//   checkpoints/predictor_vN, checkpoints/policy_uM

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "mimic/env.hpp"
#include "mimic/feedback.hpp"
#include "mimic/nn.hpp"
#include "mimic/render.hpp"
#include "mimic/simpred.hpp"
#include "mimic/trpo.hpp"

namespace mimic::orchestrator {

enum class RaterKind { Oracle, Human };
enum class Mode { Sync, Async };

std::string_view to_string(RaterKind k);
std::string_view to_string(Mode m);
RaterKind rater_from_string(std::string_view s);
Mode mode_from_string(std::string_view s);

struct RunConfig {
    std::filesystem::path demo_path;
    std::filesystem::path run_dir;
    RaterKind rater = RaterKind::Oracle;
    Mode mode = Mode::Sync;
    std::size_t pretrain_annotations = 200;
    std::size_t online_annotations = 150;
    std::size_t pairs_per_update = 5;
    std::size_t n_updates = 60;
    std::size_t clip_length = feedback::kDefaultClipLength;
    simpred::TrainVariant variant = simpred::TrainVariant::AdditionalLayer;
    int pretrain_epochs = 30;
    int refresh_epochs = 10;
    double validation_fraction = 0.15;  // of pretrain clips, for best-epoch selection
    nn::SgdConfig sgd{};
    trpo::TrpoConfig trpo{};
    double init_log_std = -0.5;
    double value_return_scale = 10.0;
    std::uint64_t seed = 1;
    std::size_t checkpoint_every = 10;  // RL updates; 0 checkpoints only at the end
    std::optional<std::filesystem::path> init_predictor;  // fine-tune from this checkpoint
    env::EnvParams env{};
    feedback::OracleConfig oracle{};

    /// Throws std::invalid_argument naming the offending field.
    void validate() const;
};

std::string to_text(const RunConfig& cfg);
RunConfig config_from_text(std::string_view text);

struct MetricsRow {
    std::size_t update = 0;
    double mean_reward = 0.0;
    double kl = 0.0;
    double surrogate_improvement = 0.0;
    int backtracks = 0;
    std::uint64_t predictor_version = 0;
    bool operator==(const MetricsRow&) const = default;
};

inline constexpr const char* kMetricsHeader = "update,mean_reward,kl,surrogate_improvement,backtracks,predictor_version";
std::string to_csv_line(const MetricsRow& row);

struct RunState {
    std::uint64_t predictor_version = 0;
    simpred::SimilarityPredictor predictor;
    trpo::GaussianPolicy policy;
    trpo::ValueFunction value;
    std::map<std::uint64_t, env::Trajectory> rollouts;  // id -> rollout, referenced by records
    std::vector<feedback::AnnotationRecord> records;
    simpred::Dataset dataset;  // expansion of `records`, in record order
    std::vector<MetricsRow> metrics;
    std::size_t rl_updates = 0;
    std::size_t pretrain_done = 0;
    std::size_t online_done = 0;
    std::uint64_t next_id = 0;

    bool operator==(const RunState& o) const;
};

/// Writes rollouts.bin, the current predictor and policy checkpoints and the
/// state.json manifest. Rewrites annotations.log only if it does not already
/// start with the state's records.
void checkpoint(const RunState& state, const std::filesystem::path& run_dir);

/// Loads the state recorded by the last checkpoint. Throws FormatError naming
/// the missing or malformed file.
RunState resume(const std::filesystem::path& run_dir);

/// Predictor and policy checkpoint directories named by the run's last checkpoint.
std::filesystem::path latest_predictor_dir(const std::filesystem::path& run_dir);
std::filesystem::path latest_policy_dir(const std::filesystem::path& run_dir);

struct RunStatus {
    std::size_t annotations = 0;
    std::size_t oracle_annotations = 0;
    std::size_t human_annotations = 0;
    std::uint64_t predictor_version = 0;
    std::size_t rl_updates = 0;
    std::size_t queue_depth = 0;
    std::size_t outstanding = 0;
    std::size_t enqueued = 0;
    std::size_t rated = 0;  // pairs completed through the queue
    std::string phase;      // idle | pretrain | online | done | failed
    bool waiting_for_rater = false;
    bool human_mode = false;
};

/// A live run. Sync mode executes the phases round-robin in one thread and is
/// a pure function of the seed; async mode runs the RL, rater and trainer
/// workers concurrently.
class Run {
public:
    /// Prepares the run directory (config, demo copy, annotation log). The
    /// clock drives pair leases.
    explicit Run(RunConfig config, feedback::Clock clock = feedback::wall_clock);
    /// Continues the run checkpointed in `run_dir`.
    static std::unique_ptr<Run> resume_from(const std::filesystem::path& run_dir,
                                            feedback::Clock clock = feedback::wall_clock);
    ~Run();
    Run(const Run&) = delete;
    Run& operator=(const Run&) = delete;

    /// Runs to completion (or until request_stop) and returns the final state.
    RunState execute();
    void request_stop();

    const RunConfig& config() const { return config_; }
    const render::DemoVideo& demo() const { return demo_; }
    RunStatus status() const;
    RunState snapshot() const;

    // Human-rating interface used by the HTTP service.
    bool human_mode() const { return config_.rater == RaterKind::Human; }
    std::optional<feedback::ClipPair> lease_pair();
    std::optional<env::Trajectory> rollout(std::uint64_t id) const;
    enum class Submit { Accepted, Gone, BadRating };
    Submit submit_rating(std::uint64_t pair_id, int rating);

private:
    Run(RunConfig config, RunState state, feedback::Clock clock);
    void init_fresh();
    void pretrain();
    void run_sync();
    void run_async();
    void rate_pending(std::vector<feedback::PendingClip> pending, bool online);
    void accept_record(const feedback::AnnotationRecord& rec);
    std::vector<feedback::PendingClip> online_pairs(const std::vector<env::Trajectory>& fresh, std::size_t count);
    void rl_update();
    void refresh_predictor(const simpred::Dataset& data, std::size_t n_records);
    void write_metrics_file() const;
    void append_metrics(const MetricsRow& row) const;
    std::shared_ptr<const simpred::SimilarityPredictor> current_predictor() const;
    bool budget_done() const;
    void maybe_checkpoint(bool force);

    RunConfig config_;
    render::DemoVideo demo_;
    mutable feedback::PairQueue queue_;
    std::unique_ptr<feedback::AnnotationStore> store_;

    mutable std::mutex mutex_;  // guards state_ and published_
    std::condition_variable cv_;
    RunState state_;
    std::shared_ptr<const simpred::SimilarityPredictor> published_;
    std::uint64_t published_version_ = 0;
    std::set<std::uint64_t> rated_ids_;
    std::size_t trained_records_ = 0;
    std::string phase_ = "idle";
    bool waiting_ = false;
    std::atomic<bool> stop_{false};
    bool resumed_ = false;
};

/// Convenience: constructs and executes a run.
RunState run(const RunConfig& config);

// Evaluation against a demo with ground-truth states.
struct ImitationScore {
    double mean_rating = 0.0;  // mean over steps of the single-step oracle rating
    double mean_mse = 0.0;     // mean over steps of state_mse_curve
    double backflips = 0.0;
};

ImitationScore score_trajectory(const render::DemoVideo& demo, const env::Trajectory& traj,
                                const feedback::OracleConfig& cfg = {});
env::Trajectory greedy_trajectory(const trpo::GaussianPolicy& policy, const env::EnvParams& params,
                                  std::size_t n_steps, std::uint64_t seed);
/// Averages score_trajectory over `n_rollouts` rollouts of the pretraining random policy.
ImitationScore random_baseline(const render::DemoVideo& demo, const env::EnvParams& params,
                               const feedback::OracleConfig& cfg, std::size_t n_rollouts, std::uint64_t seed);

enum class Task { Backflip, Hop };
std::string_view to_string(Task t);
Task task_from_string(std::string_view s);
env::RewardFn task_reward(Task t, const env::EnvParams& params);

struct GeneratedDemo {
    render::DemoVideo demo;
    double reward = 0.0;  // hand-coded return of the kept rollout
    int backflips = 0;
    env::Trajectory trajectory;
};

/// Trains TRPO on the task's hand-coded reward for `updates` updates and keeps
/// the greedy rollout with the highest return seen along the way.
GeneratedDemo generate_demo(Task task, std::size_t steps, std::size_t updates, std::uint64_t seed,
                            const env::EnvParams& params = {});

/// Partitions whole clips (record i owns its `pair.length` consecutive samples
/// of `data`) into consecutive groups of the given sizes after a seeded shuffle.
std::vector<simpred::Dataset> split_clips(const std::vector<feedback::AnnotationRecord>& records,
                                          const simpred::Dataset& data, const std::vector<std::size_t>& counts,
                                          std::uint64_t seed);

struct VariantRow {
    simpred::TrainVariant variant{};
    double val_accuracy = 0.0;
    double test_accuracy = 0.0;
    double f1_345 = 0.0;
    double f1_45 = 0.0;
};

/// Trains every variant `n_seeds` times and averages held-out metrics. The
/// predictor is selected on `val` and reported on both `val` and `test`.
std::vector<VariantRow> compare_variants(const simpred::Dataset& train, const simpred::Dataset& val,
                                         const simpred::Dataset& test, std::span<const env::EnvState> scaling_states,
                                         std::size_t n_seeds, const nn::SgdConfig& sgd, int epochs,
                                         std::uint64_t seed);

std::string format_variants_report(const std::vector<VariantRow>& rows, std::size_t n_seeds);

}  // namespace mimic::orchestrator
