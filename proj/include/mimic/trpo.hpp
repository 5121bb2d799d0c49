#pragma once

// Trust-region policy optimization for a diagonal-Gaussian policy with a
// state-independent log standard deviation.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include "mimic/env.hpp"
#include "mimic/nn.hpp"

namespace mimic::trpo {

using nn::MatrixXd;
using nn::VectorXd;

/// Fixed per-component input scaling for hopper states (x, y, theta, vx, vy, omega, leg, leg_vel).
VectorXd hopper_input_scale();

struct GaussianPolicy {
    nn::DenseNet mean_net;  // state -> 64 -> 64 -> action (relu, relu, identity)
    VectorXd log_std;
    VectorXd input_scale;  // states are multiplied elementwise before the mean net

    static GaussianPolicy create(Eigen::Index state_dim, Eigen::Index action_dim, std::uint64_t seed,
                                 double init_log_std = 0.0, Eigen::Index hidden = 64);
    /// Hopper policy: 8 -> 64 -> 64 -> 2 with hopper_input_scale().
    static GaussianPolicy hopper(std::uint64_t seed, double init_log_std = 0.0);

    Eigen::Index state_dim() const { return mean_net.input_dim(); }
    Eigen::Index action_dim() const { return mean_net.output_dim(); }
    Eigen::Index parameter_count() const { return mean_net.parameter_count() + log_std.size(); }
    /// mean-net parameters followed by log_std.
    VectorXd flat_parameters() const;
    void set_flat_parameters(const VectorXd& flat);

    MatrixXd means(const MatrixXd& states, nn::ForwardCache* cache = nullptr) const;
    /// Per-column log density of `actions` (pre-clamp samples).
    VectorXd log_probs(const MatrixXd& states, const MatrixXd& actions) const;

    /// Adapter for env::rollout; hopper-shaped policies only. Greedy uses the mean.
    env::Policy as_env_policy(bool greedy) const;
    bool operator==(const GaussianPolicy& o) const {
        return mean_net == o.mean_net && log_std == o.log_std && input_scale == o.input_scale;
    }
};

struct ValueFunction {
    nn::DenseNet net;  // state -> 64 -> 64 -> 1
    VectorXd input_scale;
    double return_scale = 1.0;  // the net regresses returns / return_scale

    static ValueFunction create(Eigen::Index state_dim, std::uint64_t seed, double return_scale = 1.0,
                                Eigen::Index hidden = 64);
    static ValueFunction hopper(std::uint64_t seed, double return_scale);
    VectorXd predict(const MatrixXd& states) const;
    bool operator==(const ValueFunction& o) const {
        return net == o.net && input_scale == o.input_scale && return_scale == o.return_scale;
    }
};

struct TrpoConfig {
    double kl_delta = 0.01;
    double gamma = 0.99;
    double gae_lambda = 0.97;
    int cg_iters = 10;
    double cg_damping = 0.1;
    double backtrack_ratio = 0.8;
    int max_backtracks = 10;
    std::size_t steps_per_update = 2048;
    int value_epochs = 5;
    double value_learning_rate = 1e-3;
    int value_batch_size = 64;

    void validate() const;
};

struct RolloutBatch {
    MatrixXd observations;  // state_dim x N
    MatrixXd actions;       // action_dim x N, pre-clamp samples
    VectorXd rewards;
    std::vector<std::size_t> episode_lengths;
    VectorXd old_log_probs;
    VectorXd advantages;
    VectorXd returns;

    Eigen::Index size() const { return rewards.size(); }
    /// Throws std::invalid_argument if array lengths disagree.
    void validate() const;
};

struct GaeResult {
    VectorXd advantages;
    VectorXd returns;
};

/// `values` holds, per episode, one entry per step plus a bootstrap value for
/// the state after its last step (0 at a terminal).
GaeResult gae_advantages(const VectorXd& rewards, const VectorXd& values,
                         const std::vector<std::size_t>& episode_lengths, double gamma, double lambda);

/// Zero mean / unit variance in place (mean-centred only when the variance vanishes).
void normalize_advantages(VectorXd& advantages);

/// Fills old_log_probs, advantages (normalized) and returns from the current policy and value function.
void finalize_batch(RolloutBatch& batch, const GaussianPolicy& policy, const ValueFunction& value,
                    const TrpoConfig& config);

struct CgResult {
    VectorXd x;
    double residual_norm = 0.0;
    int iterations = 0;
};

/// Conjugate gradient for a symmetric positive-definite operator. `on_iterate`
/// observes every iterate. Throws nn::NonFiniteError on a non-finite intermediate.
CgResult conjugate_gradient(const std::function<VectorXd(const VectorXd&)>& apply_a, const VectorXd& b, int iters,
                            double tol = 1e-10, const std::function<void(const VectorXd&)>& on_iterate = {});

/// (H + damping I) v, H the Hessian of the mean KL(old || new) at new = old.
VectorXd fisher_vector_product(const GaussianPolicy& policy, const MatrixXd& observations, const VectorXd& v,
                               double damping);

/// Mean over observations of the closed-form diagonal-Gaussian KL(old || new).
double mean_kl(const GaussianPolicy& old_policy, const GaussianPolicy& new_policy, const MatrixXd& observations);

/// mean(exp(logp_new - logp_old) * advantage).
double surrogate(const GaussianPolicy& policy, const RolloutBatch& batch);
/// Gradient of the surrogate at the policy that generated the batch.
VectorXd surrogate_gradient(const GaussianPolicy& policy, const RolloutBatch& batch);

struct UpdateStats {
    double mean_reward = 0.0;
    double kl = 0.0;
    double surrogate_improvement = 0.0;
    int backtracks = 0;
    bool accepted = false;
    double value_loss = 0.0;
};

/// One TRPO step on the policy followed by value regression. The policy is left
/// unchanged when no backtracking candidate satisfies both acceptance conditions.
UpdateStats trpo_update(GaussianPolicy& policy, ValueFunction& value, const RolloutBatch& batch,
                        const TrpoConfig& config, std::uint64_t seed);

struct CollectedBatch {
    RolloutBatch batch;
    std::vector<env::Trajectory> trajectories;
    std::vector<double> episode_returns;
};

/// Whole episodes of `episode_length` steps until at least steps_per_update are
/// gathered; the batch is finalized against `value`.
CollectedBatch collect_batch(const GaussianPolicy& policy, const ValueFunction& value, const env::EnvParams& params,
                             const env::RewardFn& reward_fn, std::size_t episode_length, const TrpoConfig& config,
                             std::uint64_t seed);

// Policy checkpoint directory: policy.vnn, value.vnn and policy.json (log_std and scalings).
void save_policy(const GaussianPolicy& policy, const ValueFunction& value, const std::filesystem::path& dir);
std::pair<GaussianPolicy, ValueFunction> load_policy(const std::filesystem::path& dir);

}  // namespace mimic::trpo
