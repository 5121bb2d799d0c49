#include "mimic/trpo.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <numeric>
#include <random>
#include <stdexcept>

#include <json.hpp>

namespace mimic::trpo {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

std::vector<nn::LayerSpec> mlp_specs(Eigen::Index in, Eigen::Index hidden, Eigen::Index out, double out_scale) {
    return {{in, hidden, nn::Activation::Relu, 1.0},
            {hidden, hidden, nn::Activation::Relu, 1.0},
            {hidden, out, nn::Activation::Identity, out_scale}};
}

void require_finite(const VectorXd& v, const char* what) {
    if (!v.allFinite()) {
        throw nn::NonFiniteError(std::string("trpo: non-finite ") + what);
    }
}

}  // namespace

VectorXd hopper_input_scale() {
    VectorXd s(static_cast<Eigen::Index>(env::kStateDim));
    s << 0.2, 1.0, 1.0 / std::numbers::pi, 0.2, 0.2, 0.1, 2.0, 0.2;
    return s;
}

GaussianPolicy GaussianPolicy::create(Eigen::Index state_dim, Eigen::Index action_dim, std::uint64_t seed,
                                      double init_log_std, Eigen::Index hidden) {
    if (state_dim <= 0 || action_dim <= 0 || hidden <= 0) {
        throw nn::ShapeError("GaussianPolicy: dimensions must be positive");
    }
    GaussianPolicy p;
    p.mean_net = nn::DenseNet::create(mlp_specs(state_dim, hidden, action_dim, 0.1), seed);
    p.log_std = VectorXd::Constant(action_dim, init_log_std);
    p.input_scale = VectorXd::Ones(state_dim);
    return p;
}

GaussianPolicy GaussianPolicy::hopper(std::uint64_t seed, double init_log_std) {
    auto p = create(env::kStateDim, env::kActionDim, seed, init_log_std);
    p.input_scale = hopper_input_scale();
    return p;
}

VectorXd GaussianPolicy::flat_parameters() const {
    const VectorXd net = mean_net.flat_parameters();
    VectorXd out(net.size() + log_std.size());
    out << net, log_std;
    return out;
}

void GaussianPolicy::set_flat_parameters(const VectorXd& flat) {
    if (flat.size() != parameter_count()) {
        throw nn::ShapeError("GaussianPolicy: flat parameter length mismatch");
    }
    const Eigen::Index n = mean_net.parameter_count();
    mean_net.set_flat_parameters(flat.head(n));
    log_std = flat.tail(log_std.size());
}

MatrixXd GaussianPolicy::means(const MatrixXd& states, nn::ForwardCache* cache) const {
    if (states.rows() != state_dim()) {
        throw nn::ShapeError("GaussianPolicy: state dimension mismatch");
    }
    return nn::forward(mean_net, input_scale.asDiagonal() * states, cache);
}

VectorXd GaussianPolicy::log_probs(const MatrixXd& states, const MatrixXd& actions) const {
    if (actions.rows() != action_dim() || actions.cols() != states.cols()) {
        throw nn::ShapeError("GaussianPolicy: action shape mismatch");
    }
    const MatrixXd mu = means(states);
    const VectorXd inv_std = (-log_std.array()).exp();
    const MatrixXd z = inv_std.asDiagonal() * (actions - mu);
    const double norm = log_std.sum() + 0.5 * kLog2Pi * static_cast<double>(action_dim());
    return (-0.5 * z.colwise().squaredNorm().array() - norm).matrix().transpose();
}

env::Policy GaussianPolicy::as_env_policy(bool greedy) const {
    if (state_dim() != static_cast<Eigen::Index>(env::kStateDim) ||
        action_dim() != static_cast<Eigen::Index>(env::kActionDim)) {
        throw nn::ShapeError("GaussianPolicy: not a hopper-shaped policy");
    }
    auto self = std::make_shared<const GaussianPolicy>(*this);
    return [self, greedy](const env::EnvState& s, Rng& rng) {
        const auto arr = s.to_array();
        MatrixXd x(env::kStateDim, 1);
        for (std::size_t i = 0; i < env::kStateDim; ++i) {
            x(static_cast<Eigen::Index>(i), 0) = arr[i];
        }
        VectorXd a = self->means(x).col(0);
        if (!greedy) {
            std::normal_distribution<double> n01(0.0, 1.0);
            for (Eigen::Index j = 0; j < a.size(); ++j) {
                a(j) += std::exp(self->log_std(j)) * n01(rng);
            }
        }
        return env::EnvAction{a(0), a(1)};
    };
}

ValueFunction ValueFunction::create(Eigen::Index state_dim, std::uint64_t seed, double return_scale,
                                    Eigen::Index hidden) {
    if (!(return_scale > 0.0) || !std::isfinite(return_scale)) {
        throw std::invalid_argument("ValueFunction: return_scale must be positive");
    }
    ValueFunction v;
    v.net = nn::DenseNet::create(mlp_specs(state_dim, hidden, 1, 1.0), seed);
    v.input_scale = VectorXd::Ones(state_dim);
    v.return_scale = return_scale;
    return v;
}

ValueFunction ValueFunction::hopper(std::uint64_t seed, double return_scale) {
    auto v = create(env::kStateDim, seed, return_scale);
    v.input_scale = hopper_input_scale();
    return v;
}

VectorXd ValueFunction::predict(const MatrixXd& states) const {
    return return_scale * nn::forward(net, input_scale.asDiagonal() * states).row(0).transpose();
}

void TrpoConfig::validate() const {
    if (!(kl_delta > 0.0)) throw std::invalid_argument("TrpoConfig: kl_delta must be > 0");
    if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("TrpoConfig: gamma must be in (0, 1]");
    if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0)) throw std::invalid_argument("TrpoConfig: gae_lambda must be in [0, 1]");
    if (cg_iters < 1) throw std::invalid_argument("TrpoConfig: cg_iters must be >= 1");
    if (!(cg_damping >= 0.0)) throw std::invalid_argument("TrpoConfig: cg_damping must be >= 0");
    if (!(backtrack_ratio > 0.0 && backtrack_ratio < 1.0))
        throw std::invalid_argument("TrpoConfig: backtrack_ratio must be in (0, 1)");
    if (max_backtracks < 1) throw std::invalid_argument("TrpoConfig: max_backtracks must be >= 1");
    if (steps_per_update == 0) throw std::invalid_argument("TrpoConfig: steps_per_update must be >= 1");
    if (value_epochs < 0) throw std::invalid_argument("TrpoConfig: value_epochs must be >= 0");
    if (!(value_learning_rate > 0.0)) throw std::invalid_argument("TrpoConfig: value_learning_rate must be > 0");
    if (value_batch_size < 1) throw std::invalid_argument("TrpoConfig: value_batch_size must be >= 1");
}

void RolloutBatch::validate() const {
    const Eigen::Index n = rewards.size();
    const std::size_t total = std::accumulate(episode_lengths.begin(), episode_lengths.end(), std::size_t{0});
    if (observations.cols() != n || actions.cols() != n || old_log_probs.size() != n || advantages.size() != n ||
        returns.size() != n || total != static_cast<std::size_t>(n)) {
        throw std::invalid_argument("RolloutBatch: inconsistent array lengths");
    }
}

GaeResult gae_advantages(const VectorXd& rewards, const VectorXd& values,
                         const std::vector<std::size_t>& episode_lengths, double gamma, double lambda) {
    const std::size_t total = std::accumulate(episode_lengths.begin(), episode_lengths.end(), std::size_t{0});
    if (total != static_cast<std::size_t>(rewards.size())) {
        throw std::invalid_argument("gae_advantages: episode lengths do not cover the rewards");
    }
    if (static_cast<std::size_t>(values.size()) != total + episode_lengths.size()) {
        throw std::invalid_argument("gae_advantages: values need one entry per step plus one per episode");
    }
    GaeResult out{VectorXd::Zero(rewards.size()), VectorXd::Zero(rewards.size())};
    Eigen::Index r0 = 0;
    Eigen::Index v0 = 0;
    for (const std::size_t len_u : episode_lengths) {
        const auto len = static_cast<Eigen::Index>(len_u);
        double running = 0.0;
        for (Eigen::Index t = len - 1; t >= 0; --t) {
            const double delta = rewards(r0 + t) + gamma * values(v0 + t + 1) - values(v0 + t);
            running = delta + gamma * lambda * running;
            out.advantages(r0 + t) = running;
            out.returns(r0 + t) = running + values(v0 + t);
        }
        r0 += len;
        v0 += len + 1;
    }
    return out;
}

void normalize_advantages(VectorXd& advantages) {
    const Eigen::Index n = advantages.size();
    if (n == 0) {
        return;
    }
    const double mean = advantages.mean();
    advantages.array() -= mean;
    if (n < 2) {
        return;
    }
    const double var = advantages.squaredNorm() / static_cast<double>(n);
    const double sd = std::sqrt(var);
    if (sd > 1e-12) {
        advantages /= sd;
        // Re-centre to remove the rounding left by the division.
        advantages.array() -= advantages.mean();
    }
}

void finalize_batch(RolloutBatch& batch, const GaussianPolicy& policy, const ValueFunction& value,
                    const TrpoConfig& config) {
    const Eigen::Index n = batch.rewards.size();
    batch.old_log_probs = policy.log_probs(batch.observations, batch.actions);
    const VectorXd v = value.predict(batch.observations);
    VectorXd with_tail(n + static_cast<Eigen::Index>(batch.episode_lengths.size()));
    Eigen::Index r0 = 0;
    Eigen::Index v0 = 0;
    for (const std::size_t len_u : batch.episode_lengths) {
        const auto len = static_cast<Eigen::Index>(len_u);
        with_tail.segment(v0, len) = v.segment(r0, len);
        with_tail(v0 + len) = 0.0;  // episodes end at the demo length
        r0 += len;
        v0 += len + 1;
    }
    auto gae = gae_advantages(batch.rewards, with_tail, batch.episode_lengths, config.gamma, config.gae_lambda);
    batch.returns = std::move(gae.returns);
    batch.advantages = std::move(gae.advantages);
    normalize_advantages(batch.advantages);
    batch.validate();
}

CgResult conjugate_gradient(const std::function<VectorXd(const VectorXd&)>& apply_a, const VectorXd& b, int iters,
                            double tol, const std::function<void(const VectorXd&)>& on_iterate) {
    if (iters < 1) {
        throw std::invalid_argument("conjugate_gradient: iters must be >= 1");
    }
    require_finite(b, "CG right-hand side");
    CgResult out{VectorXd::Zero(b.size()), b.norm(), 0};
    VectorXd r = b;
    VectorXd p = b;
    double rr = r.squaredNorm();
    if (std::sqrt(rr) <= tol) {
        return out;
    }
    for (int k = 0; k < iters; ++k) {
        const VectorXd ap = apply_a(p);
        if (ap.size() != b.size()) {
            throw nn::ShapeError("conjugate_gradient: operator changed the vector length");
        }
        require_finite(ap, "CG operator output");
        const double pap = p.dot(ap);
        if (!std::isfinite(pap) || pap <= 0.0) {
            throw nn::NonFiniteError("conjugate_gradient: operator is not positive definite along the search direction");
        }
        const double alpha = rr / pap;
        out.x += alpha * p;
        r -= alpha * ap;
        const double rr_new = r.squaredNorm();
        require_finite(out.x, "CG iterate");
        out.iterations = k + 1;
        out.residual_norm = std::sqrt(rr_new);
        if (on_iterate) {
            on_iterate(out.x);
        }
        if (out.residual_norm <= tol) {
            break;
        }
        p = r + (rr_new / rr) * p;
        rr = rr_new;
    }
    return out;
}

// The KL Hessian at new = old is the Gauss-Newton product J^T diag(1/sigma^2) J
// for the mean-net parameters (averaged over observations) and 2 I for log_std;
// the mixed block vanishes there.
VectorXd fisher_vector_product(const GaussianPolicy& policy, const MatrixXd& observations, const VectorXd& v,
                               double damping) {
    if (v.size() != policy.parameter_count()) {
        throw nn::ShapeError("fisher_vector_product: vector does not match policy parameters");
    }
    const Eigen::Index n_net = policy.mean_net.parameter_count();
    const Eigen::Index n = observations.cols();
    VectorXd out = VectorXd::Zero(v.size());
    if (n > 0) {
        nn::ForwardCache cache;
        policy.means(observations, &cache);
        const auto dir = nn::GradientSet::from_flat(policy.mean_net, v.head(n_net));
        MatrixXd jv = nn::jvp(policy.mean_net, cache, dir);
        const VectorXd inv_var = (-2.0 * policy.log_std.array()).exp();
        jv = inv_var.asDiagonal() * jv;
        jv /= static_cast<double>(n);
        out.head(n_net) = nn::backward(policy.mean_net, cache, jv).flat();
        out.tail(policy.log_std.size()) = 2.0 * v.tail(policy.log_std.size());
    }
    out += damping * v;
    return out;
}

double mean_kl(const GaussianPolicy& old_policy, const GaussianPolicy& new_policy, const MatrixXd& observations) {
    if (!old_policy.mean_net.same_shape(new_policy.mean_net) || old_policy.log_std.size() != new_policy.log_std.size()) {
        throw nn::ShapeError("mean_kl: policies differ in architecture");
    }
    const Eigen::Index n = observations.cols();
    if (n == 0) {
        return 0.0;
    }
    const MatrixXd mu_old = old_policy.means(observations);
    const MatrixXd mu_new = new_policy.means(observations);
    const VectorXd var_old = (2.0 * old_policy.log_std.array()).exp();
    const VectorXd inv2var_new = 0.5 * (-2.0 * new_policy.log_std.array()).exp();
    double constant = 0.0;
    for (Eigen::Index j = 0; j < var_old.size(); ++j) {
        constant += new_policy.log_std(j) - old_policy.log_std(j) + var_old(j) * inv2var_new(j) - 0.5;
    }
    const MatrixXd diff = mu_new - mu_old;
    const double quad = (inv2var_new.asDiagonal() * diff.cwiseAbs2()).sum() / static_cast<double>(n);
    return constant + quad;
}

double surrogate(const GaussianPolicy& policy, const RolloutBatch& batch) {
    if (batch.size() == 0) {
        return 0.0;
    }
    const VectorXd lp = policy.log_probs(batch.observations, batch.actions);
    const VectorXd ratio = (lp - batch.old_log_probs).array().exp();
    return ratio.dot(batch.advantages) / static_cast<double>(batch.size());
}

VectorXd surrogate_gradient(const GaussianPolicy& policy, const RolloutBatch& batch) {
    VectorXd g = VectorXd::Zero(policy.parameter_count());
    const Eigen::Index n = batch.size();
    if (n == 0) {
        return g;
    }
    nn::ForwardCache cache;
    const MatrixXd mu = policy.means(batch.observations, &cache);
    const VectorXd inv_var = (-2.0 * policy.log_std.array()).exp();
    const MatrixXd diff = batch.actions - mu;
    const VectorXd w = batch.advantages / static_cast<double>(n);
    const MatrixXd dmu = inv_var.asDiagonal() * diff * w.asDiagonal();
    const Eigen::Index n_net = policy.mean_net.parameter_count();
    g.head(n_net) = nn::backward(policy.mean_net, cache, dmu).flat();
    const MatrixXd z2 = inv_var.asDiagonal() * diff.cwiseAbs2();
    g.tail(policy.log_std.size()) = (z2.array() - 1.0).matrix() * w;
    return g;
}

namespace {

double fit_value(ValueFunction& value, const RolloutBatch& batch, const TrpoConfig& config, std::uint64_t seed) {
    const Eigen::Index n = batch.size();
    if (n == 0 || config.value_epochs == 0) {
        return 0.0;
    }
    const MatrixXd x = value.input_scale.asDiagonal() * batch.observations;
    const VectorXd y = batch.returns / value.return_scale;
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    Rng rng(derive_seed(seed, 0x7a1e));
    const nn::SgdConfig sgd{config.value_learning_rate, config.value_batch_size};
    for (int epoch = 0; epoch < config.value_epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (Eigen::Index start = 0; start < n; start += config.value_batch_size) {
            const Eigen::Index len = std::min<Eigen::Index>(config.value_batch_size, n - start);
            MatrixXd xb(x.rows(), len);
            Eigen::RowVectorXd yb(len);
            for (Eigen::Index i = 0; i < len; ++i) {
                xb.col(i) = x.col(order[static_cast<std::size_t>(start + i)]);
                yb(i) = y(order[static_cast<std::size_t>(start + i)]);
            }
            nn::ForwardCache cache;
            const MatrixXd pred = nn::forward(value.net, xb, &cache);
            const MatrixXd grad = (pred - yb) / static_cast<double>(len);
            nn::sgd_step(value.net, nn::backward(value.net, cache, grad), sgd);
        }
    }
    const VectorXd fitted = nn::forward(value.net, x).row(0).transpose();
    return (fitted - y).squaredNorm() / static_cast<double>(n);
}

}  // namespace

UpdateStats trpo_update(GaussianPolicy& policy, ValueFunction& value, const RolloutBatch& batch,
                        const TrpoConfig& config, std::uint64_t seed) {
    config.validate();
    batch.validate();
    if (!batch.advantages.allFinite() || !batch.rewards.allFinite() || !batch.returns.allFinite() ||
        !batch.old_log_probs.allFinite()) {
        throw nn::NonFiniteError("trpo_update: non-finite batch");
    }
    UpdateStats stats;
    stats.mean_reward = batch.size() > 0 ? batch.rewards.mean() : 0.0;

    const VectorXd g = surrogate_gradient(policy, batch);
    require_finite(g, "surrogate gradient");
    if (g.squaredNorm() > 0.0) {
        const auto fvp = [&](const VectorXd& v) {
            return fisher_vector_product(policy, batch.observations, v, config.cg_damping);
        };
        const CgResult cg = conjugate_gradient(fvp, g, config.cg_iters);
        const double shs = cg.x.dot(fvp(cg.x));
        if (std::isfinite(shs) && shs > 0.0) {
            const VectorXd full_step = std::sqrt(2.0 * config.kl_delta / shs) * cg.x;
            const GaussianPolicy old = policy;
            const VectorXd theta = old.flat_parameters();
            const double surr_old = surrogate(old, batch);
            GaussianPolicy candidate = old;
            double frac = 1.0;
            for (int k = 0; k < config.max_backtracks; ++k, frac *= config.backtrack_ratio) {
                candidate.set_flat_parameters(theta + frac * full_step);
                const double kl = mean_kl(old, candidate, batch.observations);
                const double improvement = surrogate(candidate, batch) - surr_old;
                if (std::isfinite(kl) && std::isfinite(improvement) && kl <= config.kl_delta && improvement > 0.0) {
                    policy = candidate;
                    stats.accepted = true;
                    stats.kl = kl;
                    stats.surrogate_improvement = improvement;
                    stats.backtracks = k;
                    break;
                }
                stats.backtracks = k + 1;
            }
        }
    }
    stats.value_loss = fit_value(value, batch, config, seed);
    return stats;
}

CollectedBatch collect_batch(const GaussianPolicy& policy, const ValueFunction& value, const env::EnvParams& params,
                             const env::RewardFn& reward_fn, std::size_t episode_length, const TrpoConfig& config,
                             std::uint64_t seed) {
    if (episode_length == 0) {
        throw std::invalid_argument("collect_batch: episode_length must be >= 1");
    }
    const std::size_t n_episodes = (config.steps_per_update + episode_length - 1) / episode_length;
    const auto total = static_cast<Eigen::Index>(n_episodes * episode_length);
    CollectedBatch out;
    auto& b = out.batch;
    b.observations.resize(policy.state_dim(), total);
    b.actions.resize(policy.action_dim(), total);
    b.rewards.resize(total);
    const env::Policy act = policy.as_env_policy(false);
    Eigen::Index col = 0;
    for (std::size_t e = 0; e < n_episodes; ++e) {
        auto res = env::rollout(act, params, reward_fn, episode_length, derive_seed(seed, 0xe915, e));
        double ret = 0.0;
        for (std::size_t t = 0; t < episode_length; ++t, ++col) {
            const auto s = res.trajectory.steps[t].state.to_array();
            for (std::size_t i = 0; i < env::kStateDim; ++i) {
                b.observations(static_cast<Eigen::Index>(i), col) = s[i];
            }
            b.actions(0, col) = res.raw_actions[t].torque;
            b.actions(1, col) = res.raw_actions[t].thrust;
            b.rewards(col) = res.rewards[t];
            ret += res.rewards[t];
        }
        b.episode_lengths.push_back(episode_length);
        out.episode_returns.push_back(ret);
        out.trajectories.push_back(std::move(res.trajectory));
    }
    finalize_batch(b, policy, value, config);
    return out;
}

void save_policy(const GaussianPolicy& policy, const ValueFunction& value, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nn::write_vnn(policy.mean_net, dir / "policy.vnn");
    nn::write_vnn(value.net, dir / "value.vnn");
    const auto vec = [](const VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
    nlohmann::json j;
    j["log_std"] = vec(policy.log_std);
    j["input_scale"] = vec(policy.input_scale);
    j["value_input_scale"] = vec(value.input_scale);
    j["return_scale"] = value.return_scale;
    io::write_file_atomic(dir / "policy.json", j.dump(2) + "\n");
}

std::pair<GaussianPolicy, ValueFunction> load_policy(const std::filesystem::path& dir) {
    for (const char* name : {"policy.vnn", "value.vnn", "policy.json"}) {
        if (!std::filesystem::exists(dir / name)) {
            throw FormatError("policy checkpoint " + dir.string() + ": missing " + name);
        }
    }
    GaussianPolicy p;
    ValueFunction v;
    p.mean_net = nn::read_vnn(dir / "policy.vnn");
    v.net = nn::read_vnn(dir / "value.vnn");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(io::read_file(dir / "policy.json"));
        const auto vec = [](const nlohmann::json& a) {
            const auto xs = a.get<std::vector<double>>();
            return VectorXd(Eigen::Map<const VectorXd>(xs.data(), static_cast<Eigen::Index>(xs.size())));
        };
        p.log_std = vec(j.at("log_std"));
        p.input_scale = vec(j.at("input_scale"));
        v.input_scale = vec(j.at("value_input_scale"));
        v.return_scale = j.at("return_scale").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("policy.json: " + std::string(e.what()));
    }
    if (p.log_std.size() != p.mean_net.output_dim() || p.input_scale.size() != p.mean_net.input_dim() ||
        v.input_scale.size() != v.net.input_dim() || v.net.output_dim() != 1) {
        throw FormatError("policy.json: dimensions do not match the networks");
    }
    if (!p.log_std.allFinite()) {
        throw FormatError("policy.json: non-finite log_std");
    }
    return {std::move(p), std::move(v)};
}

}  // namespace mimic::trpo
