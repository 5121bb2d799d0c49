#include "mimic/env.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace mimic::env {
namespace {

struct ContactForce {
    double fx = 0.0;
    double fy = 0.0;
    double torque = 0.0;
    double depth = 0.0;
    bool touching = false;
};

// Penalty spring-damper with a viscous tangential term bounded by Coulomb friction.
// `rx, ry` is the point offset from the torso centre, `pvx, pvy` its velocity.
ContactForce point_contact(const EnvState& s, double rx, double ry, double pvx, double pvy,
                           const EnvParams& p) {
    ContactForce c;
    const double py = s.y + ry;
    if (py >= 0.0) {
        return c;
    }
    c.touching = true;
    c.depth = -py;
    const double normal = std::max(0.0, p.ground_stiffness * (-py) - p.ground_damping * pvy);
    const double limit = p.ground_friction * normal;
    const double tangent = std::clamp(-p.ground_tangent_damping * pvx, -limit, limit);
    c.fx = tangent;
    c.fy = normal;
    c.torque = rx * normal - ry * tangent;
    return c;
}

double alive(const EnvState& s, const EnvParams& p) { return (s.y >= 0.0 && s.y <= p.y_alive_max) ? 1.0 : 0.0; }

}  // namespace

bool EnvState::finite() const {
    for (double v : to_array()) {
        if (!std::isfinite(v)) {
            return false;
        }
    }
    return true;
}

EnvAction EnvAction::clamped() const {
    // NaN commands collapse to zero rather than poisoning the state.
    auto c = [](double v) { return std::isnan(v) ? 0.0 : std::clamp(v, -1.0, 1.0); };
    return {c(torque), c(thrust)};
}

void EnvParams::validate() const {
    const double positive[] = {dt,           g,           mass,          inertia,
                               leg_min,      leg_max,     torque_max,    thrust_max,
                               ground_stiffness, ground_damping, ground_friction, ground_tangent_damping,
                               leg_stiffness, leg_damping, body_radius, y_alive_max};
    for (double v : positive) {
        if (!(v > 0.0) || !std::isfinite(v)) {
            throw std::domain_error("EnvParams: all physical parameters must be positive and finite");
        }
    }
    if (!(angular_damping >= 0.0) || !std::isfinite(angular_damping)) {
        throw std::domain_error("EnvParams: angular_damping must be non-negative and finite");
    }
    if (!(leg_min < leg_max)) {
        throw std::domain_error("EnvParams: leg_min must be below leg_max");
    }
}

EnvState step(const EnvState& s, const EnvAction& action, const EnvParams& p) {
    if (!s.finite()) {
        throw std::domain_error("env::step: non-finite state");
    }
    const EnvAction a = action.clamped();

    // theta is measured clockwise so that a backward rotation (head moving
    // toward -x, away from the forward direction) decreases it. The mechanics
    // below use the counter-clockwise angle phi = -theta and rate w = -omega.
    const double phi = -s.theta;
    const double w = -s.omega;
    const double sn = std::sin(phi);
    const double cs = std::cos(phi);

    // Unit vector from the body centre down the leg.
    const double dx = sn;
    const double dy = -cs;

    // Foot: leg length along the axis; its velocity includes the extension rate.
    const double frx = s.leg * dx;
    const double fry = s.leg * dy;
    const ContactForce foot =
        point_contact(s, frx, fry, s.vx - w * fry + s.leg_vel * dx, s.vy + w * frx + s.leg_vel * dy, p);
    // Hull: lowest point of the round body.
    const double r = p.body_radius;
    const ContactForce hull = point_contact(s, 0.0, -r, s.vx + w * r, s.vy, p);

    // One contact at the deepest point, so a retracted leg rolls as smoothly as the hull.
    const bool foot_contact = foot.touching && foot.depth >= hull.depth;
    const ContactForce& c = foot_contact ? foot : hull;

    double fx = c.fx;
    double fy = c.fy;
    double torque = c.torque - a.torque * p.torque_max - p.angular_damping * w;

    if (foot_contact) {
        // Leg thrust pushes the body up its own axis; the ground cannot pull.
        const double push = std::max(0.0, a.thrust) * p.thrust_max;
        fx += -dx * push;
        fy += -dy * push;
    }

    // Non-positive thrust keeps the leg retracted; positive thrust extends it.
    const double leg_target = p.leg_min + (p.leg_max - p.leg_min) * std::max(0.0, a.thrust);
    const double leg_acc = p.leg_stiffness * (leg_target - s.leg) - p.leg_damping * s.leg_vel;

    EnvState n;
    n.vx = s.vx + (fx / p.mass) * p.dt;
    n.vy = s.vy + (fy / p.mass - p.g) * p.dt;
    const double w_next = w + (torque / p.inertia) * p.dt;
    n.omega = -w_next;
    n.leg_vel = s.leg_vel + leg_acc * p.dt;

    n.x = s.x + n.vx * p.dt;
    n.y = s.y + n.vy * p.dt;
    n.theta = s.theta + n.omega * p.dt;
    n.leg = s.leg + n.leg_vel * p.dt;
    if (n.leg < p.leg_min) {
        n.leg = p.leg_min;
        n.leg_vel = std::max(0.0, n.leg_vel);
    } else if (n.leg > p.leg_max) {
        n.leg = p.leg_max;
        n.leg_vel = std::min(0.0, n.leg_vel);
    }
    return n;
}

EnvState nominal_state(const EnvParams& p) {
    EnvState s;
    s.leg = p.leg_min;
    // Foot resting at the static penetration that balances gravity.
    s.y = s.leg - p.mass * p.g / p.ground_stiffness;
    return s;
}

EnvState reset(std::uint64_t seed, const EnvParams& p) {
    Rng rng(derive_seed(seed, 0x5e5e7));
    std::uniform_real_distribution<double> jitter(-0.005, 0.005);
    auto v = nominal_state(p).to_array();
    for (double& f : v) {
        f += jitter(rng);
    }
    EnvState s = EnvState::from_array(v);
    s.leg = std::clamp(s.leg, p.leg_min, p.leg_max);
    return s;
}

double backflip_reward(const EnvState& s, const EnvAction& action, const EnvParams& p) {
    const EnvAction a = action.clamped();
    return std::clamp(-s.omega, -10.0, 10.0) + alive(s, p) - 0.05 * (a.torque * a.torque + a.thrust * a.thrust);
}

double hop_reward(const EnvState& s, const EnvAction& action, const EnvParams& p) {
    const EnvAction a = action.clamped();
    return s.vx + alive(s, p) - 0.05 * (a.torque * a.torque + a.thrust * a.thrust);
}

int count_backflips(const Trajectory& traj) {
    if (traj.steps.empty()) {
        throw std::domain_error("count_backflips: empty trajectory");
    }
    const double turned = traj.steps.front().state.theta - traj.steps.back().state.theta;
    return static_cast<int>(std::floor(std::max(0.0, turned) / (2.0 * std::numbers::pi)));
}

RolloutResult rollout(const Policy& policy, const EnvParams& params, const RewardFn& reward_fn,
                      std::size_t n_steps, std::uint64_t seed) {
    if (n_steps == 0) {
        throw std::domain_error("rollout: n_steps must be >= 1");
    }
    RolloutResult out;
    out.trajectory.seed = seed;
    out.trajectory.steps.reserve(n_steps);
    out.rewards.reserve(n_steps);
    out.raw_actions.reserve(n_steps);

    Rng rng(derive_seed(seed, 0xac7));
    EnvState s = reset(seed, params);
    for (std::size_t t = 0; t < n_steps; ++t) {
        const EnvAction raw = policy(s, rng);
        const EnvAction a = raw.clamped();
        out.rewards.push_back(reward_fn(t, s, a));
        out.raw_actions.push_back(raw);
        out.trajectory.steps.push_back({s, a});
        if (t + 1 < n_steps) {
            s = step(s, a, params);
        }
    }
    return out;
}

std::vector<double> state_mse_curve(std::span<const EnvState> a, std::span<const EnvState> b) {
    if (a.size() != b.size()) {
        throw std::invalid_argument("state_mse_curve: length mismatch");
    }
    std::vector<double> out(a.size());
    for (std::size_t t = 0; t < a.size(); ++t) {
        const auto u = a[t].to_array();
        const auto v = b[t].to_array();
        double acc = 0.0;
        for (std::size_t k = 0; k < kStateDim; ++k) {
            acc += (u[k] - v[k]) * (u[k] - v[k]);
        }
        out[t] = acc / static_cast<double>(kStateDim);
    }
    return out;
}

RewardFn backflip_reward_fn(const EnvParams& params) {
    return [params](std::size_t, const EnvState& s, const EnvAction& a) { return backflip_reward(s, a, params); };
}

RewardFn hop_reward_fn(const EnvParams& params) {
    return [params](std::size_t, const EnvState& s, const EnvAction& a) { return hop_reward(s, a, params); };
}

}  // namespace mimic::env
