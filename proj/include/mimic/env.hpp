#pragma once

// Planar one-legged hopper: a round rigid body with a massless prismatic leg,
// penalty contact against the ground line y = 0, and a body torque actuator.

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "mimic/util.hpp"

namespace mimic::env {

inline constexpr std::size_t kStateDim = 8;
inline constexpr std::size_t kActionDim = 2;

struct EnvState {
    double x = 0.0;      // horizontal position (m)
    double y = 0.0;      // body centre height (m)
    double theta = 0.0;  // unwrapped, clockwise-positive: a backward rotation (head toward -x) decreases it
    double vx = 0.0;
    double vy = 0.0;
    double omega = 0.0;
    double leg = 0.0;  // leg extension (m)
    double leg_vel = 0.0;

    std::array<double, kStateDim> to_array() const { return {x, y, theta, vx, vy, omega, leg, leg_vel}; }
    static EnvState from_array(std::span<const double, kStateDim> v) {
        return {v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7]};
    }
    bool finite() const;
    bool operator==(const EnvState&) const = default;
};

struct EnvAction {
    double torque = 0.0;  // [-1, 1], scaled by torque_max; positive turns theta upward (forward)
    double thrust = 0.0;  // [-1, 1], scaled by thrust_max

    EnvAction clamped() const;
    bool operator==(const EnvAction&) const = default;
};

struct EnvParams {
    double dt = 1.0 / 30.0;
    double g = 9.81;
    double mass = 1.0;
    double inertia = 0.25;
    double leg_min = 0.25;  // fully retracted, the foot sits on the hull
    double leg_max = 0.75;
    double torque_max = 1.0;
    double thrust_max = 20.0;
    double ground_stiffness = 400.0;
    double ground_damping = 20.0;
    double ground_friction = 0.8;        // Coulomb bound on the tangential force
    double ground_tangent_damping = 20.0;  // viscous tangential contact term
    double leg_stiffness = 100.0;        // leg servo gain toward the thrust-commanded extension
    double leg_damping = 20.0;
    double body_radius = 0.25;
    double angular_damping = 0.1;        // rotational drag; caps the spin rate at torque_max / angular_damping
    double y_alive_max = 3.0;

    /// Throws std::domain_error when a parameter violates its positivity contract.
    void validate() const;
};

/// One recorded transition: the state and the (clamped) action applied in it.
struct Step {
    EnvState state;
    EnvAction action;
    bool operator==(const Step&) const = default;
};

struct Trajectory {
    std::vector<Step> steps;
    std::uint64_t seed = 0;

    std::size_t length() const { return steps.size(); }
    bool operator==(const Trajectory&) const = default;
};

/// Advances the simulation by one control period (semi-implicit Euler).
/// Throws std::domain_error on a non-finite state.
EnvState step(const EnvState& state, const EnvAction& action, const EnvParams& params);

/// Nominal standing pose plus a seeded uniform perturbation of +-0.005 per field.
EnvState reset(std::uint64_t seed, const EnvParams& params = {});
EnvState nominal_state(const EnvParams& params = {});

double backflip_reward(const EnvState& state, const EnvAction& action, const EnvParams& params = {});
double hop_reward(const EnvState& state, const EnvAction& action, const EnvParams& params = {});

/// Completed backward rotations between the first and last step.
int count_backflips(const Trajectory& traj);

/// Maps a state to the action to apply (before clamping). The RNG is owned by the rollout.
using Policy = std::function<EnvAction(const EnvState&, Rng&)>;
/// Per-step reward; `t` is the step index within the episode.
using RewardFn = std::function<double(std::size_t t, const EnvState&, const EnvAction&)>;

struct RolloutResult {
    Trajectory trajectory;
    std::vector<double> rewards;
    std::vector<EnvAction> raw_actions;  // policy output before clamping
};

RolloutResult rollout(const Policy& policy, const EnvParams& params, const RewardFn& reward_fn,
                      std::size_t n_steps, std::uint64_t seed);

/// Mean over components of the squared state difference, per timestep.
std::vector<double> state_mse_curve(std::span<const EnvState> a, std::span<const EnvState> b);

RewardFn backflip_reward_fn(const EnvParams& params = {});
RewardFn hop_reward_fn(const EnvParams& params = {});

}  // namespace mimic::env
