#pragma once

// Helpers shared by the unit tests and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mimic/util.hpp"

namespace mimic::testing {

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("mimic_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

/// All coordinates when n <= k, else k distinct seeded picks.
inline std::vector<Eigen::Index> sample_coords(Eigen::Index n, std::size_t k, std::uint64_t seed) {
    std::vector<Eigen::Index> all(static_cast<std::size_t>(n));
    std::iota(all.begin(), all.end(), Eigen::Index{0});
    if (all.size() <= k) {
        return all;
    }
    Rng rng(seed);
    std::shuffle(all.begin(), all.end(), rng);
    all.resize(k);
    return all;
}

// Central-difference gradient check. The relative error of one coordinate is
// |analytic - numeric| / max(|analytic|, |numeric|, floor); the floor keeps
// coordinates whose true derivative is ~0 from dividing round-off by zero.
struct GradCheck {
    double max_rel_error = 0.0;
    Eigen::Index worst = -1;
    std::size_t checked = 0;
};

inline GradCheck check_gradient(const std::function<double(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& x,
                                const Eigen::VectorXd& analytic, const std::vector<Eigen::Index>& coords,
                                double eps = 1e-5, double floor = 1e-6) {
    GradCheck out;
    Eigen::VectorXd probe = x;
    for (const Eigen::Index i : coords) {
        probe[i] = x[i] + eps;
        const double up = f(probe);
        probe[i] = x[i] - eps;
        const double down = f(probe);
        probe[i] = x[i];
        const double numeric = (up - down) / (2.0 * eps);
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
        const double rel = std::abs(analytic[i] - numeric) / denom;
        if (rel > out.max_rel_error) {
            out.max_rel_error = rel;
            out.worst = i;
        }
        ++out.checked;
    }
    return out;
}

}  // namespace mimic::testing
