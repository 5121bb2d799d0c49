#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "mimic/env.hpp"

namespace mimic::render {

inline constexpr int kFrameSize = 64;
inline constexpr std::size_t kFeatureDim = 32 * 32;
inline constexpr std::uint32_t kDefaultFps = 30;

struct Frame {
    int width = kFrameSize;
    int height = kFrameSize;
    std::vector<std::uint8_t> pixels;  // row-major, row 0 at the top

    static Frame blank(int width = kFrameSize, int height = kFrameSize) {
        return {width, height, std::vector<std::uint8_t>(static_cast<std::size_t>(width) * height, 0)};
    }
    std::uint8_t at(int row, int col) const { return pixels[static_cast<std::size_t>(row) * width + col]; }
    bool operator==(const Frame&) const = default;
};

/// Viewport: world metres to pixels, horizontally centred on the body.
struct Camera {
    double pixels_per_meter = 32.0;
    double ground_row = 54.0;  // image row of the ground line y = 0
    double tick_spacing = 0.5;  // ground marks so horizontal motion is visible
    double body_radius = 0.25;
    double leg_half_thickness = 0.04;
};

inline constexpr std::uint8_t kGroundIntensity = 96;
inline constexpr std::uint8_t kTickIntensity = 160;
inline constexpr std::uint8_t kLegIntensity = 128;
inline constexpr std::uint8_t kBodyIntensity = 255;

Frame rasterize(const env::EnvState& state, const Camera& camera = {});

struct DemoVideo {
    std::uint32_t fps = kDefaultFps;
    std::vector<Frame> frames;
    // Either both empty (frames-only video) or both aligned with `frames`.
    std::vector<env::EnvState> states;
    std::vector<env::EnvAction> actions;

    bool has_states() const { return !states.empty(); }
    std::size_t size() const { return frames.size(); }
    /// Throws std::invalid_argument if the alignment invariants do not hold.
    void validate() const;
    bool operator==(const DemoVideo&) const = default;
};

/// Renders every step and stores states/actions at the file's f32 precision.
DemoVideo demo_from_trajectory(const env::Trajectory& traj, const Camera& camera = {},
                               std::uint32_t fps = kDefaultFps);

/// Rounds a state to what survives a `.vdm` round trip.
env::EnvState quantize(const env::EnvState& s);
env::EnvAction quantize(const env::EnvAction& a);

void write_demo(const DemoVideo& video, const std::filesystem::path& path);
/// Throws mimic::FormatError naming the offending section.
DemoVideo read_demo(const std::filesystem::path& path);

std::string encode_demo(const DemoVideo& video);
DemoVideo decode_demo(std::string_view bytes);

/// 2x2 mean-pool to 32x32, flattened row-major and scaled to [0, 1].
std::vector<double> frame_features(const Frame& frame);

}  // namespace mimic::render
