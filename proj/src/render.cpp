#include "mimic/render.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace mimic::render {
namespace {

constexpr char kMagic[4] = {'V', 'D', 'M', '1'};
constexpr std::uint32_t kHasStates = 1u;

double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
    const double ux = bx - ax;
    const double uy = by - ay;
    const double len2 = ux * ux + uy * uy;
    double t = len2 > 0.0 ? ((px - ax) * ux + (py - ay) * uy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double dx = px - (ax + t * ux);
    const double dy = py - (ay + t * uy);
    return std::sqrt(dx * dx + dy * dy);
}

}  // namespace

Frame rasterize(const env::EnvState& s, const Camera& cam) {
    Frame f = Frame::blank();
    // Same convention as the simulator: theta is clockwise-positive.
    const double foot_x = s.x - s.leg * std::sin(s.theta);
    const double foot_y = s.y - s.leg * std::cos(s.theta);
    const double half_px = 0.5 / cam.pixels_per_meter;

    for (int r = 0; r < f.height; ++r) {
        const double wy = (cam.ground_row - (r + 0.5)) / cam.pixels_per_meter;
        for (int c = 0; c < f.width; ++c) {
            const double wx = s.x + (c + 0.5 - 0.5 * f.width) / cam.pixels_per_meter;
            std::uint8_t v = 0;

            if (std::abs(wy) <= half_px) {
                v = kGroundIntensity;
            } else if (wy < 0.0 && wy > -3.0 * half_px * 2.0) {
                const double phase = std::remainder(wx, cam.tick_spacing);
                if (std::abs(phase) <= half_px) {
                    v = kTickIntensity;
                }
            }

            const double rx = wx - s.x;
            const double ry = wy - s.y;
            if (rx * rx + ry * ry <= cam.body_radius * cam.body_radius) {
                v = kBodyIntensity;
            }
            // The leg is drawn over the body so its spoke shows the orientation even when retracted.
            if (segment_distance(wx, wy, s.x, s.y, foot_x, foot_y) <= cam.leg_half_thickness) {
                v = kLegIntensity;
            }
            f.pixels[static_cast<std::size_t>(r) * f.width + c] = v;
        }
    }
    return f;
}

void DemoVideo::validate() const {
    if (fps == 0) {
        throw std::invalid_argument("DemoVideo: fps must be positive");
    }
    if (has_states() || !actions.empty()) {
        if (states.size() != frames.size() || actions.size() != frames.size()) {
            throw std::invalid_argument("DemoVideo: states/actions must align with frames");
        }
    }
    for (const Frame& fr : frames) {
        if (fr.width <= 0 || fr.height <= 0 ||
            fr.pixels.size() != static_cast<std::size_t>(fr.width) * static_cast<std::size_t>(fr.height)) {
            throw std::invalid_argument("DemoVideo: frame pixel count does not match its dimensions");
        }
        if (fr.width != frames.front().width || fr.height != frames.front().height) {
            throw std::invalid_argument("DemoVideo: frames must share dimensions");
        }
    }
}

namespace {

// GCC 11 at -O3 folds a plain double->float->double cast pair away; the
// volatile store forces the rounding.
double to_f32(double x) {
    volatile float f = static_cast<float>(x);
    return f;
}

}  // namespace

env::EnvState quantize(const env::EnvState& s) {
    auto v = s.to_array();
    for (double& x : v) {
        x = to_f32(x);
    }
    return env::EnvState::from_array(v);
}

env::EnvAction quantize(const env::EnvAction& a) {
    return {to_f32(a.torque), to_f32(a.thrust)};
}

DemoVideo demo_from_trajectory(const env::Trajectory& traj, const Camera& camera, std::uint32_t fps) {
    DemoVideo v;
    v.fps = fps;
    v.frames.reserve(traj.length());
    for (const env::Step& st : traj.steps) {
        v.frames.push_back(rasterize(st.state, camera));
        v.states.push_back(quantize(st.state));
        v.actions.push_back(quantize(st.action));
    }
    return v;
}

std::string encode_demo(const DemoVideo& video) {
    video.validate();
    const std::uint32_t height = video.frames.empty() ? kFrameSize : video.frames.front().height;
    const std::uint32_t width = video.frames.empty() ? kFrameSize : video.frames.front().width;
    const bool with_states = video.has_states();

    std::ostringstream out(std::ios::binary);
    out.write(kMagic, 4);
    io::put<std::uint32_t>(out, static_cast<std::uint32_t>(video.frames.size()));
    io::put<std::uint32_t>(out, height);
    io::put<std::uint32_t>(out, width);
    io::put<std::uint32_t>(out, with_states ? env::kStateDim : 0);
    io::put<std::uint32_t>(out, with_states ? env::kActionDim : 0);
    io::put<std::uint32_t>(out, video.fps);
    io::put<std::uint32_t>(out, with_states ? kHasStates : 0u);
    for (const Frame& f : video.frames) {
        out.write(reinterpret_cast<const char*>(f.pixels.data()), static_cast<std::streamsize>(f.pixels.size()));
    }
    if (with_states) {
        for (const env::EnvState& s : video.states) {
            for (double x : s.to_array()) {
                io::put<float>(out, static_cast<float>(x));
            }
        }
        for (const env::EnvAction& a : video.actions) {
            io::put<float>(out, static_cast<float>(a.torque));
            io::put<float>(out, static_cast<float>(a.thrust));
        }
    }
    return std::move(out).str();
}

DemoVideo decode_demo(std::string_view bytes) {
    std::istringstream in{std::string(bytes), std::ios::binary};
    char magic[4] = {};
    in.read(magic, 4);
    if (in.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0) {
        throw FormatError("header: bad magic (expected VDM1)");
    }
    const auto n_frames = io::get<std::uint32_t>(in, "header");
    const auto height = io::get<std::uint32_t>(in, "header");
    const auto width = io::get<std::uint32_t>(in, "header");
    const auto state_dim = io::get<std::uint32_t>(in, "header");
    const auto action_dim = io::get<std::uint32_t>(in, "header");
    const auto fps = io::get<std::uint32_t>(in, "header");
    const auto flags = io::get<std::uint32_t>(in, "header");

    const bool with_states = (flags & kHasStates) != 0;
    if (fps == 0 || height == 0 || width == 0) {
        throw FormatError("header: fps, height and width must be positive");
    }
    if (with_states && (state_dim != env::kStateDim || action_dim != env::kActionDim)) {
        throw FormatError("header: has_states set but state_dim/action_dim do not match the hopper (8/2)");
    }
    if (!with_states && (state_dim != 0 || action_dim != 0)) {
        throw FormatError("header: frames-only file must have state_dim = action_dim = 0");
    }
    const std::size_t frame_bytes = static_cast<std::size_t>(height) * width;
    if (bytes.size() < 32 + static_cast<std::size_t>(n_frames) * frame_bytes) {
        throw FormatError("frames: truncated pixel payload (header declares " + std::to_string(n_frames) +
                          " frames)");
    }

    DemoVideo v;
    v.fps = fps;
    v.frames.resize(n_frames);
    for (Frame& f : v.frames) {
        f.width = static_cast<int>(width);
        f.height = static_cast<int>(height);
        f.pixels.resize(frame_bytes);
        io::get_bytes(in, reinterpret_cast<char*>(f.pixels.data()), frame_bytes, "frames");
    }
    if (with_states) {
        v.states.resize(n_frames);
        for (env::EnvState& s : v.states) {
            std::array<double, env::kStateDim> a{};
            for (double& x : a) {
                x = io::get<float>(in, "states");
            }
            s = env::EnvState::from_array(a);
        }
        v.actions.resize(n_frames);
        for (env::EnvAction& a : v.actions) {
            a.torque = io::get<float>(in, "actions");
            a.thrust = io::get<float>(in, "actions");
        }
    }
    if (in.peek() != std::char_traits<char>::eof()) {
        throw FormatError("trailer: unexpected bytes after the declared sections");
    }
    return v;
}

void write_demo(const DemoVideo& video, const std::filesystem::path& path) {
    io::write_file_atomic(path, encode_demo(video));
}

DemoVideo read_demo(const std::filesystem::path& path) { return decode_demo(io::read_file(path)); }

std::vector<double> frame_features(const Frame& frame) {
    if (frame.width != kFrameSize || frame.height != kFrameSize ||
        frame.pixels.size() != static_cast<std::size_t>(kFrameSize * kFrameSize)) {
        throw std::domain_error("frame_features: expected a 64x64 frame");
    }
    std::vector<double> out(kFeatureDim);
    for (int r = 0; r < 32; ++r) {
        for (int c = 0; c < 32; ++c) {
            const int sum = frame.at(2 * r, 2 * c) + frame.at(2 * r, 2 * c + 1) + frame.at(2 * r + 1, 2 * c) +
                            frame.at(2 * r + 1, 2 * c + 1);
            out[static_cast<std::size_t>(r) * 32 + c] = static_cast<double>(sum) / (4.0 * 255.0);
        }
    }
    return out;
}

}  // namespace mimic::render
