#include <doctest.h>

#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

#include "mimic/image.hpp"
#include "mimic/render.hpp"
#include "support.hpp"

using namespace mimic;

namespace {

render::DemoVideo small_demo(std::size_t n, bool with_states) {
    render::DemoVideo v;
    for (std::size_t i = 0; i < n; ++i) {
        env::EnvState s = env::nominal_state();
        s.x = 0.1 * static_cast<double>(i);
        s.theta = -0.7 * static_cast<double>(i);
        s.omega = -1.0 / 3.0;
        v.frames.push_back(render::rasterize(s));
        if (with_states) {
            v.states.push_back(render::quantize(s));
            v.actions.push_back(render::quantize(env::EnvAction{0.1, -1.0 / 3.0}));
        }
    }
    return v;
}

}  // namespace

TEST_CASE("rasterize is deterministic") {
    const auto s = env::reset(4);
    CHECK(render::rasterize(s) == render::rasterize(s));
    CHECK(render::rasterize(s).pixels.size() == 64u * 64u);
}

TEST_CASE("a body far above the viewport leaves only ground and background") {
    env::EnvState s = env::nominal_state();
    s.y = 50.0;
    const auto f = render::rasterize(s);
    const std::set<std::uint8_t> allowed{0, render::kGroundIntensity, render::kTickIntensity};
    for (const auto px : f.pixels) {
        CHECK(allowed.count(px) == 1);
    }
}

TEST_CASE("orientation is visible") {
    env::EnvState up = env::nominal_state();
    up.y = 1.5;
    env::EnvState down = up;
    down.theta = std::numbers::pi;
    CHECK_FALSE(render::rasterize(up) == render::rasterize(down));
}

TEST_CASE("demo files round-trip bit-exactly") {
    const auto dir = testing::temp_dir("render_roundtrip");
    SUBCASE("with states") {
        const auto v = small_demo(3, true);
        render::write_demo(v, dir / "a.vdm");
        const auto back = render::read_demo(dir / "a.vdm");
        CHECK(back == v);
        CHECK(back.has_states());
        CHECK(render::encode_demo(back) == io::read_file(dir / "a.vdm"));
    }
    SUBCASE("frames only") {
        const auto v = small_demo(4, false);
        render::write_demo(v, dir / "b.vdm");
        const auto back = render::read_demo(dir / "b.vdm");
        CHECK_FALSE(back.has_states());
        CHECK(back.actions.empty());
        CHECK(back == v);
    }
}

TEST_CASE("malformed demo files name the offending section") {
    const std::string good = render::encode_demo(small_demo(5, true));
    SUBCASE("missing frame payload") {
        // Header says 5 frames; keep the header and 4 frames of pixels.
        const std::size_t header = 4 + 7 * 4;
        const std::string cut = good.substr(0, header + 4 * 64 * 64);
        try {
            render::decode_demo(cut);
            FAIL("expected a format error");
        } catch (const FormatError& e) {
            CHECK(std::string(e.what()).find("frames") != std::string::npos);
        }
    }
    SUBCASE("bad magic") {
        std::string bad = good;
        bad[0] = 'X';
        CHECK_THROWS_WITH_AS(render::decode_demo(bad), doctest::Contains("magic"), FormatError);
    }
    SUBCASE("truncated states") {
        CHECK_THROWS_AS(render::decode_demo(good.substr(0, good.size() - 3)), FormatError);
    }
}

TEST_CASE("frame features") {
    auto f = render::Frame::blank();
    for (const double v : render::frame_features(f)) {
        CHECK(v == 0.0);
    }
    std::fill(f.pixels.begin(), f.pixels.end(), 255);
    for (const double v : render::frame_features(f)) {
        CHECK(v == 1.0);
    }
    f = render::Frame::blank();
    f.pixels[5 * 64 + 9] = 255;
    const auto feats = render::frame_features(f);
    REQUIRE(feats.size() == render::kFeatureDim);
    int nonzero = 0;
    for (std::size_t i = 0; i < feats.size(); ++i) {
        if (feats[i] != 0.0) {
            ++nonzero;
            CHECK(feats[i] == 0.25);
            CHECK(i == 2 * 32 + 4);
        }
    }
    CHECK(nonzero == 1);
    CHECK_THROWS_AS(render::frame_features(render::Frame::blank(32, 32)), std::domain_error);
}

TEST_CASE("pooling is 1-Lipschitz in max-norm") {
    Rng rng(8);
    std::uniform_int_distribution<int> px(0, 255);
    for (int trial = 0; trial < 20; ++trial) {
        auto a = render::Frame::blank();
        auto b = render::Frame::blank();
        int max_diff = 0;
        for (std::size_t i = 0; i < a.pixels.size(); ++i) {
            a.pixels[i] = static_cast<std::uint8_t>(px(rng));
            b.pixels[i] = static_cast<std::uint8_t>(px(rng));
            max_diff = std::max(max_diff, std::abs(int(a.pixels[i]) - int(b.pixels[i])));
        }
        const auto fa = render::frame_features(a);
        const auto fb = render::frame_features(b);
        double feat_diff = 0.0;
        for (std::size_t i = 0; i < fa.size(); ++i) {
            feat_diff = std::max(feat_diff, std::abs(fa[i] - fb[i]));
        }
        CHECK(feat_diff <= max_diff / 255.0 + 1e-15);
    }
}

TEST_CASE("png and base64") {
    const auto f = render::rasterize(env::reset(2));
    CHECK(image::decode_png(image::encode_png(f)) == f);
    CHECK(image::encode_png(f) == image::encode_png(f));
    CHECK(image::base64_encode("foobar") == "Zm9vYmFy");
    CHECK(image::base64_encode("fo") == "Zm8=");
    CHECK(image::base64_decode("Zm9vYg==") == "foob");
    CHECK_THROWS_AS(image::base64_decode("Zm9v!"), FormatError);
}

TEST_CASE("demo from trajectory stores the file's precision") {
    env::Trajectory t;
    for (int i = 0; i < 4; ++i) {
        env::EnvState s = env::reset(static_cast<std::uint64_t>(i));
        s.vx = 0.1;
        t.steps.push_back({s, {0.3, -0.2}});
    }
    const auto d = render::demo_from_trajectory(t);
    CHECK(d.size() == 4);
    CHECK(d.fps == 30u);
    CHECK(d.states[0] == render::quantize(t.steps[0].state));
    CHECK(render::decode_demo(render::encode_demo(d)) == d);
}
