#include <doctest.h>

#include <sstream>

#include "mimic/cli.hpp"
#include "mimic/render.hpp"
#include "support.hpp"

using namespace mimic;

namespace {

struct Result {
    int code = 0;
    std::string out;
    std::string err;
};

Result run_cli(std::vector<std::string> args) {
    args.insert(args.begin(), "mimic");
    std::ostringstream out;
    std::ostringstream err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

std::string write_stationary(const std::filesystem::path& path, std::size_t n) {
    env::Trajectory t;
    for (std::size_t i = 0; i < n; ++i) {
        t.steps.push_back({env::nominal_state(), {}});
    }
    render::write_demo(render::demo_from_trajectory(t), path);
    return path.string();
}

double value_after_comma(const std::string& line) {
    return std::stod(line.substr(line.find(',') + 1));
}

}  // namespace

TEST_CASE("argument errors are one line and exit 2") {
    const auto dir = testing::temp_dir("cli_args");
    const auto r = run_cli({"gen-demo", "--task", "backflip", "--steps", "0", "--out", (dir / "d.vdm").string()});
    CHECK(r.code == 2);
    CHECK(r.err.rfind("error: ", 0) == 0);
    CHECK(std::count(r.err.begin(), r.err.end(), '\n') == 1);
    CHECK(run_cli({"no-such-command"}).code == 2);
    CHECK(run_cli({"eval", "--metric", "mse"}).code != 0);
}

TEST_CASE("unknown task") {
    const auto dir = testing::temp_dir("cli_task");
    const auto r = run_cli({"gen-demo", "--task", "swim", "--out", (dir / "d.vdm").string()});
    CHECK(r.code == 1);
    CHECK(r.err.find("swim") != std::string::npos);
}

TEST_CASE("gen-demo is deterministic") {
    const auto dir = testing::temp_dir("cli_gen");
    const std::vector<std::string> common{"gen-demo", "--task", "backflip", "--steps", "60", "--updates", "2", "--seed", "3"};
    auto a = common;
    a.insert(a.end(), {"--out", (dir / "a.vdm").string()});
    auto b = common;
    b.insert(b.end(), {"--out", (dir / "b.vdm").string()});
    REQUIRE(run_cli(a).code == 0);
    REQUIRE(run_cli(b).code == 0);
    CHECK(io::read_file(dir / "a.vdm") == io::read_file(dir / "b.vdm"));
    const auto demo = render::read_demo(dir / "a.vdm");
    CHECK(demo.size() == 60);
    CHECK(demo.has_states());
}

TEST_CASE("eval") {
    const auto dir = testing::temp_dir("cli_eval");
    const auto still = write_stationary(dir / "still.vdm", 10);
    SUBCASE("a trajectory against itself has zero error") {
        const auto r = run_cli({"eval", "--traj", still, "--demo", still, "--metric", "mse"});
        REQUIRE(r.code == 0);
        std::istringstream lines(r.out);
        std::string line;
        std::getline(lines, line);
        CHECK(line == "t,mse");
        int rows = 0;
        while (std::getline(lines, line)) {
            CHECK(value_after_comma(line) == 0.0);
            ++rows;
        }
        CHECK(rows == 10);
    }
    SUBCASE("standing still earns only the alive bonus") {
        const auto r = run_cli({"eval", "--traj", still, "--metric", "backflip-reward"});
        REQUIRE(r.code == 0);
        CHECK(r.out.rfind("backflip-reward,", 0) == 0);
        env::Trajectory t;
        t.steps.assign(10, {env::nominal_state(), {}});
        double alive = 0.0;
        for (const auto& s : t.steps) {
            alive += env::backflip_reward(s.state, s.action);
        }
        CHECK(value_after_comma(r.out) == doctest::Approx(alive));
        CHECK(alive == doctest::Approx(10.0));
    }
    SUBCASE("exactly one source") {
        CHECK(run_cli({"eval", "--traj", still, "--random", "--metric", "hop-reward"}).code != 0);
        CHECK(run_cli({"eval", "--metric", "hop-reward"}).code != 0);
    }
    SUBCASE("the random policy is scored against the demo") {
        const auto r = run_cli({"eval", "--random", "--demo", still, "--metric", "oracle-rating"});
        REQUIRE(r.code == 0);
        const double rating = value_after_comma(r.out);
        CHECK(rating >= 1.0);
        CHECK(rating <= 5.0);
    }
}

TEST_CASE("export-video writes one PNG per frame") {
    const auto dir = testing::temp_dir("cli_video");
    const auto still = write_stationary(dir / "still.vdm", 7);
    REQUIRE(run_cli({"export-video", "--traj", still, "--out", (dir / "frames").string()}).code == 0);
    std::size_t n = 0;
    for (const auto& e : std::filesystem::directory_iterator(dir / "frames")) {
        CHECK(e.path().extension() == ".png");
        ++n;
    }
    CHECK(n == 7);
    CHECK(std::filesystem::exists(dir / "frames" / "frame_00000.png"));
}

TEST_CASE("train") {
    const auto dir = testing::temp_dir("cli_train");
    env::Trajectory t;
    env::EnvState s = env::nominal_state();
    for (int i = 0; i < 30; ++i) {
        t.steps.push_back({s, {-1.0, -1.0}});
        s = env::step(s, {-1.0, -1.0}, {});
    }
    render::write_demo(render::demo_from_trajectory(t), dir / "demo.vdm");
    const auto args = [&](const std::string& run) {
        return std::vector<std::string>{"train", "--demo", (dir / "demo.vdm").string(), "--run-dir", (dir / run).string(),
                                        "--pretrain", "8", "--online", "4", "--pairs-per-update", "2", "--updates", "2",
                                        "--pretrain-epochs", "2", "--refresh-epochs", "1", "--seed", "4"};
    };
    SUBCASE("two sync runs write identical metrics") {
        REQUIRE(run_cli(args("a")).code == 0);
        REQUIRE(run_cli(args("b")).code == 0);
        const auto metrics = io::read_file(dir / "a" / "metrics.csv");
        CHECK(metrics == io::read_file(dir / "b" / "metrics.csv"));
        CHECK(std::count(metrics.begin(), metrics.end(), '\n') == 3);
        const auto again = run_cli(args("a"));
        CHECK(again.code == 1);
        CHECK(again.err.find("resume") != std::string::npos);
    }
    SUBCASE("the oracle refuses a frames-only demo") {
        auto d = render::read_demo(dir / "demo.vdm");
        d.states.clear();
        d.actions.clear();
        render::write_demo(d, dir / "demo.vdm");
        const auto r = run_cli(args("c"));
        CHECK(r.code == 1);
        CHECK(r.err.find("oracle unavailable") != std::string::npos);
    }
}
