#include <doctest.h>

#include <fstream>

#include "mimic/orchestrator.hpp"
#include "support.hpp"

using namespace mimic;
using orchestrator::RunConfig;

namespace {

std::filesystem::path write_rolling_demo(const std::filesystem::path& dir, std::size_t n = 40) {
    env::Trajectory t;
    env::EnvState s = env::nominal_state();
    for (std::size_t i = 0; i < n; ++i) {
        t.steps.push_back({s, {-1.0, -1.0}});
        s = env::step(s, {-1.0, -1.0}, {});
    }
    const auto path = dir / "demo.vdm";
    render::write_demo(render::demo_from_trajectory(t), path);
    return path;
}

// A run small enough for a unit test: a handful of clips and RL updates.
RunConfig tiny_config(const std::filesystem::path& demo, const std::filesystem::path& run_dir) {
    RunConfig c;
    c.demo_path = demo;
    c.run_dir = run_dir;
    c.pretrain_annotations = 12;
    c.online_annotations = 6;
    c.pairs_per_update = 3;
    c.n_updates = 4;
    c.pretrain_epochs = 3;
    c.refresh_epochs = 1;
    c.trpo.steps_per_update = 80;
    c.trpo.value_epochs = 1;
    c.checkpoint_every = 2;
    c.seed = 5;
    return c;
}

// Record timestamps are wall-clock metadata; everything else must match.
orchestrator::RunState untimed(orchestrator::RunState s) {
    for (auto& r : s.records) {
        r.timestamp = 0.0;
    }
    return s;
}

}  // namespace

TEST_CASE("run config text round trip") {
    RunConfig c;
    c.demo_path = "a/demo.vdm";
    c.run_dir = "runs/x";
    c.rater = orchestrator::RaterKind::Human;
    c.mode = orchestrator::Mode::Async;
    c.variant = simpred::TrainVariant::ClassWeights;
    c.init_predictor = "old/predictor";
    c.trpo.kl_delta = 0.02;
    c.oracle.sigma = 0.7;
    const auto text = orchestrator::to_text(c);
    const auto back = orchestrator::config_from_text(text);
    CHECK(orchestrator::to_text(back) == text);
    CHECK(back.init_predictor == c.init_predictor);
    CHECK_THROWS_AS(orchestrator::config_from_text("{"), FormatError);
    RunConfig bad = c;
    bad.validation_fraction = 1.0;
    CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("validation_fraction"), std::invalid_argument);
}

TEST_CASE("metrics csv line") {
    CHECK(orchestrator::to_csv_line({3, 0.5, 0.01, 0.25, 2, 4}) == "3,0.5,0.01,0.25,2,4");
}

TEST_CASE("sync runs are a pure function of the seed") {
    const auto dir = testing::temp_dir("orch_sync");
    const auto demo = write_rolling_demo(dir);
    const auto a = orchestrator::run(tiny_config(demo, dir / "a"));
    const auto b = orchestrator::run(tiny_config(demo, dir / "b"));
    CHECK(untimed(a) == untimed(b));
    CHECK(io::read_file(dir / "a" / "metrics.csv") == io::read_file(dir / "b" / "metrics.csv"));
    SUBCASE("budgets are spent exactly") {
        CHECK(a.records.size() == 18);
        CHECK(a.pretrain_done == 12);
        CHECK(a.online_done == 6);
        CHECK(a.rl_updates == 4);
        CHECK(a.metrics.size() == 4);
        CHECK(a.dataset.size() == 18 * feedback::kDefaultClipLength);
        for (const auto& r : a.records) {
            CHECK(a.rollouts.count(r.pair.agent_rollout_id) == 1);
            CHECK(r.source == feedback::RaterSource::Oracle);
        }
        CHECK(feedback::load_annotations(dir / "a" / "annotations.log") == a.records);
    }
    SUBCASE("a different seed gives a different run") {
        auto c = tiny_config(demo, dir / "c");
        c.seed = 6;
        CHECK_FALSE(untimed(orchestrator::run(c)) == untimed(a));
    }
}

TEST_CASE("zero budgets") {
    const auto dir = testing::temp_dir("orch_zero");
    auto c = tiny_config(write_rolling_demo(dir), dir / "run");
    c.pretrain_annotations = 0;
    c.online_annotations = 0;
    c.n_updates = 0;
    const auto s = orchestrator::run(c);
    CHECK(s.records.empty());
    CHECK(s.rl_updates == 0);
    CHECK(s.metrics.empty());
    CHECK(std::filesystem::exists(dir / "run" / "state.json"));
}

TEST_CASE("checkpoint and resume") {
    const auto dir = testing::temp_dir("orch_resume");
    const auto demo = write_rolling_demo(dir);
    const auto full = orchestrator::run(tiny_config(demo, dir / "full"));
    SUBCASE("resume reproduces the final state and is idempotent") {
        const auto back = orchestrator::resume(dir / "full");
        CHECK(back == full);
        orchestrator::checkpoint(back, dir / "full");
        CHECK(orchestrator::resume(dir / "full") == full);
        CHECK(orchestrator::latest_predictor_dir(dir / "full").filename().string().rfind("predictor_v", 0) == 0);
        CHECK(std::filesystem::exists(orchestrator::latest_policy_dir(dir / "full") / "policy.vnn"));
    }
    SUBCASE("a run extended after resuming matches an uninterrupted one") {
        auto half = tiny_config(demo, dir / "half");
        half.n_updates = 2;
        orchestrator::run(half);
        // Raise the update budget in the stored config and continue.
        auto stored = orchestrator::config_from_text(io::read_file(dir / "half" / "config.json"));
        stored.n_updates = 4;
        io::write_file_atomic(dir / "half" / "config.json", orchestrator::to_text(stored));
        auto resumed = orchestrator::Run::resume_from(dir / "half");
        const auto finished = resumed->execute();
        CHECK(untimed(finished).records == untimed(full).records);
        CHECK(finished.metrics == full.metrics);
        CHECK(finished.policy == full.policy);
        CHECK(finished.predictor == full.predictor);
    }
    SUBCASE("a missing file is named") {
        std::filesystem::remove(dir / "full" / "rollouts.bin");
        CHECK_THROWS_WITH_AS(orchestrator::resume(dir / "full"), doctest::Contains("rollouts.bin"), FormatError);
    }
    SUBCASE("no manifest") {
        CHECK_THROWS_WITH_AS(orchestrator::resume(dir / "nowhere"), doctest::Contains("state.json"), FormatError);
    }
    SUBCASE("an existing run directory is refused") {
        CHECK_THROWS_WITH_AS(std::make_unique<orchestrator::Run>(tiny_config(demo, dir / "full")), doctest::Contains("already"),
                             std::runtime_error);
    }
}

TEST_CASE("async runs spend the same budgets") {
    const auto dir = testing::temp_dir("orch_async");
    auto c = tiny_config(write_rolling_demo(dir), dir / "run");
    c.mode = orchestrator::Mode::Async;
    orchestrator::Run r(c);
    const auto s = r.execute();
    CHECK(s.rl_updates == 4);
    CHECK(s.pretrain_done == 12);
    CHECK(s.online_done == 6);
    CHECK(s.records.size() == 18);
    std::set<std::uint64_t> ids;
    for (const auto& rec : s.records) {
        ids.insert(rec.pair.pair_id);
    }
    CHECK(ids.size() == s.records.size());
    const auto st = r.status();
    CHECK(st.annotations == 18);
    CHECK(st.oracle_annotations == 18);
    CHECK(st.human_annotations == 0);
    CHECK(st.phase == "done");
}

TEST_CASE("the oracle rater needs a demo with states") {
    const auto dir = testing::temp_dir("orch_frames_only");
    auto d = render::read_demo(write_rolling_demo(dir));
    d.states.clear();
    d.actions.clear();
    render::write_demo(d, dir / "frames.vdm");
    CHECK_THROWS_AS(std::make_unique<orchestrator::Run>(tiny_config(dir / "frames.vdm", dir / "run")), feedback::OracleUnavailable);
    auto human = tiny_config(dir / "frames.vdm", dir / "run2");
    human.rater = orchestrator::RaterKind::Human;
    CHECK_NOTHROW(std::make_unique<orchestrator::Run>(human));
}

TEST_CASE("imitation score") {
    const auto dir = testing::temp_dir("orch_score");
    const auto demo = render::read_demo(write_rolling_demo(dir));
    env::Trajectory own;
    for (std::size_t i = 0; i < demo.size(); ++i) {
        own.steps.push_back({demo.states[i], demo.actions[i]});
    }
    const auto s = orchestrator::score_trajectory(demo, own);
    CHECK(s.mean_rating == 5.0);
    CHECK(s.mean_mse == 0.0);
    CHECK(s.backflips == env::count_backflips(own));
    const auto base = orchestrator::random_baseline(demo, {}, {}, 5, 3);
    CHECK(base.mean_rating < s.mean_rating);
    CHECK(base.mean_mse > 0.0);
}

TEST_CASE("clip splits keep clips whole") {
    const auto dir = testing::temp_dir("orch_split");
    const auto demo = render::read_demo(write_rolling_demo(dir));
    const auto c = feedback::pretrain_collect(demo, {}, 20, feedback::oracle_rater(demo), 4);
    const auto parts = orchestrator::split_clips(c.records, c.samples, {10, 6, 4}, 9);
    REQUIRE(parts.size() == 3);
    CHECK(parts[0].size() == 90);
    CHECK(parts[1].size() == 54);
    CHECK(parts[2].size() == 36);
    for (const auto& p : parts) {
        for (std::size_t k = 0; k < p.size(); k += 9) {
            for (std::size_t j = 1; j < 9; ++j) {
                CHECK(p[k + j].rating == p[k].rating);
            }
        }
    }
    CHECK_THROWS(orchestrator::split_clips(c.records, c.samples, {10, 6, 5}, 9));
}

TEST_CASE("task names") {
    CHECK(orchestrator::task_from_string("hop") == orchestrator::Task::Hop);
    CHECK(orchestrator::to_string(orchestrator::Task::Backflip) == "backflip");
    CHECK_THROWS_WITH_AS(orchestrator::task_from_string("swim"), doctest::Contains("swim"), std::invalid_argument);
}
